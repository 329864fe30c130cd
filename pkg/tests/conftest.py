import sys

import numpy as np
import pytest
from hypothesis import settings

from ivlab import mae, vlc
from ivlab.data import SyntheticWorldSpec, Vocab, gen_corpus

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus():
    return gen_corpus(SyntheticWorldSpec(num_classes=4, videos_per_class=2, test_per_class=1, seed=3))


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture(scope="session")
def tiny_mae():
    cfg = mae.MaeConfig(num_frames=4, frame_size=(8, 8), tube=(2, 4, 4), enc_dim=8, enc_depth=2, enc_heads=2,
                        dec_dim=8, dec_depth=1, dec_heads=2, mask_ratio=0.5)
    return cfg, mae.init_params(cfg, np.random.default_rng(0))


@pytest.fixture(scope="session")
def tiny_vlc(vocab):
    cfg = vlc.MultimodalConfig(frame_size=(8, 8), patch=4, max_frames=4, vid_dim=8, vid_depth=2, heads=2,
                               global_blocks=1, text_dim=8, text_depth=1, vocab_size=len(vocab), embed_dim=8,
                               cap_depth=1, cap_dim=8)
    return cfg, vlc.init_params(cfg, np.random.default_rng(0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
