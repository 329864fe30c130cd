import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ivlab import mae
from ivlab import posttrain as PT
from ivlab import tensor as T
from ivlab.data import SyntheticWorldSpec, gen_corpus


@pytest.fixture(scope="module")
def small():
    cfg = mae.MaeConfig(num_frames=4, frame_size=(8, 8), tube=(2, 4, 4), enc_dim=8, enc_depth=2, enc_heads=2,
                        dec_dim=8, dec_depth=1, dec_heads=2)
    params = mae.init_params(cfg, np.random.default_rng(0))
    spec = SyntheticWorldSpec(num_classes=2, videos_per_class=3, frame_size=(8, 8), frames_per_video=8)
    a = gen_corpus(spec)
    b = gen_corpus(replace(spec, num_classes=3, videos_per_class=1, name="other", seed=1))
    return PT.Backbone("mae", cfg, frames=4, rate=1), params, a, b


FAST = PT.FinetuneConfig(steps=6, batch_size=4, base_lr=0.5, repeat=2, scales=(1.0, 0.75), warmup_frac=0.0)


def test_ce_examples():
    assert PT.ce_loss(np.zeros(10), 3).item() == pytest.approx(math.log(10))
    assert PT.ce_loss(np.array([0.0, 800.0, 0.0]), 1).item() == 0.0
    assert PT.ce_loss(np.array([1.0, 2.0, 3.0]), 2).item() == pytest.approx(0.4076, abs=1e-4)


def test_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        PT.ce_loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        PT.ce_loss(np.zeros((2, 3)), [0])


def test_asl_examples():
    plain = PT.AslParams(0.0, 0.0, 0.0)
    assert PT.asl_loss(np.zeros((1, 1)), [[1.0]], plain).item() == pytest.approx(math.log(2))
    want = 0.5 * (math.log(2) + 0.45 ** 4 * -math.log(0.55))
    assert PT.asl_loss(np.zeros(2), [1.0, 0.0]).item() == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(0.3588, abs=1e-4)


def test_asl_margin_clips_easy_negatives():
    # sigmoid(-4) < 0.05, so the negative term is exactly zero
    assert PT.asl_loss(np.array([[-4.0]]), [[0.0]]).item() == 0.0


@given(st.integers(0, 2**16))
def test_asl_matches_bce_when_collapsed(seed):
    r = np.random.default_rng(seed)
    z, y = r.normal(size=(3, 4)), (r.random((3, 4)) < 0.5).astype(float)
    s = 1 / (1 + np.exp(-z))
    bce = -np.mean(y * np.log(s) + (1 - y) * np.log(1 - s))
    assert PT.asl_loss(z, y, PT.AslParams(0.0, 0.0, 0.0)).item() == pytest.approx(bce, rel=1e-10)


def test_asl_gradient():
    r = np.random.default_rng(1)
    y = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    assert T.grad_check(lambda z: PT.asl_loss(z, y, PT.AslParams(1.0, 4.0, 0.05)), [r.normal(size=(2, 3))]) < 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        PT.FinetuneConfig(batch_size=7, repeat=2)
    with pytest.raises(ValueError):
        PT.AslParams(margin=1.0)
    with pytest.raises(ValueError):
        PT.HeadSpec("x", 1)
    assert PT.FinetuneConfig(base_lr=1e-3, batch_size=512).peak_lr == 0.002


def test_sample_batch_repeats_each_clip(small):
    bb, _, data, _ = small
    x, clips = PT.sample_batch(data, bb, FAST, np.random.default_rng(0))
    assert x.shape == (4, 4, 8, 8, 3)
    assert clips[0].id == clips[1].id and clips[2].id == clips[3].id


def test_zero_init_head_starts_uniform(small):
    bb, params, data, _ = small
    P = dict(params)
    spec = PT.HeadSpec(data.name, 2)
    PT.init_head(P, spec, bb.dim, np.random.default_rng(0), zero=True)
    assert not PT.predict_logits(P, bb, spec, data.train).any()


def test_finetune_touches_only_encoder_and_head(small):
    bb, params, data, _ = small
    res = PT.finetune(params, bb, data, FAST)
    changed = {k for k in params if not np.array_equal(params[k], res.params[k])}
    assert changed and all(bb.owns(k) for k in changed)
    assert "head.synth.w" in res.params
    assert len(res.log) == FAST.steps and res.log[0].startswith("step 0 loss ")


def test_cotrain_heads_and_counts(small):
    bb, params, a, b = small
    cfg = replace(FAST, steps=9)
    res = PT.cotrain(params, bb, [a, b], cfg)
    assert res.head_steps == {"synth": 6, "other": 3}
    assert res.head_states["synth"].step == 6 and res.head_states["other"].step == 3
    assert res.backbone_state.step == 9
    assert res.params["head.synth.w"].shape == (8, 2) and res.params["head.other.w"].shape == (8, 3)
    assert [line.rsplit(" ", 1)[1] for line in res.log] == ["synth", "other", "synth"] * 3


def test_cotrain_head_isolation(small):
    bb, params, a, b = small
    # one step goes to the larger dataset; the other head must stay at its zero init
    res = PT.cotrain(params, bb, [a, b], replace(FAST, steps=1))
    assert res.params["head.synth.w"].any()
    assert not res.params["head.other.w"].any()
    with pytest.raises(ValueError):
        PT.cotrain(params, bb, [a, a], FAST)


def test_multi_label_view_and_asl_training(small):
    bb, params, data, _ = small
    ml = PT.multi_label_view(data)
    assert all(len(c.labels) == 2 and c.labels[1] >= 2 for c in ml.train)
    spec = PT.HeadSpec(ml.name, len(ml.label_names), multi_label=True)
    res = PT.finetune(params, bb, ml, FAST, spec)
    assert np.all(np.isfinite(res.losses))


def test_vlc_backbone_owns_video_tower(tiny_vlc):
    cfg, P = tiny_vlc
    bb = PT.Backbone("vlc", cfg, frames=4, rate=1)
    assert bb.owns("vlc.vid.blocks.0.attn.q.w") and not bb.owns("vlc.txt.tok")
    feats = bb.features(np.zeros((2, 4, 8, 8, 3)), T.param_tensors(P, ()))
    assert feats.shape == (2, cfg.vid_dim)
