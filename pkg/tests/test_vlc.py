import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ivlab import tensor as T
from ivlab import vlc
from ivlab.data import SyntheticWorldSpec, gen_corpus, image_view


def frozen(P):
    return T.param_tensors(P, ())


def moving_clip():
    # a bright column sweeping right across four frames
    x = np.zeros((1, 4, 8, 8, 3))
    for t in range(4):
        x[0, t, :, 2 * t:2 * t + 2] = 1.0
    return x


def test_video_embedding_is_unit_norm(tiny_vlc):
    cfg, P = tiny_vlc
    enc = vlc.encode_video(np.random.default_rng(0).random((3, 4, 8, 8, 3)), frozen(P), cfg)
    np.testing.assert_allclose(np.linalg.norm(enc.embedding.data, axis=1), 1.0, atol=1e-6)
    assert enc.class_token.shape == (3, cfg.vid_dim)
    assert sorted(enc.tokens) == [1, 2]


def test_single_frame_is_a_valid_image_pathway(tiny_vlc):
    cfg, P = tiny_vlc
    enc = vlc.encode_video(np.random.default_rng(0).random((2, 1, 8, 8, 3)), frozen(P), cfg)
    assert np.all(np.isfinite(enc.embedding.data))


def test_frame_order_matters(tiny_vlc):
    cfg, P = tiny_vlc
    x = moving_clip()
    a = vlc.encode_video(x, frozen(P), cfg).embedding.data
    b = vlc.encode_video(x[:, ::-1].copy(), frozen(P), cfg).embedding.data
    assert not np.allclose(a, b)


def test_single_global_stage_is_the_class_token(vocab):
    cfg = vlc.MultimodalConfig(frame_size=(8, 8), vid_dim=8, vid_depth=2, heads=2, global_blocks=1, text_dim=8,
                               text_depth=1, vocab_size=len(vocab), embed_dim=8, cap_depth=1, cap_dim=8)
    P = vlc.init_params(cfg, np.random.default_rng(0))
    Pt = frozen(P)
    x = np.random.default_rng(1).random((1, 2, 8, 8, 3))
    enc = vlc.encode_video(x, Pt, cfg)
    q = vlc.L.cross_block(T.as_tensor(P["vlc.vid.query"][None]), enc.tokens[2], Pt, "vlc.vid.global.0", cfg.heads)
    np.testing.assert_allclose(enc.class_token.data, q.data.mean(axis=1), atol=1e-14)


def test_text_embedding(tiny_vlc, vocab):
    cfg, P = tiny_vlc
    seqs = [vocab.encode(["a", "square"]), vocab.encode(["a", "square"]), vocab.encode(["red", "circle", "moving"])]
    e = vlc.embed_texts(seqs, P, cfg, vocab.pad)
    assert np.array_equal(e[0], e[1])
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)


def test_text_padding_does_not_change_embedding(tiny_vlc, vocab):
    cfg, P = tiny_vlc
    short, long = vocab.encode(["a", "square"]), vocab.encode(["red", "circle", "moving", "left"])
    alone = vlc.embed_texts([short], P, cfg, vocab.pad)
    padded = vlc.embed_texts([short, long], P, cfg, vocab.pad)
    np.testing.assert_allclose(alone[0], padded[0], atol=1e-12)


def test_contrastive_examples():
    one = np.ones((1, 4)) / 2.0
    assert vlc.contrastive_loss(one, one, 0.0).item() == pytest.approx(0.0, abs=1e-12)
    same = np.tile([1.0, 0.0], (4, 1))
    assert vlc.contrastive_loss(same, same, 0.0).item() == pytest.approx(math.log(4))
    e = np.eye(2) * math.sqrt(10.0)
    want = -math.log(math.exp(10) / (math.exp(10) + 1))
    assert vlc.contrastive_loss(e, e, 0.0).item() == pytest.approx(want, rel=1e-9)
    assert want == pytest.approx(4.54e-5, rel=1e-3)


@given(st.integers(1, 6), st.integers(0, 2**16))
def test_contrastive_is_symmetric_and_nonnegative(n, seed):
    r = np.random.default_rng(seed)
    v, t = r.normal(size=(n, 3)), r.normal(size=(n, 3))
    a = vlc.contrastive_loss(v, t, math.log(0.5)).item()
    b = vlc.contrastive_loss(t, v, math.log(0.5)).item()
    assert a == pytest.approx(b, rel=1e-12) and a >= 0.0


def test_caption_loss_uniform_is_log_vocab(tiny_vlc, vocab):
    cfg, P = tiny_vlc
    P = dict(P)
    P["vlc.cap.mlp.fc2.w"] = np.zeros_like(P["vlc.cap.mlp.fc2.w"])
    P["vlc.cap.mlp.fc2.b"] = np.zeros_like(P["vlc.cap.mlp.fc2.b"])
    tokens = vlc.encode_video(np.random.default_rng(0).random((2, 2, 8, 8, 3)), frozen(P), cfg).final_tokens
    seqs = [vocab.encode(["a", "square"]), vocab.encode(["red", "circle", "moving"])]
    loss, fused = vlc.caption_loss(tokens, seqs, frozen(P), cfg, vocab.pad)
    assert loss.item() == pytest.approx(math.log(len(vocab)), rel=1e-12)
    assert fused.shape == (2, cfg.cap_dim)


def test_caption_decoder_is_causal(tiny_vlc, vocab):
    cfg, P = tiny_vlc
    tokens = vlc.encode_video(np.random.default_rng(0).random((1, 2, 8, 8, 3)), frozen(P), cfg).final_tokens
    a = vlc.caption_forward(tokens, np.array([vocab.encode(["a", "square"])]), frozen(P), cfg).data
    b = vlc.caption_forward(tokens, np.array([vocab.encode(["a", "circle"])]), frozen(P), cfg).data
    np.testing.assert_allclose(a[:, :2], b[:, :2], atol=1e-12)


def test_full_loss_gradient(tiny_vlc, vocab):
    cfg, P = tiny_vlc
    x = np.random.default_rng(2).random((2, 2, 8, 8, 3))
    caps = [vocab.encode(["a", "square"]), vocab.encode(["red", "circle", "moving"])]
    names = ["vlc.vid.patch.w", "vlc.vid.stage_w", "vlc.txt.tok", "vlc.log_temp", "vlc.cap.blocks.0.xattn.k.w"]

    def f(*vals):
        store = {k: T.Tensor(v) for k, v in P.items()}
        store.update(zip(names, vals))
        return vlc.vlc_loss(x, caps, store, cfg, vocab.pad)[0]

    assert T.grad_check(f, [P[k] for k in names], max_checks=5) < 1e-4


def test_step_parity():
    assert [vlc.step_modality(s) for s in range(6)] == ["video", "image"] * 3


def test_zero_caption_weight_leaves_decoder_untouched(tiny_vlc, vocab):
    cfg, _ = tiny_vlc
    cfg = replace(cfg, lambda_cap=0.0)
    data = gen_corpus(SyntheticWorldSpec(num_classes=2, videos_per_class=2, frame_size=(8, 8), frames_per_video=4))
    tc = vlc.VlcTrainConfig(steps=4, batch_size=4, image_batch_size=4, lr=1e-2, warmup_steps=0, video_frames=4)
    res = vlc.vlc_train(data, image_view(data), cfg, tc, vocab)
    init = vlc.init_params(cfg, np.random.default_rng(tc.seed))
    assert res.modalities == ["video", "image", "video", "image"]
    assert all(np.array_equal(res.params[k], init[k]) for k in init if k.startswith("vlc.cap."))
    assert not np.array_equal(res.params["vlc.vid.patch.w"], init["vlc.vid.patch.w"])


def test_depth_index(tiny_vlc):
    cfg, _ = tiny_vlc
    assert vlc.depth_index("vlc.vid.pos_s", cfg) == 0
    assert vlc.depth_index("vlc.vid.blocks.0.attn.q.w", cfg) == 1
    assert vlc.depth_index("vlc.vid.global.0.xattn.q.w", cfg) == 2
    assert vlc.depth_index("vlc.vid.proj.w", cfg) == 3


def test_encoder_rejects_wrong_geometry(tiny_vlc):
    cfg, P = tiny_vlc
    with pytest.raises(ValueError):
        vlc.encode_video(np.zeros((1, 2, 12, 12, 3)), frozen(P), cfg)
    with pytest.raises(ValueError):
        vlc.encode_video(np.zeros((1, 9, 8, 8, 3)), frozen(P), cfg)
