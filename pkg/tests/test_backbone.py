import math

import numpy as np
import pytest

from flora.adapters import ALL_MODALITIES, init_adapters
from flora.backbone import (BOS, ModelConfig, SequenceTooLong, analytic_adapter_count,
                            analytic_param_count, count_params, decode, encode, init_backbone,
                            param_shapes)
from flora.data import D_AUDIO, D_VIDEO, Sample
from flora.frontends import build_batch

from conftest import random_sample, tiny_config


# ---------------------------------------------------------------- reference forward
# Written independently of the package: explicit per-head loops, textbook formulas.

def ref_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def ref_attn(P, name, q_in, kv_in, allowed, H):
    """q_in [Sq,D], kv_in [Sk,D], allowed [Sq,Sk] bool."""
    D = q_in.shape[1]
    dh = D // H
    q = q_in @ P[name + ".q.w"] + P[name + ".q.b"]
    k = kv_in @ P[name + ".k.w"] + P[name + ".k.b"]
    v = kv_in @ P[name + ".v.w"] + P[name + ".v.b"]
    out = np.zeros((q_in.shape[0], D))
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        s = np.where(allowed, s, -np.inf)
        w = np.exp(s - s.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return out @ P[name + ".o.w"] + P[name + ".o.b"]


def ref_ffn(P, name, x):
    return ref_gelu(x @ P[name + ".w1"] + P[name + ".b1"]) @ P[name + ".w2"] + P[name + ".b2"]


def ref_logits(P, cfg, sample, prefix):
    rows = []
    if sample.audio is not None:
        rows.append(sample.audio @ P["prefix.audio.w"] + P["prefix.audio.b"])
    if sample.video is not None:
        rows.append(sample.video @ P["prefix.video.w"] + P["prefix.video.b"])
    rows += [P["embed.tok"][t] for t in sample.text]
    x = np.stack(rows) + P["embed.pos"][:len(rows)]
    S = len(rows)
    full = np.ones((S, S), bool)
    for i in range(cfg.n_enc_layers):
        n = f"enc.{i}"
        x = x + ref_attn(P, n + ".attn", ref_ln(x, P[n + ".ln_attn.g"], P[n + ".ln_attn.b"]),
                         ref_ln(x, P[n + ".ln_attn.g"], P[n + ".ln_attn.b"]), full, cfg.n_heads)
        x = x + ref_ffn(P, n + ".ffn", ref_ln(x, P[n + ".ln_ffn.g"], P[n + ".ln_ffn.b"]))
    enc = ref_ln(x, P["enc.ln_final.g"], P["enc.ln_final.b"])
    T = len(prefix)
    y = P["embed.tok"][prefix] + P["embed.pos"][:T]
    causal = np.tril(np.ones((T, T), bool))
    cross = np.ones((T, S), bool)
    for i in range(cfg.n_dec_layers):
        n = f"dec.{i}"
        yn = ref_ln(y, P[n + ".ln_self.g"], P[n + ".ln_self.b"])
        y = y + ref_attn(P, n + ".self", yn, yn, causal, cfg.n_heads)
        y = y + ref_attn(P, n + ".cross", ref_ln(y, P[n + ".ln_cross.g"], P[n + ".ln_cross.b"]),
                         enc, cross, cfg.n_heads)
        y = y + ref_ffn(P, n + ".ffn", ref_ln(y, P[n + ".ln_ffn.g"], P[n + ".ln_ffn.b"]))
    y = ref_ln(y, P["dec.ln_final.g"], P["dec.ln_final.b"])
    return y @ P["embed.tok"].T


def model_logits(params, config, samples, prefix, adapters=None):
    fused = build_batch(params, samples, config)
    enc = encode(params, adapters, fused, config)
    return decode(params, adapters, enc, fused.mask, prefix, config).data


def randomize(params, seed):
    rng = np.random.default_rng(seed)
    for _, t in params.items():
        t.data = t.data + rng.normal(scale=0.3, size=t.data.shape)


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_reference_at_d4(seed):
    cfg = tiny_config(d_model=4, n_heads=2, d_ff=8, n_enc_layers=2, n_dec_layers=2)
    params = init_backbone(cfg, seed)
    randomize(params, seed)  # non-trivial layernorm gains and biases too
    rng = np.random.default_rng(100 + seed)
    for audio, video in [(True, True), (False, True), (False, False)]:
        s = random_sample(rng, audio=audio, video=video)
        prefix = [BOS, 3, 9]
        got = model_logits(params, cfg, [s], [prefix])[0]
        want = ref_logits({p: t.data for p, t in params.items()}, cfg, s, np.array(prefix))
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_param_count_matches_analytic():
    for cfg in [ModelConfig(), tiny_config(), tiny_config(d_model=16, n_enc_layers=3, d_ff=40)]:
        params = init_backbone(cfg, 0)
        adapters = init_adapters(cfg, ALL_MODALITIES, 0)
        n = count_params(params, adapters)
        assert n["frozen_count"] + n["trainable_count"] == (
            analytic_param_count(cfg) + analytic_adapter_count(cfg))
        assert sum(t.data.size for _, t in params.items()) == analytic_param_count(cfg)


def test_default_config_counts():
    params = init_backbone(ModelConfig(), 0)
    adapters = init_adapters(ModelConfig(), ALL_MODALITIES, 0)
    n = count_params(params, adapters)
    # adapters: 3 modalities x 8 sites x (2*64*4 + 16)
    assert n["adapter_count"] == 3 * 8 * (2 * 64 * 4 + 16)
    assert n["prefix_count"] == (256 + 1) * 64 + (512 + 1) * 64
    assert n["fraction"] < 0.05
    assert count_params(params, None, "fft")["fraction"] == 1.0


def test_padding_is_masked():
    cfg = tiny_config()
    params = init_backbone(cfg, 1)
    randomize(params, 1)
    rng = np.random.default_rng(2)
    short = random_sample(rng, length=3)
    long = random_sample(rng, length=6)
    alone = model_logits(params, cfg, [short], [[BOS, 3]])
    batched = model_logits(params, cfg, [short, long], [[BOS, 3], [BOS, 3]])
    np.testing.assert_allclose(batched[0], alone[0], rtol=0, atol=1e-12)


def test_decoder_is_causal():
    cfg = tiny_config()
    params = init_backbone(cfg, 2)
    randomize(params, 2)
    s = random_sample(np.random.default_rng(3))
    a = model_logits(params, cfg, [s], [[BOS, 10, 11, 12]])
    b = model_logits(params, cfg, [s], [[BOS, 10, 40, 50]])
    np.testing.assert_array_equal(a[0, :2], b[0, :2])
    assert not np.allclose(a[0, 2:], b[0, 2:])


def test_init_is_deterministic_and_seeded():
    cfg = tiny_config()
    a, b, c = init_backbone(cfg, 5), init_backbone(cfg, 5), init_backbone(cfg, 6)
    assert all(np.array_equal(a[p].data, b[p].data) for p in a.paths())
    assert not np.array_equal(a["enc.0.attn.q.w"].data, c["enc.0.attn.q.w"].data)
    assert set(a.paths()) == set(param_shapes(cfg))


def test_init_rules():
    params = init_backbone(ModelConfig(), 0)
    assert np.all(params["enc.0.ln_attn.g"].data == 1) and np.all(params["enc.0.ln_attn.b"].data == 0)
    assert abs(params["embed.tok"].data.std() - 0.02) < 0.002
    w = params["enc.0.ffn.w2"].data                  # fan_in 2560
    assert abs(w.std() * math.sqrt(2560) - 1) < 0.02
    assert np.all(params["enc.0.ffn.b1"].data == 0)
    assert np.all(params["prefix.audio.w"].data == 0) and np.all(params["prefix.video.b"].data == 0)


def test_sequence_too_long():
    cfg = tiny_config(max_seq_len=5)
    params = init_backbone(cfg, 0)
    s = Sample("x", [7] * 4, np.zeros(D_AUDIO), np.zeros(D_VIDEO), 1)
    with pytest.raises(SequenceTooLong):
        build_batch(params, [s], cfg)
    with pytest.raises(SequenceTooLong):
        model_logits(params, cfg, [Sample("y", [7], label=0)], [[BOS] * 6])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(adapter_rank=64)
    with pytest.raises(ValueError):
        ModelConfig(activation="swish")
