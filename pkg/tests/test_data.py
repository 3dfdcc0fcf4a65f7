import json
import math

import numpy as np
import pytest

from flora.data import (D_AUDIO, D_VIDEO, MARKER, DataError, GenConfig, Sample, bayes_oracle,
                        bayes_scores, directions, generate, generate_samples, read_jsonl)
from flora.metrics import ScoreSet, compute_eer


def phi(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


def closed_form(cfg):
    """Exact Bayes EERs for the generative model (fully observed modalities)."""
    f = cfg.text_flip_prob
    m = 2 / cfg.audio_sigma ** 2 + 2 / cfg.video_sigma ** 2   # A+V LLR ~ N(+-m, 2m)
    c = math.log((1 - f) / f)
    s = math.sqrt(2 * m)
    return {"eer_text": f,
            "eer_audio": phi(-1 / cfg.audio_sigma),
            "eer_video": phi(-1 / cfg.video_sigma),
            "eer_joint": (1 - f) * phi((-c - m) / s) + f * phi((c - m) / s)}


def test_generation_is_deterministic(tmp_path):
    cfg = GenConfig(seed=7, n_samples=50)
    generate(cfg, tmp_path / "a.jsonl")
    generate(cfg, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    generate(GenConfig(seed=8, n_samples=50), tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_jsonl_round_trip_and_absent_keys(tmp_path):
    cfg = GenConfig(seed=1, n_samples=40, p_missing_video=1.0, p_missing_audio=0.5)
    samples = generate(cfg, tmp_path / "d.jsonl")
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    assert all("video" not in json.loads(l) for l in lines)
    assert any("audio" not in json.loads(l) for l in lines)
    back = read_jsonl(tmp_path / "d.jsonl")
    for a, b in zip(samples, back):
        assert a.to_record() == b.to_record()


def test_missingness_does_not_shift_streams():
    full = generate_samples(GenConfig(seed=3, n_samples=30))
    some = generate_samples(GenConfig(seed=3, n_samples=30, p_missing_video=0.5))
    for a, b in zip(full, some):
        assert a.text == b.text and a.label == b.label
        assert np.array_equal(a.audio, b.audio)


def test_label_balance_within_three_sigma():
    n = 4000
    for balance in (0.5, 0.3):
        labels = [s.label for s in generate_samples(GenConfig(seed=2, n_samples=n,
                                                              class_balance=balance))]
        sd = math.sqrt(balance * (1 - balance) / n)
        assert abs(np.mean(labels) - balance) < 3 * sd


def test_sample_structure():
    cfg = GenConfig(seed=0, n_samples=500, text_flip_prob=0.0)
    ua, uv = directions(0)
    assert abs(np.linalg.norm(ua) - 1) < 1e-12 and abs(np.linalg.norm(uv) - 1) < 1e-12
    for s in generate_samples(cfg):
        assert (MARKER in s.text) == bool(s.label)
        assert 4 <= len(s.text) <= 8
        assert s.audio.shape == (D_AUDIO,) and s.video.shape == (D_VIDEO,)


def test_noiseless_limit_is_separable():
    cfg = GenConfig(seed=0, n_samples=300, text_flip_prob=0.0, audio_sigma=1e-6, video_sigma=1e-6)
    samples = generate_samples(cfg)
    ua, _ = directions(0)
    proj = np.array([s.audio @ ua for s in samples])
    assert compute_eer(ScoreSet(proj, [s.label for s in samples])) == 0.0


@pytest.mark.parametrize("cfg", [GenConfig(), GenConfig(text_flip_prob=0.25, audio_sigma=2.0,
                                                        video_sigma=0.8)])
def test_oracle_matches_closed_form(cfg):
    got = bayes_oracle(cfg, n_mc=200_000)
    want = closed_form(cfg)
    for k in want:
        assert abs(got[k] - want[k]) < 0.005, (k, got[k], want[k])
    assert got["eer_joint"] < min(got["eer_text"], got["eer_audio"], got["eer_video"])


def test_default_calibration_regime():
    want = closed_form(GenConfig())
    assert 0.10 <= want["eer_text"] <= 0.15
    assert want["eer_joint"] < 0.8 * min(want["eer_text"], want["eer_audio"], want["eer_video"])


def test_oracle_limits():
    noisy = bayes_oracle(GenConfig(text_flip_prob=0.5, audio_sigma=1e6, video_sigma=1e6), 20_000)
    assert all(abs(v - 0.5) < 0.02 for v in noisy.values())
    assert bayes_oracle(GenConfig(text_flip_prob=0.0), 20_000)["eer_text"] == 0.0
    with pytest.raises(ValueError):
        bayes_oracle(GenConfig(), n_mc=100)


def test_bayes_scores_on_samples_near_oracle():
    cfg = GenConfig(seed=5, n_samples=6000)
    samples = generate_samples(cfg)
    eer = compute_eer(ScoreSet(bayes_scores(cfg, samples), [s.label for s in samples]))
    assert abs(eer - closed_form(cfg)["eer_joint"]) < 0.015


def test_invalid_inputs():
    with pytest.raises(ValueError):
        GenConfig(p_missing_audio=1.5)
    with pytest.raises(ValueError):
        GenConfig(audio_sigma=0)
    with pytest.raises(DataError):
        Sample("x", [], label=0)
    with pytest.raises(DataError):
        Sample("x", [7], audio=np.zeros(3), label=0)
    with pytest.raises(DataError):
        Sample("x", [7], label=2)


def test_read_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": "a", "text": [7]}\n')
    with pytest.raises(DataError, match="label"):
        read_jsonl(p)
    p.write_text("not json\n")
    with pytest.raises(DataError):
        read_jsonl(p)
    with pytest.raises(DataError):
        read_jsonl(tmp_path / "missing.jsonl")
