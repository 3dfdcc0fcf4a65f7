"""Synthetic multimodal directedness data with a known generative model.

Latent ``z`` in {0, 1} is the label. Text is a bag of filler tokens with a
marker token shown iff ``z`` (flipped with ``text_flip_prob``). Audio and video
are ``(2z - 1) * u + sigma * noise`` for fixed seed-derived unit directions
``u``. Because the model is known, the exact posterior is available and
:func:`bayes_oracle` gives calibration EERs.
"""
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .adapters import Modality
from .backbone import N_RESERVED
from .metrics import ScoreSet, compute_eer

MARKER = N_RESERVED          # "directed" marker token id
FIRST_FILLER = N_RESERVED + 1
TEXT_VOCAB = 64              # ids used by generated text: [0, TEXT_VOCAB)
MIN_WORDS, MAX_WORDS = 4, 8
D_AUDIO, D_VIDEO = 256, 512
FEATURE_DECIMALS = 4
_LLR_CAP = 1e300


class DataError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    text: list
    audio: np.ndarray = None
    video: np.ndarray = None
    label: int = 0

    def __post_init__(self):
        if len(self.text) == 0:
            raise DataError(f"{self.id}: empty text")
        if self.label not in (0, 1):
            raise DataError(f"{self.id}: label must be 0 or 1")
        if self.audio is not None:
            self.audio = np.asarray(self.audio, dtype=np.float64)
            if self.audio.shape != (D_AUDIO,):
                raise DataError(f"{self.id}: audio must have {D_AUDIO} values")
        if self.video is not None:
            self.video = np.asarray(self.video, dtype=np.float64)
            if self.video.shape != (D_VIDEO,):
                raise DataError(f"{self.id}: video must have {D_VIDEO} values")

    def strip(self, keep):
        """Copy without the modalities not in ``keep`` (text always stays)."""
        return Sample(self.id, self.text,
                      self.audio if Modality.AUDIO in keep else None,
                      self.video if Modality.VIDEO in keep else None,
                      self.label)

    def to_record(self):
        rec = {"id": self.id, "text": [int(t) for t in self.text]}
        if self.audio is not None:
            rec["audio"] = self.audio.tolist()
        if self.video is not None:
            rec["video"] = self.video.tolist()
        rec["label"] = int(self.label)
        return rec

    @classmethod
    def from_record(cls, rec):
        try:
            return cls(rec["id"], list(rec["text"]), rec.get("audio"), rec.get("video"),
                       int(rec["label"]))
        except KeyError as e:
            raise DataError(f"record missing key {e}") from None


@dataclass
class GenConfig:
    seed: int = 0
    n_samples: int = 20000
    p_missing_audio: float = 0.0
    p_missing_video: float = 0.0
    text_flip_prob: float = 0.12
    audio_sigma: float = 1.2
    video_sigma: float = 1.5
    class_balance: float = 0.5
    stream: int = 0          # independent sample stream (0 = train, 1 = test, ...)

    def __post_init__(self):
        for name in ("p_missing_audio", "p_missing_video", "text_flip_prob", "class_balance"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("audio_sigma", "video_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")

    def to_dict(self):
        return asdict(self)


def directions(seed):
    """Unit mean-shift directions for audio and video (shared by all streams of a seed)."""
    rng = np.random.default_rng([seed, 0])
    ua = rng.standard_normal(D_AUDIO)
    uv = rng.standard_normal(D_VIDEO)
    return ua / np.linalg.norm(ua), uv / np.linalg.norm(uv)


def generate_samples(cfg):
    ua, uv = directions(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1, cfg.stream])
    prefix = f"s{cfg.stream}-"
    out = []
    for i in range(cfg.n_samples):
        # every draw happens regardless of missingness so streams stay aligned
        z = int(rng.random() < cfg.class_balance)
        n_words = int(rng.integers(MIN_WORDS, MAX_WORDS + 1))
        words = rng.integers(FIRST_FILLER, TEXT_VOCAB, size=n_words)
        shown = z ^ int(rng.random() < cfg.text_flip_prob)
        pos = int(rng.integers(0, n_words))
        if shown:
            words[pos] = MARKER
        sign = 2 * z - 1
        audio = np.round(sign * ua + cfg.audio_sigma * rng.standard_normal(D_AUDIO), FEATURE_DECIMALS)
        video = np.round(sign * uv + cfg.video_sigma * rng.standard_normal(D_VIDEO), FEATURE_DECIMALS)
        drop_a = rng.random() < cfg.p_missing_audio
        drop_v = rng.random() < cfg.p_missing_video
        out.append(Sample(f"{prefix}{i:06d}", words.tolist(),
                          None if drop_a else audio, None if drop_v else video, z))
    return out


def write_jsonl(samples, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")))
            fh.write("\n")
    os.replace(tmp, path)


def read_jsonl(path):
    try:
        with open(path) as fh:
            return [Sample.from_record(json.loads(line)) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read dataset {path}: {e}") from None


def generate(cfg, path):
    """Write the dataset for ``cfg`` to ``path`` (JSON lines); returns the samples."""
    samples = generate_samples(cfg)
    write_jsonl(samples, path)
    return samples


# ---------------------------------------------------------------- exact posterior

def _text_llr(flip):
    if flip <= 0.0:
        return _LLR_CAP
    if flip >= 1.0:
        return -_LLR_CAP
    return math.log((1.0 - flip) / flip)


def bayes_scores(cfg, samples):
    """Exact log-likelihood ratio of directedness for each observed sample."""
    ua, uv = directions(cfg.seed)
    t = _text_llr(cfg.text_flip_prob)
    out = np.empty(len(samples))
    for i, s in enumerate(samples):
        llr = t if MARKER in s.text else -t
        if s.audio is not None:
            llr += 2.0 * float(s.audio @ ua) / cfg.audio_sigma ** 2
        if s.video is not None:
            llr += 2.0 * float(s.video @ uv) / cfg.video_sigma ** 2
        out[i] = llr
    return out


def bayes_oracle(cfg, n_mc=200_000, seed=None):
    """Monte-Carlo EERs of the exact-posterior classifier.

    Unimodal EERs assume the modality is observed; the joint EER honours the
    configured missingness.
    """
    if n_mc < 10_000:
        raise ValueError("n_mc must be at least 1e4")
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 99])
    z = (rng.random(n_mc) < cfg.class_balance).astype(np.int64)
    sign = 2.0 * z - 1.0
    shown = z ^ (rng.random(n_mc) < cfg.text_flip_prob)
    t = _text_llr(cfg.text_flip_prob)
    llr_t = np.where(shown == 1, t, -t)
    # u . (sign*u + sigma*n) = sign + sigma * N(0, 1) for unit u
    llr_a = 2.0 * (sign + cfg.audio_sigma * rng.standard_normal(n_mc)) / cfg.audio_sigma ** 2
    llr_v = 2.0 * (sign + cfg.video_sigma * rng.standard_normal(n_mc)) / cfg.video_sigma ** 2
    has_a = rng.random(n_mc) >= cfg.p_missing_audio
    has_v = rng.random(n_mc) >= cfg.p_missing_video
    joint = np.clip(llr_t + np.where(has_a, llr_a, 0.0) + np.where(has_v, llr_v, 0.0),
                    -_LLR_CAP, _LLR_CAP)
    return {
        "eer_text": compute_eer(ScoreSet(llr_t, z)),
        "eer_audio": compute_eer(ScoreSet(llr_a, z)),
        "eer_video": compute_eer(ScoreSet(llr_v, z)),
        "eer_joint": compute_eer(ScoreSet(joint, z)),
    }
