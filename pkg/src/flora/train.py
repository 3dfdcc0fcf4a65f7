"""Training (adapter modes and full fine-tuning), scoring and evaluation."""
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import multiprocessing

import numpy as np

from . import numeric as nm
from .adapters import ALL_MODALITIES, AdapterError, Modality, init_adapters, set_active
from .backbone import (BOS, EOS, MASK, NO, YES, ModelConfig, ParamStore, decode, encode,
                       is_layernorm, is_prefix)
from .checkpoint import load_adapters, load_backbone, read_backbone, save_adapters, save_backbone
from .data import DataError, Sample
from .frontends import build_batch, input_modalities
from .metrics import ScoreSet, compute_eer, compute_fa_at_fr, det_points
from .optim import AdamW, warmup_lr

log = logging.getLogger(__name__)

MODES = ("flora", "fft", "unimodal-text", "unimodal-audio", "unimodal-video")
EVAL_BATCH = 256


class NumericFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "flora"
    lr: float = 5e-3
    warmup_ratio: float = 0.1
    batch_size: int = 64
    epochs: int = 3
    seed: int = 0
    weight_decay: float = 0.01
    adapter_dropout: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)


def mode_modalities(mode):
    """(modalities fed as input, modalities with adapters) for a training mode."""
    if mode == "flora":
        return ALL_MODALITIES, ALL_MODALITIES
    if mode == "fft":
        return ALL_MODALITIES, frozenset()
    m = Modality.parse(mode.split("-", 1)[1])
    return frozenset({m}), frozenset({m})


@dataclass
class Model:
    config: ModelConfig
    params: ParamStore
    adapters: object = None          # AdapterSet, or None for full fine-tuning
    mode: str = "flora"

    @property
    def inputs(self):
        return mode_modalities(self.mode)[0]

    def trainable(self):
        out = dict(self.params.trainable())
        if self.adapters is not None:
            out.update(self.adapters.tensors())
        return out


def new_model(config, backbone, mode, seed=0):
    """Wrap a (copied) backbone for ``mode``; the caller's store is never mutated."""
    params = backbone.copy()
    if mode == "fft":
        params.unfreeze()
        return Model(config, params, None, mode)
    params.freeze()
    params.unfreeze(lambda p: is_layernorm(p) or is_prefix(p))
    adapters = init_adapters(config, mode_modalities(mode)[1], seed)
    adapters.set_requires_grad(True)
    return Model(config, params, adapters, mode)


# ---------------------------------------------------------------- forward helpers

def _active(model, pattern, present=None, dropout=True):
    if model.adapters is None:
        return None
    active = model.adapters.modalities()
    if present is not None:
        active &= frozenset(present)
    if dropout:
        active &= pattern
    return set_active(model.adapters, active)


def class_logits(model, samples, allowed, adapters, prefix):
    fused = build_batch(model.params, samples, model.config, allowed)
    enc = encode(model.params, adapters, fused, model.config)
    return decode(model.params, adapters, enc, fused.mask, prefix, model.config)


def batch_loss(model, samples, allowed, adapters):
    labels = np.array([s.label for s in samples])
    cls = np.where(labels == 1, YES, NO)
    B = len(samples)
    prefix = np.stack([np.full(B, BOS), cls], axis=1)
    targets = np.stack([cls, np.full(B, EOS)], axis=1).reshape(-1)
    logits = class_logits(model, samples, allowed, adapters, prefix)
    return nm.cross_entropy(nm.reshape(logits, (2 * B, model.config.vocab_size)), targets)


def yes_probability(logits_yes, logits_no):
    z = np.stack([logits_yes, logits_no], axis=-1)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., 0] / e.sum(axis=-1)


def _group(samples, allowed):
    """Sample indices bucketed by (modality pattern, text length): no mixed
    patterns within a batch and no padding."""
    groups = {}
    for i, s in enumerate(samples):
        pattern = input_modalities(s, allowed)
        n_text = len(s.text) if Modality.TEXT in pattern else 0
        groups.setdefault((tuple(sorted(pattern)), n_text), []).append(i)
    return [groups[k] for k in sorted(groups)]


def _usable(samples, mode):
    """Samples a mode can train or score on; unimodal audio/video need that modality."""
    if mode in ("unimodal-audio", "unimodal-video"):
        attr = mode.split("-")[1]
        kept = [s for s in samples if getattr(s, attr) is not None]
        if not kept:
            raise DataError(f"mode {mode} needs {attr} but the dataset has none")
        return kept
    return list(samples)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: Model
    curve: list = field(default_factory=list)       # (step, lr, loss)
    epoch_losses: list = field(default_factory=list)


def make_batches(samples, allowed, batch_size, rng):
    """Uniform-pattern batches, shuffled within patterns and then across batches."""
    batches = []
    for idx in _group(samples, allowed):
        idx = np.asarray(idx)[rng.permutation(len(idx))]
        batches += [idx[i:i + batch_size].tolist() for i in range(0, len(idx), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(cfg, samples, model, progress=None):
    """Optimise ``model`` in place on ``samples``; returns the loss curve."""
    samples = _usable(samples, cfg.mode)
    if model.mode != cfg.mode:
        raise ValueError(f"model built for {model.mode}, config asks for {cfg.mode}")
    allowed = model.inputs
    params = model.trainable()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    n_batches = sum(-(-len(g) // cfg.batch_size) for g in _group(samples, allowed))
    total = cfg.epochs * n_batches
    result = TrainResult(model)
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 17, epoch])
        losses = []
        for idx in make_batches(samples, allowed, cfg.batch_size, rng):
            batch = [samples[i] for i in idx]
            pattern = input_modalities(batch[0], allowed)
            adapters = _active(model, pattern, dropout=cfg.adapter_dropout)
            opt.zero_grad()
            with nm.Tape() as tape:
                loss = batch_loss(model, batch, allowed, adapters)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericFailure(f"non-finite loss at step {step + 1}")
            tape.backward(loss)
            step += 1
            lr = warmup_lr(step, total, cfg.warmup_ratio, cfg.lr)
            opt.step(lr)
            losses.append(value)
            result.curve.append((step, lr, value))
        result.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("epoch %d/%d mean loss %.5f", epoch + 1, cfg.epochs, result.epoch_losses[-1])
        if progress:
            progress(epoch, result.epoch_losses[-1])
    return result


def pretrain_backbone(config, texts, seed=0, epochs=2, lr=1e-3, batch_size=64,
                      mask_prob=0.15, warmup_ratio=0.1, backbone=None):
    """Denoising pre-training on text: reconstruct the sentence from a masked copy."""
    from .backbone import init_backbone
    params = (backbone or init_backbone(config, seed)).copy()
    params.unfreeze()
    params.freeze(is_prefix)
    model = Model(config, params, None, "fft")
    opt = AdamW(params.trainable(), weight_decay=0.01)
    by_len = {}
    for i, t in enumerate(texts):
        by_len.setdefault(len(t), []).append(i)
    n_batches = sum(-(-len(v) // batch_size) for v in by_len.values())
    total = epochs * n_batches
    curve, step = [], 0
    text_only = frozenset({Modality.TEXT})
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 23, epoch])
        batches = []
        for L in sorted(by_len):
            idx = np.asarray(by_len[L])[rng.permutation(len(by_len[L]))]
            batches += [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
        for bi in rng.permutation(len(batches)):
            idx = batches[bi]
            clean = np.array([texts[i] for i in idx], dtype=np.int64)
            noisy = np.where(rng.random(clean.shape) < mask_prob, MASK, clean)
            batch = [Sample(str(i), row.tolist()) for i, row in zip(idx, noisy)]
            B, L = clean.shape
            prefix = np.concatenate([np.full((B, 1), BOS), clean], axis=1)
            targets = np.concatenate([clean, np.full((B, 1), EOS)], axis=1).reshape(-1)
            opt.zero_grad()
            with nm.Tape() as tape:
                logits = class_logits(model, batch, text_only, None, prefix)
                loss = nm.cross_entropy(nm.reshape(logits, (B * (L + 1), config.vocab_size)),
                                        targets)
            if not np.isfinite(loss.item()):
                raise NumericFailure(f"non-finite pre-training loss at step {step + 1}")
            tape.backward(loss)
            step += 1
            lr_t = warmup_lr(step, total, warmup_ratio, lr)
            opt.step(lr_t)
            curve.append((step, lr_t, loss.item()))
    params.freeze()
    return params, curve


# ---------------------------------------------------------------- scoring & evaluation

def _score_chunk(model, samples, allowed, present):
    pattern = input_modalities(samples[0], allowed)
    adapters = _active(model, pattern, present)
    prefix = np.full((len(samples), 1), BOS)
    logits = class_logits(model, samples, allowed, adapters, prefix).data[:, 0, :]
    return yes_probability(logits[:, YES], logits[:, NO])


def score_sample(model, sample, present=None):
    """P(YES) from the YES/NO logits of the first decoding step."""
    allowed = model.inputs if present is None else model.inputs & frozenset(present)
    return float(_score_chunk(model, [sample], allowed, present)[0])


def _worker(args):
    model, samples, allowed, present = args
    return _score_chunk(model, samples, allowed, present)


def score_all(model, samples, present=None, workers=None):
    """Scores for every sample, rounded to 9 significant digits, in input order."""
    allowed = model.inputs if present is None else model.inputs & frozenset(present)
    if present is not None and model.adapters is not None:
        missing = frozenset(present) & ALL_MODALITIES - model.adapters.modalities()
        if missing & allowed:
            raise AdapterError(
                "no trained adapter for: " + ", ".join(sorted(m.tag for m in missing)))
    chunks = []
    for idx in _group(samples, allowed):
        chunks += [idx[i:i + EVAL_BATCH] for i in range(0, len(idx), EVAL_BATCH)]
    jobs = [(model, [samples[i] for i in c], allowed, present) for c in chunks]
    workers = workers or int(os.environ.get("FLORA_NUM_WORKERS", "1"))
    if workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx) as pool:
            parts = list(pool.map(_worker, jobs))
    else:
        parts = [_worker(j) for j in jobs]
    scores = np.empty(len(samples))
    for c, p in zip(chunks, parts):
        scores[c] = p
    return np.array([float(f"{s:.9g}") for s in scores])


def write_scores(path, samples, scores):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for s, v in zip(samples, scores):
            fh.write(f"{s.id}\t{v:.9g}\t{s.label}\n")
    os.replace(tmp, path)


def evaluate(model, samples, present=None, score_path=None, workers=None):
    """EER / FA@10 for ``model`` with only ``present`` modalities fed and loaded."""
    present = ALL_MODALITIES if present is None else frozenset(present)
    samples = _usable([s.strip(present) for s in samples], model.mode)
    scores = score_all(model, samples, present, workers)
    ss = ScoreSet(scores, [s.label for s in samples])
    if score_path:
        write_scores(score_path, samples, scores)
    return {"eer": compute_eer(ss), "fa_at_10": compute_fa_at_fr(ss, 0.10), "n": len(samples),
            "scores": ss, "det": det_points(ss)}


# ---------------------------------------------------------------- persistence

def save_model(model, directory):
    """Adapter modes: trainable layernorm/prefix entries + per-modality adapter files.
    Full fine-tuning: the whole backbone container."""
    os.makedirs(directory, exist_ok=True)
    files = []
    if model.adapters is None:
        path = os.path.join(directory, "model.flbb")
        save_backbone(model.params, model.config, path)
        files.append(path)
    else:
        path = os.path.join(directory, "trainable.flbb")
        keep = [p for p in model.params.paths() if is_layernorm(p) or is_prefix(p)]
        save_backbone(model.params, model.config, path, keep)
        files.append(path)
        files += save_adapters(model.adapters, os.path.join(directory, "adapters"))
    meta = {"mode": model.mode, "config": model.config.to_dict()}
    with open(os.path.join(directory, "model.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return files


def load_model(directory, backbone_path=None, modalities=None):
    """Rebuild a saved model; adapter files are loaded only for ``modalities``."""
    try:
        with open(os.path.join(directory, "model.json")) as fh:
            meta = json.load(fh)
    except OSError as e:
        raise DataError(f"not a model directory: {directory} ({e})") from None
    mode = meta["mode"]
    if mode == "fft":
        config, params = load_backbone(os.path.join(directory, "model.flbb"))
        return Model(config, params, None, mode)
    if backbone_path is None:
        raise DataError("adapter-mode models need the backbone checkpoint")
    config, arrays = read_backbone(os.path.join(directory, "trainable.flbb"))
    _, params = load_backbone(backbone_path, config)
    params.update(arrays)
    params.freeze()
    have = mode_modalities(mode)[1]
    wanted = have if modalities is None else frozenset(modalities) & ALL_MODALITIES
    missing = wanted - have
    if missing:
        raise AdapterError("no trained adapter for: " + ", ".join(sorted(m.tag for m in missing)))
    paths = []
    for m in sorted(wanted):
        p = os.path.join(directory, "adapters", f"{m.tag}.flra")
        if not os.path.exists(p):
            raise AdapterError(f"adapter file not found: {p}")
        paths.append(p)
    adapters = load_adapters(paths, config)
    return Model(config, params, adapters, mode)
