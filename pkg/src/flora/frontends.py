"""Prefix networks and construction of the fused [audio?, video?, text...] input."""
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .adapters import Modality
from .backbone import PAD, SequenceTooLong

_PREFIX = {Modality.AUDIO: "prefix.audio", Modality.VIDEO: "prefix.video"}


@dataclass
class FusedSequence:
    embeddings: nm.Tensor   # [B, S, d_model], positions already added
    mask: np.ndarray        # [B, S] bool, True for real positions
    layouts: list           # per sample: list of "A" / "V" / "T"

    @property
    def length(self):
        return self.embeddings.shape[1]


def project_modality(params, m, vec):
    """One pseudo-token per utterance: ``vec @ W + b`` -> [n, d_model]."""
    if m not in _PREFIX:
        raise ValueError("text has no prefix network")
    name = _PREFIX[m]
    w = params[name + ".w"]
    vec = nm.as_tensor(np.atleast_2d(vec) if not isinstance(vec, nm.Tensor) else vec)
    if vec.shape[-1] != w.shape[0]:
        raise nm.DimensionError(
            f"{m.tag} vector width {vec.shape[-1]} != expected {w.shape[0]}")
    return nm.add(nm.matmul(vec, w), params[name + ".b"])


def input_modalities(sample, allowed=None):
    """Modalities that will actually enter the sequence for ``sample``."""
    present = {Modality.TEXT}
    if sample.audio is not None:
        present.add(Modality.AUDIO)
    if sample.video is not None:
        present.add(Modality.VIDEO)
    if allowed is not None:
        present &= set(allowed)
    return frozenset(present)


def build_batch(params, samples, config, modalities=None):
    """Fuse a batch of samples sharing one modality pattern.

    ``modalities`` restricts which modalities enter (absent ones are omitted,
    never zero-filled). Text is right-padded with PAD; padding is masked.
    """
    if not samples:
        raise ValueError("empty batch")
    patterns = {input_modalities(s, modalities) for s in samples}
    if len(patterns) != 1:
        raise ValueError("batch mixes modality patterns")
    (pattern,) = patterns
    B = len(samples)
    parts, layout = [], []
    for m in (Modality.AUDIO, Modality.VIDEO):
        if m in pattern:
            vecs = np.stack([s.audio if m == Modality.AUDIO else s.video for s in samples])
            parts.append(nm.reshape(project_modality(params, m, vecs), (B, 1, config.d_model)))
            layout.append(m.name[0])
    n_mod = len(parts)
    lengths = np.array([len(s.text) if Modality.TEXT in pattern else 0 for s in samples])
    if Modality.TEXT in pattern:
        if lengths.min() == 0:
            raise ValueError("sample text must be non-empty")
        L = int(lengths.max())
        ids = np.full((B, L), PAD, dtype=np.int64)
        for b, s in enumerate(samples):
            ids[b, :len(s.text)] = s.text
        parts.append(nm.take_rows(params["embed.tok"], ids))
    else:
        L = 0
    S = n_mod + L
    if S > config.max_seq_len:
        raise SequenceTooLong(f"fused length {S} exceeds max_seq_len {config.max_seq_len}")
    x = parts[0] if len(parts) == 1 else nm.concat(parts, axis=1)
    x = nm.add(x, nm.select(params["embed.pos"], slice(0, S)))
    mask = np.zeros((B, S), dtype=bool)
    mask[:, :n_mod] = True
    mask[:, n_mod:] = np.arange(L)[None, :] < lengths[:, None]
    layouts = [layout + ["T"] * int(n) for n in lengths]
    return FusedSequence(x, mask, layouts)


def build_input(params, sample, config, modalities=None):
    """Single-sample fused sequence (batch of one)."""
    return build_batch(params, [sample], config, modalities)
