"""Modality-specific low-rank bottleneck adapters and their fusion rule."""
import enum
from dataclasses import dataclass

import numpy as np

from .numeric import ACTIVATIONS, DimensionError, Tensor, add, matmul


class Modality(enum.IntEnum):
    AUDIO = 0
    VIDEO = 1
    TEXT = 2

    @property
    def tag(self):
        return self.name.lower()

    @classmethod
    def parse(cls, s):
        s = s.strip().lower()
        for m in cls:
            if s in (m.tag, m.tag[0]):
                return m
        raise ValueError(f"unknown modality {s!r}")


ALL_MODALITIES = frozenset(Modality)


class AdapterError(KeyError):
    pass


@dataclass(frozen=True, order=True)
class AdapterSiteId:
    stack: str      # "enc" | "dec"
    layer: int
    position: str   # "attn" | "ffn"

    @property
    def path(self):
        return f"{self.stack}.{self.layer}.{self.position}"

    @classmethod
    def parse(cls, path):
        stack, layer, position = path.split(".")
        return cls(stack, int(layer), position)


def all_sites(config):
    """Every adapter site of a model, in deterministic order."""
    sites = []
    for stack, n in (("enc", config.n_enc_layers), ("dec", config.n_dec_layers)):
        for i in range(n):
            sites.append(AdapterSiteId(stack, i, "attn"))
            sites.append(AdapterSiteId(stack, i, "ffn"))
    return sites


@dataclass
class AdapterParams:
    w_down: Tensor    # d_model x r
    hidden: Tensor    # r x r
    w_up: Tensor      # r x d_model
    activation: str = "gelu"

    @property
    def rank(self):
        return self.w_down.shape[1]

    def tensors(self):
        return {"w_down": self.w_down, "hidden": self.hidden, "w_up": self.w_up}


def init_adapter(d_model, rank, activation, rng):
    return AdapterParams(
        w_down=Tensor(rng.normal(0.0, 0.02, size=(d_model, rank))),
        hidden=Tensor(np.eye(rank)),
        w_up=Tensor(np.zeros((rank, d_model))),
        activation=activation,
    )


def adapter_forward(a, E):
    """``f(E W_D) H W_U``; width-preserving."""
    if E.shape[-1] != a.w_down.shape[0]:
        raise DimensionError(
            f"adapter input width {E.shape[-1]} != d_model {a.w_down.shape[0]}")
    z = ACTIVATIONS[a.activation](matmul(E, a.w_down))
    return matmul(matmul(z, a.hidden), a.w_up)


class AdapterSet:
    """Per-(modality, site) adapters plus the mask of modalities in use."""

    def __init__(self, entries=None, active=None):
        self.entries = dict(entries or {})
        present = self.modalities()
        for m in present:
            n = sum(1 for (mm, _) in self.entries if mm == m)
            if n != len(self._sites()):
                raise AdapterError(f"{m.tag} adapters missing at some sites")
        self.active = frozenset(present if active is None else active)
        if not self.active <= present:
            missing = ", ".join(sorted(m.tag for m in self.active - present))
            raise AdapterError(f"no trained adapter for: {missing}")

    def _sites(self):
        return {site for (_, site) in self.entries}

    def modalities(self):
        return frozenset(m for (m, _) in self.entries)

    def sites(self):
        return sorted(self._sites())

    def __getitem__(self, key):
        return self.entries[key]

    def __len__(self):
        return len(self.entries)

    def for_modality(self, m):
        return {site: p for (mm, site), p in sorted(self.entries.items()) if mm == m}

    def tensors(self, modalities=None):
        """Flat ``{name: Tensor}`` for optimizers and checkpoints."""
        out = {}
        for (m, site), p in sorted(self.entries.items()):
            if modalities is not None and m not in modalities:
                continue
            for k, t in p.tensors().items():
                out[f"adapter.{m.tag}.{site.path}.{k}"] = t
        return out

    def set_requires_grad(self, flag):
        for t in self.tensors().values():
            t.requires_grad = flag

    def without(self, m):
        """Physically drop every entry of modality ``m``."""
        entries = {k: v for k, v in self.entries.items() if k[0] != m}
        return AdapterSet(entries, self.active - {m})

    def param_count(self):
        return int(sum(t.data.size for t in self.tensors().values()))


def init_adapters(config, modalities, seed):
    """Fresh adapters (W_U = 0, H = I) for ``modalities`` at every site."""
    entries = {}
    for m in sorted(modalities):
        rng = np.random.default_rng([seed, 101, int(m)])
        for site in all_sites(config):
            entries[(m, site)] = init_adapter(config.d_model, config.adapter_rank,
                                              config.activation, rng)
    return AdapterSet(entries)


def set_active(adapters, present):
    """Same weights, new active mask."""
    present = frozenset(present)
    return AdapterSet(adapters.entries, present)


def fuse_site(frozen_out, adapters, site, E):
    """Frozen sublayer output plus every active modality adapter applied to ``E``."""
    out = frozen_out
    if adapters is None:
        return out
    for m in sorted(adapters.active):
        key = (m, site)
        if key not in adapters.entries:
            raise AdapterError(f"no {m.tag} adapter at site {site.path}")
        out = add(out, adapter_forward(adapters.entries[key], E))
    return out


def dropout_mask(sample):
    """Modalities present in ``sample``; absent ones get no forward term and no update."""
    present = {Modality.TEXT}
    if sample.audio is not None:
        present.add(Modality.AUDIO)
    if sample.video is not None:
        present.add(Modality.VIDEO)
    return frozenset(present)
