"""Binary checkpoint containers.

Both containers are little-endian: a 4-byte magic, a u16 format version, a
block of u32 config fields, then named float32 tensors in row-major order.

Adapter files (``FLRA``, one per modality)::

    magic "FLRA" | u16 version | u32 d_model, rank, n_sites, activation_id
    per site: u16 path length, path bytes ("<modality>/<stack>.<layer>.<pos>"),
              W_D (d_model*rank f32), H (rank*rank f32), W_U (rank*d_model f32)

Backbone files (``FLBB``)::

    magic "FLBB" | u16 version | u32 d_model, n_enc_layers, n_dec_layers,
    n_heads, d_ff, vocab_size, max_seq_len, d_audio, d_video, adapter_rank,
    activation_id, n_entries
    per entry: u16 path length, path bytes, u32 ndim, ndim x u32 dims, f32 data
"""
import io
import os
import struct

import numpy as np

from .adapters import AdapterParams, AdapterSet, AdapterSiteId, Modality, all_sites
from .backbone import ModelConfig, ParamStore, param_shapes
from .numeric import ACTIVATION_IDS, Tensor

VERSION = 1
_ACT_NAMES = {v: k for k, v in ACTIVATION_IDS.items()}
_BB_FIELDS = ("d_model", "n_enc_layers", "n_dec_layers", "n_heads", "d_ff", "vocab_size",
              "max_seq_len", "d_audio", "d_video", "adapter_rank")


class CheckpointError(ValueError):
    pass


def _atomic_write(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _put_str(buf, s):
    b = s.encode("utf-8")
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _put_f32(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, payload, path):
        self.b = payload
        self.i = 0
        self.path = path

    def take(self, n):
        if self.i + n > len(self.b):
            raise CheckpointError(f"{self.path}: truncated file")
        out = self.b[self.i:self.i + n]
        self.i += n
        return out

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32s(self, n):
        return struct.unpack(f"<{n}I", self.take(4 * n))

    def string(self):
        return self.take(self.u16()).decode("utf-8")

    def f32(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)

    def header(self, magic):
        got = self.take(4)
        if got != magic:
            raise CheckpointError(f"{self.path}: bad magic {got!r}, expected {magic!r}")
        version = self.u16()
        if version != VERSION:
            raise CheckpointError(f"{self.path}: unsupported version {version}")

    def done(self):
        if self.i != len(self.b):
            raise CheckpointError(f"{self.path}: trailing bytes")


def _read(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None


# ---------------------------------------------------------------- adapters

def adapter_bytes(adapters, m):
    entries = adapters.for_modality(m)
    if not entries:
        raise CheckpointError(f"no {m.tag} adapters to save")
    first = next(iter(entries.values()))
    d_model, rank = first.w_down.shape
    buf = io.BytesIO()
    buf.write(b"FLRA")
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<4I", d_model, rank, len(entries), ACTIVATION_IDS[first.activation]))
    for site, p in entries.items():
        _put_str(buf, f"{m.tag}/{site.path}")
        _put_f32(buf, p.w_down.data)
        _put_f32(buf, p.hidden.data)
        _put_f32(buf, p.w_up.data)
    return buf.getvalue()


def save_adapters(adapters, directory):
    """One ``<modality>.flra`` file per modality in ``adapters``; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for m in sorted(adapters.modalities()):
        path = os.path.join(directory, f"{m.tag}.flra")
        _atomic_write(path, adapter_bytes(adapters, m))
        paths.append(path)
    return paths


def load_adapter_file(path, config):
    r = _Reader(_read(path), path)
    r.header(b"FLRA")
    d_model, rank, n_sites, act_id = r.u32s(4)
    if (d_model, rank) != (config.d_model, config.adapter_rank):
        raise CheckpointError(
            f"{path}: adapter dims d_model={d_model}, rank={rank} do not match config "
            f"d_model={config.d_model}, rank={config.adapter_rank}")
    valid = set(all_sites(config))
    if n_sites != len(valid):
        raise CheckpointError(f"{path}: {n_sites} sites, model has {len(valid)}")
    if act_id not in _ACT_NAMES:
        raise CheckpointError(f"{path}: unknown activation id {act_id}")
    entries = {}
    for _ in range(n_sites):
        tag, site_path = r.string().split("/", 1)
        m = Modality.parse(tag)
        site = AdapterSiteId.parse(site_path)
        if site not in valid:
            raise CheckpointError(f"{path}: site {site_path} not in model")
        entries[(m, site)] = AdapterParams(
            Tensor(r.f32((d_model, rank))), Tensor(r.f32((rank, rank))),
            Tensor(r.f32((rank, d_model))), _ACT_NAMES[act_id])
    r.done()
    return AdapterSet(entries)


def load_adapters(paths, config):
    """Merge one or more per-modality adapter files into a single set."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    entries = {}
    for p in paths:
        entries.update(load_adapter_file(p, config).entries)
    return AdapterSet(entries)


# ---------------------------------------------------------------- backbone container

def backbone_bytes(params, config, paths=None):
    paths = params.paths() if paths is None else sorted(paths)
    buf = io.BytesIO()
    buf.write(b"FLBB")
    buf.write(struct.pack("<H", VERSION))
    fields = [getattr(config, f) for f in _BB_FIELDS]
    fields += [ACTIVATION_IDS[config.activation], len(paths)]
    buf.write(struct.pack(f"<{len(fields)}I", *fields))
    for p in paths:
        data = params[p].data
        _put_str(buf, p)
        buf.write(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        _put_f32(buf, data)
    return buf.getvalue()


def save_backbone(params, config, path, paths=None):
    """Write ``params`` (or the subset ``paths``) to an FLBB file."""
    _atomic_write(path, backbone_bytes(params, config, paths))


def read_backbone(path):
    """Return ``(config, {path: ndarray})`` from an FLBB file."""
    r = _Reader(_read(path), path)
    r.header(b"FLBB")
    vals = r.u32s(len(_BB_FIELDS) + 2)
    act_id, n_entries = vals[-2], vals[-1]
    if act_id not in _ACT_NAMES:
        raise CheckpointError(f"{path}: unknown activation id {act_id}")
    try:
        config = ModelConfig(**dict(zip(_BB_FIELDS, vals)), activation=_ACT_NAMES[act_id])
    except ValueError as e:
        raise CheckpointError(f"{path}: invalid config block: {e}") from None
    shapes = param_shapes(config)
    arrays = {}
    for _ in range(n_entries):
        name = r.string()
        (ndim,) = r.u32s(1)
        shape = r.u32s(ndim)
        if shapes.get(name) != tuple(shape):
            raise CheckpointError(f"{path}: entry {name} has unexpected shape {shape}")
        arrays[name] = r.f32(shape)
    r.done()
    return config, arrays


def load_backbone(path, config=None):
    """Full backbone as a frozen ParamStore; checks ``config`` if given."""
    file_config, arrays = read_backbone(path)
    if config is not None and _arch(config) != _arch(file_config):
        raise CheckpointError(f"{path}: backbone dims do not match the requested config")
    missing = set(param_shapes(file_config)) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: missing entries {sorted(missing)[:3]}...")
    return file_config, ParamStore({p: Tensor(a) for p, a in arrays.items()})


def _arch(c):
    return tuple(getattr(c, f) for f in _BB_FIELDS[:-1])
