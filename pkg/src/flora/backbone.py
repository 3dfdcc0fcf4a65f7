"""Small pre-layernorm encoder-decoder transformer used as the frozen backbone."""
from dataclasses import asdict, dataclass

import numpy as np

from . import numeric as nm
from .adapters import AdapterSiteId, fuse_site

PAD, BOS, EOS, YES, NO, MASK = range(6)
N_RESERVED = 6
MASK_BIAS = -1e9


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 2560
    vocab_size: int = 64
    max_seq_len: int = 32
    d_audio: int = 256
    d_video: int = 512
    adapter_rank: int = 4
    activation: str = "gelu"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 1 <= self.adapter_rank < self.d_model:
            raise ValueError("adapter_rank must satisfy 1 <= rank < d_model")
        if not N_RESERVED < self.vocab_size <= 256:
            raise ValueError(f"vocab_size must be in ({N_RESERVED}, 256]")
        if self.activation not in nm.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for name in ("n_enc_layers", "n_dec_layers", "d_ff", "max_seq_len", "d_audio", "d_video"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class ParamStore:
    """Named parameter tensors; frozen entries never require gradients."""

    def __init__(self, tensors=None, frozen=None):
        self.tensors = dict(tensors or {})
        self.frozen = set(self.tensors if frozen is None else frozen)
        self._sync()

    def _sync(self):
        for path, t in self.tensors.items():
            t.requires_grad = path not in self.frozen

    def __getitem__(self, path):
        return self.tensors[path]

    def __contains__(self, path):
        return path in self.tensors

    def __len__(self):
        return len(self.tensors)

    def paths(self):
        return sorted(self.tensors)

    def items(self):
        return [(p, self.tensors[p]) for p in self.paths()]

    def freeze(self, predicate=lambda p: True):
        self.frozen |= {p for p in self.tensors if predicate(p)}
        self._sync()

    def unfreeze(self, predicate=lambda p: True):
        self.frozen -= {p for p in self.tensors if predicate(p)}
        self._sync()

    def trainable(self):
        return {p: t for p, t in self.items() if p not in self.frozen}

    def copy(self):
        return ParamStore({p: nm.Tensor(t.data.copy()) for p, t in self.tensors.items()},
                          set(self.frozen))

    def update(self, other):
        """Overwrite values of matching paths from another store (or mapping)."""
        src = other.tensors if isinstance(other, ParamStore) else other
        for p, t in src.items():
            data = t.data if isinstance(t, nm.Tensor) else np.asarray(t, dtype=np.float64)
            if p not in self.tensors or self.tensors[p].shape != data.shape:
                raise KeyError(f"parameter {p!r} missing or shape mismatch")
            self.tensors[p].data = data.copy()


def is_layernorm(path):
    return ".ln_" in path or path.startswith("ln_")


def is_prefix(path):
    return path.startswith("prefix.")


def param_shapes(config):
    """Every backbone parameter path with its shape, in sorted order."""
    d, f = config.d_model, config.d_ff
    shapes = {
        "embed.tok": (config.vocab_size, d),
        "embed.pos": (config.max_seq_len, d),
        "prefix.audio.w": (config.d_audio, d),
        "prefix.audio.b": (d,),
        "prefix.video.w": (config.d_video, d),
        "prefix.video.b": (d,),
    }

    def ln(name):
        shapes[name + ".g"] = (d,)
        shapes[name + ".b"] = (d,)

    def attn(name):
        for proj in "qkvo":
            shapes[f"{name}.{proj}.w"] = (d, d)
            shapes[f"{name}.{proj}.b"] = (d,)

    def ffn(name):
        shapes[name + ".w1"] = (d, f)
        shapes[name + ".b1"] = (f,)
        shapes[name + ".w2"] = (f, d)
        shapes[name + ".b2"] = (d,)

    for i in range(config.n_enc_layers):
        ln(f"enc.{i}.ln_attn")
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln_ffn")
        ffn(f"enc.{i}.ffn")
    ln("enc.ln_final")
    for i in range(config.n_dec_layers):
        ln(f"dec.{i}.ln_self")
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln_cross")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln_ffn")
        ffn(f"dec.{i}.ffn")
    ln("dec.ln_final")
    return dict(sorted(shapes.items()))


def init_backbone(config, seed):
    """Deterministic random backbone: embeddings N(0, 0.02^2), projections N(0, 1/fan_in).

    Prefix projections start at zero. A random projection of a noisy feature
    vector would inject a large noise token that training first learns to
    ignore, which starves the audio/video path of gradient.
    """
    rng = np.random.default_rng([seed, 7])
    tensors = {}
    for path, shape in param_shapes(config).items():
        leaf = path.rsplit(".", 1)[-1]
        if path.startswith("embed."):
            data = rng.normal(0.0, 0.02, size=shape)
        elif is_layernorm(path):
            data = np.ones(shape) if leaf == "g" else np.zeros(shape)
        elif len(shape) == 2 and not is_prefix(path):
            data = rng.normal(0.0, 1.0, size=shape) / np.sqrt(shape[0])
        else:
            data = np.zeros(shape)
        tensors[path] = nm.Tensor(data)
    return ParamStore(tensors)


# ---------------------------------------------------------------- forward pieces

def _linear(params, name, x):
    return nm.add(nm.matmul(x, params[name + ".w"]), params[name + ".b"])


def _ln(params, name, x):
    return nm.layer_norm(x, params[name + ".g"], params[name + ".b"])


def attention(params, name, xq, xkv, bias, n_heads):
    """Multi-head attention; ``bias`` is an additive constant broadcast to [B,H,Sq,Sk]."""
    B, Sq, D = xq.shape
    Sk = xkv.shape[1]
    dh = D // n_heads

    def heads(t, S):
        return nm.transpose(nm.reshape(t, (B, S, n_heads, dh)), (0, 2, 1, 3))

    q = heads(_linear(params, name + ".q", xq), Sq)
    k = heads(_linear(params, name + ".k", xkv), Sk)
    v = heads(_linear(params, name + ".v", xkv), Sk)
    scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = nm.softmax(nm.add_const(scores, bias), axis=-1)
    ctx = nm.reshape(nm.transpose(nm.matmul(probs, v), (0, 2, 1, 3)), (B, Sq, D))
    return _linear(params, name + ".o", ctx)


def _ffn(params, name, x):
    h = nm.add(nm.matmul(x, params[name + ".w1"]), params[name + ".b1"])
    h = nm.gelu(h)
    return nm.add(nm.matmul(h, params[name + ".w2"]), params[name + ".b2"])


def key_padding_bias(mask):
    """[B,S] bool (True = real token) -> additive bias [B,1,1,S]."""
    return np.where(mask, 0.0, MASK_BIAS)[:, None, None, :]


def causal_bias(T):
    return np.triu(np.full((T, T), MASK_BIAS), k=1)[None, None]


def encoder_layer(params, adapters, i, x, bias, n_heads):
    site_attn = AdapterSiteId("enc", i, "attn")
    site_ffn = AdapterSiteId("enc", i, "ffn")
    xn = _ln(params, f"enc.{i}.ln_attn", x)
    h = nm.add(x, attention(params, f"enc.{i}.attn", xn, xn, bias, n_heads))
    h = fuse_site(h, adapters, site_attn, x)
    hn = _ln(params, f"enc.{i}.ln_ffn", h)
    out = nm.add(h, _ffn(params, f"enc.{i}.ffn", hn))
    return fuse_site(out, adapters, site_ffn, h)


def encode(params, adapters, fused, config):
    """Encoder stack over a fused input; returns [B,S,d_model] after final layernorm."""
    S = fused.embeddings.shape[1]
    if S > config.max_seq_len:
        raise SequenceTooLong(f"input length {S} exceeds max_seq_len {config.max_seq_len}")
    bias = key_padding_bias(fused.mask)
    x = fused.embeddings
    for i in range(config.n_enc_layers):
        x = encoder_layer(params, adapters, i, x, bias, config.n_heads)
    return _ln(params, "enc.ln_final", x)


def embed_tokens(params, ids):
    ids = np.asarray(ids, dtype=np.int64)
    T = ids.shape[-1]
    tok = nm.take_rows(params["embed.tok"], ids)
    pos = nm.select(params["embed.pos"], slice(0, T))
    return nm.add(tok, pos)


def decode(params, adapters, enc_out, enc_mask, prefix_ids, config):
    """Teacher-forced decoder logits [B,T,vocab] for ``prefix_ids`` (each starting with BOS)."""
    prefix_ids = np.atleast_2d(np.asarray(prefix_ids, dtype=np.int64))
    B, T = prefix_ids.shape
    if T > config.max_seq_len:
        raise SequenceTooLong(f"decoder prefix {T} exceeds max_seq_len {config.max_seq_len}")
    if T == 0 or np.any(prefix_ids[:, 0] != BOS):
        raise ValueError("decoder prefix must start with BOS")
    self_bias = causal_bias(T)
    cross_bias = key_padding_bias(enc_mask)
    x = embed_tokens(params, prefix_ids)
    for i in range(config.n_dec_layers):
        xn = _ln(params, f"dec.{i}.ln_self", x)
        h = nm.add(x, attention(params, f"dec.{i}.self", xn, xn, self_bias, config.n_heads))
        h = fuse_site(h, adapters, AdapterSiteId("dec", i, "attn"), x)
        hn = _ln(params, f"dec.{i}.ln_cross", h)
        h2 = nm.add(h, attention(params, f"dec.{i}.cross", hn, enc_out, cross_bias, config.n_heads))
        h2n = _ln(params, f"dec.{i}.ln_ffn", h2)
        out = nm.add(h2, _ffn(params, f"dec.{i}.ffn", h2n))
        x = fuse_site(out, adapters, AdapterSiteId("dec", i, "ffn"), h2)
    x = _ln(params, "dec.ln_final", x)
    return nm.matmul(x, nm.transpose(params["embed.tok"], (1, 0)))


# ---------------------------------------------------------------- parameter accounting

def analytic_param_count(config):
    """Closed-form backbone size (embeddings, stacks, prefix nets)."""
    d, f, V = config.d_model, config.d_ff, config.vocab_size
    ln = 2 * d
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    enc = config.n_enc_layers * (2 * ln + attn + ffn) + ln
    dec = config.n_dec_layers * (3 * ln + 2 * attn + ffn) + ln
    prefix = (config.d_audio + 1) * d + (config.d_video + 1) * d
    return V * d + config.max_seq_len * d + enc + dec + prefix


def analytic_adapter_count(config, n_modalities=3):
    r = config.adapter_rank
    n_sites = 2 * (config.n_enc_layers + config.n_dec_layers)
    return n_modalities * n_sites * (2 * config.d_model * r + r * r)


def count_params(params, adapters=None, mode="flora"):
    """Frozen vs trainable parameter counts.

    In adapter mode the trainable set is adapters, layernorm gains/biases and
    prefix networks; in ``fft`` mode every backbone parameter is trainable.
    """
    n_adapter = adapters.param_count() if adapters is not None else 0
    n_ln = n_prefix = n_other = 0
    for path, t in params.items():
        if is_layernorm(path):
            n_ln += t.data.size
        elif is_prefix(path):
            n_prefix += t.data.size
        else:
            n_other += t.data.size
    if mode == "fft":
        trainable, frozen = n_ln + n_prefix + n_other + n_adapter, 0
    elif mode == "frozen":
        trainable, frozen = n_adapter, n_ln + n_prefix + n_other
    else:
        trainable, frozen = n_adapter + n_ln + n_prefix, n_other
    total = trainable + frozen
    return {
        "frozen_count": int(frozen),
        "trainable_count": int(trainable),
        "fraction": trainable / total if total else 0.0,
        "adapter_count": int(n_adapter),
        "layernorm_count": int(n_ln),
        "prefix_count": int(n_prefix),
    }
