import struct

import numpy as np
import pytest

from flora.adapters import ALL_MODALITIES, Modality, init_adapters
from flora.backbone import BOS, decode, encode, init_backbone
from flora.checkpoint import (CheckpointError, adapter_bytes, backbone_bytes, load_adapter_file,
                              load_adapters, load_backbone, read_backbone, save_adapters,
                              save_backbone)
from flora.frontends import build_batch

from conftest import random_sample, tiny_config


def perturbed_adapters(config, seed=0):
    adapters = init_adapters(config, ALL_MODALITIES, seed)
    rng = np.random.default_rng(seed)
    for t in adapters.tensors().values():
        t.data = t.data + rng.normal(scale=0.3, size=t.data.shape)
    return adapters


def logits(params, config, adapters, samples):
    fused = build_batch(params, samples, config)
    enc = encode(params, adapters, fused, config)
    return decode(params, adapters, enc, fused.mask, [[BOS, 3]] * len(samples), config).data


def test_backbone_round_trip_is_byte_identical(tmp_path):
    config = tiny_config()
    params = init_backbone(config, 0)
    p1, p2 = tmp_path / "a.flbb", tmp_path / "b.flbb"
    save_backbone(params, config, p1)
    cfg2, loaded = load_backbone(p1)
    assert cfg2 == config
    save_backbone(loaded, cfg2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_adapter_round_trip_and_logits(tmp_path):
    config = tiny_config()
    params = init_backbone(config, 0)
    adapters = perturbed_adapters(config)
    paths = save_adapters(adapters, tmp_path / "a")
    assert sorted(p.rsplit("/", 1)[-1] for p in paths) == ["audio.flra", "text.flra", "video.flra"]
    loaded = load_adapters(paths, config)
    again = save_adapters(loaded, tmp_path / "b")
    for p, q in zip(paths, again):
        assert open(p, "rb").read() == open(q, "rb").read()
    s = [random_sample(np.random.default_rng(1), i) for i in range(1)]
    np.testing.assert_allclose(logits(params, config, loaded, s),
                               logits(params, config, adapters, s), rtol=0, atol=1e-6)


def test_adapter_header_layout():
    config = tiny_config()
    blob = adapter_bytes(init_adapters(config, {Modality.TEXT}, 0), Modality.TEXT)
    assert blob[:4] == b"FLRA"
    assert struct.unpack("<H4I", blob[4:22]) == (1, 8, 2, 4, 0)   # d, rank, sites, gelu
    n = struct.unpack("<H", blob[22:24])[0]
    assert blob[24:24 + n] == b"text/dec.0.attn"   # sites in sorted order
    paths = ["dec.0.attn", "dec.0.ffn", "enc.0.attn", "enc.0.ffn"]
    strings = sum(2 + len("text/" + p) for p in paths)
    assert len(blob) == 22 + strings + 4 * 4 * (8 * 2 + 2 * 2 + 2 * 8)


def test_backbone_header_layout():
    config = tiny_config()
    blob = backbone_bytes(init_backbone(config, 0), config, ["embed.tok"])
    assert blob[:4] == b"FLBB" and struct.unpack("<H", blob[4:6]) == (1,)
    fields = struct.unpack("<12I", blob[6:54])
    assert fields == (8, 1, 1, 2, 16, 64, 16, 256, 512, 2, 0, 1)
    assert len(blob) == 54 + 2 + len("embed.tok") + 4 + 8 + 4 * 64 * 8


@pytest.mark.parametrize("cut", [3, 10, 30, -1])
def test_truncated_files_rejected(tmp_path, cut):
    config = tiny_config()
    p = tmp_path / "x.flra"
    blob = adapter_bytes(init_adapters(config, {Modality.AUDIO}, 0), Modality.AUDIO)
    p.write_bytes(blob[:cut])
    with pytest.raises(CheckpointError, match="truncated|magic"):
        load_adapter_file(p, config)


def test_bad_magic_version_and_trailing(tmp_path):
    config = tiny_config()
    params = init_backbone(config, 0)
    blob = backbone_bytes(params, config)
    p = tmp_path / "b.flbb"
    p.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_backbone(p)
    p.write_bytes(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(CheckpointError, match="version"):
        read_backbone(p)
    p.write_bytes(blob + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_backbone(p)


def test_dimension_mismatch(tmp_path):
    config = tiny_config()
    paths = save_adapters(init_adapters(config, {Modality.AUDIO}, 0), tmp_path)
    with pytest.raises(CheckpointError, match="rank"):
        load_adapter_file(paths[0], tiny_config(adapter_rank=3))
    with pytest.raises(CheckpointError, match="sites"):
        load_adapter_file(paths[0], tiny_config(n_enc_layers=2))
    save_backbone(init_backbone(config, 0), config, tmp_path / "b.flbb")
    with pytest.raises(CheckpointError):
        load_backbone(tmp_path / "b.flbb", tiny_config(d_ff=32))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_backbone(tmp_path / "nope.flbb")


def test_partial_backbone_needs_base(tmp_path):
    config = tiny_config()
    save_backbone(init_backbone(config, 0), config, tmp_path / "p.flbb", ["embed.tok"])
    _, arrays = read_backbone(tmp_path / "p.flbb")
    assert list(arrays) == ["embed.tok"]
    with pytest.raises(CheckpointError, match="missing"):
        load_backbone(tmp_path / "p.flbb")
