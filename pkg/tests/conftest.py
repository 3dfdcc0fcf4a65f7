import numpy as np
import pytest

from flora.backbone import ModelConfig, init_backbone
from flora.data import D_AUDIO, D_VIDEO, FIRST_FILLER, MARKER, Sample

_ACCEPTANCE = []


def record_acceptance(number, passed, detail):
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}: {detail}"
    _ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    return record_acceptance


def tiny_config(**kw):
    base = dict(d_model=8, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ff=16,
                vocab_size=64, max_seq_len=16, adapter_rank=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    config = tiny_config()
    return config, init_backbone(config, 0)


def random_sample(rng, i=0, audio=True, video=True, length=None, label=None):
    n = int(rng.integers(3, 7)) if length is None else length
    text = rng.integers(FIRST_FILLER, 64, size=n).tolist()
    if rng.random() < 0.5:
        text[int(rng.integers(0, n))] = MARKER
    return Sample(id=f"r{i:04d}", text=text,
                  audio=rng.normal(size=D_AUDIO) if audio else None,
                  video=rng.normal(size=D_VIDEO) if video else None,
                  label=int(rng.integers(0, 2)) if label is None else label)
