import numpy as np
import pytest

from capvit.imaging import PatchGrid
from capvit.model import ModelConfig, ModelParameters
from capvit.packing import build_sequence, pack
from capvit.text import ByteTokenizer

TOK = ByteTokenizer()


def tiny_config(**overrides) -> ModelConfig:
    base = dict(layers=2, dim=32, heads=2, ffn_width=48, vocab=258,
                patch_size=4, max_tokens=2048, drop_path_rate=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def random_sample_seq(rng, tok=TOK, max_grid=3, max_text=12, patch_size=4,
                      ref="s"):
    """A single-sample sequence with random patches and random text ids."""
    rows = int(rng.integers(1, max_grid + 1))
    cols = int(rng.integers(1, max_grid + 1))
    n_txt = int(rng.integers(0, max_text + 1))
    patches = rng.random((rows * cols, 3 * patch_size * patch_size))
    text_ids = [int(t) for t in rng.integers(0, 256, size=n_txt)]
    grid = PatchGrid(rows, cols, patch_size)
    return build_sequence(patches, grid, text_ids, eos_id=tok.eos_id, ref=ref)


def random_pack(rng, n_samples, max_len, tok=TOK, **kw):
    seqs = [random_sample_seq(rng, tok, ref=f"s{i}", **kw)
            for i in range(n_samples)]
    packs = pack(seqs, max_len, tok.pad_id)
    return packs, seqs


def finite_diff(loss_fn, param, index, step=1e-5):
    """Central finite difference of loss_fn() wrt one coordinate of
    param.data (restores the original value)."""
    orig = param.data.flat[index]
    param.data.flat[index] = orig + step
    up = loss_fn()
    param.data.flat[index] = orig - step
    down = loss_fn()
    param.data.flat[index] = orig
    return (up - down) / (2 * step)


def grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    return abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
