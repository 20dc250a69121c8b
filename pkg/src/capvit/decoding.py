"""Caption generation and patch-semantics readout.

Generation builds an image-only prefix and samples text tokens until EOS
or the token limit. Two decode paths exist on purpose:

  - incremental: per-layer KV caches, one row of compute per new token
  - re-forward: rebuilds the whole sequence through model.forward each step

They must produce token-identical streams; the test suite holds them to
that. The default decode settings (temperature 1e-6, top_p 1.0, 256 new
tokens) degenerate nucleus sampling to greedy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imaging import ImageSample, patchify
from .model import (LN_EPS, ModelParameters, encode_image, forward,
                    normalize_patches, rope_cos_sin)
from .packing import build_sequence
from .text import ByteTokenizer


@dataclass
class DecodeConfig:
    temperature: float = 1e-6
    top_p: float = 1.0
    max_new_tokens: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


def sample_token(logits: np.ndarray, cfg: DecodeConfig, rng) -> int:
    """Nucleus sampling over one logit row; one rng draw per call."""
    z = logits.astype(np.float64) / cfg.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.lexsort((np.arange(p.size), -p))  # prob desc, ties by id
    if cfg.top_p < 1.0:
        cut = int(np.searchsorted(np.cumsum(p[order]), cfg.top_p)) + 1
        order = order[:cut]
    kept = p[order]
    kept /= kept.sum()
    u = rng.random()
    return int(order[min(int(np.searchsorted(np.cumsum(kept), u, side="right")),
                         order.size - 1)])


# ---------------------------------------------------------------------------
# incremental decoder (numpy fast path, eval-mode math only)
# ---------------------------------------------------------------------------

def _rope_np(x, cos, sin):
    c = cos.reshape((1,) * (x.ndim - 2) + cos.shape)
    s = sin.reshape((1,) * (x.ndim - 2) + sin.shape)
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * c - xo * s
    out[..., 1::2] = xe * s + xo * c
    return out


class _Decoder:
    """KV-cached evaluator over [image prefix, generated text]."""

    def __init__(self, params: ModelParameters, patches: np.ndarray, grid):
        self.params = params
        self.cfg = params.cfg
        self.k_cache = [None] * self.cfg.layers
        self.v_cache = [None] * self.cfg.layers
        pos = np.zeros((grid.tokens, 3), dtype=np.int64)
        hh, ww = np.divmod(np.arange(grid.tokens), grid.cols)
        pos[:, 1] = hh
        pos[:, 2] = ww
        self.text_base = int(pos.max()) + 1
        self.n_text = 0
        norm = normalize_patches(patches, self.cfg, params.dtype)
        x = norm @ params["patch_proj.w"].data + params["patch_proj.b"].data
        self.last_logits = self._run(x, pos)

    def _run(self, x, pos):
        """Push rows through every block attending to cache + themselves
        (full attention: valid for the image prefix and for single text
        rows, which see everything before them)."""
        p = self.params
        cfg = self.cfg
        rows = x.shape[0]
        heads, hd = cfg.heads, cfg.head_dim
        cos, sin = rope_cos_sin(pos, cfg, p.dtype)
        for i in range(cfg.layers):
            pre = f"blocks.{i}."
            h = T.layer_norm_np(x, p[pre + "ln1.g"].data, p[pre + "ln1.b"].data, LN_EPS)
            q = (h @ p[pre + "attn.wq"].data + p[pre + "attn.bq"].data)
            k = (h @ p[pre + "attn.wk"].data + p[pre + "attn.bk"].data)
            v = (h @ p[pre + "attn.wv"].data + p[pre + "attn.bv"].data)
            q = _rope_np(q.reshape(rows, heads, hd).transpose(1, 0, 2), cos, sin)
            q = q * q.dtype.type(1.0 / np.sqrt(hd))  # same scaling spot as forward
            k = _rope_np(k.reshape(rows, heads, hd).transpose(1, 0, 2), cos, sin)
            v = v.reshape(rows, heads, hd).transpose(1, 0, 2)
            if self.k_cache[i] is None:
                self.k_cache[i] = k
                self.v_cache[i] = v
            else:
                self.k_cache[i] = np.concatenate([self.k_cache[i], k], axis=1)
                self.v_cache[i] = np.concatenate([self.v_cache[i], v], axis=1)
            scores = q @ self.k_cache[i].swapaxes(1, 2)
            probs = T.softmax_np(scores)
            att = (probs @ self.v_cache[i]).transpose(1, 0, 2).reshape(rows, cfg.dim)
            out = att @ p[pre + "attn.wo"].data + p[pre + "attn.bo"].data
            if cfg.gate_enabled:
                gate = T.sigmoid_np(h @ p[pre + "attn.gate_w"].data
                                    + p[pre + "attn.gate_b"].data)
                out = gate * out
            x = x + p[pre + "ls_attn"].data * out
            h2 = T.layer_norm_np(x, p[pre + "ln2.g"].data, p[pre + "ln2.b"].data, LN_EPS)
            f = (T.silu_np(h2 @ p[pre + "ffn.w_gate"].data)
                 * (h2 @ p[pre + "ffn.w_up"].data)) @ p[pre + "ffn.w_down"].data
            x = x + p[pre + "ls_ffn"].data * f
        hidden = T.layer_norm_np(x, p["final_ln.g"].data, p["final_ln.b"].data, LN_EPS)
        return (hidden @ p["lm_head.w"].data)[-1]

    def push_token(self, token_id: int) -> np.ndarray:
        coord = self.text_base + self.n_text
        self.n_text += 1
        pos = np.full((1, 3), coord, dtype=np.int64)
        x = self.params["tok_emb"].data[token_id][None, :]
        self.last_logits = self._run(x, pos)
        return self.last_logits


def generate_ids(sample: ImageSample, params: ModelParameters,
                 tokenizer: ByteTokenizer, cfg: DecodeConfig,
                 incremental: bool = True) -> list[int]:
    """Sample text ids after the image prefix; stops at EOS (EOS excluded
    from the returned list) or at max_new_tokens."""
    patches, grid = patchify(sample.pixels, params.cfg.patch_size)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x5A11]))
    out: list[int] = []
    if incremental:
        dec = _Decoder(params, patches, grid)
        logits = dec.last_logits
        for _ in range(cfg.max_new_tokens):
            tok = sample_token(logits, cfg, rng)
            if tok == tokenizer.eos_id:
                break
            out.append(tok)
            logits = dec.push_token(tok)
        return out
    for _ in range(cfg.max_new_tokens):
        seq = build_sequence(patches, grid, out, eos_id=tokenizer.eos_id,
                             ref=sample.id, append_eos=False)
        with T.no_grad():
            res = forward(params, seq)
        tok = sample_token(res.logits.data[-1], cfg, rng)
        if tok == tokenizer.eos_id:
            break
        out.append(tok)
    return out


def generate(sample: ImageSample, params: ModelParameters,
             tokenizer: ByteTokenizer, cfg: DecodeConfig,
             incremental: bool = True) -> str:
    return tokenizer.decode(generate_ids(sample, params, tokenizer, cfg,
                                         incremental=incremental))


# ---------------------------------------------------------------------------
# patch-semantics readout
# ---------------------------------------------------------------------------

def patch_readout(sample: ImageSample, params: ModelParameters,
                  patch_indices, k: int) -> list[list[tuple[int, float]]]:
    """Unembed selected image-patch hidden states through the LM head.

    Returns, per requested patch, the top-k (token id, probability) pairs
    sorted by descending probability with ties broken by token id.
    """
    cfg = params.cfg
    if k < 1 or k > cfg.vocab:
        raise ValueError(f"k must be in [1, {cfg.vocab}]")
    hidden = encode_image(sample, params)
    n_patches = hidden.shape[0]
    idx = [int(i) for i in patch_indices]
    for i in idx:
        if not (0 <= i < n_patches):
            raise ValueError(f"patch index {i} outside grid of {n_patches} patches")
    logits = hidden[idx] @ params["lm_head.w"].data
    probs = T.softmax_np(logits.astype(np.float64))
    out = []
    for row in probs:
        order = np.lexsort((np.arange(row.size), -row))[:k]
        out.append([(int(t), float(row[t])) for t in order])
    return out
