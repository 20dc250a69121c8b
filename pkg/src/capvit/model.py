"""The transformer: patch/text embeddings, gated-attention blocks with
multimodal rotary positions, layer-scale/drop-path residuals, final layer
norm, and an untied LM head.

Block structure (pre-norm):
    x = x + drop_path(ls_attn * gated_attention(ln1(x)))
    x = x + drop_path(ls_ffn  * glu_ffn(ln2(x)))

gated_attention(h) = sigmoid(h @ gate_w + gate_b) * attn(h): the gate is
computed from the block's (normed) input and multiplies the attention
output after its projection, elementwise over the model dim.

Rotary positions: each head-dim pair j rotates by coord * theta^(-2j/hd)
where coord is the (t, h, w) component assigned to j's section. Text
tokens carry t = h = w, so they reduce to ordinary 1D RoPE.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .packing import PackedSequence, TokenKind, build_sequence, prefix_lm_mask
from .imaging import ImageSample, patchify

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    layers: int = 4
    dim: int = 128
    heads: int = 4
    ffn_width: int = 352
    vocab: int = 258
    patch_size: int = 16
    rope_theta: float = 10000.0
    mrope_sections: tuple[int, int, int] | None = None  # (t, h, w) pairs
    layer_scale_init: float = 0.1
    drop_path_rate: float = 0.0
    max_tokens: int = 16384
    gate_enabled: bool = True
    pixel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if min(self.layers, self.dim, self.heads, self.ffn_width, self.vocab,
               self.patch_size, self.max_tokens) < 1:
            raise ValueError("all size fields must be positive")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary pairs")
        if self.mrope_sections is None:
            self.mrope_sections = default_mrope_sections(self.head_dim)
        self.mrope_sections = tuple(int(s) for s in self.mrope_sections)
        if len(self.mrope_sections) != 3 or sum(self.mrope_sections) != self.head_dim // 2:
            raise ValueError(f"mrope_sections {self.mrope_sections} must be 3 ints "
                             f"summing to head_dim/2 = {self.head_dim // 2}")
        if self.layer_scale_init <= 0:
            raise ValueError("layer_scale_init must be > 0")
        if not (0.0 <= self.drop_path_rate < 1.0):
            raise ValueError("drop_path_rate must be in [0, 1)")
        self.pixel_mean = tuple(float(v) for v in self.pixel_mean)
        self.pixel_std = tuple(float(v) for v in self.pixel_std)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def default_mrope_sections(head_dim: int) -> tuple[int, int, int]:
    """Split head_dim/2 rotary pairs across (t, h, w) in 2:3:3 proportions,
    remainder to t."""
    pairs = head_dim // 2
    sec_h = (3 * pairs) // 8
    sec_w = (3 * pairs) // 8
    return (pairs - sec_h - sec_w, sec_h, sec_w)


def trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) resampled until inside +-2 std (deterministic per rng)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class ModelParameters:
    """Named learnable tensors in fixed declaration order."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
        d, f, hd = cfg.dim, cfg.ffn_width, cfg.head_dim
        p2 = 3 * cfg.patch_size * cfg.patch_size
        tn = lambda *shape: trunc_normal(rng, shape, 0.02, self.dtype)
        zeros = lambda *shape: np.zeros(shape, dtype=self.dtype)
        ones = lambda *shape: np.ones(shape, dtype=self.dtype)

        t = {}
        t["patch_proj.w"] = tn(p2, d)
        t["patch_proj.b"] = zeros(d)
        t["tok_emb"] = tn(cfg.vocab, d)
        for i in range(cfg.layers):
            pre = f"blocks.{i}."
            t[pre + "ln1.g"] = ones(d)
            t[pre + "ln1.b"] = zeros(d)
            t[pre + "attn.wq"] = tn(d, d)
            t[pre + "attn.bq"] = zeros(d)
            t[pre + "attn.wk"] = tn(d, d)
            t[pre + "attn.bk"] = zeros(d)
            t[pre + "attn.wv"] = tn(d, d)
            t[pre + "attn.bv"] = zeros(d)
            t[pre + "attn.wo"] = tn(d, d)
            t[pre + "attn.bo"] = zeros(d)
            t[pre + "attn.gate_w"] = tn(d, d)
            t[pre + "attn.gate_b"] = zeros(d)
            t[pre + "ls_attn"] = np.full(d, cfg.layer_scale_init, dtype=self.dtype)
            t[pre + "ln2.g"] = ones(d)
            t[pre + "ln2.b"] = zeros(d)
            t[pre + "ffn.w_gate"] = tn(d, f)
            t[pre + "ffn.w_up"] = tn(d, f)
            t[pre + "ffn.w_down"] = tn(f, d)
            t[pre + "ls_ffn"] = np.full(d, cfg.layer_scale_init, dtype=self.dtype)
        t["final_ln.g"] = ones(d)
        t["final_ln.b"] = zeros(d)
        t["lm_head.w"] = tn(d, cfg.vocab)
        self.tensors = {k: T.Tensor(v, requires_grad=True) for k, v in t.items()}

    def __getitem__(self, name) -> T.Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def zero_grads(self):
        for p in self.tensors.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.size for p in self.tensors.values())

    @staticmethod
    def decays(name: str) -> bool:
        """Weight-decay filter: norm affines and attention gates are exempt."""
        parts = name.split(".")
        if any(p in ("ln1", "ln2", "final_ln") for p in parts):
            return False
        if parts[-1] in ("gate_w", "gate_b") and "attn" in parts:
            return False
        return True


# ---------------------------------------------------------------------------
# rotary position tables
# ---------------------------------------------------------------------------

def rope_cos_sin(positions: np.ndarray, cfg: ModelConfig, dtype):
    """cos/sin tables [n, head_dim/2] from (t, h, w) coordinate triples."""
    pairs = cfg.head_dim // 2
    sec_t, sec_h, sec_w = cfg.mrope_sections
    comp = np.concatenate([np.zeros(sec_t, np.int64),
                           np.ones(sec_h, np.int64),
                           np.full(sec_w, 2, np.int64)])
    inv_freq = cfg.rope_theta ** (-2.0 * np.arange(pairs) / cfg.head_dim)
    coords = positions[:, comp].astype(np.float64)          # [n, pairs]
    angles = coords * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: T.Tensor          # [n, vocab]
    hidden: T.Tensor          # [n, dim], output of the final layer norm
    attentions: list = field(default_factory=list)  # per layer [heads, n, n]


def normalize_patches(patches: np.ndarray, cfg: ModelConfig, dtype) -> np.ndarray:
    """[0,1] patch vectors -> standardized, per channel."""
    mean = np.asarray(cfg.pixel_mean)
    std = np.asarray(cfg.pixel_std)
    shaped = patches.reshape(patches.shape[0], -1, 3)
    return ((shaped - mean) / std).reshape(patches.shape).astype(dtype)


def patch_embed(patches: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Linear projection of flattened patches (conv-equivalent on
    non-overlapping patches); no absolute position embedding."""
    if patches.shape[1] != w.shape[0]:
        raise ValueError(f"patch width {patches.shape[1]} does not match projection {w.shape[0]}")
    return T.add(T.matmul(patches, w), b)


def gated_attention(h: T.Tensor, params: ModelParameters, layer: int,
                    mask: np.ndarray, cos, sin, capture=None) -> T.Tensor:
    """Multi-head attention with rotary q/k and a sigmoid output gate."""
    cfg = params.cfg
    pre = f"blocks.{layer}.attn."
    n, d = h.shape
    heads, hd = cfg.heads, cfg.head_dim

    def split(x):
        return T.transpose(T.reshape(x, (n, heads, hd)), (1, 0, 2))

    q = split(T.add(T.matmul(h, params[pre + "wq"]), params[pre + "bq"]))
    k = split(T.add(T.matmul(h, params[pre + "wk"]), params[pre + "bk"]))
    v = split(T.add(T.matmul(h, params[pre + "wv"]), params[pre + "bv"]))
    # fold the 1/sqrt(hd) score scaling into q (cheaper than scaling n x n)
    q = T.scale(T.rope_rotate(q, cos, sin), 1.0 / np.sqrt(hd))
    k = T.rope_rotate(k, cos, sin)
    scores = T.matmul(q, T.transpose(k, (0, 2, 1)))
    probs = T.softmax_lastdim(scores, mask=mask)
    if capture is not None:
        capture.append(probs.data.copy())
    att = T.matmul(probs, v)
    merged = T.reshape(T.transpose(att, (1, 0, 2)), (n, d))
    out = T.add(T.matmul(merged, params[pre + "wo"]), params[pre + "bo"])
    if not cfg.gate_enabled:
        return out
    gate = T.sigmoid(T.add(T.matmul(h, params[pre + "gate_w"]), params[pre + "gate_b"]))
    return T.mul(gate, out)


def _ffn(h: T.Tensor, params: ModelParameters, layer: int) -> T.Tensor:
    pre = f"blocks.{layer}.ffn."
    gate = T.silu(T.matmul(h, params[pre + "w_gate"]))
    up = T.matmul(h, params[pre + "w_up"])
    return T.matmul(T.mul(gate, up), params[pre + "w_down"])


def _residual(x: T.Tensor, branch: T.Tensor, rate: float, train_mode: bool, rng):
    """Drop-path residual add: one Bernoulli keep per branch per forward,
    survivor scaled by 1/(1-rate); identity in eval mode."""
    if train_mode and rate > 0.0:
        if rng.random() < rate:
            return x
        branch = T.scale(branch, 1.0 / (1.0 - rate))
    return T.add(x, branch)


def block_forward(x: T.Tensor, params: ModelParameters, layer: int,
                  mask: np.ndarray, cos, sin, train_mode: bool = False,
                  rng=None, capture=None) -> T.Tensor:
    cfg = params.cfg
    pre = f"blocks.{layer}."
    h = T.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"], LN_EPS)
    a = T.mul(params[pre + "ls_attn"], gated_attention(h, params, layer, mask, cos, sin, capture))
    x = _residual(x, a, cfg.drop_path_rate, train_mode, rng)
    h2 = T.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"], LN_EPS)
    f = T.mul(params[pre + "ls_ffn"], _ffn(h2, params, layer))
    return _residual(x, f, cfg.drop_path_rate, train_mode, rng)


def forward(params: ModelParameters, packed: PackedSequence, *,
            train_mode: bool = False, rng=None,
            capture_attention: bool = False) -> ForwardResult:
    """Full forward over one packed stream: embeddings, blocks, final LN,
    LM head. Logits at every position; the loss selects text targets."""
    cfg = params.cfg
    n = len(packed)
    if n > cfg.max_tokens:
        raise ValueError(f"sequence length {n} exceeds context budget {cfg.max_tokens}")
    if train_mode and cfg.drop_path_rate > 0.0 and rng is None:
        raise ValueError("train_mode with drop path needs an rng")
    dtype = params.dtype

    img_idx = np.flatnonzero(packed.kinds == TokenKind.IMAGE)
    txt_idx = np.flatnonzero(packed.kinds != TokenKind.IMAGE)  # text + pad
    parts = []
    if img_idx.size:
        patch_in = T.Tensor(normalize_patches(
            packed.patches[packed.token_ids[img_idx]], cfg, dtype))
        img_emb = patch_embed(patch_in, params["patch_proj.w"], params["patch_proj.b"])
        parts.append(T.scatter_rows(img_emb, img_idx, n))
    if txt_idx.size:
        tok_emb = T.gather_rows(params["tok_emb"], packed.token_ids[txt_idx])
        parts.append(T.scatter_rows(tok_emb, txt_idx, n))
    x = parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])

    mask = prefix_lm_mask(packed)
    cos, sin = rope_cos_sin(packed.positions, cfg, dtype)
    attentions = [] if capture_attention else None
    for layer in range(cfg.layers):
        x = block_forward(x, params, layer, mask, cos, sin,
                          train_mode=train_mode, rng=rng, capture=attentions)
    hidden = T.layer_norm(x, params["final_ln.g"], params["final_ln.b"], LN_EPS)
    logits = T.matmul(hidden, params["lm_head.w"])
    return ForwardResult(logits=logits, hidden=hidden,
                         attentions=attentions or [])


def encode_image(sample: ImageSample, params: ModelParameters) -> np.ndarray:
    """Vision-encoder mode: image-only sequence (full attention among its
    patches), returns final-LN hidden states; the LM head is not applied."""
    patches, grid = patchify(sample.pixels, params.cfg.patch_size)
    seq = build_sequence(patches, grid, [], eos_id=0, ref=sample.id)
    with T.no_grad():
        res = forward(params, seq)
    return res.hidden.data.copy()


# ---------------------------------------------------------------------------
# checkpoint and feature-dump formats
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CVCK"
CKPT_VERSION = 1
FEAT_MAGIC = b"CVFT"
FEAT_VERSION = 1


def save_checkpoint(path, params: ModelParameters, preprocess: dict,
                    extra: dict | None = None):
    """Versioned header, JSON config block, then named parameter tensors in
    declaration order as little-endian float32."""
    header = {"model": asdict(params.cfg), "preprocess": preprocess,
              "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params.tensors)))
        for name, p in params.named():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", p.data.ndim))
            for s in p.shape:
                f.write(struct.pack("<I", s))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Returns (params, preprocess, extra); weights are upcast to `dtype`."""
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(blen).decode("utf-8"))
        cfg_dict = dict(header["model"])
        if cfg_dict.get("mrope_sections") is not None:
            cfg_dict["mrope_sections"] = tuple(cfg_dict["mrope_sections"])
        cfg = ModelConfig(**cfg_dict)
        params = ModelParameters(cfg, seed=0, dtype=dtype)
        (count,) = struct.unpack("<I", f.read(4))
        if count != len(params.tensors):
            raise ValueError(f"{path}: parameter count mismatch")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            data = np.frombuffer(f.read(4 * int(np.prod(shape))), dtype="<f4")
            if name not in params.tensors:
                raise ValueError(f"{path}: unknown parameter {name!r}")
            if params.tensors[name].shape != shape:
                raise ValueError(f"{path}: shape mismatch for {name!r}")
            params.tensors[name].data = data.reshape(shape).astype(dtype)
    return params, header["preprocess"], header["extra"]


def save_features(path, arr: np.ndarray):
    """Binary tensor dump with a shape header (magic, version, dims)."""
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<I", FEAT_VERSION))
        f.write(struct.pack("<B", arr.ndim))
        for s in arr.shape:
            f.write(struct.pack("<Q", s))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != FEAT_MAGIC:
            raise ValueError(f"{path}: not a feature dump")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FEAT_VERSION:
            raise ValueError(f"{path}: unsupported feature version {version}")
        (ndim,) = struct.unpack("<B", f.read(1))
        shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
        return np.frombuffer(f.read(), dtype="<f4").reshape(shape).copy()
