"""Training loop: warmup-cosine schedule, global-norm clipping, AdamW with
decoupled weight decay, and the two-stage recipe (fixed-resolution stage,
native-aspect-ratio stage).

Every step packs samples to a token budget, runs one packed forward, and
applies one optimizer update. All randomness (data order per epoch,
drop-path draws per step) is derived from the config seed plus the epoch
or step index, so interrupted runs resume exactly.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imaging import ImageSample, patchify, resize_fixed, resize_native
from .model import ModelConfig, ModelParameters, forward
from .packing import pack, build_sequence
from .text import ByteTokenizer

METRICS_COLUMNS = ("step", "loss", "lr", "grad_norm", "clip_factor", "sink_mass_mean")
METRICS_TAG = "# capvit-metrics v1"
OPT_MAGIC = b"CVOP"
OPT_VERSION = 1


@dataclass
class TrainConfig:
    stage: str = "s1"                    # "s1" fixed-res, "s2" native-res
    total_steps: int = 2000
    batch_tokens: int = 512              # packing budget per step
    peak_lr: float = 1e-3
    min_lr: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_ratio: float = 0.007          # fraction of total steps
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    adam_eps: float = 1e-8
    seed: int = 0
    side: int = 224                      # s1 square resolution
    min_tokens: int = 16                 # s2 visual-token budget
    max_tokens: int = 1024
    checkpoint_every: int = 500
    sink_every: int = 50

    def __post_init__(self):
        if self.stage not in ("s1", "s2"):
            raise ValueError(f"stage must be s1 or s2, got {self.stage!r}")
        if self.min_lr > self.peak_lr:
            raise ValueError("min_lr must be <= peak_lr")
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0")
        if self.total_steps < 1 or self.batch_tokens < 1:
            raise ValueError("total_steps and batch_tokens must be positive")
        self.betas = (float(self.betas[0]), float(self.betas[1]))


def lr_at(step: float, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak over warmup_ratio * total_steps, then cosine
    peak -> min_lr at total_steps. Continuous at the joint."""
    if not (0 <= step <= cfg.total_steps):
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warm = cfg.warmup_ratio * cfg.total_steps
    if step < warm:
        return cfg.peak_lr * step / warm
    span = cfg.total_steps - warm
    progress = (step - warm) / span if span > 0 else 1.0
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads, cap: float) -> float:
    """Scale all grads in place so the global L2 norm is <= cap; returns the
    factor applied (1.0 when already under the cap)."""
    if cap <= 0:
        raise ValueError("cap must be > 0")
    total = 0.0
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm <= cap or norm == 0.0:
        return 1.0
    factor = cap / norm
    for g in grads:
        g *= g.dtype.type(factor)
    return factor


class OptimizerState:
    """Per-parameter AdamW moment buffers plus the step counter."""

    def __init__(self, params: ModelParameters):
        self.m = {name: np.zeros_like(p.data) for name, p in params.named()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.named()}
        self.step = 0


def adamw_step(params: ModelParameters, state: OptimizerState, lr: float,
               cfg: TrainConfig):
    """Decoupled-weight-decay Adam with bias correction. Parameters without
    a gradient are skipped; norms and attention gates are never decayed."""
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.named():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay and ModelParameters.decays(name):
            update = update + cfg.weight_decay * p.data
        p.data = p.data - p.data.dtype.type(lr) * update.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# stage loop
# ---------------------------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    loss: float
    lr: float
    grad_norm: float
    clip_factor: float
    sink_mass_mean: float | None = None


def preprocess_stage(sample: ImageSample, cfg: TrainConfig,
                     patch_size: int) -> ImageSample:
    if cfg.stage == "s1":
        return resize_fixed(sample, cfg.side, patch_size)
    return resize_native(sample, cfg.min_tokens, cfg.max_tokens, patch_size)


def build_stage_sequences(samples, cfg: TrainConfig, model_cfg: ModelConfig,
                          tokenizer: ByteTokenizer):
    seqs = []
    for s in samples:
        prepped = preprocess_stage(s, cfg, model_cfg.patch_size)
        patches, grid = patchify(prepped.pixels, model_cfg.patch_size)
        seqs.append(build_sequence(patches, grid, tokenizer.encode(s.caption),
                                   eos_id=tokenizer.eos_id, ref=s.id))
    return seqs


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A, int(epoch)]))


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xD409, int(step)]))


def _sink_mass_mean(attentions, packed) -> float:
    from .diagnostics import column0_mass
    rows = np.flatnonzero(packed.sample_ids == 0)
    masses = [column0_mass(probs, rows) for probs in attentions]
    return float(np.mean([m.mean() for m in masses]))


class MetricsWriter:
    def __init__(self, path):
        self.path = path
        self._file = None
        if path is not None:
            self._file = open(path, "w", newline="", encoding="utf-8")
            self._file.write(METRICS_TAG + "\n")
            self._writer = csv.writer(self._file)
            self._writer.writerow(METRICS_COLUMNS)

    def write(self, m: StepMetrics):
        if self._file is None:
            return
        sink = "" if m.sink_mass_mean is None else f"{m.sink_mass_mean:.10g}"
        self._writer.writerow([m.step, f"{m.loss:.10g}", f"{m.lr:.10g}",
                               f"{m.grad_norm:.10g}", f"{m.clip_factor:.10g}", sink])
        self._file.flush()

    def close(self):
        if self._file is not None:
            self._file.close()


def train_stage(samples, params: ModelParameters, cfg: TrainConfig,
                tokenizer: ByteTokenizer, *, metrics_path=None,
                checkpoint_fn=None, opt_state: OptimizerState | None = None,
                start_step: int = 0, collect_attention_every: int | None = None,
                log_fn=None) -> list[StepMetrics]:
    """Run (or resume) one training stage over `samples`.

    checkpoint_fn(step, params, opt_state) is called every
    cfg.checkpoint_every steps and at the end. Raises RuntimeError on a
    non-finite loss. Returns the per-step metrics.
    """
    if not samples:
        raise ValueError("empty dataset")
    model_cfg = params.cfg
    seqs = build_stage_sequences(samples, cfg, model_cfg, tokenizer)
    for s in seqs:
        if len(s) > cfg.batch_tokens:
            raise ValueError(f"sample {s.refs[0]!r} needs {len(s)} tokens, "
                             f"over the {cfg.batch_tokens} budget")
    state = opt_state if opt_state is not None else OptimizerState(params)
    sink_every = collect_attention_every or cfg.sink_every
    writer = MetricsWriter(metrics_path)
    history = []
    step = start_step
    epoch = 0
    counter = 0
    try:
        while step < cfg.total_steps:
            order = _epoch_rng(cfg.seed, epoch).permutation(len(seqs))
            packs = pack([seqs[i] for i in order], cfg.batch_tokens, tokenizer.pad_id)
            epoch += 1
            for packed in packs:
                counter += 1
                if counter <= start_step:
                    continue  # fast-forward on resume
                step += 1
                want_sink = sink_every > 0 and (step % sink_every == 0 or step == 1)
                res = forward(params, packed, train_mode=True,
                              rng=_step_rng(cfg.seed, step),
                              capture_attention=want_sink)
                loss = T.cross_entropy_masked(res.logits, packed.targets(),
                                              packed.loss_mask)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise RuntimeError(f"non-finite loss {loss_val} at step {step}")
                params.zero_grads()
                loss.backward()
                grads = [p.grad for _, p in params.named() if p.grad is not None]
                norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                     for g in grads))
                factor = clip_global_norm(grads, cfg.grad_clip)
                lr = lr_at(step, cfg)
                adamw_step(params, state, lr, cfg)
                sink = _sink_mass_mean(res.attentions, packed) if want_sink else None
                m = StepMetrics(step=step, loss=loss_val, lr=lr, grad_norm=norm,
                                clip_factor=factor, sink_mass_mean=sink)
                history.append(m)
                writer.write(m)
                if log_fn is not None:
                    log_fn(m)
                if checkpoint_fn is not None and step % cfg.checkpoint_every == 0:
                    checkpoint_fn(step, params, state)
                if step >= cfg.total_steps:
                    break
        if checkpoint_fn is not None and (cfg.total_steps % cfg.checkpoint_every != 0
                                          or start_step >= cfg.total_steps):
            checkpoint_fn(cfg.total_steps, params, state)
    finally:
        writer.close()
    return history


# ---------------------------------------------------------------------------
# optimizer-state blob
# ---------------------------------------------------------------------------

def save_opt_state(path, state: OptimizerState):
    with open(path, "wb") as f:
        f.write(OPT_MAGIC)
        f.write(struct.pack("<I", OPT_VERSION))
        f.write(struct.pack("<Q", state.step))
        f.write(struct.pack("<I", len(state.m)))
        for name in state.m:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", state.m[name].size))
            f.write(np.ascontiguousarray(state.m[name], dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(state.v[name], dtype="<f4").tobytes())


def load_opt_state(path, params: ModelParameters) -> OptimizerState:
    state = OptimizerState(params)
    with open(path, "rb") as f:
        if f.read(4) != OPT_MAGIC:
            raise ValueError(f"{path}: not an optimizer state blob")
        (version,) = struct.unpack("<I", f.read(4))
        if version != OPT_VERSION:
            raise ValueError(f"{path}: unsupported optimizer blob version {version}")
        (state.step,) = struct.unpack("<Q", f.read(8))
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (size,) = struct.unpack("<Q", f.read(8))
            if name not in state.m or state.m[name].size != size:
                raise ValueError(f"{path}: stale optimizer entry {name!r}")
            shape = state.m[name].shape
            dt = state.m[name].dtype
            state.m[name] = np.frombuffer(f.read(4 * size), dtype="<f4").reshape(shape).astype(dt)
            state.v[name] = np.frombuffer(f.read(4 * size), dtype="<f4").reshape(shape).astype(dt)
    return state
