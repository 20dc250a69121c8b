"""Attention-sink measurement and the gated-vs-ungated training ablation.

The sink diagnostic averages, per layer and head, the post-softmax
attention mass that query rows of the first sample place on the stream's
first token. The ablation trains matched models (identical init and data
order per seed; the ungated variant simply skips the gate multiply, i.e.
gate = 1) and writes the sink trajectories as CSV plus an SVG overlay.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ModelParameters, forward
from .packing import PackedSequence
from .text import ByteTokenizer
from .training import TrainConfig, train_stage
from . import tensor as T

SINK_CSV_TAG = "# capvit-sink v1"
ABLATION_CSV_TAG = "# capvit-ablation v1"
ABLATION_COLUMNS = ("variant", "seed", "step", "loss", "sink_mass")


def column0_mass(probs: np.ndarray, query_rows: np.ndarray) -> np.ndarray:
    """Per-head mean attention weight on stream token 0 over `query_rows`.

    probs: [heads, n, n] post-softmax attention of one layer.
    """
    if query_rows.size == 0:
        raise ValueError("no query rows")
    return probs[:, query_rows, 0].mean(axis=1)


@dataclass
class SinkReport:
    masses: np.ndarray   # [layers, heads]
    mean: float
    step: int | str = "n/a"


def sink_mass(packed: PackedSequence, params: ModelParameters,
              step="n/a") -> SinkReport:
    """Forward with attention capture; mass on token 0 from all non-Pad
    query rows of the first sample, per layer and head."""
    with T.no_grad():
        res = forward(params, packed, capture_attention=True)
    rows = np.flatnonzero(packed.sample_ids == 0)
    masses = np.stack([column0_mass(p, rows) for p in res.attentions])
    return SinkReport(masses=masses, mean=float(masses.mean()), step=step)


def write_sink_csv(report: SinkReport, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(SINK_CSV_TAG + "\n")
        w = csv.writer(f)
        w.writerow(("layer", "head", "mass"))
        for layer in range(report.masses.shape[0]):
            for head in range(report.masses.shape[1]):
                w.writerow((layer, head, f"{report.masses[layer, head]:.10g}"))


# ---------------------------------------------------------------------------
# gating ablation
# ---------------------------------------------------------------------------

def gating_ablation(samples, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    seeds, tokenizer: ByteTokenizer | None = None,
                    log_fn=None) -> list[dict]:
    """Train gated/ungated pairs per seed; rows of
    (variant, seed, step, loss, sink_mass)."""
    seeds = list(seeds)
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    tokenizer = tokenizer or ByteTokenizer(model_cfg.vocab)
    rows = []
    for variant in ("gated", "ungated"):
        cfg = copy.deepcopy(model_cfg)
        cfg.gate_enabled = variant == "gated"
        for seed in seeds:
            tcfg = copy.deepcopy(train_cfg)
            tcfg.seed = int(seed)
            params = ModelParameters(cfg, seed=int(seed))
            history = train_stage(samples, params, tcfg, tokenizer,
                                  collect_attention_every=tcfg.sink_every,
                                  log_fn=log_fn)
            for m in history:
                rows.append({"variant": variant, "seed": int(seed),
                             "step": m.step, "loss": m.loss,
                             "sink_mass": m.sink_mass_mean})
    return rows


def write_ablation_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(ABLATION_CSV_TAG + "\n")
        w = csv.writer(f)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            sink = "" if r["sink_mass"] is None else f"{r['sink_mass']:.10g}"
            w.writerow((r["variant"], r["seed"], r["step"],
                        f"{r['loss']:.10g}", sink))


def read_ablation_csv(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
        if first != ABLATION_CSV_TAG:
            raise ValueError(f"{path}: unexpected format tag {first!r}")
        reader = csv.DictReader(f)
        for rec in reader:
            out.append({"variant": rec["variant"], "seed": int(rec["seed"]),
                        "step": int(rec["step"]), "loss": float(rec["loss"]),
                        "sink_mass": float(rec["sink_mass"]) if rec["sink_mass"] else None})
    return out


def plot_sink_overlay(rows, path):
    """SVG overlay of sink-mass-vs-step, one line per (variant, seed)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    styles = {"gated": dict(color="tab:blue", linestyle="-"),
              "ungated": dict(color="tab:red", linestyle="--")}
    seen = set()
    for variant in ("gated", "ungated"):
        for seed in sorted({r["seed"] for r in rows if r["variant"] == variant}):
            pts = [(r["step"], r["sink_mass"]) for r in rows
                   if r["variant"] == variant and r["seed"] == seed
                   and r["sink_mass"] is not None]
            if not pts:
                continue
            xs, ys = zip(*pts)
            label = variant if variant not in seen else None
            seen.add(variant)
            ax.plot(xs, ys, alpha=0.8, label=label, **styles[variant])
    ax.set_xlabel("step")
    ax.set_ylabel("mean attention mass on first token")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def final_sink_means(rows) -> dict:
    """Mean over seeds of each variant's last recorded sink mass."""
    out = {}
    for variant in ("gated", "ungated"):
        finals = []
        for seed in sorted({r["seed"] for r in rows if r["variant"] == variant}):
            recs = [r for r in rows if r["variant"] == variant
                    and r["seed"] == seed and r["sink_mass"] is not None]
            if recs:
                finals.append(max(recs, key=lambda r: r["step"])["sink_mass"])
        out[variant] = float(np.mean(finals)) if finals else float("nan")
    return out
