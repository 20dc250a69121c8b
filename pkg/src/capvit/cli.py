"""Command-line entry point.

Subcommands: synth, train, generate, readout, encode, diag-sink,
pack-inspect. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as C
from . import diagnostics as D
from .decoding import DecodeConfig, generate, patch_readout
from .imaging import (ImageSample, load_image, load_manifest_samples,
                      patchify, resize_fixed, resize_native, save_image,
                      write_manifest)
from .model import (ModelParameters, encode_image, load_checkpoint,
                    save_checkpoint, save_features)
from .packing import build_sequence, oracle_mask, pack, prefix_lm_mask, render_mask
from .synth import synth_generate
from .text import ByteTokenizer
from .training import (OptimizerState, load_opt_state, save_opt_state,
                       train_stage)


def _parse_set(values):
    out = {}
    for item in values or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            import yaml
            out[key] = yaml.safe_load(raw)
        except Exception:
            out[key] = raw
    return out


def _load_samples(cfg: C.RunConfig):
    if cfg.data.manifest:
        return load_manifest_samples(cfg.data.manifest)
    return synth_generate(cfg.data.synth_seed, cfg.data.synth_count,
                          (cfg.data.canvas_min, cfg.data.canvas_max))


def _dtype(precision):
    return np.float64 if precision == "float64" else np.float32


def _preprocess_for(ckpt_preprocess, path):
    sample = ImageSample(pixels=load_image(path), caption="",
                         id=os.path.basename(path))
    patch = int(ckpt_preprocess.get("patch_size", 16))
    if ckpt_preprocess.get("mode") == "native":
        return resize_native(sample, int(ckpt_preprocess["min_tokens"]),
                             int(ckpt_preprocess["max_tokens"]), patch)
    return resize_fixed(sample, int(ckpt_preprocess.get("side", 224)), patch)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    samples = synth_generate(args.seed, args.count,
                             (args.canvas_min, args.canvas_max))
    img_dir = os.path.join(args.out, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for s in samples:
        rel = os.path.join("images", f"{s.id}.png")
        save_image(os.path.join(args.out, rel), s.pixels)
        records.append({"id": s.id, "image": rel, "caption": s.caption})
    write_manifest(os.path.join(args.out, "manifest.jsonl"), records)
    print(f"wrote {len(records)} samples to {args.out}")
    return 0


def cmd_train(args):
    cfg = C.load_config(args.config, _parse_set(args.set))
    stage = args.stage
    tcfg = cfg.train_for(stage)
    dtype = _dtype(cfg.precision)
    tokenizer = ByteTokenizer(cfg.model.vocab)
    samples = _load_samples(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)

    start_step = 0
    opt_state = None
    if args.resume:
        params, _, extra = load_checkpoint(args.resume, dtype=dtype)
        opt_path = args.resume + ".opt"
        opt_state = load_opt_state(opt_path, params)
        start_step = opt_state.step
        print(f"resuming from {args.resume} at step {start_step}")
    elif args.init:
        params, _, _ = load_checkpoint(args.init, dtype=dtype)
        print(f"initialized weights from {args.init}")
    elif stage == "s2" and not args.from_scratch:
        raise ValueError("stage s2 needs --init <s1 checkpoint> or --from-scratch")
    else:
        params = ModelParameters(cfg.model, seed=tcfg.seed, dtype=dtype)

    preprocess = ({"mode": "fixed", "side": tcfg.side, "patch_size": cfg.model.patch_size}
                  if stage == "s1" else
                  {"mode": "native", "min_tokens": tcfg.min_tokens,
                   "max_tokens": tcfg.max_tokens, "patch_size": cfg.model.patch_size})

    def checkpoint_fn(step, p, state):
        base = os.path.join(cfg.out_dir, f"ckpt_{stage}_step{step:06d}.ckpt")
        save_checkpoint(base, p, preprocess, extra={"stage": stage, "step": step})
        save_opt_state(base + ".opt", state)

    metrics_path = os.path.join(cfg.out_dir, f"metrics_{stage}.csv")
    history = train_stage(samples, params, tcfg, tokenizer,
                          metrics_path=metrics_path,
                          checkpoint_fn=checkpoint_fn,
                          opt_state=opt_state, start_step=start_step,
                          log_fn=lambda m: print(
                              f"step {m.step:6d}  loss {m.loss:.4f}  lr {m.lr:.2e}")
                          if args.verbose else None)
    final = os.path.join(cfg.out_dir, f"ckpt_{stage}_final.ckpt")
    save_checkpoint(final, params, preprocess,
                    extra={"stage": stage, "step": tcfg.total_steps})
    save_opt_state(final + ".opt", opt_state or OptimizerState(params))
    print(f"finished {stage}: {len(history)} steps this run, "
          f"final loss {history[-1].loss:.4f}" if history else
          f"finished {stage} (no new steps)")
    print(f"checkpoint: {final}")
    print(f"metrics: {metrics_path}")
    return 0


def cmd_generate(args):
    params, preprocess, _ = load_checkpoint(args.ckpt)
    sample = _preprocess_for(preprocess, args.image)
    tokenizer = ByteTokenizer(params.cfg.vocab)
    dcfg = DecodeConfig(temperature=args.temperature, top_p=args.top_p,
                        max_new_tokens=args.max_new, seed=args.seed)
    print(generate(sample, params, tokenizer, dcfg))
    return 0


def cmd_readout(args):
    params, preprocess, _ = load_checkpoint(args.ckpt)
    sample = _preprocess_for(preprocess, args.image)
    tokenizer = ByteTokenizer(params.cfg.vocab)
    indices = [int(i) for i in args.patches.split(",") if i.strip() != ""]
    if not indices:
        raise ValueError("--patches needs at least one index")
    tops = patch_readout(sample, params, indices, args.k)
    rows = []
    for patch_i, ranked in zip(indices, tops):
        for rank, (tok, prob) in enumerate(ranked):
            rows.append((patch_i, rank, tok, tokenizer.decode([tok]) or repr(chr(0)),
                         prob))
    print(f"{'patch':>5} {'rank':>4} {'token':>5} {'text':<10} {'prob':>12}")
    for patch_i, rank, tok, text, prob in rows:
        print(f"{patch_i:>5} {rank:>4} {tok:>5} {text!r:<10} {prob:>12.6g}")
    if args.csv:
        import csv as _csv
        with open(args.csv, "w", newline="", encoding="utf-8") as f:
            f.write("# capvit-readout v1\n")
            w = _csv.writer(f)
            w.writerow(("patch", "rank", "token", "prob"))
            for patch_i, rank, tok, _text, prob in rows:
                w.writerow((patch_i, rank, tok, f"{prob:.10g}"))
        print(f"csv: {args.csv}")
    return 0


def cmd_encode(args):
    params, preprocess, _ = load_checkpoint(args.ckpt)
    sample = _preprocess_for(preprocess, args.image)
    feats = encode_image(sample, params)
    save_features(args.out, feats)
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {args.out}")
    return 0


def cmd_diag_sink(args):
    cfg = C.load_config(args.config, _parse_set(args.set))
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise ValueError("need at least one seed")
    samples = _load_samples(cfg)
    tokenizer = ByteTokenizer(cfg.model.vocab)
    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = D.gating_ablation(samples, cfg.model, cfg.train_s1, seeds, tokenizer)
    csv_path = os.path.join(out_dir, "sink_ablation.csv")
    svg_path = os.path.join(out_dir, "sink_ablation.svg")
    D.write_ablation_csv(rows, csv_path)
    D.plot_sink_overlay(rows, svg_path)
    means = D.final_sink_means(rows)
    print(f"final sink mass (mean over seeds): gated {means['gated']:.4f}, "
          f"ungated {means['ungated']:.4f}")
    print(f"csv: {csv_path}")
    print(f"svg: {svg_path}")
    return 0


def cmd_pack_inspect(args):
    records = []
    if os.path.exists(args.manifest):
        samples = load_manifest_samples(args.manifest)
    else:
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    if not samples:
        print("no samples")
        return 0
    tokenizer = ByteTokenizer()
    patch = args.patch_size
    seqs = []
    for s in samples:
        prepped = resize_native(s, args.min_tokens, args.max_tokens, patch)
        patches, grid = patchify(prepped.pixels, patch)
        seqs.append(build_sequence(patches, grid, tokenizer.encode(s.caption),
                                   eos_id=tokenizer.eos_id, ref=s.id))
    packs = pack(seqs, args.max_len, tokenizer.pad_id)
    for i, p in enumerate(packs):
        used = int((p.kinds != 2).sum())
        print(f"pack {i}: {len(p.refs)} samples, {used}/{len(p)} tokens used: "
              + ", ".join(p.refs))
    first = packs[0]
    print(f"\nattention mask of pack 0 ({len(first)}x{len(first)}):")
    print(render_mask(prefix_lm_mask(first), first.kinds))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="capvit",
                                 description="train/inspect a single-transformer image captioner")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic shape-caption dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas-min", type=int, default=64)
    p.add_argument("--canvas-max", type=int, default=160)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True, help="YAML path or preset name "
                   + "/".join(C.PRESETS))
    p.add_argument("--stage", choices=("s1", "s2"), default="s1")
    p.add_argument("--resume", help="checkpoint to continue (with .opt blob)")
    p.add_argument("--init", help="checkpoint for weights only (s2 from s1)")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted path)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="caption an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--max-new", type=int, default=256)
    p.add_argument("--temperature", type=float, default=1e-6)
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("readout", help="top-k token readout of patch features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--patches", required=True, help="comma-separated flat indices")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_readout)

    p = sub.add_parser("encode", help="dump vision-encoder features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("diag-sink", help="gated-vs-ungated sink ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_diag_sink)

    p = sub.add_parser("pack-inspect", help="show pack composition and mask")
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-len", type=int, required=True)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--min-tokens", type=int, default=4)
    p.add_argument("--max-tokens", type=int, default=256)
    p.set_defaults(fn=cmd_pack_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # domain errors -> exit 1, usage already exits 2
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
