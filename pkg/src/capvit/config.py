"""Run configuration: one YAML file describing model, both training stages,
and the data source. CLI flags override individual keys. Two presets ship:
`tiny` (CI-scale) and `paper-l` (published large-model numbers, for
validation-only instantiation).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import yaml

from .model import ModelConfig
from .training import TrainConfig

CONFIG_FORMAT = 1


@dataclass
class DataConfig:
    manifest: str | None = None
    synth_seed: int = 0
    synth_count: int = 32
    canvas_min: int = 64
    canvas_max: int = 160

    def __post_init__(self):
        if self.synth_count < 1:
            raise ValueError("synth_count must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train_s1: TrainConfig = field(default_factory=TrainConfig)
    train_s2: TrainConfig | None = None
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/out"
    precision: str = "float32"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        self.train_s1.stage = "s1"
        if self.train_s2 is None:
            self.train_s2 = derive_stage2(self.train_s1)
        self.train_s2.stage = "s2"

    def train_for(self, stage: str) -> TrainConfig:
        if stage == "s1":
            return self.train_s1
        if stage == "s2":
            return self.train_s2
        raise ValueError(f"unknown stage {stage!r}")


def derive_stage2(s1: TrainConfig) -> TrainConfig:
    """Stage-2 defaults from stage 1: peak lr / 10 (published ratio), token
    budget halved since native-resolution sequences run longer."""
    s2 = copy.deepcopy(s1)
    s2.stage = "s2"
    s2.peak_lr = s1.peak_lr / 10.0
    s2.batch_tokens = max(1, s1.batch_tokens // 2)
    return s2


def to_dict(cfg: RunConfig) -> dict:
    d = {"format_version": CONFIG_FORMAT,
         "model": asdict(cfg.model),
         "train_s1": asdict(cfg.train_s1),
         "train_s2": asdict(cfg.train_s2),
         "data": asdict(cfg.data),
         "out_dir": cfg.out_dir,
         "precision": cfg.precision}
    d["model"]["mrope_sections"] = list(cfg.model.mrope_sections)
    d["model"]["pixel_mean"] = list(cfg.model.pixel_mean)
    d["model"]["pixel_std"] = list(cfg.model.pixel_std)
    for key in ("train_s1", "train_s2"):
        d[key]["betas"] = list(d[key]["betas"])
    return d


def from_dict(d: dict) -> RunConfig:
    ver = d.get("format_version", CONFIG_FORMAT)
    if ver != CONFIG_FORMAT:
        raise ValueError(f"unsupported config format_version {ver}")
    model = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in d.get("model", {}).items()})
    t1 = d.get("train_s1", {})
    t1 = TrainConfig(**{k: tuple(v) if k == "betas" else v for k, v in t1.items()})
    t2 = d.get("train_s2")
    if t2 is not None:
        t2 = TrainConfig(**{k: tuple(v) if k == "betas" else v for k, v in t2.items()})
    data = DataConfig(**d.get("data", {}))
    return RunConfig(model=model, train_s1=t1, train_s2=t2, data=data,
                     out_dir=d.get("out_dir", "runs/out"),
                     precision=d.get("precision", "float32"))


def save_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(to_dict(cfg), f, sort_keys=True)


def load_config(path_or_preset, overrides=None) -> RunConfig:
    """Load a YAML config file or a named preset; apply dotted-key
    overrides (flags beat the file)."""
    if path_or_preset in PRESETS:
        d = to_dict(PRESETS[path_or_preset]())
    else:
        with open(path_or_preset, encoding="utf-8") as f:
            d = yaml.safe_load(f) or {}
    for key, value in (overrides or {}).items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(d)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def preset_tiny() -> RunConfig:
    """CI-scale preset: small model, small canvases, short schedule."""
    model = ModelConfig(layers=4, dim=128, heads=4, ffn_width=352, vocab=258,
                        patch_size=16, rope_theta=10000.0, layer_scale_init=0.1,
                        drop_path_rate=0.0, max_tokens=4096)
    train = TrainConfig(stage="s1", total_steps=2000, batch_tokens=512,
                        peak_lr=3e-3, min_lr=1e-5, warmup_ratio=0.02,
                        grad_clip=1.0, weight_decay=0.01, seed=0, side=64,
                        min_tokens=4, max_tokens=64,
                        checkpoint_every=1000, sink_every=100)
    data = DataConfig(synth_seed=0, synth_count=32, canvas_min=64, canvas_max=128)
    return RunConfig(model=model, train_s1=train, data=data, out_dir="runs/tiny")


def preset_paper_l() -> RunConfig:
    """Large-model numbers for validation-only instantiation (no training
    expected at desk scale)."""
    model = ModelConfig(layers=24, dim=1024, heads=16, ffn_width=2816,
                        vocab=151936, patch_size=16, rope_theta=10000.0,
                        layer_scale_init=0.1, drop_path_rate=0.1,
                        max_tokens=16384)
    train = TrainConfig(stage="s1", total_steps=100000, batch_tokens=16384,
                        peak_lr=1e-3, min_lr=1e-6, warmup_ratio=0.007,
                        grad_clip=1.0, weight_decay=0.1, seed=0, side=224,
                        min_tokens=16, max_tokens=1024,
                        checkpoint_every=5000, sink_every=500)
    data = DataConfig(synth_seed=0, synth_count=1024, canvas_min=64, canvas_max=512)
    return RunConfig(model=model, train_s1=train, data=data, out_dir="runs/paper-l")


PRESETS = {"tiny": preset_tiny, "paper-l": preset_paper_l}
