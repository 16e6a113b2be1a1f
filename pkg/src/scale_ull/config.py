"""Experiment configuration: JSON schema, presets, validation.

A config file is a JSON object.  Every section is optional; omitted keys take
the defaults of the selected ``preset`` (``"desk"`` unless stated).  Unknown
keys are rejected.  ``SCALE_SEED`` in the environment overrides ``seed``.

Keys::

    preset        "desk" | "image"
    seed          int
    out_dir       str
    checkpoint_every  int, save resumable training state every N steps (0 = off)
    data     source ("gaussian" | "idx" | "cifar10" | "file"), separation, dim, layout,
             offset, train_images, train_labels, eval_images, eval_labels,
             train_files, eval_files, path, eval_path
    stream   kind, T, U, n
    encoder  hidden, output_dim, init_scale
    loss     tau, kappa, mu, lambda, per_row_threshold, literal_forget_sign
    memory   capacity, sample_size, policy, kmeans_k
    optim    lr
    eval     period, k, clustering, per_class, sigma
    augment  mode, noise_sigma, scale_range, crop_padding, flip_prob,
             brightness, contrast, gray_prob
    metrics  wall_clock
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .losses import LossConfig
from .memory import POLICIES
from .streams import AUG_MODES, STREAM_KINDS

# Alternative learning rate, selectable via optim.lr; the default stays 0.03.
TABLE_LR = 0.01


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "gaussian"
    separation: float = 3.0
    dim: int = 2
    layout: str = "circle"
    offset: Optional[list] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    eval_images: Optional[str] = None
    eval_labels: Optional[str] = None
    train_files: Optional[list] = None
    eval_files: Optional[list] = None
    path: Optional[str] = None
    eval_path: Optional[str] = None


@dataclass
class StreamConfig:
    kind: str = "seq"
    T: int = 4
    U: int = 800
    n: int = 32


@dataclass
class EncoderConfig:
    hidden: list = field(default_factory=lambda: [64, 32])
    output_dim: int = 16
    init_scale: float = 1.0


@dataclass
class LossSection:
    tau: float = 0.1
    kappa: float = 0.1
    mu: float = 0.05
    lam: float = 0.1
    per_row_threshold: bool = False
    literal_forget_sign: bool = False

    def to_loss_config(self) -> LossConfig:
        return LossConfig(self.tau, self.kappa, self.mu, self.lam, self.per_row_threshold, self.literal_forget_sign)


@dataclass
class MemoryConfig:
    capacity: int = 256
    sample_size: int = 32
    policy: str = "psa"
    kmeans_k: int = 10


@dataclass
class OptimConfig:
    lr: float = 0.03


@dataclass
class EvalConfig:
    period: int = 25
    k: int = 5
    clustering: str = "spectral"
    per_class: int = 50
    sigma: float = 0.1


@dataclass
class AugmentConfig:
    mode: str = "vector_jitter"
    noise_sigma: float = 0.1
    scale_range: list = field(default_factory=lambda: [0.8, 1.2])
    crop_padding: int = 4
    flip_prob: float = 0.5
    brightness: list = field(default_factory=lambda: [0.6, 1.4])
    contrast: list = field(default_factory=lambda: [0.6, 1.4])
    gray_prob: float = 0.2


@dataclass
class MetricsConfig:
    # Real timings make the CSV non-reproducible, so they are opt-in.
    wall_clock: bool = False


@dataclass
class ExperimentConfig:
    preset: str = "desk"
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossSection = field(default_factory=LossSection)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


PRESETS = {
    "desk": {},
    # image-scale setting with kNN k=50; data must be CIFAR-10 binary batches
    "image": {
        "data": {"source": "cifar10"},
        "stream": {"n": 128, "T": 10, "U": 4096},
        "memory": {"capacity": 1280, "sample_size": 128},
        "loss": {"tau": 0.1, "mu": 0.05, "lambda": 0.1},
        "eval": {"k": 50, "per_class": 500},
        "augment": {"mode": "rgb_image"},
        "encoder": {"hidden": [512, 256], "output_dim": 128},
    },
}

# JSON key -> dataclass attribute where they differ
_RENAMES = {"lambda": "lam"}
_RENAMES_BACK = {v: k for k, v in _RENAMES.items()}


def _merge(into: dict, extra: dict) -> dict:
    out = dict(into)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _build(cls, values: dict, prefix: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        name = _RENAMES.get(key, key)
        dotted = f"{prefix}{key}"
        if name not in fields:
            raise ConfigError(f"unknown config key '{dotted}'")
        sub = fields[name].type
        sub_cls = globals().get(sub) if isinstance(sub, str) else sub
        if dataclasses.is_dataclass(sub_cls):
            kwargs[name] = _build(sub_cls, val, dotted + ".")
        else:
            kwargs[name] = val
    return cls(**kwargs)


def _require(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"invalid value for '{key}': {msg}")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: ExperimentConfig, check_files: bool = True) -> ExperimentConfig:
    _require(cfg.preset in PRESETS, "preset", f"expected one of {sorted(PRESETS)}")
    _require(_is_int(cfg.seed) and cfg.seed >= 0, "seed", "non-negative integer")
    _require(_is_int(cfg.checkpoint_every) and cfg.checkpoint_every >= 0, "checkpoint_every", "non-negative integer")
    d = cfg.data
    _require(d.source in ("gaussian", "idx", "cifar10", "file"), "data.source", "gaussian, idx, cifar10 or file")
    _require(_is_num(d.separation) and d.separation > 0, "data.separation", "positive number")
    _require(_is_int(d.dim) and d.dim >= 1, "data.dim", "positive integer")
    _require(d.layout in ("circle", "line"), "data.layout", "circle or line")
    s = cfg.stream
    _require(s.kind in STREAM_KINDS, "stream.kind", f"one of {STREAM_KINDS}")
    for key in ("T", "U", "n"):
        _require(_is_int(getattr(s, key)) and getattr(s, key) >= 1, f"stream.{key}", "positive integer")
    e = cfg.encoder
    _require(isinstance(e.hidden, list) and all(_is_int(h) and h > 0 for h in e.hidden), "encoder.hidden",
             "list of positive integers")
    _require(_is_int(e.output_dim) and e.output_dim >= 1, "encoder.output_dim", "positive integer")
    _require(_is_num(e.init_scale) and e.init_scale > 0, "encoder.init_scale", "positive number")
    lo = cfg.loss
    _require(_is_num(lo.tau) and lo.tau > 0, "loss.tau", "positive number")
    _require(_is_num(lo.kappa) and lo.kappa > 0, "loss.kappa", "positive number")
    _require(_is_num(lo.mu) and 0 <= lo.mu <= 1, "loss.mu", "number in [0, 1]")
    _require(_is_num(lo.lam) and lo.lam >= 0, "loss.lambda", "non-negative number")
    m = cfg.memory
    _require(_is_int(m.capacity) and m.capacity >= 1, "memory.capacity", "positive integer")
    _require(_is_int(m.sample_size) and m.sample_size >= 0, "memory.sample_size", "non-negative integer")
    _require(m.policy in POLICIES, "memory.policy", f"one of {POLICIES}")
    _require(_is_int(m.kmeans_k) and m.kmeans_k >= 1, "memory.kmeans_k", "positive integer")
    _require(_is_num(cfg.optim.lr) and cfg.optim.lr > 0, "optim.lr", "positive number")
    ev = cfg.eval
    _require(_is_int(ev.period) and ev.period >= 1, "eval.period", "positive integer")
    _require(_is_int(ev.k) and ev.k >= 1, "eval.k", "positive integer")
    _require(ev.clustering in ("spectral", "kmeans"), "eval.clustering", "spectral or kmeans")
    _require(_is_int(ev.per_class) and ev.per_class >= 2, "eval.per_class", "integer >= 2")
    _require(_is_num(ev.sigma) and ev.sigma > 0, "eval.sigma", "positive number")
    a = cfg.augment
    _require(a.mode in AUG_MODES, "augment.mode", f"one of {AUG_MODES}")
    _require(_is_num(a.noise_sigma) and a.noise_sigma >= 0, "augment.noise_sigma", "non-negative number")
    for key in ("scale_range", "brightness", "contrast"):
        r = getattr(a, key)
        _require(isinstance(r, list) and len(r) == 2 and 0 <= r[0] <= r[1], f"augment.{key}", "[lo, hi] with 0 <= lo <= hi")
    for key in ("flip_prob", "gray_prob"):
        _require(_is_num(getattr(a, key)) and 0 <= getattr(a, key) <= 1, f"augment.{key}", "probability")
    if check_files:
        for key in ("train_images", "train_labels", "eval_images", "eval_labels", "path", "eval_path"):
            p = getattr(d, key)
            _require(p is None or Path(p).exists(), f"data.{key}", f"file {p} does not exist")
        for key in ("train_files", "eval_files"):
            for p in getattr(d, key) or []:
                _require(Path(p).exists(), f"data.{key}", f"file {p} does not exist")
        needed = {"idx": ("train_images", "train_labels"), "cifar10": ("train_files",), "file": ("path",)}
        for key in needed.get(d.source, ()):
            _require(getattr(d, key) is not None, f"data.{key}", f"required for source '{d.source}'")
    return cfg


def config_from_dict(raw: dict, check_files: bool = True, env=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"invalid value for 'preset': expected one of {sorted(PRESETS)}")
    cfg = _build(ExperimentConfig, _merge(PRESETS[preset], raw), "")
    env = os.environ if env is None else env
    if env.get("SCALE_SEED"):
        try:
            cfg.seed = int(env["SCALE_SEED"])
        except ValueError:
            raise ConfigError(f"SCALE_SEED must be an integer, got {env['SCALE_SEED']!r}") from None
    return validate(cfg, check_files)


def parse_config_text(text: str, check_files: bool = True, env=None) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ConfigError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}\n  {context}") from None
    return config_from_dict(raw, check_files, env)


def parse_config(path, check_files: bool = True, env=None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), check_files, env)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def conv(obj):
        if dataclasses.is_dataclass(obj):
            return {_RENAMES_BACK.get(f.name, f.name): conv(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, (list, tuple)):
            return [conv(v) for v in obj]
        return obj

    return conv(cfg)


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()
