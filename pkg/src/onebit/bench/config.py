"""Flat ``key = value`` experiment configuration files.

    # comments start with '#'
    scenario = qpsk_4x32
    detectors = ml, nml, robnet@ckpt/robnet_t5.ckpt
    snr_grid_db = -5, 5, 15
    trials_per_point = 2000
    seed = 1234

Unknown keys are rejected; every error names the offending key and line.
Relative checkpoint paths resolve against the config file's directory.
"""

import os
from dataclasses import dataclass, field, fields, replace

from onebit.errors import ConfigError
from onebit.mimo import get_constellation

SCENARIOS = {
    "qpsk_4x32": {
        "constellation": "QPSK",
        "k_users": 4,
        "n_rx": 32,
        "snr_grid_db": [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0],
        "train_snr_db": 15.0,
        "obmnet_stages": 10,
        "stages": 5,
    },
    "qam16_8x128": {
        "constellation": "QAM16",
        "k_users": 8,
        "n_rx": 128,
        "snr_grid_db": [10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0],
        "train_snr_db": 25.0,
        "obmnet_stages": 15,
        "stages": 10,
    },
}

ANALYTIC_DETECTORS = ("ml", "ml_sigmoid", "nml", "obmnet")
TRAINABLE_DETECTORS = ("obmnet", "robnet", "obirim")


@dataclass(frozen=True)
class DetectorSpec:
    label: str
    kind: str
    checkpoint: str = None


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    constellation: str = None
    k_users: int = None
    n_rx: int = None
    seed: int = 0
    detectors: tuple = ()
    snr_grid_db: tuple = None
    trials_per_point: int = 1000
    channel_mode: str = "general"
    channel_seed: int = 0
    csi_noise_grid: tuple = (0.0, 0.05, 0.1, 0.2)
    csi_snr_db: float = None
    nml_iterations: int = 500
    nml_step: float = 0.001
    obmnet_stages: int = None
    record_timing: bool = False
    # training
    train_detector: str = "robnet"
    stages: int = None
    batch_size: int = 32
    num_batches: int = 20_000
    train_snr_db: float = None
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    loss_lambda: float = None
    loss_beta: float = 10.0
    init_seed: int = 0
    checkpoint_width: int = 64
    checkpoint_name: str = "checkpoint.ckpt"
    # ablation / scatter
    stage_list: tuple = (2, 3, 5, 8)
    scatter_detector: str = None
    scatter_snr_db: float = None
    scatter_samples: int = 5000
    base_dir: str = field(default=".", compare=False)

    @property
    def bits_per_trial(self):
        return get_constellation(self.constellation).bits_per_symbol * self.k_users

    def loss_lambda_for(self, kind):
        if self.loss_lambda is not None:
            return self.loss_lambda
        # OBMNet is trained on plain MSE, the regularised detectors on the constellation loss
        return 0.0 if kind == "obmnet" else 1.0


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list_of(conv):
    def parse(text):
        items = [p.strip() for p in text.split(",")]
        if not items or any(not p for p in items):
            raise ValueError("empty list element")
        return tuple(conv(p) for p in items)

    return parse


def _parse_detector(text):
    label = None
    if "=" in text:
        label, text = (s.strip() for s in text.split("=", 1))
    kind, _, path = text.partition("@")
    kind, path = kind.strip().lower(), path.strip() or None
    if path is None and kind not in ANALYTIC_DETECTORS:
        raise ValueError(f"detector {kind!r} needs a checkpoint (kind@path)")
    if path is not None and kind not in TRAINABLE_DETECTORS:
        raise ValueError(f"detector {kind!r} does not take a checkpoint")
    return DetectorSpec(label or kind, kind, path)


def _choice(*options):
    def parse(text):
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return t

    return parse


_PARSERS = {
    "scenario": _choice("qpsk_4x32", "qam16_8x128", "custom"),
    "constellation": lambda t: get_constellation(t.strip()).name,
    "k_users": int,
    "n_rx": int,
    "seed": int,
    "detectors": _list_of(_parse_detector),
    "snr_grid_db": _list_of(float),
    "trials_per_point": int,
    "channel_mode": _choice("general", "channel_specific"),
    "channel_seed": int,
    "csi_noise_grid": _list_of(float),
    "csi_snr_db": float,
    "nml_iterations": int,
    "nml_step": float,
    "obmnet_stages": int,
    "record_timing": _parse_bool,
    "train_detector": _choice(*TRAINABLE_DETECTORS),
    "stages": int,
    "batch_size": int,
    "num_batches": int,
    "train_snr_db": float,
    "learning_rate": float,
    "weight_decay": float,
    "loss_lambda": float,
    "loss_beta": float,
    "init_seed": int,
    "checkpoint_width": int,
    "checkpoint_name": str.strip,
    "stage_list": _list_of(int),
    "scatter_detector": lambda t: _parse_detector(t.strip()),
    "scatter_snr_db": float,
    "scatter_samples": int,
}

assert set(_PARSERS) == {f.name for f in fields(ExperimentConfig)} - {"base_dir"}


def _normalise_minus(text):
    # accept typographic minus signs in numeric lists
    return text.replace("−", "-")


def parse_config_text(text, base_dir="."):
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"unknown key {key!r}", line=lineno, key=key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, key=key)
        try:
            values[key] = _PARSERS[key](_normalise_minus(value))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line=lineno, key=key) from None
        lines[key] = lineno
    if "scenario" not in values:
        raise ConfigError("missing required key 'scenario'", key="scenario")
    scenario = values["scenario"]
    if scenario == "custom":
        for key in ("constellation", "k_users", "n_rx"):
            if key not in values:
                raise ConfigError(f"missing required key {key!r} for a custom scenario", key=key)
        preset = {}
    else:
        preset = SCENARIOS[scenario]
    merged = dict(preset)
    merged.update(values)
    const = merged["constellation"]
    merged.setdefault("train_snr_db", 25.0 if const == "QAM16" else 15.0)
    merged.setdefault("obmnet_stages", 15 if const == "QAM16" else 10)
    merged.setdefault("stages", 10 if const == "QAM16" else 5)
    merged.setdefault("csi_snr_db", merged["train_snr_db"])
    merged.setdefault("scatter_snr_db", merged["train_snr_db"])
    merged.setdefault("snr_grid_db", (merged["train_snr_db"],))
    for key in ("snr_grid_db", "stage_list", "csi_noise_grid"):
        if key in merged:
            merged[key] = tuple(merged[key])
    cfg = ExperimentConfig(**merged, base_dir=base_dir)
    _validate(cfg, lines)
    return cfg


def _validate(cfg, lines):
    def fail(key, msg):
        if key not in msg:
            msg = f"{key}: {msg}"
        raise ConfigError(msg, line=lines.get(key), key=key)

    if cfg.k_users < 1 or cfg.n_rx < 1:
        fail("k_users", "k_users and n_rx must be positive")
    if cfg.trials_per_point < 1:
        fail("trials_per_point", "trials_per_point must be >= 1")
    if not cfg.snr_grid_db:
        fail("snr_grid_db", "snr_grid_db must not be empty")
    if any(s < 0 for s in cfg.csi_noise_grid):
        fail("csi_noise_grid", "CSI noise variances must be >= 0")
    if cfg.batch_size < 2:
        fail("batch_size", "batch_size must be >= 2")
    if cfg.checkpoint_width not in (32, 64):
        fail("checkpoint_width", "checkpoint_width must be 32 or 64")
    if any(t < 1 for t in cfg.stage_list):
        fail("stage_list", "stage counts must be >= 1")
    if cfg.scatter_samples < 1:
        fail("scatter_samples", "scatter_samples must be >= 1")
    labels = [d.label for d in cfg.detectors]
    if len(set(labels)) != len(labels):
        fail("detectors", "duplicate detector labels (use label=kind@path)")


def parse_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base_dir=os.path.dirname(os.path.abspath(path)))


def resolve_path(cfg, path):
    return path if os.path.isabs(path) else os.path.join(cfg.base_dir, path)


def with_overrides(cfg, **kw):
    return replace(cfg, **kw)
