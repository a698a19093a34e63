"""Run configuration: one flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored; every key must be a field of
:class:`RunConfig`.  Values are parsed according to the field's type.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .epoch_adaptor import normalize_alpha
from .errors import ConfigError

MODES = ("supervised", "naive_filter", "efficient_teacher", "alternating_baseline")


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    mode: str = "efficient_teacher"
    seed: int = 0
    # schedule
    epochs: int = 20
    burn_in_epochs: int = -1            # -1: 10% of epochs, at least 1
    alt_supervised_epochs: int = -1     # -1: 30% of epochs (alternating baseline only)
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    # optimizer and teacher
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_steps: int = 100             # linear learning-rate warm-up
    grad_clip: float = 10.0             # global gradient-norm cap; 0 disables
    ema_m: float = 0.999
    ema_ramp: float = 200.0             # steps; 0 disables the warm-up ramp
    # losses
    lambda_u: float = 3.0
    lambda_da: float = 0.1
    grl_lambda: float = 1.0
    grl_ramp: int = 1                   # 1: ramp the reversal strength up over burn-in
    w_cls: float = 0.5
    w_reg: float = 0.05
    w_obj: float = 1.0
    # pseudo labels
    alpha: float = 60.0
    tau1: float = 0.1                   # bootstrap / static low threshold
    tau2: float = 0.6                   # bootstrap / static high threshold
    naive_tau: float = 0.6
    nms_score_thresh: float = 0.01
    nms_iou_thresh: float = 0.65
    max_pseudo: int = 300
    # augmentation
    scale_min: float = 0.1
    scale_max: float = 1.9
    # model
    num_scales: int = 1
    dtype: str = "float32"
    # evaluation
    test_score_thresh: float = 0.001
    test_iou_thresh: float = 0.65
    max_dets: int = 100
    eval_every: int = 1
    # execution
    workers: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.mode in MODES, f"mode must be one of {MODES}, got {self.mode!r}")
        need(self.epochs >= 1, "epochs must be >= 1")
        need(-1 <= self.burn_in_epochs <= self.epochs, "burn_in_epochs must be -1 or in [0, epochs]")
        need(-1 <= self.alt_supervised_epochs <= self.epochs,
             "alt_supervised_epochs must be -1 or in [0, epochs]")
        need(self.batch_labeled >= 1 and self.batch_unlabeled >= 1, "batch sizes must be >= 1")
        need(self.lr > 0 and math.isfinite(self.lr), "lr must be positive")
        need(0 <= self.momentum < 1, "momentum must be in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay must be nonnegative")
        need(self.warmup_steps >= 0 and self.grad_clip >= 0, "warmup_steps and grad_clip must be >= 0")
        need(0 <= self.ema_m <= 1, "ema_m must be in [0, 1]")
        need(self.ema_ramp >= 0, "ema_ramp must be nonnegative")
        for name in ("lambda_u", "lambda_da", "grl_lambda", "w_cls", "w_reg", "w_obj"):
            need(getattr(self, name) >= 0, f"{name} must be nonnegative")
        try:
            normalize_alpha(self.alpha)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        need(0 <= self.tau1 < self.tau2 <= 1, "need 0 <= tau1 < tau2 <= 1")
        need(0 <= self.naive_tau <= 1, "naive_tau must be in [0, 1]")
        need(0 <= self.nms_score_thresh <= 1 and 0 < self.nms_iou_thresh <= 1, "bad NMS thresholds")
        need(0 <= self.test_score_thresh <= 1 and 0 < self.test_iou_thresh <= 1, "bad test thresholds")
        need(self.max_pseudo >= 1 and self.max_dets >= 1, "detection caps must be >= 1")
        need(0 < self.scale_min <= self.scale_max, "need 0 < scale_min <= scale_max")
        need(self.num_scales in (1, 3), "num_scales must be 1 or 3")
        need(self.dtype in ("float32", "float64"), "dtype must be float32 or float64")
        need(self.eval_every >= 0, "eval_every must be >= 0")
        need(self.workers >= 0, "workers must be >= 0")
        need(self.grl_ramp in (0, 1), "grl_ramp must be 0 or 1")

    @property
    def burn_in(self) -> int:
        if self.burn_in_epochs >= 0:
            return self.burn_in_epochs
        return min(self.epochs, max(1, round(0.1 * self.epochs)))

    @property
    def alt_supervised(self) -> int:
        if self.alt_supervised_epochs >= 0:
            return self.alt_supervised_epochs
        return min(self.epochs, max(1, round(0.3 * self.epochs)))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "RunConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)


def _parse_value(raw: str, typ: str, key: str):
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        values[key] = _parse_value(raw, types[key], key)
    return replace(base or RunConfig(), **values)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
