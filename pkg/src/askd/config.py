"""Run configuration: `key = value` files, flag overrides, strict schema.

Every key has a declared parser and default; unknown keys are rejected by
name rather than ignored.  Overrides win over file values, file values
over defaults.  The resolved configuration validates against the module
schemas before any work starts and is echoed into the run directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ALL_ELIGIBLE_CONVS, PER_BLOCK, BackboneConfig
from .degrade import DegradeSpec
from .errors import ConfigError
from .losses import DistillConfig, MarginConfig
from .trainer import TrainConfig

SEED_ENV_VAR = "ASKD_SEED"


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _bool(v: str) -> bool:
    lowered = v.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _str(v: str) -> str:
    return v.strip()


def _int_list(v: str) -> tuple:
    s = v.strip()
    if not s:
        return ()
    return tuple(int(part) for part in s.split(","))


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none", "auto") else float(v)


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "none", "auto") else int(v)


def _opt_str(v: str):
    s = v.strip()
    return None if s.lower() in ("", "none") else s


def _site_list(v: str):
    s = v.strip()
    if s.lower() in ("", "all", "none"):
        return None
    return tuple(part.strip() for part in s.split(","))


# key -> (parser, default)
SCHEMA = {
    # degradation
    "ratio": (_int, 4),
    "blur_sigma": (_opt_float, None),
    "blur_kernel_size": (_opt_int, None),
    # backbone
    "stage_widths": (_int_list, (64, 128, 256, 512)),
    "blocks_per_stage": (_int_list, (3, 4, 6, 3)),
    "embedding_dim": (_int, 512),
    "attention_site_policy": (_str, ALL_ELIGIBLE_CONVS),
    "input_size": (_int, 112),
    # margin loss
    "scale_s": (_float, 64.0),
    "margin_m": (_float, 0.5),
    # optimization
    "epochs": (_int, 20),
    "batch_size": (_int, 128),
    "base_lr": (_float, 0.1),
    "lr_decay_epochs": (_int_list, (6, 11, 15, 17)),
    "lr_decay_factor": (_float, 0.1),
    "momentum": (_float, 0.9),
    "weight_decay": (_float, 5e-4),
    "seed": (_int, 0),
    "val_fraction": (_float, 0.0),
    # distillation
    "lambda_distill": (_float, 5.0),
    "distill_sites": (_site_list, None),
    "use_logit_kd": (_bool, False),
    "kd_temperature": (_float, 4.0),
    "kd_weight": (_float, 1.0),
    # run management
    "run_id": (_str, "run"),
    "output_root": (_str, "runs"),
    "workers": (_int, 1),
    "force": (_bool, False),
    # evaluation
    "eval_ks": (_int_list, (1, 5, 10, 50)),
    "task": (_str, "verify"),
    # paths (normally given as flags; kept in the schema so they are echoed)
    "root": (_opt_str, None),
    "out": (_opt_str, None),
    "manifest": (_opt_str, None),
    "teacher": (_opt_str, None),
    "student": (_opt_str, None),
    "checkpoint": (_opt_str, None),
    "pairs": (_opt_str, None),
    "probe": (_opt_str, None),
    "gallery": (_opt_str, None),
    "overlay_count": (_int, 0),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    provided: set = field(default_factory=set)
    seed_from_env: bool = False

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def degrade_spec(self) -> DegradeSpec:
        return DegradeSpec.create(
            self.values["ratio"], self.values["blur_sigma"], self.values["blur_kernel_size"]
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            stage_widths=self.values["stage_widths"],
            blocks_per_stage=self.values["blocks_per_stage"],
            embedding_dim=self.values["embedding_dim"],
            attention_site_policy=self.values["attention_site_policy"],
            input_size=self.values["input_size"],
        )

    def margin_config(self) -> MarginConfig:
        return MarginConfig(scale_s=self.values["scale_s"], margin_m=self.values["margin_m"])

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            lambda_distill=self.values["lambda_distill"],
            sites=self.values["distill_sites"],
            use_logit_kd=self.values["use_logit_kd"],
            kd_temperature=self.values["kd_temperature"],
            kd_weight=self.values["kd_weight"],
        )

    def train_config(self, student: bool = False) -> TrainConfig:
        return TrainConfig(
            epochs=self.values["epochs"],
            batch_size=self.values["batch_size"],
            base_lr=self.values["base_lr"],
            lr_decay_epochs=self.values["lr_decay_epochs"],
            lr_decay_factor=self.values["lr_decay_factor"],
            momentum=self.values["momentum"],
            weight_decay=self.values["weight_decay"],
            seed=self.values["seed"],
            margin=self.margin_config(),
            distill=self.distill_config() if student else None,
            val_fraction=self.values["val_fraction"],
        )

    def run_dir(self) -> Path:
        if self.values.get("out"):
            return Path(self.values["out"])
        return Path(self.values["output_root"]) / self.values["run_id"]

    def echo_lines(self) -> list:
        lines = ["# resolved configuration (every consumed key)"]
        for key in SCHEMA:
            lines.append(f"{key} = {_format_value(self.values[key])}")
        return lines


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_one(key: str, raw: str, where: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key: {key} ({where})")
    parser, _ = SCHEMA[key]
    try:
        return parser(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for key {key}: {raw!r} ({where}): {exc}") from exc


def read_config_file(path) -> dict:
    """Parse a `key = value` file with `#` comments into raw assignments."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, raw = stripped.split("=", 1)
        out[key.strip()] = (raw.strip(), f"{path}:{lineno}")
    return out


def parse_config(file_path=None, overrides=()) -> RunConfig:
    """Merge defaults, an optional config file, and `key=value` overrides.

    Overrides win over file values.  The result is validated against every
    module schema before returning.
    """
    values = {key: default for key, (_, default) in SCHEMA.items()}
    provided = set()

    if file_path is not None:
        for key, (raw, where) in read_config_file(file_path).items():
            values[key] = _parse_one(key, raw, where)
            provided.add(key)

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        values[key] = _parse_one(key, raw.strip(), "override")
        provided.add(key)

    seed_from_env = False
    if "seed" not in provided and os.environ.get(SEED_ENV_VAR):
        values["seed"] = _parse_one("seed", os.environ[SEED_ENV_VAR], f"env {SEED_ENV_VAR}")
        seed_from_env = True

    cfg = RunConfig(values=values, provided=provided, seed_from_env=seed_from_env)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    cfg.degrade_spec()
    cfg.backbone_config()
    cfg.margin_config()
    cfg.distill_config()
    cfg.train_config(student=True)
    if cfg.values["attention_site_policy"] not in (ALL_ELIGIBLE_CONVS, PER_BLOCK):
        raise ConfigError(
            f"bad value for key attention_site_policy: {cfg.values['attention_site_policy']!r}"
        )
    if cfg.values["workers"] < 1:
        raise ConfigError(f"bad value for key workers: {cfg.values['workers']}")
    if cfg.values["task"] not in ("verify", "identify"):
        raise ConfigError(f"bad value for key task: {cfg.values['task']!r}")
    if any(k < 1 for k in cfg.values["eval_ks"]):
        raise ConfigError(f"bad value for key eval_ks: {cfg.values['eval_ks']}")
