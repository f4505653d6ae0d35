"""Run configuration: strict ``key = value`` files with ``#`` comments."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

TASKS = ("seg-train", "seg-eval", "seg-predict", "pos-maps", "cls-train", "cls-eval", "synth-gen",
         "augment-preview", "gradcheck", "roc", "sweep-threshold")


class ConfigError(ValueError):
    """Invalid configuration text; the message names the file and line."""


def _opt(default, help: str):
    return field(default=default, metadata={"help": help})


@dataclass(frozen=True)
class RunConfig:
    task: str = _opt("seg-train", "one of " + ", ".join(TASKS))
    dataset: str = _opt("", "dataset directory, or synth:<kind>:<n>:<seed> for in-memory phantoms")
    pretrain_dataset: str = _opt("", "dataset for the first segmentation phase (empty: phase skipped)")
    output: str = _opt("out", "output directory (created; receives a manifest)")
    seed: int = _opt(0, "global seed for initialisation, shuffling, augmentation and dropout")
    scenario: str = _opt("PI", "classifier input: OI, WM or PI")
    model_config: str = _opt("", "optional file overriding the seg_*/cls_* architecture keys")
    checkpoint: str = _opt("", "weights for seg-eval, seg-predict, sweep-threshold and cls-eval")
    scores: str = _opt("", "CSV with label and score columns for the roc task")
    folds: int = _opt(5, "cross-validation folds; 0 trains one model on all samples")
    batch_size: int = _opt(8, "mini-batch size")
    augment: bool = _opt(True, "on-the-fly augmentation during training")
    threshold: float = _opt(0.4, "post-processing threshold T")
    tolerance: float = _opt(1e-4, "gradcheck pass threshold on max relative error")
    synth_kind: str = _opt("segmentation", "synth-gen population: segmentation, classification or pretraining")
    n_samples: int = _opt(200, "synth-gen sample count")
    preview_count: int = _opt(6, "augment-preview: augmented copies per sample")
    seg_levels: int = _opt(3, "NASUNet levels")
    seg_repeats: int = _opt(2, "Normal cells per level (N)")
    seg_filters: int = _opt(32, "base filters (F)")
    seg_filter_growth: int = _opt(1, "filter multiplier per level")
    seg_use_bn: bool = _opt(True, "batch norm inside cells")
    seg_epochs_pretrain: int = _opt(4, "epochs of the pretraining phase")
    seg_epochs_finetune: int = _opt(8, "epochs of the fine-tuning phase")
    seg_backbone_lr: float = _opt(1e-3, "pretraining rate of the encoder")
    seg_new_lr: float = _opt(3e-3, "pretraining rate of the other layers")
    seg_finetune_lr: float = _opt(4e-4, "fine-tuning rate for all layers")
    cls_levels: int = _opt(2, "classifier backbone levels")
    cls_repeats: int = _opt(1, "classifier backbone Normal cells per level")
    cls_filters: int = _opt(8, "classifier backbone base filters")
    cls_width: float = _opt(0.25, "width factor of the 1024/64 dense layers")
    cls_dropout: float = _opt(0.2, "dropout rate after each dense layer")
    cls_top_activation: str = _opt("linear", "activation of the two hidden dense layers: relu or linear")
    cls_epochs_transfer: int = _opt(30, "epochs with differential learning rates")
    cls_epochs_finetune: int = _opt(10, "epochs at the uniform lower rate")
    cls_backbone_lr: float = _opt(1e-3, "first-phase backbone rate")
    cls_new_lr: float = _opt(5e-3, "first-phase rate of the top layers")
    cls_finetune_lr: float = _opt(5e-4, "second-phase rate for all layers")

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.scenario not in ("OI", "WM", "PI"):
            raise ConfigError(f"scenario must be OI, WM or PI, got {self.scenario!r}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.folds == 1 or self.folds < 0:
            raise ConfigError("folds must be 0 or >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def items(self) -> List[Tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def manifest(self) -> str:
        lines = ["# resolved run configuration; rerun with: tendo <this file>"]
        lines += [f"{k} = {format_value(v)}" for k, v in self.items()]
        return "\n".join(lines) + "\n"


ARCH_KEYS = tuple(f.name for f in fields(RunConfig)
                  if f.name.startswith(("seg_", "cls_")) and "epochs" not in f.name and not f.name.endswith("_lr"))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(float(v)) if isinstance(v, float) else str(v)


def _convert(raw: str, typ, key: str, where: str):
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{where}: {key} expects a boolean, got {raw!r}")
    if typ is int or typ == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: {key} expects an integer, got {raw!r}") from None
    if typ is float or typ == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: {key} expects a number, got {raw!r}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def _types() -> Dict[str, object]:
    return {f.name: f.type for f in fields(RunConfig)}


def parse_lines(lines: Iterable[str], source: str = "<config>",
                allowed: Optional[Iterable[str]] = None) -> Dict[str, object]:
    types = _types()
    allowed = set(allowed) if allowed is not None else set(types)
    out: Dict[str, object] = {}
    for no, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        where = f"{source}:{no}"
        if "=" not in text:
            raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        out[key] = _convert(raw, types[key], key, where)
    return out


def parse_config(path: Union[str, Path, None] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a config file (``None`` for pure defaults) and apply ``key=value`` overrides."""
    values: Dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        values.update(parse_lines(p.read_text(encoding="utf-8").splitlines(), str(p)))
    over = parse_lines(list(overrides), "--set")
    values.update(over)
    cfg = replace(RunConfig(), **values)
    if cfg.model_config:
        mp = Path(cfg.model_config)
        if not mp.is_file():
            raise ConfigError(f"model config {mp} not found")
        arch = parse_lines(mp.read_text(encoding="utf-8").splitlines(), str(mp), ARCH_KEYS)
        arch = {k: v for k, v in arch.items() if k not in over}
        cfg = replace(cfg, **arch)
    cfg.validate()
    return cfg


def help_text() -> str:
    rows = [f"  {f.name:22s} default {format_value(f.default):14s} {f.metadata['help']}" for f in fields(RunConfig)]
    return "configuration keys:\n" + "\n".join(rows)
