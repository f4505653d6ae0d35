"""Adam optimisation, phased transfer-learning schedules and k-fold cross-validation.

Every random stream is derived from the run seed: shuffling from
``(seed, phase, epoch)``, augmentation from ``(seed, sample index, epoch)``
and dropout from ``(seed, phase, epoch, step)``. With one thread the whole
run is therefore bit-reproducible, including after a resume from checkpoint.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import io as tio
from .augment import AugmentPolicy, apply_augment, sample_rng
from .engine import ops
from .engine.tensor import Tensor, backward, no_grad
from .metrics import EvalReport, classification_report, overlap_metrics, segmentation_report
from .models.classifier import assemble_input, normalize_image
from .objective import LossConfig, hybrid_loss_tensor
from .posinfo import EmptySegmentationError, build_position_maps
from .segpost import DEFAULT_THRESHOLD, binarize, segment_postprocess

GROUPS = ("backbone", "new")
LOG_HEADER = ("phase", "epoch", "split", "loss", "dsc_or_acc")


class TrainingError(RuntimeError):
    """Training cannot continue (NaN gradient or diverged loss)."""


# -- optimiser ---------------------------------------------------------------

class Adam:
    """Bias-corrected Adam with one learning rate per parameter group.

    A group whose learning rate is 0 is skipped entirely, so frozen parameters
    stay bit-identical.
    """

    def __init__(self, named_params: Mapping[str, Tensor], group_of: Callable[[str], str],
                 lrs: Mapping[str, float], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = OrderedDict(named_params)
        self.group = {k: group_of(k) for k in self.params}
        self.lrs = dict(lrs)
        for g in set(self.group.values()):
            if g not in self.lrs:
                raise KeyError(f"no learning rate for parameter group {g!r}")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {k!r} at step {self.step_count + 1}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            lr = self.lrs[self.group[k]]
            if lr == 0 or p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {"optim/step": np.array([self.step_count], np.float32)}
        for k in self.params:
            out[f"optim/m/{k}"] = self.m[k]
            out[f"optim/v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.step_count = int(np.asarray(state["optim/step"]).reshape(-1)[0])
        for k, p in self.params.items():
            self.m[k] = np.asarray(state[f"optim/m/{k}"], dtype=p.dtype).copy()
            self.v[k] = np.asarray(state[f"optim/v/{k}"], dtype=p.dtype).copy()


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: Adam) -> None:
    """Functional entry point: install ``grads`` and advance ``state`` by one step."""
    for k, p in params.items():
        p.grad = grads.get(k)
    state.step()


# -- schedules ---------------------------------------------------------------

@dataclass(frozen=True)
class Phase:
    dataset: str
    epochs: int
    lrs: Mapping[str, float]
    name: str = ""

    def group_lrs(self) -> Dict[str, float]:
        """Expand the ``all`` shorthand into per-group rates."""
        lrs = dict(self.lrs)
        if "all" in lrs:
            base = lrs.pop("all")
            for g in GROUPS:
                lrs.setdefault(g, base)
        for g, lr in lrs.items():
            if g not in GROUPS:
                raise ValueError(f"unknown parameter group {g!r}")
            if lr < 0 or not math.isfinite(lr):
                raise ValueError(f"learning rate for {g!r} must be finite and >= 0, got {lr}")
        return lrs


@dataclass(frozen=True)
class Schedule:
    phases: Tuple[Phase, ...]
    batch_size: int = 8

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for ph in self.phases:
            if ph.epochs < 0:
                raise ValueError(f"phase {ph.name or ph.dataset}: epochs must be >= 0")
            ph.group_lrs()


def segmentation_schedule(pretrain_epochs: int = 200, finetune_epochs: int = 100, batch_size: int = 8,
                          backbone_lr: float = 1e-3, new_lr: float = 3e-3, finetune_lr: float = 4e-4) -> Schedule:
    phases = []
    if pretrain_epochs:
        phases.append(Phase("pretrain", pretrain_epochs, {"backbone": backbone_lr, "new": new_lr}, "pretrain"))
    phases.append(Phase("target", finetune_epochs, {"all": finetune_lr}, "finetune"))
    return Schedule(tuple(phases), batch_size)


def classification_schedule(pretrain_epochs: int = 0, finetune_epochs: int = 30, batch_size: int = 8,
                            backbone_lr: float = 1e-3, new_lr: float = 5e-3, finetune_lr: float = 5e-4) -> Schedule:
    """First phase on the target data with differential rates, then a uniform lower rate."""
    phases = []
    if pretrain_epochs:
        phases.append(Phase("target", pretrain_epochs, {"backbone": backbone_lr, "new": new_lr}, "transfer"))
    phases.append(Phase("target", finetune_epochs, {"all": finetune_lr}, "finetune"))
    return Schedule(tuple(phases), batch_size)


# -- tasks -------------------------------------------------------------------

class SegmentationTask:
    metric = "dsc"

    def __init__(self, augment: Optional[AugmentPolicy] = None, threshold: float = DEFAULT_THRESHOLD,
                 loss_cfg: LossConfig = LossConfig()):
        self.augment = augment
        self.threshold = threshold
        self.loss_cfg = loss_cfg

    def example(self, sample, index: int, seed: int, epoch: Optional[int]):
        image, mask = sample.image, sample.mask
        if self.augment is not None and epoch is not None:
            image, mask = apply_augment(image, mask, self.augment, sample_rng(seed, index, epoch))
        return assemble_input(image, "OI")[0], (np.asarray(mask) != 0).astype(np.float32)[None]

    def loss(self, out: Tensor, y: np.ndarray) -> Tensor:
        return hybrid_loss_tensor(out, y, self.loss_cfg)

    def scores(self, out: np.ndarray, y: np.ndarray) -> List[float]:
        return [overlap_metrics(t[0], binarize(p[0], self.threshold))[0] for p, t in zip(out, y)]


class ClassificationTask:
    metric = "acc"

    def __init__(self, scenario: str, augment: Optional[AugmentPolicy] = None):
        self.scenario = scenario
        self.augment = augment

    def example(self, sample, index: int, seed: int, epoch: Optional[int]):
        image, mask = sample.image, sample.mask
        if self.augment is not None and epoch is not None:
            aug_img, aug_mask = apply_augment(image, mask, self.augment, sample_rng(seed, index, epoch))
            if aug_mask is not None and aug_mask.any():
                image, mask = aug_img, aug_mask
        posmaps = build_position_maps(mask) if self.scenario == "PI" else None
        return assemble_input(image, self.scenario, mask, posmaps)[0], int(sample.label)

    def loss(self, out: Tensor, y: np.ndarray) -> Tensor:
        return ops.cross_entropy(out, y)

    def scores(self, out: np.ndarray, y: np.ndarray) -> List[float]:
        return [float(int(np.argmax(o)) == int(t)) for o, t in zip(out, y)]


def make_batch(task, samples: Sequence, indices: Sequence[int], seed: int, epoch: Optional[int]):
    xs, ys = zip(*(task.example(samples[i], i, seed, epoch) for i in indices))
    return np.stack(xs).astype(np.float32), np.asarray(ys) if np.ndim(ys[0]) == 0 else np.stack(ys)


def predict(model, task, samples: Sequence, batch_size: int = 16) -> np.ndarray:
    """Inference-mode outputs for every sample, in order."""
    model.eval()
    outs = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            idx = list(range(start, min(start + batch_size, len(samples))))
            x, _ = make_batch(task, samples, idx, 0, None)
            outs.append(model(Tensor(x)).data.copy())
    return np.concatenate(outs) if outs else np.zeros((0,))


def evaluate(model, task, samples: Sequence, batch_size: int = 16) -> Tuple[float, float]:
    """Mean loss and mean per-sample metric on ``samples`` (no augmentation)."""
    model.eval()
    losses, scores = [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            idx = list(range(start, min(start + batch_size, len(samples))))
            x, y = make_batch(task, samples, idx, 0, None)
            out = model(Tensor(x))
            losses.append(float(task.loss(out, y).data) * len(idx))
            scores.extend(task.scores(out.data, y))
    return sum(losses) / len(samples), float(np.mean(scores))


# -- training loop -----------------------------------------------------------

@dataclass
class RunResult:
    log: List[Tuple[str, int, str, float, float]] = field(default_factory=list)
    steps: int = 0


def _fmt_row(row) -> List[str]:
    phase, epoch, split, loss, metric = row
    return [phase, str(epoch), split, repr(float(loss)), repr(float(metric))]


def write_log(path, rows) -> None:
    tio.write_csv_rows(path, LOG_HEADER, [_fmt_row(r) for r in rows])


def _snapshot(model, opt: Optional[Adam], phase: int, epoch: int) -> Dict[str, np.ndarray]:
    state = {k: np.array(v, copy=True) for k, v in model.state_dict().items()}
    if opt is not None:
        state.update({k: np.array(v, copy=True) for k, v in opt.state_dict().items()})
    state["meta/phase"] = np.array([phase], np.float32)
    state["meta/epoch"] = np.array([epoch], np.float32)
    return state


def run_schedule(model, schedule: Schedule, data: Mapping[str, Sequence], seed: int, task,
                 val: Optional[Sequence] = None, log_path=None, checkpoint_path=None,
                 resume: bool = False, stop_after: Optional[Tuple[int, int]] = None,
                 progress: Optional[Callable[[str], None]] = None) -> RunResult:
    """Train ``model`` through the phases of ``schedule``.

    A fresh optimiser is created for each phase. When ``checkpoint_path`` is
    given, model, optimiser and position are saved after every epoch, and
    ``resume=True`` continues from that file. ``stop_after=(phase, epoch)``
    halts after the given epoch (used to test resumption).
    """
    schedule.validate()
    for ph in schedule.phases:
        if ph.dataset not in data:
            raise KeyError(f"dataset {ph.dataset!r} required by the schedule was not supplied")
    result = RunResult()
    start_phase, start_epoch, loaded = 0, 0, None
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        loaded = tio.load_checkpoint(checkpoint_path)
        model.load_state_dict(loaded)
        start_phase = int(loaded["meta/phase"][0])
        start_epoch = int(loaded["meta/epoch"][0]) + 1
        if log_path is not None and Path(log_path).exists():
            result.log = _read_log(log_path)

    params = model.named_parameters()
    global_epoch = sum(ph.epochs for ph in schedule.phases[:start_phase]) + start_epoch
    for pi, ph in enumerate(schedule.phases):
        if pi < start_phase:
            continue
        opt = Adam(params, model.param_group, ph.group_lrs())
        first = start_epoch if pi == start_phase else 0
        if loaded is not None and pi == start_phase and "optim/step" in loaded and first > 0:
            opt.load_state_dict(loaded)
        samples = data[ph.dataset]
        phase_name = ph.name or f"phase{pi}"
        for epoch in range(first, ph.epochs):
            good = _snapshot(model, opt, pi, epoch - 1)
            order = np.random.default_rng([seed, pi, epoch]).permutation(len(samples))
            model.train()
            losses, scores = [], []
            for step, start in enumerate(range(0, len(order), schedule.batch_size)):
                idx = order[start:start + schedule.batch_size].tolist()
                x, y = make_batch(task, samples, idx, seed, global_epoch)
                if hasattr(model, "set_dropout_rng"):
                    model.set_dropout_rng(np.random.default_rng([seed, pi, epoch, step]))
                model.zero_grad()
                out = model(Tensor(x))
                loss = task.loss(out, y)
                value = float(loss.data)
                if not math.isfinite(value):
                    _abort(good, checkpoint_path, f"loss became {value} in phase {phase_name}, epoch {epoch}")
                backward(loss)
                try:
                    opt.step()
                except TrainingError as exc:
                    _abort(good, checkpoint_path, str(exc))
                result.steps += 1
                losses.append(value * len(idx))
                scores.extend(task.scores(out.data, y))
            row = (phase_name, epoch, "train", sum(losses) / len(samples), float(np.mean(scores)))
            result.log.append(row)
            if val is not None and len(val):
                vl, vm = evaluate(model, task, val)
                result.log.append((phase_name, epoch, "val", vl, vm))
            if progress:
                progress(" | ".join(",".join(_fmt_row(r)) for r in result.log[-2 if val else -1:]))
            if checkpoint_path is not None:
                tio.save_checkpoint(checkpoint_path, _snapshot(model, opt, pi, epoch))
            if log_path is not None:
                write_log(log_path, result.log)
            global_epoch += 1
            if stop_after is not None and (pi, epoch) == tuple(stop_after):
                return result
    if log_path is not None:
        write_log(log_path, result.log)
    return result


def _abort(good, checkpoint_path, message: str) -> None:
    if checkpoint_path is not None:
        tio.save_checkpoint(checkpoint_path, good)
        message += f"; last good state saved to {checkpoint_path}"
    raise TrainingError(message)


def _read_log(path) -> List[Tuple[str, int, str, float, float]]:
    import csv

    with open(path, newline="") as f:
        return [(r["phase"], int(r["epoch"]), r["split"], float(r["loss"]), float(r["dsc_or_acc"]))
                for r in csv.DictReader(f)]


# -- cross-validation --------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    seed: int
    ids: List[str]
    outputs: np.ndarray
    report: EvalReport
    log: list


@dataclass
class CVResult:
    folds: List[FoldResult]
    predictions: Dict[str, np.ndarray]
    aggregate: EvalReport


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, 1000 + fold]).generate_state(1)[0])


def cross_validate(build_model: Callable[[int], object], samples: Sequence, task, schedule: Schedule,
                   seed: int, k: int = 5, extra_data: Optional[Mapping[str, Sequence]] = None,
                   init_state: Optional[Mapping[str, np.ndarray]] = None,
                   fold_dir=None, progress: Optional[Callable[[str], None]] = None) -> CVResult:
    """Train one model per fold and test it on the held-out fold.

    ``build_model(fold_seed)`` returns a fresh model; ``init_state`` (for
    example pretrained weights) is loaded into it before training. The
    aggregate report averages per image (segmentation) or pools per sample
    (classification) over all held-out predictions.
    """
    folds = sorted({s.fold for s in samples})
    if folds != list(range(k)):
        raise ValueError(f"samples must carry fold assignments 0..{k - 1}, found {folds}")
    results: List[FoldResult] = []
    preds: Dict[str, np.ndarray] = {}
    for f in range(k):
        fs = fold_seed(seed, f)
        train = [s for s in samples if s.fold != f]
        test = [s for s in samples if s.fold == f]
        model = build_model(fs)
        if init_state is not None:
            model.load_state_dict(init_state)
        data = dict(extra_data or {})
        data["target"] = train
        log_path = ckpt = None
        if fold_dir is not None:
            Path(fold_dir).mkdir(parents=True, exist_ok=True)
            log_path = Path(fold_dir) / f"fold{f}_log.csv"
            ckpt = Path(fold_dir) / f"fold{f}.ckpt"
        run = run_schedule(model, schedule, data, fs, task, log_path=log_path, checkpoint_path=ckpt,
                           progress=(lambda m, f=f: progress(f"fold {f}: {m}")) if progress else None)
        out = predict(model, task, test)
        report = _report(task, test, out)
        results.append(FoldResult(f, fs, [s.id for s in test], out, report, run.log))
        for s, o in zip(test, out):
            preds[s.id] = o
    ordered = [preds[s.id] for s in samples]
    return CVResult(results, preds, _report(task, samples, np.stack(ordered)))


def _report(task, samples: Sequence, outputs: np.ndarray) -> EvalReport:
    if isinstance(task, SegmentationTask):
        truths = [s.mask for s in samples]
        masks = [segment_postprocess(o[0], task.threshold, warn=False) for o in outputs]
        return segmentation_report(truths, masks)
    labels = [int(s.label) for s in samples]
    scores = outputs[:, 1]
    if len(set(labels)) < 2:
        from .metrics import basic_metrics, confusion

        return EvalReport(**basic_metrics(confusion((scores >= 0.5).astype(int), labels)))
    return classification_report(labels, scores)
