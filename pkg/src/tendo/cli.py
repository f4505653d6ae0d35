"""Command-line entry point: ``tendo [CONFIG] [--set key=value ...]``."""
from __future__ import annotations

import os

# Thread caps must be in place before numpy loads its BLAS.
_THREADS = os.environ.get("TENDO_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ[_var] = _THREADS

import argparse  # noqa: E402
import csv  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import List, Optional, Sequence  # noqa: E402

import numpy as np  # noqa: E402

from . import io as tio  # noqa: E402
from .config import ARCH_KEYS, ConfigError, RunConfig, format_value, help_text, parse_config  # noqa: E402


class TaskError(RuntimeError):
    """A task ran but its result is a failure (for example a failed gradient check)."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- shared helpers ----------------------------------------------------------

def resolve_dataset(spec: str, folds: int):
    """Samples from a directory or from ``synth:<kind>:<n>:<seed>``."""
    from . import synthdata

    if not spec:
        raise ConfigError("this task needs 'dataset'")
    if spec.startswith("synth:"):
        try:
            _, kind, n, seed = spec.split(":")
            n, seed = int(n), int(seed)
        except ValueError:
            raise ConfigError(f"synthetic dataset must be synth:<kind>:<n>:<seed>, got {spec!r}") from None
        return synthdata.generate_dataset(_phantom_spec(kind), n, seed, k=max(folds, 0))
    return tio.read_dataset(spec)


def _phantom_spec(kind: str):
    from . import synthdata

    makers = {"segmentation": synthdata.segmentation_spec, "classification": synthdata.classification_spec,
              "pretraining": synthdata.pretraining_spec}
    if kind not in makers:
        raise ConfigError(f"unknown phantom kind {kind!r}; expected one of {', '.join(makers)}")
    return makers[kind]()


def seg_model_config(cfg: RunConfig, shape):
    from .models.nasunet import NASUNetConfig

    return NASUNetConfig(levels=cfg.seg_levels, repeats=cfg.seg_repeats, base_filters=cfg.seg_filters,
                         input_size=tuple(shape), filter_growth=cfg.seg_filter_growth, use_bn=cfg.seg_use_bn)


def cls_model_config(cfg: RunConfig, shape):
    from .models.classifier import ClassifierConfig
    from .models.nasunet import NASUNetConfig

    backbone = NASUNetConfig(levels=cfg.cls_levels, repeats=cfg.cls_repeats, base_filters=cfg.cls_filters,
                             input_size=tuple(shape))
    return ClassifierConfig(backbone=backbone, width=cfg.cls_width, dropout=cfg.cls_dropout, scenario=cfg.scenario,
                            top_activation=cfg.cls_top_activation)


def _write_arch(out: Path, cfg: RunConfig) -> None:
    (out / "model.cfg").write_text("".join(f"{k} = {format_value(getattr(cfg, k))}\n" for k in ARCH_KEYS))


def _mask_pgm(mask) -> np.ndarray:
    return (np.asarray(mask) != 0).astype(np.uint8) * 255


def _load_weights(model, cfg: RunConfig) -> None:
    if not cfg.checkpoint:
        raise ConfigError(f"task {cfg.task} needs 'checkpoint'")
    model.load_state_dict(tio.load_checkpoint(cfg.checkpoint))


def _write_report(out: Path, report) -> None:
    tio.write_metrics_csv(out / "metrics.csv", report.as_rows())
    if report.roc:
        tio.write_roc_csv(out / "roc.csv", report.roc)
        (out / "roc.svg").write_text(tio.roc_svg(report.roc, report.auc))


# -- tasks -------------------------------------------------------------------

def task_synth_gen(cfg: RunConfig, out: Path) -> None:
    from . import synthdata

    spec = _phantom_spec(cfg.synth_kind)
    samples = synthdata.generate_dataset(spec, cfg.n_samples, cfg.seed, k=cfg.folds)
    text = f"kind = {cfg.synth_kind}\nseed = {cfg.seed}\n" + "".join(
        f"{k} = {v}\n" for k, v in spec.to_dict().items())
    tio.write_dataset(out, samples, text)
    _log(f"wrote {len(samples)} samples to {out}")


def _seg_task(cfg: RunConfig, train: bool):
    from .augment import AugmentPolicy
    from .trainer import SegmentationTask

    policy = AugmentPolicy.for_task("segmentation") if (cfg.augment and train) else None
    return SegmentationTask(policy, cfg.threshold)


def _seg_schedule(cfg: RunConfig, has_pretrain: bool):
    from .trainer import segmentation_schedule

    return segmentation_schedule(cfg.seg_epochs_pretrain if has_pretrain else 0, cfg.seg_epochs_finetune,
                                 cfg.batch_size, cfg.seg_backbone_lr, cfg.seg_new_lr, cfg.seg_finetune_lr)


def _write_predictions(out: Path, samples, outputs, threshold: float) -> list:
    from .segpost import segment_postprocess

    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    masks = []
    for s, o in zip(samples, outputs):
        m = segment_postprocess(o[0], threshold, warn=False)
        tio.write_pgm(pred_dir / f"{s.id}.pgm", _mask_pgm(m))
        masks.append(m)
    return masks


def task_seg_train(cfg: RunConfig, out: Path) -> None:
    from .models.nasunet import build_nasunet
    from .trainer import cross_validate, run_schedule

    samples = resolve_dataset(cfg.dataset, cfg.folds)
    extra = {}
    if cfg.pretrain_dataset:
        extra["pretrain"] = resolve_dataset(cfg.pretrain_dataset, 0)
    mcfg = seg_model_config(cfg, samples[0].image.shape)
    schedule = _seg_schedule(cfg, bool(extra))
    task = _seg_task(cfg, train=True)
    _write_arch(out, cfg)
    if cfg.folds >= 2:
        cv = cross_validate(lambda s: build_nasunet(mcfg, s), samples, task, schedule, cfg.seed, cfg.folds,
                            extra, fold_dir=out / "folds", progress=_log)
        _write_predictions(out, samples, [cv.predictions[s.id] for s in samples], cfg.threshold)
        tio.write_metrics_csv(out / "metrics.csv", cv.aggregate.as_rows())
        tio.write_csv_rows(out / "fold_metrics.csv", ["fold", "seed", "n", "dsc", "jsi"],
                           [(f.fold, f.seed, len(f.ids), format_value(f.report.dsc), format_value(f.report.jsi))
                            for f in cv.folds])
        _log(f"mean held-out DSC {cv.aggregate.dsc:.4f}")
        return
    model = build_nasunet(mcfg, cfg.seed)
    extra["target"] = samples
    run_schedule(model, schedule, extra, cfg.seed, task, log_path=out / "log.csv",
                 checkpoint_path=out / "train_state.ckpt", progress=_log)
    tio.save_checkpoint(out / "model.ckpt", model.state_dict())


def _seg_model_outputs(cfg: RunConfig, samples):
    from .models.nasunet import build_nasunet
    from .trainer import predict

    model = build_nasunet(seg_model_config(cfg, samples[0].image.shape), cfg.seed)
    _load_weights(model, cfg)
    return predict(model, _seg_task(cfg, train=False), samples)


def task_seg_eval(cfg: RunConfig, out: Path) -> None:
    from .metrics import segmentation_report

    samples = resolve_dataset(cfg.dataset, cfg.folds)
    masks = _write_predictions(out, samples, _seg_model_outputs(cfg, samples), cfg.threshold)
    report = segmentation_report([s.mask for s in samples], masks)
    tio.write_metrics_csv(out / "metrics.csv", report.as_rows())
    _log(f"DSC {report.dsc:.4f} JSI {report.jsi:.4f}")


def task_seg_predict(cfg: RunConfig, out: Path) -> None:
    samples = resolve_dataset(cfg.dataset, cfg.folds)
    _write_predictions(out, samples, _seg_model_outputs(cfg, samples), cfg.threshold)
    _log(f"wrote {len(samples)} masks to {out / 'predictions'}")


def task_sweep_threshold(cfg: RunConfig, out: Path) -> None:
    from .metrics import segmentation_report
    from .segpost import segment_postprocess

    samples = resolve_dataset(cfg.dataset, cfg.folds)
    outputs = _seg_model_outputs(cfg, samples)
    rows = []
    for t in np.round(np.arange(1, 20) * 0.05, 2):
        masks = [segment_postprocess(o[0], float(t), warn=False) for o in outputs]
        rep = segmentation_report([s.mask for s in samples], masks)
        rows.append((format_value(float(t)), format_value(rep.dsc), format_value(rep.jsi)))
    tio.write_csv_rows(out / "sweep.csv", ["threshold", "dsc", "jsi"], rows)


def task_pos_maps(cfg: RunConfig, out: Path) -> None:
    from .posinfo import build_position_maps, to_preview

    src = Path(cfg.dataset)
    folder = src / "masks" if (src / "masks").is_dir() else src
    paths = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".pgm", ".png"))
    if not paths:
        raise ConfigError(f"no mask images found in {folder}")
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    for p in paths:
        pm = build_position_maps(tio.read_image(p) > 0)
        tio.save_tensor(maps_dir / f"{p.stem}_rn.tnd", pm.radius[None, None])
        tio.save_tensor(maps_dir / f"{p.stem}_theta.tnd", pm.angle[None, None])
        tio.write_pgm(maps_dir / f"{p.stem}_rn.pgm", to_preview(pm.radius))
        tio.write_pgm(maps_dir / f"{p.stem}_theta.pgm", to_preview(pm.angle))
    _log(f"wrote {len(paths)} map pairs to {maps_dir}")


def _cls_task(cfg: RunConfig, train: bool):
    from .augment import AugmentPolicy
    from .trainer import ClassificationTask

    policy = AugmentPolicy.for_task("classification") if (cfg.augment and train) else None
    return ClassificationTask(cfg.scenario, policy)


def _cls_schedule(cfg: RunConfig):
    from .trainer import classification_schedule

    return classification_schedule(cfg.cls_epochs_transfer, cfg.cls_epochs_finetune, cfg.batch_size,
                                   cfg.cls_backbone_lr, cfg.cls_new_lr, cfg.cls_finetune_lr)


def _write_scores(out: Path, samples, scores) -> None:
    tio.write_csv_rows(out / "scores.csv", ["id", "label", "fold", "score"],
                       [(s.id, s.label, s.fold, format_value(float(v))) for s, v in zip(samples, scores)])


def task_cls_train(cfg: RunConfig, out: Path) -> None:
    from .models.classifier import build_classifier
    from .trainer import cross_validate, run_schedule

    samples = resolve_dataset(cfg.dataset, cfg.folds)
    mcfg = cls_model_config(cfg, samples[0].image.shape)
    task, schedule = _cls_task(cfg, True), _cls_schedule(cfg)
    _write_arch(out, cfg)
    if cfg.folds >= 2:
        cv = cross_validate(lambda s: build_classifier(mcfg, s), samples, task, schedule, cfg.seed, cfg.folds,
                            fold_dir=out / "folds", progress=_log)
        _write_scores(out, samples, [cv.predictions[s.id][1] for s in samples])
        _write_report(out, cv.aggregate)
        tio.write_csv_rows(out / "fold_metrics.csv", ["fold", "seed", "n", "acc", "auc"],
                           [(f.fold, f.seed, len(f.ids), format_value(f.report.acc), format_value(f.report.auc))
                            for f in cv.folds])
        _log(f"{cfg.scenario}: pooled AUC {cv.aggregate.auc:.4f}")
        return
    model = build_classifier(mcfg, cfg.seed)
    run_schedule(model, schedule, {"target": samples}, cfg.seed, task, log_path=out / "log.csv",
                 checkpoint_path=out / "train_state.ckpt", progress=_log)
    tio.save_checkpoint(out / "model.ckpt", model.state_dict())


def task_cls_eval(cfg: RunConfig, out: Path) -> None:
    from .metrics import classification_report
    from .models.classifier import build_classifier
    from .trainer import predict

    samples = resolve_dataset(cfg.dataset, cfg.folds)
    model = build_classifier(cls_model_config(cfg, samples[0].image.shape), cfg.seed)
    _load_weights(model, cfg)
    scores = predict(model, _cls_task(cfg, False), samples)[:, 1]
    _write_scores(out, samples, scores)
    report = classification_report([s.label for s in samples], scores)
    _write_report(out, report)
    _log(f"{cfg.scenario}: AUC {report.auc:.4f}")


def task_roc(cfg: RunConfig, out: Path) -> None:
    from .metrics import classification_report

    if not cfg.scores:
        raise ConfigError("task roc needs 'scores' (CSV with label and score columns)")
    with open(cfg.scores, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or "label" not in rows[0] or "score" not in rows[0]:
        raise ConfigError(f"{cfg.scores}: expected 'label' and 'score' columns")
    report = classification_report([int(r["label"]) for r in rows], [float(r["score"]) for r in rows])
    _write_report(out, report)
    _log(f"AUC {report.auc:.4f}")


def task_augment_preview(cfg: RunConfig, out: Path) -> None:
    from .augment import AugmentPolicy, apply_augment, sample_rng

    samples = resolve_dataset(cfg.dataset, 0)[:4]
    policy = AugmentPolicy.for_task("classification" if cfg.synth_kind == "classification" else "segmentation")
    rows = []
    for i, s in enumerate(samples):
        imgs, masks = [s.image], [_mask_pgm(s.mask)]
        for e in range(cfg.preview_count):
            im, m = apply_augment(s.image, s.mask, policy, sample_rng(cfg.seed, i, e))
            imgs.append(im)
            masks.append(_mask_pgm(m))
        rows += [np.hstack(imgs), np.hstack(masks)]
    tio.write_pgm(out / "preview.pgm", np.vstack(rows))


def task_gradcheck(cfg: RunConfig, out: Path) -> None:
    from .gradcheck import adjoint_error, check_ops

    reports = check_ops(cfg.tolerance, cfg.seed)
    rows = [(r.name, format_value(r.max_error), "pass" if r.passed else "FAIL") for r in reports]
    adj = adjoint_error(cfg.seed)
    rows.append(("conv_transpose_adjoint", format_value(adj), "pass" if adj < 1e-5 else "FAIL"))
    tio.write_csv_rows(out / "gradcheck.csv", ["op", "max_rel_error", "status"], rows)
    for r in rows:
        _log(f"{r[0]:28s} {r[1]:>24s} {r[2]}")
    failed = [r[0] for r in rows if r[2] == "FAIL"]
    if failed:
        raise TaskError(f"gradient check failed for: {', '.join(failed)}")


TASK_FUNCS = {
    "seg-train": task_seg_train, "seg-eval": task_seg_eval, "seg-predict": task_seg_predict,
    "pos-maps": task_pos_maps, "cls-train": task_cls_train, "cls-eval": task_cls_eval,
    "synth-gen": task_synth_gen, "augment-preview": task_augment_preview, "gradcheck": task_gradcheck,
    "roc": task_roc, "sweep-threshold": task_sweep_threshold,
}


def run(cfg: RunConfig) -> int:
    """Execute one task; returns the process exit status."""
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest").write_text(cfg.manifest())
    try:
        TASK_FUNCS[cfg.task](cfg, out)
    except TaskError as exc:
        _log(f"{cfg.task}: {exc}")
        return 1
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        _log(f"{cfg.task}: error: {exc}")
        return 2
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="tendo", description="Tendon ultrasound segmentation and classification experiments.",
        epilog=help_text() + "\n\nTENDO_THREADS caps worker threads (default 1, required for bit-exact runs).",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("config", nargs="?", help="key = value configuration file (a manifest also works)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one key; repeatable")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, args.set)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return 2
    return run(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
