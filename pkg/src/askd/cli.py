"""Command-line entry point: degrade, train-teacher, train-student, evaluate, analyze.

Each run writes only under its run directory (output_root/run_id or an
explicit --out), echoes the fully resolved configuration there, and lists
every artifact it produced in MANIFEST.txt.  Exit codes: 0 success,
1 usage/config error, 2 data error, 3 training/eval failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, evaluate
from .config import RunConfig, parse_config
from .checkpoint import Checkpoint
from .degrade import DegradeSpec, build_pair_manifest, read_manifest
from .errors import AskdError, ConfigError, DataError
from .trainer import read_train_log, train_student, train_teacher

SUBCOMMANDS = ("degrade", "train-teacher", "train-student", "evaluate", "analyze")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit code 1
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="askd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--run-id", help="run identifier (default: 'run')")
        p.add_argument("--output-root", help="root directory for runs")
        p.add_argument("--out", help="explicit run directory (overrides output-root/run-id)")
        p.add_argument("--force", action="store_true", help="allow rerunning into an existing run dir")
        p.add_argument("--workers", type=int, help="bounded worker parallelism")
        p.add_argument("--seed", type=int, help="seed override")

    p = sub.add_parser("degrade", help="build HR/LR pairs and the manifest")
    common(p)
    p.add_argument("--root", help="dataset root: one sub-directory per identity")
    p.add_argument("--ratio", type=int, help="down-sampling ratio")
    p.add_argument("--sigma", type=float, help="blur sigma (default ratio/2)")
    p.add_argument("--kernel-size", type=int, help="blur kernel size (odd)")

    p = sub.add_parser("train-teacher", help="train the HR teacher")
    common(p)
    p.add_argument("--manifest", help="pair manifest from the degrade step")

    p = sub.add_parser("train-student", help="train the LR student with distillation")
    common(p)
    p.add_argument("--manifest", help="pair manifest from the degrade step")
    p.add_argument("--teacher", help="teacher checkpoint path")

    p = sub.add_parser("evaluate", help="verification or identification metrics")
    common(p)
    p.add_argument("--task", choices=("verify", "identify"))
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--pairs", help="verification pair list file")
    p.add_argument("--probe", help="identification probe list (path\\tlabel)")
    p.add_argument("--gallery", help="identification gallery list (path\\tlabel)")
    p.add_argument("--ratio", type=int, help="degrade evaluation images with this ratio")

    p = sub.add_parser("analyze", help="teacher/student attention correlation report")
    common(p)
    p.add_argument("--teacher", help="teacher checkpoint path")
    p.add_argument("--student", help="student checkpoint path")
    p.add_argument("--manifest", help="pair manifest with evaluation images")
    p.add_argument("--overlay-count", type=int, dest="overlay_count",
                   help="also export attention overlays for the first N images")
    return parser


_FLAG_KEYS = {
    "run_id": "run_id", "output_root": "output_root", "out": "out",
    "workers": "workers", "seed": "seed", "root": "root", "ratio": "ratio",
    "sigma": "blur_sigma", "kernel_size": "blur_kernel_size",
    "manifest": "manifest", "teacher": "teacher", "student": "student",
    "task": "task", "checkpoint": "checkpoint", "pairs": "pairs",
    "probe": "probe", "gallery": "gallery", "overlay_count": "overlay_count",
}


def _config_from_args(args) -> RunConfig:
    overrides = list(args.overrides)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if getattr(args, "force", False):
        overrides.append("force=true")
    return parse_config(args.config, overrides)


class _RunDir:
    """Owns the run directory, the config echo, and the artifact manifest."""

    def __init__(self, cfg: RunConfig):
        self.path = cfg.run_dir()
        if self.path.exists() and any(self.path.iterdir()) and not cfg["force"]:
            raise ConfigError(
                f"run directory {self.path} already exists; pass --force to rerun"
            )
        self.path.mkdir(parents=True, exist_ok=True)
        self.artifacts = []
        echo = self.path / "config.txt"
        echo.write_text("\n".join(cfg.echo_lines()) + "\n", encoding="utf-8")
        self.add(echo)

    def add(self, path) -> Path:
        path = Path(path)
        self.artifacts.append(path)
        return path

    def finalize(self):
        lines = []
        for p in self.artifacts:
            try:
                lines.append(str(p.relative_to(self.path)))
            except ValueError:
                lines.append(str(p))
        (self.path / "MANIFEST.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_list_file(path):
    """`<path>\\t<label>` lines; relative paths resolve against the file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"list file not found: {path}")
    base = path.parent
    paths, labels = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected `path\\tlabel`")
        p = Path(parts[0])
        paths.append(str((base / p).resolve()) if not p.is_absolute() else str(p))
        labels.append(int(parts[1]))
    return paths, np.array(labels, dtype=np.int64)


def _require(cfg: RunConfig, key: str) -> str:
    value = cfg.get(key)
    if not value:
        raise ConfigError(f"missing required option --{key.replace('_', '-')}")
    return value


def _plot_losses(log_path: Path, out_path: Path):
    import matplotlib.pyplot as plt

    records = read_train_log(log_path)
    steps = [r.step for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r.total_loss for r in records], label="total")
    ax.plot(steps, [r.target_loss for r in records], label="target")
    if any(r.distill_loss for r in records):
        ax.plot(steps, [r.distill_loss for r in records], label="distill")
    if any(r.logit_kd_loss for r in records):
        ax.plot(steps, [r.logit_kd_loss for r in records], label="logit-kd")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _cmd_degrade(cfg: RunConfig) -> int:
    root = _require(cfg, "root")
    rundir = _RunDir(cfg)
    spec = cfg.degrade_spec()
    result = build_pair_manifest(root, spec, rundir.path, workers=cfg["workers"])
    rundir.add(result.manifest_path)
    for record in result.records:
        rundir.add(Path(record.lr_path))
    rundir.finalize()
    print(
        f"degrade: {len(result.records)} pairs, "
        f"{result.skipped_identities} empty identities skipped, "
        f"{len(result.failures)} failures -> {result.manifest_path}"
    )
    for path, message in result.failures:
        print(f"degrade: failed {path}: {message}", file=sys.stderr)
    return 0


def _cmd_train_teacher(cfg: RunConfig) -> int:
    manifest = _require(cfg, "manifest")
    rundir = _RunDir(cfg)
    records = read_manifest(manifest)
    log_path = rundir.add(rundir.path / "train_log.jsonl")
    ckpt = train_teacher(records, cfg.backbone_config(), cfg.train_config(), log_path=log_path)
    ckpt_path = rundir.add(rundir.path / "teacher.ckpt")
    ckpt.save(ckpt_path)
    curve = rundir.add(rundir.path / "loss_curve.png")
    _plot_losses(log_path, curve)
    rundir.finalize()
    print(f"train-teacher: final total loss {ckpt.meta['final_total_loss']:.4f} -> {ckpt_path}")
    return 0


def _cmd_train_student(cfg: RunConfig) -> int:
    manifest = _require(cfg, "manifest")
    teacher = _require(cfg, "teacher")
    rundir = _RunDir(cfg)
    records = read_manifest(manifest)
    log_path = rundir.add(rundir.path / "train_log.jsonl")
    ckpt = train_student(
        records, teacher, cfg.backbone_config(), cfg.train_config(student=True), log_path=log_path
    )
    ckpt_path = rundir.add(rundir.path / "student.ckpt")
    ckpt.save(ckpt_path)
    curve = rundir.add(rundir.path / "loss_curve.png")
    _plot_losses(log_path, curve)
    rundir.finalize()
    print(f"train-student: final total loss {ckpt.meta['final_total_loss']:.4f} -> {ckpt_path}")
    return 0


def _cmd_evaluate(cfg: RunConfig) -> int:
    checkpoint = _require(cfg, "checkpoint")
    task = cfg["task"]
    rundir = _RunDir(cfg)
    # evaluation images are degraded only when a ratio was explicitly given
    spec = None
    if "ratio" in cfg.provided and cfg["ratio"] > 1:
        spec = DegradeSpec.create(cfg["ratio"], cfg["blur_sigma"], cfg["blur_kernel_size"])
    embedder = evaluate.CheckpointEmbedder(checkpoint, degrade_spec=spec)
    eval_ratio = spec.ratio if spec is not None else 1

    kv_lines = [f"task = {task}", f"checkpoint = {checkpoint}", f"ratio = {eval_ratio}"]
    text_lines = [f"evaluation report ({task})", f"checkpoint: {checkpoint}", ""]
    if task == "verify":
        pairs = evaluate.read_pairs(_require(cfg, "pairs"))
        mean_acc, folds = evaluate.verification_accuracy(pairs, embedder)
        kv_lines.append(f"verification_accuracy = {mean_acc:.10f}")
        text_lines.append(f"verification accuracy (cross-validated): {mean_acc:.4f}")
        for fr in folds:
            kv_lines.append(f"fold_{fr.fold_id}_accuracy = {fr.accuracy:.10f}")
            kv_lines.append(f"fold_{fr.fold_id}_threshold = {fr.threshold:.10f}")
            text_lines.append(
                f"  fold {fr.fold_id}: accuracy {fr.accuracy:.4f} at threshold {fr.threshold:+.4f}"
            )
        headline = mean_acc
    else:
        probe_paths, probe_labels = _read_list_file(_require(cfg, "probe"))
        gallery_paths, gallery_labels = _read_list_file(_require(cfg, "gallery"))
        ids = evaluate.IdentificationSet(
            probe_embeddings=embedder(probe_paths),
            gallery_embeddings=embedder(gallery_paths),
            probe_labels=probe_labels,
            gallery_labels=gallery_labels,
        )
        accs = evaluate.rank_k_accuracy(ids, cfg["eval_ks"])
        for k, acc in accs.items():
            kv_lines.append(f"rank_{k}_accuracy = {acc:.10f}")
            text_lines.append(f"rank-{k} accuracy: {acc:.4f}")
        headline = accs[min(accs)]

    report_kv = rundir.add(rundir.path / "report.kv")
    report_kv.write_text("\n".join(kv_lines) + "\n", encoding="utf-8")
    report_txt = rundir.add(rundir.path / "report.txt")
    report_txt.write_text("\n".join(text_lines) + "\n", encoding="utf-8")
    rundir.finalize()
    print(f"evaluate: {task} headline accuracy {headline:.4f} -> {report_txt}")
    return 0


def _cmd_analyze(cfg: RunConfig) -> int:
    teacher = _require(cfg, "teacher")
    student = _require(cfg, "student")
    manifest = _require(cfg, "manifest")
    rundir = _RunDir(cfg)
    records = read_manifest(manifest)
    report = analysis.attention_correlation(teacher, student, records)
    rundir.add(analysis.write_report_text(report, rundir.path / "correlation.txt"))
    rundir.add(analysis.write_report_kv(report, rundir.path / "correlation.kv"))
    rundir.add(analysis.plot_correlation_bars(report, rundir.path / "correlation_bars.png"))
    n_overlays = cfg["overlay_count"]
    if n_overlays > 0:
        ckpt = Checkpoint.load(student)
        paths = [r.lr_path for r in records[:n_overlays]]
        for p in analysis.export_attention_overlays(ckpt, paths, rundir.path / "overlays"):
            rundir.add(p)
    rundir.finalize()
    print(f"analyze: mean pooled r {report.mean_r():.4f} over {len(report.per_site)} sites")
    return 0


_DISPATCH = {
    "degrade": _cmd_degrade,
    "train-teacher": _cmd_train_teacher,
    "train-student": _cmd_train_student,
    "evaluate": _cmd_evaluate,
    "analyze": _cmd_analyze,
}


def run(subcommand: str, cfg: RunConfig) -> int:
    """Dispatch one subcommand against a resolved config; returns the exit code."""
    if subcommand not in _DISPATCH:
        raise ConfigError(f"unknown subcommand: {subcommand}")
    return _DISPATCH[subcommand](cfg)


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = _config_from_args(args)
        return run(args.subcommand, cfg)
    except AskdError as exc:
        print(f"askd: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
