"""Command-line pipeline: simulate-expert, infer, infer-demo, train, evaluate."""

from __future__ import annotations

import functools
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import pipeline as pl
from .config import ConfigError, PipelineConfig, load_config
from .dynamics import Controller, NumericError
from .evaluation import MetricsReport, accuracy_csv, missions_csv
from .imm import ConditioningError, DegeneratePriorError
from .policy import TrainingDivergedError, assemble_dataset, load_model, save_model
from .records import RecordError, load_dataset, load_mission, save_dataset, save_mission

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class HashMismatch(Exception):
    pass


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map failures onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except (DegeneratePriorError, ConditioningError, TrainingDivergedError, NumericError,
                ArithmeticError, np.linalg.LinAlgError) as exc:
            _fail(EXIT_NUMERIC, f"numerical failure: {exc}")
        except (HashMismatch, RecordError, OSError) as exc:
            _fail(EXIT_IO, str(exc))

    return wrapper


def _common(fn):
    fn = click.option("--force", is_flag=True, help="Accept inputs whose config hash differs.")(fn)
    fn = click.option("--episodes", type=click.IntRange(min=1), default=None, help="Override the episode count.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=Path("out"),
                      show_default=True, help="Artifact directory.")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None, help="Override the master seed.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
                      help="YAML config (defaults when omitted).")(fn)
    return fn


def _load(config_path, seed) -> PipelineConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _path(cfg: PipelineConfig, out: Path, stem: str) -> Path:
    return out / (stem + (".ndjson.gz" if cfg.output.compress else ".ndjson"))


def _existing(out: Path, stem: str) -> Path:
    for suffix in (".ndjson.gz", ".ndjson"):
        p = out / (stem + suffix)
        if p.exists():
            return p
    raise RecordError(f"missing input {out / (stem + '.ndjson[.gz]')}")


def _check_hash(found: str, cfg: PipelineConfig, what: str, force: bool) -> None:
    if found != cfg.hash():
        if not force:
            raise HashMismatch(f"{what} was produced with config {found or '<none>'}, "
                               f"current config is {cfg.hash()} (use --force to accept)")
        click.echo(f"warning: {what} config hash {found} differs from {cfg.hash()}", err=True)


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _mkdir(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)


@click.group()
def main():
    """Learn a swarm's controller-selection policy from observation."""


@main.command("simulate-expert")
@_common
@_guard
def simulate_expert(config_path, seed, out, episodes, force):
    """Run the expert defense mission and write the log and GT dataset."""
    cfg = _load(config_path, seed)
    _mkdir(out)
    log = pl.simulate_expert(cfg, episodes)
    h = cfg.hash()
    save_mission(_path(cfg, out, "mission"), log, h)
    save_dataset(_path(cfg, out, "dataset_gt"), assemble_dataset(log, "GT"), h)
    thwarted = sum(a.outcome == "thwarted" for a in log.attacks)
    click.echo(f"episodes {log.num_episodes} steps {log.num_steps} attacks {len(log.attacks)} "
               f"thwarted {thwarted} breached {len(log.attacks) - thwarted}")


@main.command()
@_common
@_guard
def infer(config_path, seed, out, episodes, force):
    """Run the IMM over the logged measurements and write the IMM dataset."""
    cfg = _load(config_path, seed)
    log, h = load_mission(_existing(out, "mission"))
    _check_hash(h, cfg, "mission log", force)
    trace = pl.infer(cfg, log)
    save_dataset(_path(cfg, out, "dataset_imm"), assemble_dataset(log, "IMM", trace), cfg.hash())
    rep = pl.attack_accuracy(log, trace)
    report = MetricsReport(inference=rep)
    _write(out / "inference_report.txt", report.to_text())
    _write(out / "inference_accuracy.csv", accuracy_csv({"IMM": rep}))
    click.echo(report.to_text(), nl=False)


@main.command("infer-demo")
@_common
@_guard
def infer_demo(config_path, seed, out, episodes, force):
    """Random behavior switching with known labels; writes a mode trace."""
    cfg = _load(config_path, seed)
    _mkdir(out)
    runs = [pl.switching_demo(cfg, r) for r in range(cfg.infer_demo.seeds)]
    buf = io.StringIO()
    buf.write("run,k,true_label,map_label," + ",".join(f"mu_{c.name}" for c in Controller) + "\n")
    for t in runs:
        for k in range(t.true_labels.size):
            buf.write(f"{t.seed},{k},{t.true_labels[k]},{t.map_labels[k]},"
                      + ",".join(format(v, ".17g") for v in t.mu[k]) + "\n")
    _write(out / "demo_trace.csv", buf.getvalue())
    overall = float(np.mean([t.accuracy for t in runs]))
    late = float(np.mean([t.late_accuracy() for t in runs]))
    lines = [f"run {t.seed}: accuracy {t.accuracy:.4f} late-sojourn accuracy {t.late_accuracy():.4f}" for t in runs]
    lines += [f"mean accuracy: {overall:.4f}", f"mean late-sojourn accuracy: {late:.4f}"]
    _write(out / "demo_report.txt", "\n".join(lines) + "\n")
    click.echo("\n".join(lines))


@main.command()
@_common
@click.option("--variant", type=click.Choice(["GT", "IMM"], case_sensitive=False), default="GT", show_default=True)
@_guard
def train(config_path, seed, out, episodes, force, variant):
    """Fit the imitator on one dataset variant."""
    cfg = _load(config_path, seed)
    variant = variant.upper()
    ds, h = load_dataset(_existing(out, f"dataset_{variant.lower()}"))
    _check_hash(h, cfg, f"{variant} dataset", force)
    if ds.num_episodes < 2:
        raise RecordError(f"dataset has {ds.num_episodes} episode(s); need at least 2 to split")
    params, report = pl.train_variant(cfg, ds)
    save_model(out / f"model_{variant.lower()}.txt", params, cfg.hash())
    buf = io.StringIO()
    buf.write("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n")
    for e in range(report.epochs_run):
        buf.write(f"{e},{report.train_loss[e]:.17g},{report.train_accuracy[e]:.17g},"
                  f"{report.val_loss[e]:.17g},{report.val_accuracy[e]:.17g}\n")
    _write(out / f"train_report_{variant.lower()}.csv", buf.getvalue())
    summary = {"variant": variant, "epochs_run": report.epochs_run, "best_epoch": report.best_epoch,
               "train_accuracy": report.final_train_accuracy, "validation_accuracy": report.final_val_accuracy,
               "config_hash": cfg.hash()}
    _write(out / f"train_report_{variant.lower()}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    click.echo(f"{variant}: epochs {report.epochs_run} best {report.best_epoch} "
               f"train {report.final_train_accuracy:.4f} validation {report.final_val_accuracy:.4f}")


@main.command()
@_common
@_guard
def evaluate(config_path, seed, out, episodes, force):
    """Missions for F, both imitators and the random baseline; writes metrics."""
    cfg = _load(config_path, seed)
    models = {}
    for v in ("gt", "imm"):
        path = out / f"model_{v}.txt"
        if not path.exists():
            raise RecordError(f"missing model file {path}")
        try:
            models[v], h = load_model(path)
        except (ValueError, IndexError) as exc:
            raise RecordError(f"corrupt model file {path}: {exc}") from None
        _check_hash(h, cfg, f"model {path.name}", force)
    ev = pl.evaluate(cfg, models["gt"], models["imm"], episodes)
    rep = ev.report
    for v in ("GT", "IMM"):
        p = out / f"train_report_{v.lower()}.json"
        if p.exists():
            s = json.loads(p.read_text(encoding="utf-8"))
            rep.learning[v] = {"train": s["train_accuracy"], "validation": s["validation_accuracy"]}
    rep.validate()
    _write(out / "metrics.txt", rep.to_text())
    _write(out / "missions.csv", missions_csv(rep.missions))
    _write(out / "imitation_accuracy.csv", accuracy_csv(rep.imitation))
    click.echo(rep.to_text(), nl=False)


if __name__ == "__main__":
    main()
