"""Command-line driver: ``megan train``, ``megan eval`` and ``megan plot``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from megan import __version__
from megan import config as config_mod
from megan.errors import CheckpointError, ConfigError, NonFiniteLossError
from megan.training import TrainConfig, evaluate_model, load_model, train, write_eval

log = logging.getLogger("megan")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORT = 3

_ITER_RE = re.compile(r"iter_(\d+)\.ckpt$")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def new_run_dir(root: Path) -> Path:
    """Create a fresh timestamped directory under ``root``; existing runs are never reused."""
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    candidate = root / f"run-{stamp}"
    k = 1
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            k += 1
            candidate = root / f"run-{stamp}-{k}"


def write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_train(config_path: str | None, overrides: Sequence[str], out: str | None = None, seed: int | None = None) -> int:
    resolved = config_mod.resolve(config_path, overrides, seed)
    if out is not None:
        resolved["out.dir"] = out
    cfg = TrainConfig.from_flat(resolved)
    run_dir = new_run_dir(Path(resolved["out.dir"]))
    (run_dir / "config.txt").write_text(config_mod.dump(resolved))
    manifest = {
        "version": __version__,
        "config": resolved,
        "seeds": {k: resolved[k] for k in ("seed.data", "seed.init", "seed.gumbel", "seed.eval")},
        "started": _now(),
        "finished": None,
        "status": "running",
        "outputs": {"run_dir": str(run_dir), "config": "config.txt", "metrics": "metrics.csv", "checkpoints": "checkpoints"},
    }
    manifest_path = run_dir / "manifest.json"
    write_manifest(manifest_path, manifest)
    print(f"run directory: {run_dir}")
    try:
        artifacts = train(cfg, run_dir)
    except NonFiniteLossError:
        manifest.update(status="aborted", finished=_now())
        write_manifest(manifest_path, manifest)
        raise
    manifest.update(status="complete", finished=_now())
    manifest["outputs"]["final_checkpoint"] = str(artifacts.checkpoints[-1].relative_to(run_dir))
    if artifacts.eval_report is not None:
        manifest["outputs"]["eval"] = [str(p.relative_to(run_dir)) for p in artifacts.eval_paths]
        print(artifacts.eval_report.to_text(), end="")
    write_manifest(manifest_path, manifest)
    return EXIT_OK


def _checkpoint_iteration(path: Path) -> int | None:
    m = _ITER_RE.search(path.name)
    return int(m.group(1)) if m else None


def _run_dir_of(checkpoint: Path) -> Path:
    return checkpoint.parent.parent if checkpoint.parent.name == "checkpoints" else checkpoint.parent


def _config_for(checkpoint: Path, config_path: str | None, overrides: Sequence[str], seed: int | None) -> dict:
    if config_path is None:
        snapshot = _run_dir_of(checkpoint) / "config.txt"
        config_path = str(snapshot) if snapshot.exists() else None
    return config_mod.resolve(config_path, overrides, seed)


def cmd_eval(
    checkpoint_path: str,
    config_path: str | None = None,
    samples: int | None = None,
    overrides: Sequence[str] = (),
    out: str | None = None,
    seed: int | None = None,
) -> int:
    ckpt = Path(checkpoint_path)
    if not ckpt.is_file():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    resolved = _config_for(ckpt, config_path, overrides, seed)
    if samples is not None:
        resolved["eval.samples"] = config_mod.coerce("eval.samples", samples)
        config_mod.validate(resolved)
    cfg = TrainConfig.from_flat(resolved)
    model = load_model(cfg, ckpt)
    report, matrix = evaluate_model(model, cfg, iteration=_checkpoint_iteration(ckpt))
    out_dir = Path(out) if out is not None else _run_dir_of(ckpt)
    out_dir.mkdir(parents=True, exist_ok=True)
    label = ckpt.stem
    report.write(out_dir / f"eval_{label}.txt")
    matrix.to_csv(out_dir / f"modes_{label}.csv")
    print(report.to_text(), end="")
    return EXIT_OK


def read_metrics(path: Path) -> dict[str, np.ndarray]:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"metric CSV {path} is empty", key=str(path))
    header, body = rows[0], rows[1:]
    table = np.array(body, dtype=float).reshape(len(body), len(header))
    return {name: table[:, j] for j, name in enumerate(header)}


def latest_checkpoint(run_dir: Path) -> Path | None:
    found = sorted((run_dir / "checkpoints").glob("iter_*.ckpt"))
    return found[-1] if found else None


def samples_figure(points: np.ndarray, index: np.ndarray, n: int, centers: np.ndarray):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    cmap = plt.get_cmap("tab10" if n <= 10 else "tab20")
    for i in range(n):
        sel = index == i
        ax.scatter(points[sel, 0], points[sel, 1], s=4, alpha=0.6, color=cmap(i % cmap.N), label=f"generator {i + 1}")
    ax.scatter(centers[:, 0], centers[:, 1], marker="x", s=60, color="black", zorder=3)
    ax.set_aspect("equal")
    ax.set_title("generated samples by generator")
    ax.legend(loc="upper right", fontsize="small", markerscale=3)
    return fig


def curves_figure(metrics: dict[str, np.ndarray]):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    it = metrics["iter"]
    fig, (ax_loss, ax_p, ax_tau) = plt.subplots(3, 1, figsize=(7, 9), sharex=True)
    for name in ("loss_d", "loss_g", "loss_lb"):
        ax_loss.plot(it, metrics[name], lw=0.8, label=name)
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize="small")
    p_cols = sorted((k for k in metrics if k.startswith("p_")), key=lambda k: int(k[2:]))
    for name in p_cols:
        ax_p.plot(it, metrics[name], lw=0.6, label=name)
    if p_cols:
        ax_p.axhline(1.0 / len(p_cols), color="black", lw=0.8, ls="--")
    ax_p.set_ylabel("usage p_i")
    ax_p.legend(fontsize="small", ncol=min(len(p_cols), 5) or 1)
    ax_tau.plot(it, metrics["tau"], color="tab:purple")
    ax_tau.set_ylabel("tau")
    ax_tau.set_xlabel("iteration")
    fig.tight_layout()
    return fig


def cmd_plot(run_dir: str, samples: int | None = None) -> int:
    run = Path(run_dir)
    metrics_path = run / "metrics.csv"
    ckpt = latest_checkpoint(run)
    if not metrics_path.is_file() or ckpt is None:
        missing = metrics_path if not metrics_path.is_file() else run / "checkpoints"
        raise ConfigError(f"run directory {run} is missing {missing.name}", key=str(missing))
    import matplotlib.pyplot as plt

    resolved = _config_for(ckpt, None, (), None)
    cfg = TrainConfig.from_flat(resolved)
    model = load_model(cfg, ckpt)
    s = samples or cfg.eval_samples
    rng = np.random.default_rng(cfg.seed_eval)
    z = rng.standard_normal((s, model.d_z))
    it = _checkpoint_iteration(ckpt)
    points, index = model.generate(z, cfg.tau_schedule(it if it is not None else cfg.max_iters), rng)
    fig = samples_figure(points, index, model.n, cfg.mixture().centers)
    fig.savefig(run / "samples.svg")
    plt.close(fig)
    fig = curves_figure(read_metrics(metrics_path))
    fig.savefig(run / "curves.svg")
    plt.close(fig)
    print(f"wrote {run / 'samples.svg'} and {run / 'curves.svg'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--out", help="output root (default: $MEGAN_OUT or ./runs)")
    common.add_argument("--seed", type=int, help="derive every seed stream from one integer")

    parser = argparse.ArgumentParser(prog="megan", description="Mixture-of-generators GAN on 2-D Gaussian mixtures.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model in a new run directory")
    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--samples", type=int)
    p_plot = sub.add_parser("plot", help="draw sample and training-curve plots for a run")
    p_plot.add_argument("run_dir")
    p_plot.add_argument("--samples", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, args.overrides, args.out, args.seed)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.config, args.samples, args.overrides, args.out, args.seed)
        return cmd_plot(args.run_dir, args.samples)
    except ConfigError as exc:
        key = f" [key: {exc.key}]" if exc.key else ""
        print(f"megan: config error: {exc}{key}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"megan: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"megan: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
