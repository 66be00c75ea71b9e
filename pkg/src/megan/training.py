"""Losses and the three-phase mini-batch training loop."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from megan import config as config_mod
from megan import data as data_mod
from megan.autodiff import checkpoint
from megan.autodiff import tensor as T
from megan.autodiff.optim import Adam
from megan.autodiff.tensor import Tensor
from megan.errors import ContractError, NonFiniteLossError
from megan.gumbel import SelectionBatch, TemperatureSchedule
from megan.metrics import EvalReport, ModeAssignmentMatrix, evaluate
from megan.networks import MeganModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n: int = 5
    b: int = 64
    lambda_lb: float = 100.0
    tau_schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    lr_disc: float = 2e-4
    lr_gen: float = 2e-4
    lr_gate: float = 1e-4
    max_iters: int = 15000
    seed_data: int = 0
    seed_init: int = 1
    seed_gumbel: int = 2
    seed_eval: int = 3
    data_kind: str = "ring"
    data_modes: int = 8
    data_radius: float = 2.0
    data_spacing: float = 2.0
    data_sigma: float = 0.05
    d_z: int = 32
    k_hidden: int = 256
    m: int = 100
    trunk_width: int = 128
    disc_width: int = 128
    log_every: int = 10
    ckpt_every: int = 5000
    eval_samples: int = 2000
    resample_per_phase: bool = False

    def __post_init__(self):
        for name in ("lr_disc", "lr_gen", "lr_gate"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n > 1 and self.b < self.n:
            warnings.warn(f"batch size {self.b} is below the generator count {self.n}; per-batch balance is unreachable", stacklevel=2)

    @classmethod
    def from_flat(cls, flat: Mapping[str, Any]) -> "TrainConfig":
        c = dict(config_mod.DEFAULTS)
        c.update(flat)
        return cls(
            n=c["model.n_generators"],
            b=c["train.batch_size"],
            lambda_lb=c["train.lambda_lb"],
            tau_schedule=TemperatureSchedule(c["train.tau_initial"], c["train.tau_rate"], c["train.tau_floor"]),
            lr_disc=c["train.lr_disc"],
            lr_gen=c["train.lr_gen"],
            lr_gate=c["train.lr_gate"],
            max_iters=c["train.max_iters"],
            seed_data=c["seed.data"],
            seed_init=c["seed.init"],
            seed_gumbel=c["seed.gumbel"],
            seed_eval=c["seed.eval"],
            data_kind=c["data.kind"],
            data_modes=c["data.modes"],
            data_radius=c["data.radius"],
            data_spacing=c["data.spacing"],
            data_sigma=c["data.sigma"],
            d_z=c["model.d_z"],
            k_hidden=c["model.k_hidden"],
            m=c["model.m"],
            trunk_width=c["model.trunk_width"],
            disc_width=c["model.disc_width"],
            log_every=c["train.log_every"],
            ckpt_every=c["train.ckpt_every"],
            eval_samples=c["eval.samples"],
            resample_per_phase=c["train.resample_per_phase"],
        )

    def mixture(self) -> data_mod.MixtureSpec:
        return data_mod.make_spec(self.data_kind, self.data_modes, self.data_radius, self.data_spacing, self.data_sigma)

    def build_model(self) -> MeganModel:
        return MeganModel(self.n, self.d_z, self.k_hidden, self.m, self.trunk_width, self.disc_width, rng=np.random.default_rng(self.seed_init))


# -- losses --------------------------------------------------------------------

@dataclass
class LoadBalanceStats:
    counts: np.ndarray
    p: np.ndarray
    loss: float


def load_balance_from_counts(counts) -> float:
    counts = np.asarray(counts)
    p = counts / counts.sum()
    return float(((p - 1.0 / len(counts)) ** 2).sum())


def load_balancing_loss(selection: SelectionBatch | Tensor) -> tuple[Tensor, LoadBalanceStats]:
    """Squared deviation of per-generator selection frequency from 1/n.

    The loss node is built from the column means of the straight-through
    one-hot rows, which equal count_i / b exactly and carry gradient back to
    the logits.
    """
    y_hard = selection.y_hard if isinstance(selection, SelectionBatch) else T.as_tensor(selection)
    b, n = y_hard.shape
    counts = np.bincount(np.argmax(y_hard.data, axis=1), minlength=n)
    p = counts / b
    freq = T.mean(y_hard, axis=0)
    loss = T.sum(T.square(T.sub(freq, 1.0 / n)))
    return loss, LoadBalanceStats(counts=counts, p=p, loss=loss.item())


def disc_loss(d_real, d_fake) -> Tensor:
    """Binary cross-entropy on raw scores with real=1, fake=0."""
    return T.add(T.mean(T.softplus(T.neg(d_real))), T.mean(T.softplus(d_fake)))


def gen_loss(d_fake) -> Tensor:
    """Non-saturating generator loss, mean softplus(-D(fake))."""
    return T.mean(T.softplus(T.neg(d_fake)))


def gating_loss(adv, lb, lambda_lb: float) -> Tensor:
    return T.add(adv, T.mul(lb, float(lambda_lb)))


# -- training state ------------------------------------------------------------

@dataclass
class StepReport:
    iteration: int
    tau: float
    loss_d: float
    loss_g: float
    loss_gate_adv: float
    loss_lb: float
    p: np.ndarray
    logit_row_std_mean: float
    counts: np.ndarray

    def csv_row(self) -> list[str]:
        vals = [self.tau, self.loss_d, self.loss_g, self.loss_gate_adv, self.loss_lb, *self.p, self.logit_row_std_mean]
        return [str(self.iteration), *[repr(float(v)) for v in vals]]


def csv_header(n: int) -> list[str]:
    return ["iter", "tau", "loss_d", "loss_g", "loss_gate_adv", "loss_lb", *[f"p_{i + 1}" for i in range(n)], "logit_row_std_mean"]


class TrainState:
    """Models, optimizers and random streams for one training context."""

    def __init__(self, cfg: TrainConfig, model: MeganModel | None = None):
        self.config = cfg
        self.spec = cfg.mixture()
        self.model = model if model is not None else cfg.build_model()
        self.model.train()
        self.opt_disc = Adam(self.model.disc_parameters(), cfg.lr_disc)
        self.opt_gen = Adam(self.model.generator_parameters(), cfg.lr_gen)
        self.opt_gate = Adam(self.model.gate_parameters(), cfg.lr_gate) if self.model.gate is not None else None
        self.rng_data = np.random.default_rng(cfg.seed_data)
        self.rng_latent = np.random.default_rng([cfg.seed_data, 1])
        self.rng_gumbel = np.random.default_rng(cfg.seed_gumbel)
        self.iteration = 0

    def latent(self, b: int) -> Tensor:
        return Tensor(self.rng_latent.standard_normal((b, self.model.d_z)))

    def fake(self, b: int, tau: float):
        return self.model.fake_batch(self.latent(b), tau, self.rng_gumbel, detach_features=True)


def _finite(value: float, phase: str, iteration: int) -> float:
    if not math.isfinite(value):
        raise NonFiniteLossError(phase, iteration, value)
    return value


def _lb_terms(selection: SelectionBatch | None, n: int, b: int):
    if selection is None:
        counts = np.array([b])
        return None, LoadBalanceStats(counts=counts, p=np.ones(1), loss=0.0), 0.0
    lb, stats = load_balancing_loss(selection)
    return lb, stats, float(np.std(selection.logits.data, axis=1).mean())


def train_step(state: TrainState, real_batch, iteration: int | None = None) -> StepReport:
    """One iteration: discriminator, then generators, then gating network.

    Generators are updated with the routing held fixed: each row's gradient
    reaches only the generator that produced it. The gating network consumes
    detached generator features, so its loss never updates generator weights.
    """
    cfg = state.config
    model = state.model
    it = state.iteration if iteration is None else iteration
    tau = cfg.tau_schedule(it)
    real = real_batch.points if isinstance(real_batch, data_mod.RealBatch) else T.as_tensor(real_batch)
    b = real.shape[0]
    disc_params = model.disc_parameters()
    gen_params = model.generator_parameters()
    gate_params = model.gate_parameters()

    fake, selection, _ = state.fake(b, tau)

    # discriminator
    loss_d = disc_loss(model.disc(real), model.disc(T.detach(fake)))
    _finite(loss_d.item(), "discriminator", it)
    state.opt_disc.zero_grad()
    T.backward(loss_d, restrict=disc_params)
    state.opt_disc.step()

    if not cfg.resample_per_phase:
        loss_g = gen_loss(model.disc(fake))
        _finite(loss_g.item(), "generator", it)
        lb, stats, logit_std = _lb_terms(selection, model.n, b)
        state.opt_gen.zero_grad()
        if state.opt_gate is not None:
            state.opt_gate.zero_grad()
            total = gating_loss(loss_g, lb, cfg.lambda_lb)
            _finite(total.item(), "gating", it)
            T.backward(total, restrict=gen_params + gate_params)
        else:
            T.backward(loss_g, restrict=gen_params)
        state.opt_gen.step()
        if state.opt_gate is not None:
            state.opt_gate.step()
        loss_gate_adv = loss_g.item()
    else:
        fake_g, _, _ = state.fake(b, tau)
        loss_g = gen_loss(model.disc(fake_g))
        _finite(loss_g.item(), "generator", it)
        state.opt_gen.zero_grad()
        T.backward(loss_g, restrict=gen_params)
        state.opt_gen.step()
        fake3, selection, _ = state.fake(b, tau)
        lb, stats, logit_std = _lb_terms(selection, model.n, b)
        adv3 = gen_loss(model.disc(fake3))
        loss_gate_adv = adv3.item()
        if state.opt_gate is not None:
            total = gating_loss(adv3, lb, cfg.lambda_lb)
            _finite(total.item(), "gating", it)
            state.opt_gate.zero_grad()
            T.backward(total, restrict=gate_params)
            state.opt_gate.step()

    state.iteration = it + 1
    return StepReport(
        iteration=it,
        tau=tau,
        loss_d=loss_d.item(),
        loss_g=loss_g.item(),
        loss_gate_adv=loss_gate_adv,
        loss_lb=stats.loss,
        p=stats.p,
        logit_row_std_mean=logit_std,
        counts=stats.counts,
    )


# -- driver ----------------------------------------------------------------------

@dataclass
class RunArtifacts:
    run_dir: Path
    metrics_csv: Path
    checkpoints: list[Path]
    last_step: StepReport | None
    eval_report: EvalReport | None = None
    eval_matrix: ModeAssignmentMatrix | None = None
    eval_paths: list[Path] = field(default_factory=list)
    usage_tail: np.ndarray | None = None  # mean batch usage over the final ``tail_window`` iterations


def checkpoint_path(run_dir: Path, iteration: int) -> Path:
    return run_dir / "checkpoints" / f"iter_{iteration:07d}.ckpt"


def evaluate_model(model: MeganModel, cfg: TrainConfig, samples: int | None = None, iteration: int | None = None):
    rng = np.random.default_rng(cfg.seed_eval)
    tau = cfg.tau_schedule(iteration if iteration is not None else cfg.max_iters)
    return evaluate(model, cfg.mixture(), samples or cfg.eval_samples, rng, tau=tau)


def write_eval(run_dir: Path, label: str, report: EvalReport, matrix: ModeAssignmentMatrix) -> list[Path]:
    return [
        report.write(run_dir / f"eval_{label}.txt"),
        matrix.to_csv(run_dir / f"modes_{label}.csv"),
        report.append_csv(run_dir / "eval_summary.csv", label),
    ]


def train(cfg: TrainConfig, run_dir: str | Path, final_eval: bool = True, tail_window: int = 1000) -> RunArtifacts:
    """Run ``cfg.max_iters`` iterations, logging metrics and checkpoints under ``run_dir``."""
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    state = TrainState(cfg)
    model = state.model
    metrics_path = run_dir / "metrics.csv"
    ckpts = [checkpoint.save(checkpoint_path(run_dir, 0), model.state_entries())]
    last: StepReport | None = None
    tail_start = max(0, cfg.max_iters - tail_window)
    tail_sum = np.zeros(model.n)
    try:
        fh = metrics_path.open("w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write metrics file {metrics_path}: {exc}") from exc
    with fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header(model.n))
        for it in range(cfg.max_iters):
            real = data_mod.sample_real(state.spec, cfg.b, state.rng_data)
            last = train_step(state, real, it)
            if it >= tail_start:
                tail_sum += last.p
            if it % cfg.log_every == 0:
                writer.writerow(last.csv_row())
            if (it + 1) % cfg.ckpt_every == 0 or it + 1 == cfg.max_iters:
                ckpts.append(checkpoint.save(checkpoint_path(run_dir, it + 1), model.state_entries()))
            if (it + 1) % 1000 == 0:
                log.info("iter %d tau %.4f loss_d %.4f loss_g %.4f lb %.4f", it + 1, last.tau, last.loss_d, last.loss_g, last.loss_lb)
    artifacts = RunArtifacts(run_dir=run_dir, metrics_csv=metrics_path, checkpoints=ckpts, last_step=last)
    if cfg.max_iters > 0:
        artifacts.usage_tail = tail_sum / (cfg.max_iters - tail_start)
    if final_eval and cfg.max_iters > 0:
        report, matrix = evaluate_model(model, cfg, iteration=cfg.max_iters)
        artifacts.eval_report, artifacts.eval_matrix = report, matrix
        artifacts.eval_paths = write_eval(run_dir, "final", report, matrix)
    return artifacts


def load_model(cfg: TrainConfig, path: str | Path) -> MeganModel:
    model = MeganModel(cfg.n, cfg.d_z, cfg.k_hidden, cfg.m, cfg.trunk_width, cfg.disc_width, rng=None)
    checkpoint.restore(path, model.state_entries())
    return model
