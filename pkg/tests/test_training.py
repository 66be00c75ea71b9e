import csv
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from megan import data, gumbel
from megan.autodiff import tensor as T
from megan.autodiff.tensor import Tensor
from megan.errors import ContractError, NonFiniteLossError
from megan.training import (
    TrainConfig,
    TrainState,
    csv_header,
    disc_loss,
    gating_loss,
    gen_loss,
    load_balance_from_counts,
    load_balancing_loss,
    train,
    train_step,
)


def tiny_config(**kw) -> TrainConfig:
    base = dict(n=3, b=16, d_z=4, k_hidden=8, m=5, trunk_width=6, disc_width=8, max_iters=20, log_every=5, ckpt_every=10, eval_samples=200)
    base.update(kw)
    return TrainConfig(**base)


def hard_rows(index, n):
    return T.tensor(np.eye(n)[np.asarray(index)])


def bce(x, label):
    # -log sigmoid(x) for label 1, -log(1 - sigmoid(x)) for label 0, prec 50 digits
    s = 1 / (1 + mpmath.exp(-mpmath.mpf(x)))
    return -mpmath.log(s if label else 1 - s)


# -- load balancing --------------------------------------------------------------

def test_balanced_counts_give_zero_loss():
    loss, stats = load_balancing_loss(hard_rows(np.repeat(np.arange(4), 16), 4))
    assert loss.item() == 0.0
    np.testing.assert_array_equal(stats.p, [0.25] * 4)
    np.testing.assert_array_equal(stats.counts, [16] * 4)


def test_worked_lb_cases():
    loss, stats = load_balancing_loss(hard_rows([0] * 48 + [1] * 16, 2))
    assert loss.item() == pytest.approx(0.125, abs=1e-15)
    np.testing.assert_array_equal(stats.p, [0.75, 0.25])
    loss, _ = load_balancing_loss(hard_rows([0] * 64, 3))
    assert loss.item() == pytest.approx(2 / 3, abs=1e-15)


def test_lb_matches_counts_on_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        b = int(rng.integers(n, 129))
        sel = gumbel.select(rng.standard_normal((b, n)) * 2, 0.5, rng)
        loss, stats = load_balancing_loss(sel)
        assert stats.counts.sum() == b
        assert abs(loss.item() - load_balance_from_counts(stats.counts)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(counts=st.lists(st.integers(0, 40), min_size=2, max_size=8).filter(lambda c: sum(c) > 0))
def test_lb_nonnegative_and_zero_iff_uniform(counts):
    value = load_balance_from_counts(counts)
    assert value >= 0
    uniform = len(set(counts)) == 1
    assert (value == 0) == uniform or (uniform is False and value < 1e-15)


def lb_logit_grad(index, n, seed=0):
    rng = np.random.default_rng(seed)
    b = len(index)
    # logits chosen so that the gumbel-max pick is the desired index
    logits = Tensor(np.eye(n)[index] * 50 + rng.standard_normal((b, n)) * 0.1, requires_grad=True)
    sel = gumbel.select(logits, 0.5, noise=np.zeros((b, n)))
    assert np.array_equal(sel.index, index)
    loss, _ = load_balancing_loss(sel)
    (g,) = T.grad(loss, [logits])
    return g


def test_lb_gradient_vanishes_when_balanced():
    g = lb_logit_grad(np.tile(np.arange(4), 8), 4)
    assert np.all(g == 0)


def test_lb_gradient_nonzero_when_unbalanced():
    g = lb_logit_grad(np.array([0] * 20 + [1] * 6 + [2] * 6), 3)
    assert np.abs(g).max() > 0


# -- adversarial losses ------------------------------------------------------------

def test_disc_loss_symmetric_point():
    z = T.tensor(np.zeros((8, 1)))
    assert disc_loss(z, z).item() == pytest.approx(2 * math.log(2), abs=1e-15)


def test_disc_loss_perfect_limit():
    assert disc_loss(T.tensor(np.full((4, 1), 800.0)), T.tensor(np.full((4, 1), -800.0))).item() == 0.0


def test_gen_loss_examples():
    assert gen_loss(T.tensor(np.zeros((5, 1)))).item() == pytest.approx(math.log(2), abs=1e-15)
    assert gen_loss(T.tensor(np.full((3, 1), 800.0))).item() == 0.0


def test_losses_match_direct_bce():
    mpmath.mp.dps = 50
    rng = np.random.default_rng(3)
    for _ in range(20):
        real, fake = rng.normal(0, 4, (2, 16, 1))
        want_d = sum(bce(x, 1) for x in real[:, 0]) / 16 + sum(bce(x, 0) for x in fake[:, 0]) / 16
        want_g = sum(bce(x, 1) for x in fake[:, 0]) / 16
        assert abs(disc_loss(T.tensor(real), T.tensor(fake)).item() - float(want_d)) < 1e-9
        assert abs(gen_loss(T.tensor(fake)).item() - float(want_g)) < 1e-9


def test_gating_loss_examples():
    adv = T.tensor(1.0)
    assert gating_loss(adv, T.tensor(0.125), 100.0).item() == 13.5
    assert gating_loss(adv, T.tensor(0.4), 0.0).item() == 1.0
    assert gating_loss(T.tensor(0.7), T.tensor(0.0), 1e4).item() == 0.7


# -- config ----------------------------------------------------------------------

def test_small_batch_warns():
    with pytest.warns(UserWarning, match="below the generator count"):
        tiny_config(n=8, b=4)


def test_rates_must_be_positive():
    with pytest.raises(ContractError):
        tiny_config(lr_gen=0.0)


# -- train_step ----------------------------------------------------------------------

def test_step_advances_iteration_and_follows_schedule():
    cfg = tiny_config()
    state = TrainState(cfg)
    spec = state.spec
    for it in range(5):
        rep = train_step(state, data.sample_real(spec, cfg.b, state.rng_data))
        assert rep.iteration == it and state.iteration == it + 1
        assert rep.tau == 0.5 * math.exp(-0.001 * it)
        assert rep.counts.sum() == cfg.b


def snapshot(params):
    return [p.data.copy() for p in params]


def changed(before, params):
    return [not np.array_equal(a, p.data) for a, p in zip(before, params)]


def test_update_phase_isolation():
    cfg = tiny_config(n=3)
    state = TrainState(cfg)
    model = state.model
    groups = {
        "disc": model.disc_parameters(),
        "gen": model.generator_parameters(),
        "gate": model.gate_parameters(),
    }
    opts = {"disc": state.opt_disc, "gen": state.opt_gen, "gate": state.opt_gate}
    order = []

    def spy(name, opt):
        original = opt.step

        def step():
            before = {k: snapshot(v) for k, v in groups.items()}
            original()
            order.append(name)
            for k, params in groups.items():
                moved = changed(before[k], params)
                if k == name:
                    assert any(moved), f"{name} step did not move its own parameters"
                else:
                    assert not any(moved), f"{name} step modified {k} parameters"

        opt.step = step

    for name, opt in opts.items():
        spy(name, opt)
    for _ in range(3):
        train_step(state, data.sample_real(state.spec, cfg.b, state.rng_data))
    assert order == ["disc", "gen", "gate"] * 3


def test_isolation_with_resampling():
    cfg = tiny_config(resample_per_phase=True)
    state = TrainState(cfg)
    gen_before = snapshot(state.model.generator_parameters())
    gate = state.model.gate_parameters()
    gate_before = snapshot(gate)
    rep = train_step(state, data.sample_real(state.spec, cfg.b, state.rng_data))
    assert any(changed(gen_before, state.model.generator_parameters()))
    assert any(changed(gate_before, gate))
    assert math.isfinite(rep.loss_gate_adv)


def run_steps(cfg, steps):
    state = TrainState(cfg)
    return [train_step(state, data.sample_real(state.spec, cfg.b, state.rng_data)) for _ in range(steps)]


def test_steps_are_deterministic():
    a = run_steps(tiny_config(), 100)
    b = run_steps(tiny_config(), 100)
    for ra, rb in zip(a, b):
        assert ra.csv_row() == rb.csv_row()
        assert np.array_equal(ra.counts, rb.counts)


def test_different_seed_changes_trajectory():
    a = run_steps(tiny_config(), 5)
    b = run_steps(tiny_config(seed_gumbel=7), 5)
    assert any(ra.csv_row() != rb.csv_row() for ra, rb in zip(a, b))


def test_single_generator_step():
    cfg = tiny_config(n=1)
    rep = run_steps(cfg, 3)[-1]
    np.testing.assert_array_equal(rep.p, [1.0])
    assert rep.loss_lb == 0.0 and rep.logit_row_std_mean == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_naming_phase():
    cfg = tiny_config()
    state = TrainState(cfg)
    state.model.disc.out.bias.data[...] = np.nan
    with pytest.raises(NonFiniteLossError, match="discriminator") as info:
        train_step(state, data.sample_real(state.spec, cfg.b, state.rng_data))
    assert info.value.phase == "discriminator" and info.value.iteration == 0


# -- train driver ------------------------------------------------------------------

def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_zero_iterations_writes_initial_checkpoint_only(tmp_path):
    art = train(tiny_config(max_iters=0), tmp_path)
    assert [p.name for p in art.checkpoints] == ["iter_0000000.ckpt"]
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["iter_0000000.ckpt"]
    assert read_rows(art.metrics_csv) == [csv_header(3)]
    assert art.eval_report is None and not (tmp_path / "eval_final.txt").exists()


def test_csv_cadence_and_columns(tmp_path):
    art = train(tiny_config(max_iters=20, log_every=5), tmp_path)
    rows = read_rows(art.metrics_csv)
    assert rows[0] == ["iter", "tau", "loss_d", "loss_g", "loss_gate_adv", "loss_lb", "p_1", "p_2", "p_3", "logit_row_std_mean"]
    assert len(rows) == 1 + 20 // 5
    assert [int(r[0]) for r in rows[1:]] == [0, 5, 10, 15]
    for r in rows[1:]:
        assert float(r[1]) == 0.5 * math.exp(-0.001 * int(r[0]))
        assert sum(float(v) for v in r[6:9]) == pytest.approx(1.0, abs=1e-12)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["iter_0000000.ckpt", "iter_0000010.ckpt", "iter_0000020.ckpt"]
    assert (tmp_path / "eval_final.txt").exists() and (tmp_path / "modes_final.csv").exists()
    assert art.usage_tail.shape == (3,) and art.usage_tail.sum() == pytest.approx(1.0)


def test_usage_tail_averages_last_window(tmp_path):
    cfg = tiny_config(max_iters=12, log_every=1)
    art = train(cfg, tmp_path, final_eval=False, tail_window=4)
    rows = read_rows(art.metrics_csv)[1:]
    tail = np.array([[float(v) for v in r[6:9]] for r in rows[-4:]]).mean(axis=0)
    np.testing.assert_allclose(art.usage_tail, tail, rtol=0, atol=1e-15)


def test_train_is_reproducible(tmp_path):
    a = train(tiny_config(), tmp_path / "a")
    b = train(tiny_config(), tmp_path / "b")
    assert a.metrics_csv.read_bytes() == b.metrics_csv.read_bytes()
    assert a.checkpoints[-1].read_bytes() == b.checkpoints[-1].read_bytes()
    assert (tmp_path / "a" / "eval_final.txt").read_bytes() == (tmp_path / "b" / "eval_final.txt").read_bytes()


def test_unwritable_run_dir_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        train(tiny_config(max_iters=1), blocker / "run")
