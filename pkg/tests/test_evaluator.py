import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clode import evaluator as ev
from clode import simenv as se
from clode.model import init_params

from support import TINY_SIM


@pytest.fixture(scope="module")
def held_out():
    return se.generate_expert(se.ExpertConfig(n_agents=6, n_steps=80, seed=11))


def _path(rng, T=12):
    xy = np.cumsum(rng.normal(size=(T, 2)), axis=0)
    theta = rng.uniform(-math.pi, math.pi, size=(T, 1))
    return np.hstack([xy, theta])


# --- positional errors / rmse ---------------------------------------------


def test_identical_paths_have_zero_error():
    path = _path(np.random.default_rng(0))
    for arr in ev.positional_errors(path, path):
        np.testing.assert_array_equal(arr, 0.0)


def test_three_four_five():
    gt = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    pred = np.array([[0.0, 0.0, 0.0], [4.0, 4.0, 0.0]])
    x, y, p = ev.positional_errors(pred, gt)
    assert (x[1], y[1], p[1]) == (3.0, 4.0, 5.0)


def test_errors_use_the_start_heading_frame():
    gt = np.array([[0.0, 0.0, math.pi / 2], [0.0, 1.0, math.pi / 2]])
    pred = np.array([[0.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    x, y, _ = ev.positional_errors(pred, gt)
    assert x[1] == pytest.approx(2.0) and y[1] == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-math.pi, math.pi), st.floats(-100, 100), st.floats(-100, 100))
def test_errors_are_invariant_to_rigid_transforms(seed, phi, tx, ty):
    rng = np.random.default_rng(seed)
    gt, pred = _path(rng), _path(rng)
    R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])

    def move(a):
        out = a.copy()
        out[:, :2] = a[:, :2] @ R.T + [tx, ty]
        out[:, 2] = a[:, 2] + phi
        return out

    for a, b in zip(ev.positional_errors(pred, gt), ev.positional_errors(move(pred), move(gt))):
        np.testing.assert_allclose(b, a, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_total_is_hypot_of_components(seed):
    rng = np.random.default_rng(seed)
    x, y, p = ev.positional_errors(_path(rng), _path(rng))
    np.testing.assert_array_equal(p, np.sqrt(x * x + y * y))


def test_length_mismatch_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ev.EvalError, match="length"):
        ev.positional_errors(_path(rng, 5), _path(rng, 6))


def test_rmse_examples():
    assert ev.rmse([1.0, 3.0], [1.0, 1.0]) == pytest.approx(1.41421, abs=1e-5)
    assert ev.rmse([2.0, -7.0], [2.0, -7.0]) == 0.0
    with pytest.raises(ev.EvalError):
        ev.rmse([])


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3).filter(lambda a: a == 0 or abs(a) > 1e-100), min_size=1, max_size=30),
    st.randoms(use_true_random=False),
)
def test_rmse_definition_and_permutation_invariance(vals, rnd):
    v = np.array(vals)
    expect = math.sqrt(sum(a * a for a in vals) / len(vals))
    assert ev.rmse(v) == pytest.approx(expect, rel=1e-12, abs=1e-300)
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    assert ev.rmse(shuffled) == pytest.approx(ev.rmse(v), rel=1e-12, abs=1e-300)
    assert ev.rmse(v) >= 0 and (ev.rmse(v) == 0) == all(a == 0 for a in vals)


# --- evaluate_rollout ------------------------------------------------------


def test_oracle_replay_has_zero_error(held_out):
    rec = ev.evaluate_rollout(None, held_out, horizon=25, history_len=5, replay_ground_truth=True, stride=7)
    assert rec.m > 0
    assert np.max(rec.rmse_total) <= 1e-9


def test_constant_velocity_error_grows_on_curved_experts():
    data = se.generate_expert(
        se.ExpertConfig(n_agents=10, n_steps=200, lane_keep_fraction=0.0, lane_change_fraction=1.0, seed=3)
    )
    rec = ev.evaluate_rollout(lambda: se.ZeroActionPolicy(), data, horizon=30, history_len=5, stride=10)
    # the first action cannot move anyone yet (explicit Euler), so step 1 is exact
    assert rec.rmse_total[0] == 0.0
    assert np.all(rec.rmse_total[1:] > 0)
    smooth = np.convolve(rec.rmse_total, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smooth) >= 0)


def test_sample_count_and_skipped_tally(held_out):
    short = se.generate_expert(se.ExpertConfig(n_agents=2, n_steps=10, seed=1))
    rec = ev.evaluate_rollout(lambda: se.ZeroActionPolicy(), held_out + short, horizon=25, history_len=5, stride=25)
    # windows need s + 31 <= 80, so start at 0 and 25; each uses the 6 long agents
    assert rec.m == 2 * 6
    assert rec.skipped == 2
    assert sorted(rec.per_agent) == sorted(t.agent_id for t in held_out)


def test_n_samples_limits_windows(held_out):
    rec = ev.evaluate_rollout(lambda: se.ZeroActionPolicy(), held_out, horizon=10, history_len=5, stride=1, n_samples=4)
    assert rec.m == 4 * 6


def test_too_short_dataset_is_an_error(held_out):
    with pytest.raises(ev.EvalError, match="long enough"):
        ev.evaluate_rollout(lambda: se.ZeroActionPolicy(), held_out, horizon=80, history_len=5)


def test_model_policy_runs_and_is_deterministic(held_out):
    params = init_params(TINY_SIM, seed=0)
    a = ev.evaluate_rollout(params, held_out, horizon=10, history_len=5, stride=30)
    b = ev.evaluate_rollout(params, held_out, horizon=10, history_len=5, stride=30)
    assert np.all(np.isfinite(a.rmse_total))
    assert ev.metrics_csv(a) == ev.metrics_csv(b)


def test_sampled_mode_depends_on_seed(held_out):
    params = init_params(TINY_SIM, seed=0)
    kw = dict(horizon=10, history_len=5, stride=30, mode="sampled")
    a = ev.evaluate_rollout(params, held_out, seed=1, **kw)
    b = ev.evaluate_rollout(params, held_out, seed=1, **kw)
    c = ev.evaluate_rollout(params, held_out, seed=2, **kw)
    assert ev.metrics_csv(a) == ev.metrics_csv(b) != ev.metrics_csv(c)


def test_open_loop_plan_matches_first_closed_loop_step(held_out):
    params = init_params(TINY_SIM, seed=0)
    closed = ev.evaluate_rollout(params, held_out, horizon=5, history_len=5, stride=30)
    opened = ev.evaluate_rollout(params, held_out, horizon=5, history_len=5, stride=30, open_loop=True)
    # actions at step 0 agree, so positions agree through step 2 (explicit Euler lag)
    np.testing.assert_allclose(opened.rmse_total[:2], closed.rmse_total[:2], atol=1e-6)


def test_wall_time_is_recorded(held_out):
    rec = ev.evaluate_rollout(
        lambda: se.ZeroActionPolicy(), held_out, horizon=6, history_len=5, stride=40, record_wall_time=True
    )
    assert rec.step_wall_time.shape == (6,) and np.all(rec.step_wall_time >= 0)


# --- ablation / reporting --------------------------------------------------


@pytest.mark.parametrize("lengths", [(5,), (2, 3, 4)])
def test_ablation_row_count(held_out, lengths):
    calls = []

    def train_fn(L):
        calls.append(L)
        return init_params(TINY_SIM, seed=L)

    table = ev.ablation(train_fn, held_out, lengths, horizon=4, stride=40)
    assert calls == list(lengths) and list(table) == list(lengths)
    summary = ev.ablation_summary_csv(table, step=4).splitlines()
    assert len(summary) == 1 + len(lengths)
    assert all(np.all(np.isfinite(r.rmse_total)) for r in table.values())
    assert len(ev.ablation_csv(table).splitlines()) == 1 + 4 * len(lengths)


def test_ablation_rejects_empty_list(held_out):
    with pytest.raises(ev.EvalError):
        ev.ablation(lambda L: None, held_out, ())


def test_report_row_format():
    rec = ev.aggregate([(np.full(25, 1.44), np.full(25, 1.64), np.full(25, 2.18))], 0.1)
    row = ev.format_report_row("cLODE with 5 obs", rec)
    assert row == "cLODE with 5 obs, longitudinal 1.44, lateral 1.64, total 2.18"


def test_metrics_csv_layout():
    rec = ev.aggregate([(np.ones(3), np.zeros(3), np.ones(3)), (np.ones(3), np.zeros(3), np.ones(3))], 0.1)
    lines = ev.metrics_csv(rec).splitlines()
    assert lines[0] == ev.METRICS_HEADER
    assert lines[3] == "3,0.3,1,0,1,0,2"
