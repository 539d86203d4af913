"""Tests for the queue digital twin: math, tables, filtering, experiment."""
import math
import random

import numpy as np
import pytest

from podyard.twin import (
    Belief,
    QueueUnstableError,
    StepRecord,
    TABLES,
    TwinConfig,
    calc_lq,
    correct,
    estimate_control,
    ground_truth_step,
    observe,
    posterior_mean,
    predict,
    recommend_control,
    run_experiment,
    uniform_belief,
)
from podyard.twin import experiment as experiment_mod
from podyard.twin import filtering, tables
from podyard.twin.filtering import point_belief, validate_config


# --- M/M/1 ------------------------------------------------------------------

def test_calc_lq_examples():
    assert calc_lq(162, 222) == pytest.approx(1.9703, abs=5e-4)
    assert calc_lq(166, 222) == pytest.approx(2.2165, abs=5e-4)
    assert calc_lq(0, 50) == 0.0


def test_calc_lq_unstable():
    with pytest.raises(QueueUnstableError):
        calc_lq(167, 167)
    with pytest.raises(QueueUnstableError):
        calc_lq(200, 167)
    with pytest.raises(ValueError):
        calc_lq(-1, 167)


def test_calc_lq_monotone_in_arrival_rate():
    rng = random.Random(11)
    for _ in range(200):
        mu = rng.uniform(1, 500)
        a = rng.uniform(0, mu * 0.999)
        b = rng.uniform(0, mu * 0.999)
        lo, hi = min(a, b), max(a, b)
        assert calc_lq(lo, mu) <= calc_lq(hi, mu) + 1e-12


# --- tables ------------------------------------------------------------------

def test_table_rows_frozen():
    t16 = TABLES[16]
    assert [r.lambda_hz for r in t16] == [162, 163, 164, 165, 166]
    assert all(r.mu_hz == 167 for r in t16)
    assert all(r.proc_units == 16 for r in t16)
    assert [r.obs_lq for r in t16] == [32, 41, 58, 97, 241]
    assert [r.calc_lq for r in t16] == [33.74, 43.48, 60.52, 98.01, 248.00]
    t32 = TABLES[32]
    assert all(r.mu_hz == 222 for r in t32)
    assert all(r.proc_units == 32 for r in t32)
    assert [r.obs_lq for r in t32] == [1.56, 2.5, 2.56, 3.5, 3.56]
    assert [r.calc_lq for r in t32] == [1.96, 2.02, 2.08, 2.14, 2.21]


def test_table_rates_sane():
    for rows in TABLES.values():
        lams = [r.lambda_hz for r in rows]
        assert lams == sorted(lams) and len(set(lams)) == len(lams)
        assert all(r.lambda_hz < r.mu_hz for r in rows)


def test_formula_matches_32_table_to_rounding():
    for row, value in tables.formula_residuals(32):
        assert value == pytest.approx(row.calc_lq, abs=0.02)


def test_formula_diverges_from_16_table():
    """The recorded 16-thread calc column is not the formula's output."""
    residuals = tables.formula_residuals(16)
    row0, value0 = residuals[0]
    assert value0 == pytest.approx(31.43, abs=0.01)
    assert abs(value0 - row0.calc_lq) > 1.0
    assert any(abs(v - r.calc_lq) > 1.0 for r, v in residuals)


def test_observe_endpoints_and_midpoint():
    assert observe(0, 32) == 1.56
    assert observe(4, 16) == 241
    assert observe(0.5, 16) == pytest.approx(36.5)


def test_observe_matches_interp_oracle():
    xs = [r.state for r in TABLES[16]]
    rng = random.Random(3)
    for _ in range(300):
        s = rng.uniform(0, 4)
        u = rng.choice([16, 32])
        ys = [r.obs_lq for r in TABLES[u]]
        assert observe(s, u) == pytest.approx(float(np.interp(s, xs, ys)), abs=1e-9)


def test_observe_monotone_in_state():
    rng = random.Random(4)
    for u in (16, 32):
        for _ in range(200):
            a, b = sorted((rng.uniform(0, 4), rng.uniform(0, 4)))
            assert observe(a, u) <= observe(b, u) + 1e-12


def test_observe_rejects_out_of_range():
    with pytest.raises(ValueError):
        observe(-0.1, 16)
    with pytest.raises(ValueError):
        observe(4.1, 32)


def test_estimate_control_examples():
    assert estimate_control(1.56) == 32
    assert estimate_control(241) == 16
    assert estimate_control(3.5) == 32


def test_estimate_control_separation():
    rng = random.Random(8)
    for _ in range(300):
        low = math.exp(rng.uniform(math.log(0.01), math.log(3.56)))
        assert estimate_control(low) == 32
        high = math.exp(rng.uniform(math.log(32.0), math.log(5000.0)))
        assert estimate_control(high) == 16
    assert estimate_control(3.56) == 32
    assert estimate_control(32.0) == 16


def test_estimate_control_tie_prefers_16():
    crossover = math.sqrt(3.56 * 32.0)
    assert estimate_control(crossover) == 16


# --- config -------------------------------------------------------------------

def test_default_config_valid():
    cfg = TwinConfig()
    assert validate_config(cfg) == []
    assert len(cfg.state_grid) == 21
    assert cfg.state_grid[0] == 0.0
    assert cfg.state_grid[-1] == 4.0
    assert cfg.grid_step == pytest.approx(0.2)
    assert cfg.move_cells == 2


def test_config_violations():
    assert validate_config(TwinConfig(transition_probs=(0.3, 0.3, 0.3))) != []
    assert validate_config(TwinConfig(state_grid=(0.0, 0.3, 0.6))) != []
    assert validate_config(TwinConfig(obs_sigma=0.0)) != []
    assert validate_config(TwinConfig(horizon_t=-1)) != []


# --- filtering ----------------------------------------------------------------

def transition_oracle(cfg):
    """Column-stochastic kernel built move by move; out-of-range moves stay."""
    n = len(cfg.state_grid)
    shift = cfg.move_cells
    p_dec, p_stay, p_inc = cfg.transition_probs
    kernel = [[0.0] * n for _ in range(n)]
    for j in range(n):
        for move, prob in ((-shift, p_dec), (0, p_stay), (shift, p_inc)):
            i = j + move
            if i < 0 or i >= n:
                i = j
            kernel[i][j] += prob
    return kernel


def oracle_predict(cfg, weights):
    kernel = transition_oracle(cfg)
    n = len(weights)
    out = [sum(kernel[i][j] * weights[j] for j in range(n)) for i in range(n)]
    total = sum(out)
    return [v / total for v in out]


def oracle_correct(cfg, weights, obs, control):
    post = [
        w * math.exp(-((math.log(obs) - math.log(observe(s, control))) ** 2) / (2 * cfg.obs_sigma**2))
        for w, s in zip(weights, cfg.state_grid)
    ]
    total = sum(post)
    return [v / total for v in post]


def random_belief(cfg, rng):
    weights = np.array([rng.random() + 1e-6 for _ in cfg.state_grid])
    return Belief(tuple(cfg.state_grid), weights / weights.sum())


def total_variation(a, b):
    return 0.5 * float(np.abs(np.asarray(a) - np.asarray(b)).sum())


def test_predict_point_mass_center():
    cfg = TwinConfig()
    out = predict(point_belief(cfg, 2.0), cfg)
    mass = {s: w for s, w in zip(out.grid, out.weights) if w > 0}
    assert mass == {1.6: pytest.approx(0.25), 2.0: pytest.approx(0.5), 2.4: pytest.approx(0.25)}


def test_predict_point_mass_boundary():
    cfg = TwinConfig()
    out = predict(point_belief(cfg, 0.0), cfg)
    mass = {s: w for s, w in zip(out.grid, out.weights) if w > 0}
    assert mass == {0.0: pytest.approx(0.75), 0.4: pytest.approx(0.25)}


def test_predict_uniform_stationary():
    cfg = TwinConfig()
    belief = uniform_belief(cfg)
    for _ in range(5):
        belief = predict(belief, cfg)
        assert total_variation(belief.weights, uniform_belief(cfg).weights) < 1e-12


def test_predict_matches_oracle():
    cfg = TwinConfig()
    rng = random.Random(21)
    for _ in range(100):
        belief = random_belief(cfg, rng)
        expected = oracle_predict(cfg, list(belief.weights))
        got = predict(belief, cfg)
        assert total_variation(got.weights, expected) <= 1e-9
        assert float(got.weights.sum()) == pytest.approx(1.0, abs=1e-9)


def test_correct_mode_at_matching_state():
    cfg = TwinConfig()
    out = correct(uniform_belief(cfg), 58.0, 16, cfg)
    assert out.grid[int(np.argmax(out.weights))] == pytest.approx(2.0)


def test_correct_flat_likelihood_keeps_belief():
    cfg = TwinConfig(obs_sigma=1e9)
    rng = random.Random(5)
    belief = random_belief(cfg, rng)
    out = correct(belief, 58.0, 16, cfg)
    assert total_variation(out.weights, belief.weights) < 1e-9


def test_correct_point_mass_prior_is_fixed():
    cfg = TwinConfig()
    prior = point_belief(cfg, 1.2)
    out = correct(prior, 241.0, 16, cfg)
    assert total_variation(out.weights, prior.weights) < 1e-12


def test_correct_matches_bayes_oracle():
    cfg = TwinConfig()
    rng = random.Random(77)
    for _ in range(100):
        belief = random_belief(cfg, rng)
        u = rng.choice([16, 32])
        lo, hi = (32.0, 241.0) if u == 16 else (1.56, 3.56)
        obs = math.exp(rng.uniform(math.log(lo * 0.8), math.log(hi * 1.2)))
        expected = oracle_correct(cfg, list(belief.weights), obs, u)
        got = correct(belief, obs, u, cfg)
        assert total_variation(got.weights, expected) <= 1e-9
        assert float(got.weights.sum()) == pytest.approx(1.0, abs=1e-9)


def test_correct_underflow_falls_back_to_likelihood():
    cfg = TwinConfig()
    prior = point_belief(cfg, 0.0)  # all mass where the likelihood underflows
    out = correct(prior, 32.0 * math.exp(50 * cfg.obs_sigma), 16, cfg)
    assert float(out.weights.sum()) == pytest.approx(1.0)
    # the fallback follows the observation, not the dead prior
    assert posterior_mean(out) > 3.0


def test_recommend_control_threshold():
    cfg = TwinConfig()
    assert recommend_control(point_belief(cfg, 4.0), cfg) == 32
    assert recommend_control(point_belief(cfg, 0.0), cfg) == 16
    assert recommend_control(uniform_belief(cfg), cfg) == 16  # mean 2.0 < 2.5


# --- ground truth and experiment -----------------------------------------------

def test_ground_truth_examples():
    assert ground_truth_step(5, 1.0) == pytest.approx(1.4)
    assert ground_truth_step(15, 2.0) == 2.0
    assert ground_truth_step(25, 0.0) == 0.0
    assert ground_truth_step(45, 3.9) == 4.0  # clamped at the top


def test_ground_truth_full_trajectory():
    state = 0.0
    seen = []
    for t in range(80):
        state = ground_truth_step(t, state)
        seen.append(state)
    assert seen[9] == 4.0
    assert all(s == 4.0 for s in seen[9:20])
    assert seen[29] == 0.0
    assert all(s == 0.0 for s in seen[29:40])
    assert seen[49] == 4.0
    assert all(s == 4.0 for s in seen[49:60])
    assert seen[69] == 0.0
    assert all(s == 0.0 for s in seen[69:])
    assert all(0.0 <= s <= 4.0 for s in seen)


def test_run_experiment_closed_loop_coupling():
    records = run_experiment(TwinConfig())
    assert len(records) == 80
    assert records[0].physical_control == 16
    for prev, cur in zip(records, records[1:]):
        assert cur.physical_control == prev.predicted_control
    assert all(r.physical_control in (16, 32) for r in records)
    assert all(r.estimated_control in (16, 32) for r in records)
    assert all(1.56 <= r.obs_lq <= 241.0 for r in records)


def test_run_experiment_switches_up_then_down():
    records = run_experiment(TwinConfig())
    assert any(r.predicted_control == 32 for r in records if r.t < 20)
    switched_back = [r for r in records if 20 <= r.t < 40 and r.predicted_control == 16]
    assert switched_back


def test_run_experiment_horizon_zero():
    assert run_experiment(TwinConfig(horizon_t=0)) == []


def test_run_experiment_frozen_ground_truth():
    records = run_experiment(TwinConfig(), ground_truth=lambda t, s: s)
    assert all(r.predicted_control == 16 for r in records)
    assert all(r.true_state == 0.0 for r in records)


def test_run_experiment_rejects_bad_config():
    with pytest.raises(ValueError):
        run_experiment(TwinConfig(transition_probs=(0.9, 0.9, 0.9)))


def plateau_runs(records, predicate):
    runs = []
    start = None
    for record in records:
        if predicate(record.true_state):
            if start is None:
                start = record.t
        elif start is not None:
            runs.append((start, record.t - 1))
            start = None
    if start is not None:
        runs.append((start, records[-1].t))
    return runs


def test_recommendation_tracks_plateaus_with_bounded_lag():
    records = run_experiment(TwinConfig())
    for start, end in plateau_runs(records, lambda s: s >= 3.0):
        if end - start + 1 >= 5:
            for t in range(start + 5, end + 1):
                assert records[t].predicted_control == 32, f"t={t}"
    for start, end in plateau_runs(records, lambda s: s <= 1.0):
        for t in range(start + 10, end + 1):
            assert records[t].predicted_control == 16, f"t={t}"


def test_noise_is_seeded_and_reproducible():
    cfg_a = TwinConfig(noise_sigma=0.05, seed=13)
    cfg_b = TwinConfig(noise_sigma=0.05, seed=13)
    cfg_c = TwinConfig(noise_sigma=0.05, seed=14)
    obs_a = [r.obs_lq for r in run_experiment(cfg_a)]
    obs_b = [r.obs_lq for r in run_experiment(cfg_b)]
    obs_c = [r.obs_lq for r in run_experiment(cfg_c)]
    assert obs_a == obs_b
    assert obs_a != obs_c
    clean = [r.obs_lq for r in run_experiment(TwinConfig())]
    assert obs_a != clean


def test_observation_source_hook():
    calls = []

    def source(t, control):
        calls.append((t, control))
        return 100.0 if control == 16 else 2.0

    records = run_experiment(TwinConfig(horizon_t=12), observation_source=source)
    assert [c[0] for c in calls] == list(range(12))
    assert records[0].obs_lq == 100.0
    # a persistently high queue drives the belief up and flips the control
    assert any(r.predicted_control == 32 for r in records)


def test_csv_round_trip(tmp_path):
    records = run_experiment(TwinConfig(horizon_t=10))
    path = tmp_path / "run.csv"
    experiment_mod.write_csv(records, path)
    header = path.read_text().splitlines()[0]
    assert header == "t,true_state,physical_control,obs_lq,posterior_mean,estimated_control,predicted_control"
    assert experiment_mod.read_csv(path) == records


def test_load_config_mirrors_field_names(tmp_path):
    path = tmp_path / "twin.yaml"
    path.write_text("obs_sigma: 0.2\nhorizon_T: 40\ncontrol_threshold: 2.0\ntransition_probs: [0.2, 0.6, 0.2]\n")
    cfg = experiment_mod.load_config(path)
    assert cfg.obs_sigma == 0.2
    assert cfg.horizon_t == 40
    assert cfg.control_threshold == 2.0
    assert cfg.transition_probs == (0.2, 0.6, 0.2)
    assert experiment_mod.load_config(None) == TwinConfig()


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "twin.yaml"
    path.write_text("sigma: 0.2\n")
    with pytest.raises(ValueError, match="sigma"):
        experiment_mod.load_config(path)
