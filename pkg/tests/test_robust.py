import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rl_lab.diffsim import make_env
from rl_lab.nets import PolicyNet
from rl_lab.robust import (
    DEFAULT_GRIDS, DEFAULT_LAMBDAS, EvalRecord, NoiseSpec, SweepGrid, coefficient_of_variation,
    eval_policy, heatmap_svg, inject_noise, noise_draws, noise_sweep, overhead_report, param_sweep,
    rollout_seeds,
)


def zero_policy():
    p = PolicyNet(2, 1, (8, 8), seed=0)
    p.params.values[:] = 0.0
    return p


def test_inject_noise_hand_example():
    assert inject_noise(np.array([1.5]), 0.5, np.array([-1.0])).tolist() == [0.0]


def test_inject_noise_identities():
    a, d = np.array([2.0, -0.3, 0.7]), np.array([0.1, -0.9, 0.4])
    assert inject_noise(a, 0.0, d).tolist() == [1.0, -0.3, 0.7]
    assert inject_noise(a, 1.0, d).tolist() == d.tolist()


@settings(max_examples=300, deadline=None)
@given(a=st.floats(-1e6, 1e6), lam=st.floats(0, 1), n=st.floats(-1, 1))
def test_inject_noise_stays_in_box(a, lam, n):
    out = inject_noise(np.array([a]), lam, np.array([n]))
    assert -1.0 <= out[0] <= 1.0


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(1.2)
    with pytest.raises(ValueError):
        NoiseSpec(-0.1)


def test_expected_noise_magnitude_grows_with_lambda():
    rng = np.random.default_rng(0)
    a = np.zeros(10_000)
    mags = [np.abs(inject_noise(a, lam, rng.uniform(-1, 1, a.shape))).mean() for lam in DEFAULT_LAMBDAS]
    assert all(b >= a_ for a_, b in zip(mags, mags[1:]))


def test_noise_draws_are_paired_and_keyed():
    d1 = noise_draws(3, 0, 5, 20, 1)
    assert d1.shape == (20, 5, 1)
    assert np.array_equal(d1, noise_draws(3, 0, 5, 20, 1))
    # a prefix of rollouts is a prefix of the larger request
    assert np.array_equal(d1[:, :2], noise_draws(3, 0, 2, 20, 1))
    assert not np.array_equal(d1, noise_draws(3, 1, 5, 20, 1))
    assert not np.array_equal(d1, noise_draws(4, 0, 5, 20, 1))
    assert d1.min() >= -1 and d1.max() <= 1


def test_eval_clean_identity_and_stats(bouncer):
    pol = PolicyNet(2, 1, (8, 8), seed=1)
    a = eval_policy(pol, bouncer, None, NoiseSpec(0.0, 2), 5, 2)
    b = eval_policy(pol, bouncer, bouncer.params, None, 5, 2)
    assert a.mean_reward == b.mean_reward and a.std_reward == b.std_reward
    assert a.mean_reward == float(np.mean(a.rewards))
    assert a.std_reward == float(np.std(a.rewards))
    assert eval_policy(pol, bouncer, None, NoiseSpec(0.3, 2), 1, 2).std_reward == 0.0


def test_eval_matches_manual_rollout(slider):
    pol = PolicyNet(2, 1, (8, 8), seed=4)
    pol.params.view("W2")[...] *= 80
    rec = eval_policy(pol, slider, None, NoiseSpec(0.25, 9), 3, 9, policy_index=1)
    draws = noise_draws(9, 1, 3, 240, 1)
    s = slider.reset(rollout_seeds(9, 3))
    total = np.zeros(3)
    for t in range(240):
        a = np.clip(pol.mean(slider.observe(s)), -1, 1)
        a = 0.75 * a + 0.25 * draws[t]
        s, r, _ = slider.step(s, a)
        total += r
    np.testing.assert_allclose(rec.rewards, total, rtol=1e-12)


class BlowsUpAtStep5(type(make_env("bouncer1d"))):
    """Lane 0 diverges on its sixth step."""

    def step_unchecked(self, state, action, params=None):
        nxt, r, tape = super().step_unchecked(state, action, params)
        if state.t[0] == 5:
            nxt.v[0] = np.inf
        return nxt, r, tape


def test_eval_counts_non_finite_rollouts_with_partial_sum():
    env = BlowsUpAtStep5()
    rec = eval_policy(zero_policy(), env, None, None, 2, 0)
    assert rec.failures == 1
    clean = eval_policy(zero_policy(), make_env("bouncer1d"), None, None, 2, 0)
    # lane 0 keeps the rewards of steps 0..5 only
    s = env.reset(rollout_seeds(0, 2))
    partial = 0.0
    for _ in range(6):
        s, r, _ = make_env("bouncer1d").step(s, np.zeros((2, 1)))
        partial += r[0]
    assert rec.rewards[0] == pytest.approx(partial, rel=1e-12)
    assert rec.rewards[1] == clean.rewards[1]


def test_eval_record_validation():
    with pytest.raises(ValueError):
        EvalRecord("shac", 0, {}, 0.0, 0.0, 0)


def test_noise_sweep_shape_and_composition(slider):
    pols = {"shac": [(0, PolicyNet(2, 1, (8, 8), seed=0))], "ppo": [(5, PolicyNet(2, 1, (8, 8), seed=5))]}
    table = noise_sweep(pols, slider, [0.0, 0.2, 0.4], rollouts=3, seed=1)
    assert len(table) == 2 * 1 * 3
    again = noise_sweep(pols, slider, [0.0, 0.2, 0.4], rollouts=3, seed=1)
    assert [r.mean_reward for r in table] == [r.mean_reward for r in again]
    standalone = eval_policy(pols["ppo"][0][1], slider, None, NoiseSpec(0.2, 1), 3, 1)
    assert table[4].algo == "ppo" and table[4].mean_reward == standalone.mean_reward
    with pytest.raises(ValueError):
        noise_sweep(pols, slider, [0.0, 1.5], rollouts=1)


def test_param_sweep_unit_grid_equals_clean(bouncer):
    pol = PolicyNet(2, 1, (8, 8), seed=2)
    grid = SweepGrid({"k_e": [400.0], "k_d": [10.0]}, rollouts_per_cell=4)
    table, mats = param_sweep({"shac": [(0, pol)]}, bouncer, grid, seed=3)
    clean = eval_policy(pol, bouncer, None, None, 4, 3)
    assert table[0].mean_reward == clean.mean_reward
    assert mats["shac"].shape == (1, 1)


def test_param_sweep_default_grids(bouncer, slider):
    assert SweepGrid(DEFAULT_GRIDS["bouncer1d"]).shape == (6, 5)
    pol = zero_policy()
    table, mats = param_sweep({"a": [(0, pol)]}, slider, SweepGrid(DEFAULT_GRIDS["slider1d"]), rollouts=1)
    assert len(table) == 10 and mats["a"].shape == (10,)
    assert [r.setting["mu"] for r in table] == pytest.approx([0.1 * i for i in range(1, 11)])
    with pytest.raises(ValueError):
        param_sweep({"a": [(0, pol)]}, bouncer, SweepGrid({"mu": [0.5]}), rollouts=1)


def test_sweep_grid_validation():
    with pytest.raises(ValueError):
        SweepGrid({"k_e": []})
    with pytest.raises(ValueError):
        SweepGrid({"k_e": [2.0, 1.0]})
    with pytest.raises(ValueError):
        SweepGrid({"gravity": [1.0]})


def test_overhead_report_ratios():
    shac = [{"update_wall_ms": 10.0, "grad_evals": 1}] * 4
    asam = [{"update_wall_ms": 18.0, "grad_evals": 2}] * 4
    rows = {r["algo"]: r for r in overhead_report([("shac", shac), ("shac-asam", asam)])}
    assert rows["shac-asam"]["grad_eval_ratio_vs_shac"] == 2.0
    assert rows["shac-asam"]["wall_ratio_vs_shac"] == pytest.approx(1.8)
    assert rows["shac"]["grad_eval_ratio_vs_shac"] == 1.0
    assert rows["shac"]["train_s_mean"] == pytest.approx(0.04)
    with pytest.raises(KeyError):
        overhead_report([("shac", [{"grad_evals": 1}])])


def test_coefficient_of_variation():
    assert coefficient_of_variation([2.0, 2.0]) == 0.0
    assert coefficient_of_variation([1.0, 3.0]) == pytest.approx(0.5)


def test_heatmap_svg_is_deterministic_and_complete():
    m = np.arange(6.0).reshape(3, 2)
    svg = heatmap_svg(m, [1, 2, 3], [10, 20], "k_e", "k_d", "demo", digest="abc")
    assert svg == heatmap_svg(m, [1, 2, 3], [10, 20], "k_e", "k_d", "demo", digest="abc")
    cells = re.findall(r'<rect x="\d+" y="\d+" width="60"', svg)
    assert len(cells) == 6
    assert "config_digest=abc" in svg and ">k_e<" in svg and ">k_d<" in svg
    # extreme cells take the end colours of the map
    assert 'fill="#440154"' in svg and 'fill="#fde725"' in svg
