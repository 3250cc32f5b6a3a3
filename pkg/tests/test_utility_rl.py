import numpy as np
import pytest

from oracles import heatmap_bruteforce
from replaygan.utility_rl import (
    PolicyTable, RLSpec, Transitions, action_heatmap, admissible, build_states, compare_policies,
    fit_state_encoder, make_transitions, reward, row_table, train_bcq, utility_comparison,
)


def test_reward_examples():
    assert reward(1000, 500) == pytest.approx(-0.7 * np.log(1000) + 0.6 * np.log(500_000))
    assert reward(1000, 500) == pytest.approx(3.0379, abs=1e-4)
    assert reward(20, 500) == pytest.approx(6.7975, abs=1e-4)
    assert reward(1, 0.001, detection_limit=0.5) == pytest.approx(0.0, abs=1e-12)
    assert reward(50, 500) == pytest.approx(5 + 0.6 * np.log(50))  # at the limit counts as below
    with pytest.raises(ValueError):
        reward(0, 10)
    with pytest.raises(ValueError):
        reward(10, -1)


def test_spec_defaults(schema):
    spec = RLSpec()
    spec.validate(schema)
    assert spec.n_actions(schema) == 24
    assert (spec.n_state_clusters, spec.reduce_dim, spec.iterations, spec.step_size) == (100, 5, 100, 0.01)
    with pytest.raises(ValueError):
        RLSpec(subgroup={"Ethnic": "Martian"}).validate(schema)


def test_states_range_and_determinism(cohort500):
    spec = RLSpec()
    s1 = build_states(cohort500, spec, seed=0)
    s2 = build_states(cohort500, spec, seed=0)
    assert np.array_equal(s1, s2)
    assert s1.min() >= 0 and s1.max() <= 99
    assert len(np.unique(s1)) == 100
    rows = row_table(cohort500, spec)
    assert len(s1) == len(rows.actions) == cohort500.n_rows - len(cohort500)


def test_identical_rows_same_state(cohort500):
    enc = fit_state_encoder(cohort500, RLSpec(), seed=0)
    rows = row_table(cohort500, RLSpec(), enc.stats)
    X = np.vstack([rows.features[:1], rows.features[:1]])
    lab = enc.kmeans.predict(enc.project(X))
    assert lab[0] == lab[1]


def test_single_transition_one_sweep():
    t = Transitions(np.array([0]), np.array([1]), np.array([2.5]), np.array([0]), np.array([True]))
    pol = train_bcq(t, 1, 3, RLSpec(iterations=1))
    assert pol.Q[0, 1] == 0.01 * 2.5
    assert pol.greedy[0] == 1


def test_tau_zero_allows_all_observed():
    counts = np.array([[5, 1, 0]])
    assert admissible(counts, 0.0).tolist() == [[True, True, False]]
    assert admissible(counts, 0.3).tolist() == [[True, False, False]]


def test_unobserved_action_has_zero_frequency():
    t = Transitions(np.array([0, 1]), np.array([0, 2]), np.array([1.0, 1.0]), np.array([1, 0]),
                    np.array([False, True]))
    pol = train_bcq(t, 2, 4, RLSpec())
    freq = pol.action_freq(np.array([0, 1, 1]))
    assert freq[1] == 0 and freq[3] == 0 and freq.sum() == pytest.approx(1.0)


def test_fallback_state_flagged():
    t = Transitions(np.array([0]), np.array([2]), np.array([1.0]), np.array([1]), np.array([True]))
    pol = train_bcq(t, 3, 4, RLSpec())
    assert pol.fallback_states == [1, 2]
    assert np.all(pol.greedy[[1, 2]] == 2)


def test_greedy_is_admissible(cohort500):
    enc = fit_state_encoder(cohort500, RLSpec(), seed=0)
    st, rows = enc.labels(cohort500)
    pol = train_bcq(make_transitions(st, rows), enc.n_states, 24, RLSpec())
    has = pol.allowed.any(1)
    assert np.all(pol.allowed[np.arange(len(pol.greedy))[has], pol.greedy[has]])


def test_heatmap_examples():
    pol = PolicyTable(np.zeros((2, 4)), np.ones((2, 4), bool), np.ones((2, 4)), np.array([3, 3]))
    assert action_heatmap(pol, np.array([0, 1, 1]), (2, 2)).tolist() == [[0, 0], [0, 1.0]]
    pol.greedy = np.array([0, 3])
    m = action_heatmap(pol, np.array([0, 1]), (2, 2))
    assert m.tolist() == [[0.5, 0], [0, 0.5]]
    with pytest.raises(ValueError):
        action_heatmap(pol, np.array([0]), (3, 3))


@pytest.mark.parametrize("seed", range(10))
def test_heatmap_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n1, n2 = int(rng.integers(1, 7)), int(rng.integers(1, 5))
    S = int(rng.integers(1, 100))
    greedy = rng.integers(0, n1 * n2, S)
    states = rng.integers(0, S, int(rng.integers(1, 1000)))
    pol = PolicyTable(np.zeros((S, n1 * n2)), np.ones((S, n1 * n2), bool), np.ones((S, n1 * n2)), greedy)
    m = action_heatmap(pol, states, (n1, n2))
    grid, n = heatmap_bruteforce(greedy.tolist(), states.tolist(), n1, n2)
    assert np.array_equal(np.rint(m * n).astype(int), np.array(grid))
    assert np.max(np.abs(m - np.array(grid) / n)) <= 1e-10
    assert abs(m.sum() - 1) <= 1e-9


def test_compare_policies_examples():
    a = np.array([[0.6, 0.4]])
    assert compare_policies(a, a) == (0.0, True)
    assert compare_policies(np.array([[1.0, 0]]), np.array([[0, 1.0]]))[0] == 1.0
    tv, top = compare_policies(a, np.array([[0.5, 0.5]]))
    assert tv == pytest.approx(0.1) and top
    with pytest.raises(ValueError):
        compare_policies(a, np.ones((2, 1)))


def test_utility_self_comparison(cohort500):
    res = utility_comparison(cohort500, cohort500)
    assert res.tv == 0.0 and res.top1_agree
    assert res.map_real.shape == (6, 4) and abs(res.map_real.sum() - 1) < 1e-9
    sub = utility_comparison(cohort500, cohort500, RLSpec(subgroup={"Ethnic": "African"}))
    assert sub.tv == 0.0
