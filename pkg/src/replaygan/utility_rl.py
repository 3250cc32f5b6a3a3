"""Downstream utility check: tabular batch-constrained Q-learning on discretized clinical states.

States come from a supervised 5-d projection of the observation variables
followed by k-means; actions are pairs of medication levels. Agents trained on
real and synthetic data are compared through the frequency maps of their
greedy actions.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans
from sklearn.cross_decomposition import PLSRegression
from sklearn.decomposition import PCA

from .schema import Cohort, VariableSchema

MEDICATIONS = ("Base Drug Combo", "Comp. INI", "Comp. NNRTI", "Extra PI", "Extra pk-En")


@dataclass
class RLSpec:
    numeric_vars: tuple[str, ...] = ("VL", "CD4", "Rel CD4")
    medication_vars: tuple[str, ...] = MEDICATIONS
    action_vars: tuple[str, str] = ("Base Drug Combo", "Comp. NNRTI")
    n_state_clusters: int = 100
    reduce_dim: int = 5
    iterations: int = 100
    step_size: float = 0.01
    discount: float = 0.99
    tau_bcq: float = 0.3
    detection_limit: float = 50.0
    vl_var: str = "VL"
    cd4_var: str = "CD4"
    subgroup: dict[str, str] | None = None

    def __post_init__(self):
        self.numeric_vars = tuple(self.numeric_vars)
        self.medication_vars = tuple(self.medication_vars)
        self.action_vars = tuple(self.action_vars)

    def validate(self, schema: VariableSchema) -> None:
        for name in (*self.numeric_vars, *self.medication_vars, *self.action_vars, self.vl_var, self.cd4_var):
            if name not in schema.names:
                raise ValueError(f"RLSpec references unknown variable {name!r}")
        if len(self.action_vars) != 2:
            raise ValueError("action_vars must name exactly two variables")
        for name in self.action_vars:
            if schema[name].is_numeric:
                raise ValueError(f"action variable {name!r} must be non-numeric")
        for name, level in (self.subgroup or {}).items():
            if name not in schema.names or level not in schema[name].levels:
                raise ValueError(f"subgroup filter {name}={level!r} is not a valid level")

    def grid_shape(self, schema: VariableSchema) -> tuple[int, int]:
        return tuple(len(schema[v].levels) for v in self.action_vars)

    def n_actions(self, schema: VariableSchema) -> int:
        a, b = self.grid_shape(schema)
        return a * b

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        for k in ("numeric_vars", "medication_vars", "action_vars"):
            d[k] = list(d[k])
        return d


def reward(vl, cd4, detection_limit: float = 50.0):
    """Clinical reward from viral load (copies/mL) and CD4 (cells/uL, converted to cells/mL)."""
    vl = np.asarray(vl, dtype=float)
    cd4 = np.asarray(cd4, dtype=float)
    if np.any(vl <= 0) or np.any(cd4 <= 0):
        raise ValueError("VL and CD4 must be positive")
    cd4_ml = cd4 * 1000.0
    out = np.where(vl > detection_limit, -0.7 * np.log(vl) + 0.6 * np.log(cd4_ml), 5.0 + 0.6 * np.log(vl))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# states


@dataclass
class RowTable:
    """Per-row RL quantities for every (record, t >= 1) row, in cohort order."""

    features: np.ndarray  # [n, d]
    actions: np.ndarray  # [n]
    rewards: np.ndarray  # [n] reward at this row's month
    record: np.ndarray  # [n] record index
    t: np.ndarray  # [n] month index


def row_table(cohort: Cohort, spec: RLSpec, stats: tuple[np.ndarray, np.ndarray] | None = None) -> RowTable:
    schema = cohort.schema
    num = [schema.index(v) for v in spec.numeric_vars]
    meds = [schema.index(v) for v in spec.medication_vars]
    a1, a2 = (schema.index(v) for v in spec.action_vars)
    n2 = len(schema[spec.action_vars[1]].levels)
    vl, cd4 = schema.index(spec.vl_var), schema.index(spec.cd4_var)
    feats, acts, rews, rec_i, ts = [], [], [], [], []
    offsets = np.cumsum([0] + [len(schema.variables[m].levels) for m in meds])
    for i, rec in enumerate(cohort):
        x = rec.values
        T = len(x)
        if T < 2:
            continue
        numeric = np.log1p(np.maximum(x[1:, num], 0.0))
        onehot = np.zeros((T - 1, offsets[-1]))
        for k, m in enumerate(meds):
            onehot[np.arange(T - 1), offsets[k] + x[:-1, m].astype(int)] = 1.0
        feats.append((numeric, onehot))
        acts.append(x[1:, a1].astype(int) * n2 + x[1:, a2].astype(int))
        rews.append(reward(np.maximum(x[1:, vl], 1e-9), np.maximum(x[1:, cd4], 1e-9), spec.detection_limit))
        rec_i.append(np.full(T - 1, i))
        ts.append(np.arange(1, T))
    if not feats:
        raise ValueError("no records long enough to build states")
    numeric = np.concatenate([f[0] for f in feats])
    if stats is None:
        stats = _stats_of(cohort, spec)
    numeric = (numeric - stats[0]) / stats[1]
    X = np.concatenate([numeric, np.concatenate([f[1] for f in feats])], axis=1)
    return RowTable(X, np.concatenate(acts), np.concatenate(rews), np.concatenate(rec_i), np.concatenate(ts))


@dataclass
class StateEncoder:
    """Projection plus k-means fitted on one cohort and reusable on others."""

    spec: RLSpec
    stats: tuple[np.ndarray, np.ndarray]
    projection: object
    kmeans: KMeans
    used_pca: bool = False

    @property
    def n_states(self) -> int:
        return self.kmeans.n_clusters

    def project(self, X: np.ndarray) -> np.ndarray:
        return self.projection.transform(X)

    def labels(self, cohort: Cohort) -> tuple[np.ndarray, RowTable]:
        rows = row_table(cohort, self.spec, self.stats)
        return self.kmeans.predict(self.project(rows.features)).astype(np.int64), rows


def fit_state_encoder(cohort: Cohort, spec: RLSpec, seed: int = 0) -> StateEncoder:
    spec.validate(cohort.schema)
    stats = _stats_of(cohort, spec)
    rows = row_table(cohort, spec, stats)
    X, y = rows.features, rows.rewards
    d = spec.reduce_dim
    used_pca = np.linalg.matrix_rank(X - X.mean(0)) < d or np.ptp(y) == 0
    if used_pca:
        proj = PCA(min(d, X.shape[1], len(X)), random_state=seed).fit(X)
    else:
        proj = PLSRegression(d, scale=False).fit(X, y)
    Z = proj.transform(X)
    k = min(spec.n_state_clusters, len(np.unique(np.round(Z, 12), axis=0)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        km = KMeans(k, n_init=1, random_state=seed).fit(Z)
    return StateEncoder(spec, stats, proj, km, bool(used_pca))


def _stats_of(cohort: Cohort, spec: RLSpec):
    schema = cohort.schema
    num = [schema.index(v) for v in spec.numeric_vars]
    vals = np.concatenate([np.log1p(np.maximum(r.values[1:, num], 0.0)) for r in cohort if r.length >= 2])
    sd = vals.std(0)
    return vals.mean(0), np.where(sd > 0, sd, 1.0)


def build_states(cohort: Cohort, spec: RLSpec, seed: int = 0) -> np.ndarray:
    """State label per (record, t >= 1) row from an encoder fitted on ``cohort`` itself."""
    enc = fit_state_encoder(cohort, spec, seed)
    return enc.labels(cohort)[0]


# ---------------------------------------------------------------------------
# transitions and Q-learning


@dataclass
class Transitions:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.s)


def make_transitions(states: np.ndarray, rows: RowTable) -> Transitions:
    """(s_t, a_t, r_{t+1}, s_{t+1}) for consecutive rows of the same record; the last one is terminal."""
    same = rows.record[1:] == rows.record[:-1]
    idx = np.flatnonzero(same)
    last = np.r_[rows.record[1:] != rows.record[:-1], True]
    return Transitions(states[idx], rows.actions[idx], rows.rewards[idx + 1], states[idx + 1], last[idx + 1])


@dataclass
class PolicyTable:
    Q: np.ndarray  # [S, A]
    allowed: np.ndarray  # [S, A] bool
    counts: np.ndarray  # [S, A]
    greedy: np.ndarray  # [S]
    fallback_states: list[int] = field(default_factory=list)

    def act(self, states: np.ndarray) -> np.ndarray:
        return self.greedy[np.asarray(states)]

    def action_freq(self, states: np.ndarray) -> np.ndarray:
        acts = self.act(states)
        return np.bincount(acts, minlength=self.Q.shape[1]) / len(acts)


def admissible(counts: np.ndarray, tau: float) -> np.ndarray:
    top = counts.max(axis=1, keepdims=True)
    return (counts > 0) & (counts >= tau * top)


def train_bcq(trans: Transitions, n_states: int, n_actions: int, spec: RLSpec | None = None,
              seed: int = 0) -> PolicyTable:
    """Tabular batch-constrained Q-learning: full-batch sweeps restricted to admissible actions."""
    spec = spec or RLSpec()
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (trans.s, trans.a), 1.0)
    allowed = admissible(counts, spec.tau_bcq)
    Q = np.zeros((n_states, n_actions))
    has = allowed.any(axis=1)
    for _ in range(spec.iterations):
        masked = np.where(allowed, Q, -np.inf).max(axis=1)
        v_next = np.where(has, masked, 0.0)[trans.s_next]
        target = trans.r + spec.discount * np.where(trans.terminal, 0.0, v_next)
        td = target - Q[trans.s, trans.a]
        np.add.at(Q, (trans.s, trans.a), spec.step_size * td)
    greedy = np.where(allowed, Q, -np.inf).argmax(axis=1)
    fallback = np.flatnonzero(~has).tolist()
    if fallback:
        observed = np.flatnonzero(counts.sum(axis=0) > 0)
        if len(observed) == 0:
            raise ValueError("no observed actions")
        rng = np.random.default_rng(seed)
        greedy[fallback] = rng.choice(observed, len(fallback))
    return PolicyTable(Q, allowed, counts, greedy.astype(np.int64), fallback)


def action_heatmap(policy: PolicyTable, states: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Relative frequency of the greedy action over ``states``, laid out on the action-level grid."""
    freq = policy.action_freq(states)
    if len(freq) != grid[0] * grid[1]:
        raise ValueError(f"policy has {len(freq)} actions, grid holds {grid[0] * grid[1]}")
    return freq.reshape(grid)


def compare_policies(map_real: np.ndarray, map_syn: np.ndarray) -> tuple[float, bool]:
    """Total-variation distance between two action maps and whether their top actions agree."""
    if np.shape(map_real) != np.shape(map_syn):
        raise ValueError(f"grid mismatch {np.shape(map_real)} vs {np.shape(map_syn)}")
    tv = 0.5 * float(np.abs(np.asarray(map_real) - np.asarray(map_syn)).sum())
    return tv, bool(np.argmax(map_real) == np.argmax(map_syn))


# ---------------------------------------------------------------------------


@dataclass
class UtilityResult:
    map_real: np.ndarray
    map_syn: np.ndarray
    tv: float
    top1_agree: bool
    n_states: int
    used_pca: bool
    fallback_real: int
    fallback_syn: int


def fit_policy(cohort: Cohort, encoder: StateEncoder, seed: int = 0) -> tuple[PolicyTable, np.ndarray]:
    states, rows = encoder.labels(cohort)
    trans = make_transitions(states, rows)
    n_actions = encoder.spec.n_actions(cohort.schema)
    return train_bcq(trans, encoder.n_states, n_actions, encoder.spec, seed), states


def utility_comparison(real: Cohort, syn: Cohort, spec: RLSpec | None = None, seed: int = 0) -> UtilityResult:
    """Train one agent per dataset on states fitted to the real data and compare their action maps."""
    spec = spec or RLSpec()
    spec.validate(real.schema)
    if spec.subgroup:
        real, syn = real.where(**spec.subgroup), syn.where(**spec.subgroup)
        if not len(real) or not len(syn):
            raise ValueError(f"subgroup {spec.subgroup} is empty in one of the cohorts")
    enc = fit_state_encoder(real, spec, seed)
    grid = spec.grid_shape(real.schema)
    pol_r, st_r = fit_policy(real, enc, seed)
    pol_s, st_s = fit_policy(syn, enc, seed)
    m_r = action_heatmap(pol_r, st_r, grid)
    m_s = action_heatmap(pol_s, st_s, grid)
    tv, top = compare_policies(m_r, m_s)
    return UtilityResult(m_r, m_s, tv, top, enc.n_states, enc.used_pca, len(pol_r.fallback_states),
                         len(pol_s.fallback_states))
