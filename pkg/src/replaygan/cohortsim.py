"""Seeded surrogate cohort with the pathologies that matter for mode collapse:
skewed categorical marginals, a rare demographic cell, NNRTI/INI mutual
exclusion and measurement indicators that gate carried-forward numerics.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .schema import Cohort, PatientRecord, VariableSchema, hiv_schema


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class ExclusionRule:
    """If ``if_var`` takes a level in ``if_levels`` then ``then_var`` must be ``then_level``."""

    if_var: str
    if_levels: tuple[str, ...]
    then_var: str
    then_level: str

    def __str__(self):
        return f"{self.if_var} in {list(self.if_levels)} => {self.then_var} = {self.then_level}"


@dataclass(frozen=True)
class NumericDynamics:
    """AR(1) walk on the log scale with reflecting bounds; ``mean`` is per-patient jittered."""

    mean: float
    spread: float  # std of the per-patient mean
    phi: float  # autoregressive coefficient
    noise: float
    low: float
    high: float


@dataclass
class SimConfig:
    n_patients: int = 500
    length_range: tuple[int, int] = (10, 20)
    marginals: dict[str, dict[str, float]] = field(default_factory=dict)
    exclusion_rules: list[ExclusionRule] = field(default_factory=list)
    missingness_rates: dict[str, float] = field(default_factory=dict)
    numeric_dynamics: dict[str, NumericDynamics] = field(default_factory=dict)
    # per-month probability that a patient's regimen is redrawn
    switch_rate: float = 0.08
    # additive shift of the log10-VL mean while a level is prescribed
    regimen_effects: dict[str, dict[str, float]] = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        base = default_sim_config()
        d = dict(d)
        if "length_range" in d:
            d["length_range"] = tuple(d["length_range"])
        if "exclusion_rules" in d:
            d["exclusion_rules"] = [
                ExclusionRule(r["if_var"], tuple(r["if_levels"]), r["then_var"], r["then_level"])
                for r in d["exclusion_rules"]
            ]
        if "numeric_dynamics" in d:
            d["numeric_dynamics"] = {k: NumericDynamics(**v) for k, v in d["numeric_dynamics"].items()}
        for key in ("marginals", "missingness_rates", "regimen_effects"):
            if key in d:
                d[key] = {**getattr(base, key), **d[key]}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SimConfig keys: {sorted(unknown)}")
        return cls(**{**base.__dict__, **d})

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f) or {})

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "length_range": list(self.length_range),
            "marginals": self.marginals,
            "exclusion_rules": [
                {"if_var": r.if_var, "if_levels": list(r.if_levels), "then_var": r.then_var, "then_level": r.then_level}
                for r in self.exclusion_rules
            ],
            "missingness_rates": self.missingness_rates,
            "numeric_dynamics": {k: v.__dict__ for k, v in self.numeric_dynamics.items()},
            "switch_rate": self.switch_rate,
            "regimen_effects": self.regimen_effects,
            "seed": self.seed,
        }


def default_sim_config(n_patients: int = 500, length_range=(10, 20), seed: int = 0) -> SimConfig:
    """Skewed marginals with one dominant (>=60%) and one rare (<=2%) level per categorical.

    Gender x Ethnicity gives a ~1% Asian+Female cell.
    """
    na = "Not Applied"
    return SimConfig(
        n_patients=n_patients,
        length_range=tuple(length_range),
        marginals={
            "Gender": {"Male": 0.75, "Female": 0.25},
            "Ethnic": {"Asian": 0.04, "African": 0.18, "Caucasian": 0.62, "Other": 0.16},
            "Base Drug Combo": {
                "FTC + TDF": 0.60, "3TC + ABC": 0.15, "FTC + TAF": 0.10,
                "DRV + FTC + TDF": 0.08, "FTC + RTVB + TDF": 0.02, "Other": 0.05,
            },
            "Comp. INI": {"DTG": 0.12, "RAL": 0.05, "EVG": 0.02, na: 0.81},
            "Comp. NNRTI": {"NVP": 0.05, "EFV": 0.12, "RPV": 0.02, na: 0.81},
            "Extra PI": {"DRV": 0.08, "RTVB": 0.06, "LPV": 0.02, "RTV": 0.05, "ATV": 0.04, na: 0.75},
            "Extra pk-En": {"False": 0.88, "True": 0.12},
        },
        exclusion_rules=[
            ExclusionRule("Comp. NNRTI", ("NVP", "EFV", "RPV"), "Comp. INI", na),
            ExclusionRule("Comp. INI", ("DTG", "RAL", "EVG"), "Comp. NNRTI", na),
        ],
        missingness_rates={"VL (M)": 0.2427, "CD4 (M)": 0.2221, "Drug (M)": 0.8513},
        numeric_dynamics={
            # log10 copies/mL, log10 cells/uL, log10 percent
            "VL": NumericDynamics(mean=2.6, spread=0.8, phi=0.8, noise=0.35, low=0.7, high=6.0),
            "CD4": NumericDynamics(mean=2.65, spread=0.2, phi=0.85, noise=0.06, low=1.3, high=3.3),
            "Rel CD4": NumericDynamics(mean=1.38, spread=0.12, phi=0.85, noise=0.04, low=0.5, high=1.8),
        },
        regimen_effects={
            "Comp. INI": {"DTG": -0.6, "RAL": -0.4, "EVG": -0.3},
            "Comp. NNRTI": {"EFV": -0.3, "NVP": -0.1, "RPV": -0.2},
            "Base Drug Combo": {"FTC + TAF": -0.2, "Other": 0.3},
        },
        seed=seed,
    )


# ---------------------------------------------------------------------------


def _joint_under_rules(schema: VariableSchema, config: SimConfig, names: list[str],
                       rules: list[ExclusionRule], tol: float = 1e-10, max_iter: int = 5000) -> np.ndarray:
    """Joint over ``names`` matching the configured marginals with rule-violating cells zeroed.

    Iterative proportional fitting from the independent product; raises
    :class:`InfeasibleConfig` if no such joint exists.
    """
    specs = [schema[n] for n in names]
    margs = [np.array([config.marginals[n][lvl] for lvl in s.levels], dtype=np.float64) for n, s in zip(names, specs)]
    for r in rules:
        p_if = sum(config.marginals[r.if_var].get(l, 0.0) for l in r.if_levels)
        p_then = config.marginals[r.then_var].get(r.then_level, 0.0)
        if p_if > p_then + 1e-12:
            raise InfeasibleConfig(f"rule '{r}' needs P({r.then_var}={r.then_level}) >= {p_if:.4f}, got {p_then:.4f}")
    joint = margs[0]
    for m in margs[1:]:
        joint = np.multiply.outer(joint, m)
    mask = np.ones(joint.shape, dtype=bool)
    for cell in itertools.product(*[range(len(s.levels)) for s in specs]):
        assign = {n: s.levels[i] for n, s, i in zip(names, specs, cell)}
        for r in rules:
            if assign[r.if_var] in r.if_levels and assign[r.then_var] != r.then_level:
                mask[cell] = False
    joint = np.where(mask, joint, 0.0)
    for _ in range(max_iter):
        for ax, m in enumerate(margs):
            other = tuple(a for a in range(joint.ndim) if a != ax)
            cur = joint.sum(axis=other)
            ratio = np.divide(m, cur, out=np.zeros_like(m), where=cur > 0)
            shape = [1] * joint.ndim
            shape[ax] = -1
            joint = joint * ratio.reshape(shape)
        err = max(np.abs(joint.sum(axis=tuple(a for a in range(joint.ndim) if a != ax)) - m).max()
                  for ax, m in enumerate(margs))
        if err < tol:
            return joint / joint.sum()
    raise InfeasibleConfig("no joint distribution satisfies: " + "; ".join(str(r) for r in rules))


def _validate(config: SimConfig, schema: VariableSchema) -> None:
    for name, m in config.marginals.items():
        v = schema[name]
        if set(m) - set(v.levels):
            raise ValueError(f"marginals for {name} name unknown levels {sorted(set(m) - set(v.levels))}")
        if abs(sum(m.values()) - 1.0) > 1e-9:
            raise ValueError(f"marginals for {name} sum to {sum(m.values())}, not 1")
    for name, p in config.missingness_rates.items():
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"missingness rate for {name} outside [0, 1]")
    for r in config.exclusion_rules:
        for var, lvls in ((r.if_var, r.if_levels), (r.then_var, (r.then_level,))):
            bad = set(lvls) - set(schema[var].levels)
            if bad:
                raise InfeasibleConfig(f"rule '{r}' references unknown levels {sorted(bad)}")
    lo, hi = config.length_range
    if lo % 10 or hi % 10 or not 10 <= lo <= hi <= 100:
        raise ValueError("length_range must be multiples of 10 within [10, 100]")


def sample_cohort(config: SimConfig, schema: VariableSchema | None = None) -> Cohort:
    """Deterministic surrogate cohort; each patient draws from its own spawned substream."""
    schema = schema or hiv_schema()
    _validate(config, schema)
    rules = list(config.exclusion_rules)
    ruled = sorted({r.if_var for r in rules} | {r.then_var for r in rules}, key=schema.index)
    joint = _joint_under_rules(schema, config, ruled, rules) if ruled else None
    joint_flat = joint.ravel() if joint is not None else None

    static = [v for v in schema.nonnumeric if v.static and v.name in config.marginals]
    regimen = [v for v in schema.nonnumeric if not v.static and v.name in config.marginals and v.name not in ruled]
    lengths = np.arange(config.length_range[0], config.length_range[1] + 1, 10)
    col = {n: i for i, n in enumerate(schema.names)}

    def probs(v):
        return np.array([config.marginals[v.name].get(l, 0.0) for l in v.levels])

    def draw_regimen(rng):
        out = {}
        for v in regimen:
            out[v.name] = int(rng.choice(len(v.levels), p=probs(v)))
        if joint is not None:
            cell = np.unravel_index(int(rng.choice(joint_flat.size, p=joint_flat)), joint.shape)
            for n, k in zip(ruled, cell):
                out[n] = int(k)
        return out

    records = []
    for i, ss in enumerate(np.random.SeedSequence(config.seed).spawn(config.n_patients)):
        rng = np.random.default_rng(ss)
        n = int(rng.choice(lengths))
        vals = np.zeros((n, len(schema)))
        for v in static:
            vals[:, col[v.name]] = rng.choice(len(v.levels), p=probs(v))
        reg = draw_regimen(rng)
        for t in range(n):
            if t > 0 and rng.random() < config.switch_rate:
                reg = draw_regimen(rng)
            for name, k in reg.items():
                vals[t, col[name]] = k
        for name, p in config.missingness_rates.items():
            vals[:, col[name]] = (rng.random(n) < p).astype(float)

        for name, dyn in config.numeric_dynamics.items():
            mu = dyn.mean + dyn.spread * rng.standard_normal()
            x = np.empty(n)
            shift = np.zeros(n)
            if name == "VL":
                for var, effects in config.regimen_effects.items():
                    v = schema[var]
                    for lvl, eff in effects.items():
                        shift += eff * (vals[:, col[var]] == v.level_index(lvl))
            level = mu + shift[0] + dyn.noise * rng.standard_normal()
            for t in range(n):
                if t:
                    level = mu + shift[t] + dyn.phi * (level - mu - shift[t - 1]) + dyn.noise * rng.standard_normal()
                # reflect into [low, high]
                span = dyn.high - dyn.low
                y = np.mod(level - dyn.low, 2 * span)
                level = dyn.low + (y if y <= span else 2 * span - y)
                x[t] = level
            latent = 10.0 ** x
            flag = {"VL": "VL (M)", "CD4": "CD4 (M)", "Rel CD4": "CD4 (M)"}.get(name)
            if flag in col:
                measured = vals[:, col[flag]] == 1.0
                observed = latent.copy()
                for t in range(1, n):
                    if not measured[t]:
                        observed[t] = observed[t - 1]
                latent = observed
            vals[:, col[name]] = np.round(latent, 4)
        records.append(PatientRecord(f"p{i:05d}", vals))
    return Cohort(schema, records)


# ---------------------------------------------------------------------------


@dataclass
class CohortSummary:
    counts: dict[str, dict[str, int]]
    fractions: dict[str, dict[str, float]]
    cooccurrence: dict[tuple[str, str], np.ndarray]  # [levels_a, levels_b] row counts


def cohort_summary(cohort: Cohort) -> CohortSummary:
    if not len(cohort):
        raise ValueError("cohort_summary needs a nonempty cohort")
    rows = cohort.rows()
    schema = cohort.schema
    counts, fractions = {}, {}
    idx = {}
    for j, v in enumerate(schema.variables):
        if v.is_numeric:
            continue
        k = rows[:, j].astype(np.int64)
        idx[v.name] = k
        c = np.bincount(k, minlength=len(v.levels))
        counts[v.name] = {lvl: int(c[i]) for i, lvl in enumerate(v.levels)}
        fractions[v.name] = {lvl: c[i] / c.sum() for i, lvl in enumerate(v.levels)}
    co = {}
    names = list(idx)
    for a, b in itertools.combinations(names, 2):
        na, nb = len(schema[a].levels), len(schema[b].levels)
        m = np.zeros((na, nb), dtype=np.int64)
        np.add.at(m, (idx[a], idx[b]), 1)
        co[(a, b)] = m
    return CohortSummary(counts, fractions, co)
