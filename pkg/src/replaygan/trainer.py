"""Training loop for the replay-augmented WGAN-GP and its baseline variants.

Each outer iteration runs, in order: one VAE update (whose real-data features
are appended to the buffer), ``n_critic`` critic updates and one generator
update. Records are bucketed by (curriculum-capped) length so every batch is
rectangular.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import torch

from . import losses
from .nets import HIDDEN, VAE, Critic, make_generator
from .replay import FeatureBuffer, make_generator_input
from .schema import Cohort, EncodedBatch, ScalingParams, VariableSchema, decode_cohort, encode_records

log = logging.getLogger(__name__)

VARIANTS = ("wgan_gp_baseline", "vae_wgan_gp", "ours_bilstm", "ours_eot", "mbd", "mm", "mc")
BUFFER_VARIANTS = ("ours_bilstm", "ours_eot")
VAE_VARIANTS = BUFFER_VARIANTS + ("vae_wgan_gp",)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: "TrainTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    variant: str = "ours_eot"
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    n_critic: int = 5
    lambda_gp: float = 10.0
    lambda_corr: float = 10.0
    lambda_kl: float = 1.0
    kl_reduction: str = "mean"
    # weight of the feature-matching term (mm variant only)
    lambda_fm: float = 1.0
    use_alignment: bool = True
    curriculum: tuple[int, ...] = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
    buffer_capacity: int = 10_000
    # mc variant: a fresh critic joins every this many epochs
    new_critic_every: int = 50
    # overrides the variant's default generator ("bilstm" or "eot")
    generator: str | None = None
    # Gumbel-softmax temperature for categorical output heads (None: plain softmax)
    gumbel_tau: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.curriculum = tuple(int(c) for c in self.curriculum)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.curriculum:
            raise ValueError("curriculum needs at least one stage")
        if any(c % 10 or not 10 <= c <= 100 for c in self.curriculum):
            raise ValueError("curriculum stages must be multiples of 10 in [10, 100]")
        if list(self.curriculum) != sorted(self.curriculum):
            raise ValueError("curriculum stages must be nondecreasing")
        if self.epochs < 1 or self.batch_size < 1 or self.n_critic < 1:
            raise ValueError("epochs, batch_size and n_critic must be positive")
        if self.gumbel_tau is not None and self.gumbel_tau <= 0:
            raise ValueError("gumbel_tau must be positive")

    @property
    def generator_kind(self) -> str:
        return self.generator or ("eot" if self.variant == "ours_eot" else "bilstm")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["curriculum"] = list(self.curriculum)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TraceRow:
    epoch: int
    iteration: int
    phase: str  # "V", "C" or "G"
    step: int
    loss: float
    l_corr: float = float("nan")
    wall_time: float = 0.0


@dataclass
class TrainTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self, include_time: bool = False) -> pd.DataFrame:
        df = pd.DataFrame([asdict(r) for r in self.rows],
                          columns=list(TraceRow.__dataclass_fields__))
        return df if include_time else df.drop(columns="wall_time")

    def to_csv(self, path, include_time: bool = False) -> None:
        self.to_frame(include_time).to_csv(path, index=False, lineterminator="\n")

    def l_corr(self) -> np.ndarray:
        return np.array([r.l_corr for r in self.rows if r.phase == "G"])

    def final_l_corr(self, last: int | None = None) -> float:
        """Mean logged alignment over the last epoch's generator steps (or the last ``last`` steps)."""
        g = [r for r in self.rows if r.phase == "G"]
        if not g:
            return float("nan")
        if last is None:
            g = [r for r in g if r.epoch == g[-1].epoch]
        else:
            g = g[-last:]
        return float(np.mean([r.l_corr for r in g]))


@dataclass
class ModelBundle:
    schema: VariableSchema
    config: TrainConfig
    scaling: ScalingParams
    generator: torch.nn.Module
    critics: list[Critic]
    vae: VAE | None = None
    # variant hooks
    input_source: str = "noise"  # "noise" | "buffer" | "vae"
    lambda_fm: float = 0.0
    new_critic_every: int = 0

    @property
    def variant(self) -> str:
        return self.config.variant

    def modules(self) -> dict[str, torch.nn.Module]:
        out = {"generator": self.generator}
        for i, c in enumerate(self.critics):
            out[f"critic{i}"] = c
        if self.vae is not None:
            out["vae"] = self.vae
        return out

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, mod in self.modules().items():
            for k, v in mod.state_dict().items():
                h.update(f"{name}.{k}".encode())
                h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_bundle(config: TrainConfig, schema: VariableSchema, scaling: ScalingParams) -> ModelBundle:
    """Freshly initialised networks for ``config.variant`` with its hooks installed."""
    config.validate()
    generator = make_generator(config.generator_kind, schema, config.gumbel_tau)
    critic = Critic(schema)
    bundle = ModelBundle(schema, config, scaling, generator, [critic])
    if config.variant in VAE_VARIANTS:
        bundle.vae = VAE(schema, critic.embedding)
    if config.variant in BUFFER_VARIANTS:
        bundle.input_source = "buffer"
    return apply_variant(config, bundle)


def apply_variant(config: TrainConfig, bundle: ModelBundle) -> ModelBundle:
    """Install the mode-collapse baseline hooks (mbd, mm, mc, vae_wgan_gp)."""
    v = config.variant
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {v!r}")
    if v == "mbd":
        bundle.critics = [Critic(bundle.schema, minibatch_features=True)]
    elif v == "mm":
        bundle.lambda_fm = config.lambda_fm
    elif v == "mc":
        bundle.new_critic_every = config.new_critic_every
    elif v == "vae_wgan_gp":
        if bundle.vae is None:
            bundle.vae = VAE(bundle.schema, bundle.critics[0].embedding)
        bundle.input_source = "vae"
    return bundle


def n_critics_at(epoch: int, every: int) -> int:
    """Live critics at 1-based ``epoch`` when a new one joins every ``every`` epochs."""
    return 1 + epoch // every if every else 1


def curriculum_schedule(stages, epochs: int) -> list[int]:
    """Per-epoch maximum record length: epochs split evenly across stages, earlier stages take the remainder."""
    stages = list(stages)
    if not stages:
        raise ValueError("stages must be nonempty")
    return [int(stages[k]) for k, chunk in enumerate(np.array_split(np.arange(epochs), len(stages)))
            for _ in chunk]


# ---------------------------------------------------------------------------


def _adam(params, config: TrainConfig):
    return torch.optim.Adam(params, lr=config.lr, betas=config.betas)


class _Inputs:
    """Generator inputs for the bundle's input source during training."""

    def __init__(self, bundle: ModelBundle, buffer: FeatureBuffer | None, rng: np.random.Generator,
                 tgen: torch.Generator):
        self.bundle, self.buffer, self.rng, self.tgen = bundle, buffer, rng, tgen

    def __call__(self, n: int, length: int, x_real: torch.Tensor | None = None) -> torch.Tensor:
        src = self.bundle.input_source
        if src == "buffer":
            g, s = self.buffer.sample(n, self.rng, length=length)
            return torch.from_numpy(make_generator_input(g, s, "train"))
        if src == "vae":
            with torch.no_grad():
                gamma, sigma = self.bundle.vae.encode(x_real)
                return gamma + sigma * torch.randn(gamma.shape, generator=self.tgen)
        return torch.randn(n, length, HIDDEN, generator=self.tgen)


def _check(value: float, what: str, trace: TrainTrace) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} loss", trace)


def train(config: TrainConfig, cohort: Cohort, schema: VariableSchema | None = None, *,
          on_epoch_end: Callable[[int, ModelBundle, FeatureBuffer | None, TrainTrace], None] | None = None,
          ) -> tuple[ModelBundle, FeatureBuffer | None, TrainTrace]:
    """Train ``config.variant`` on ``cohort``; fully deterministic given ``config.seed``."""
    schema = schema or cohort.schema
    config.validate()
    problems = cohort.validate()
    if problems:
        raise ValueError("cohort does not conform to schema: " + "; ".join(problems[:5]))
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    tgen = torch.Generator().manual_seed(config.seed)

    scaling = ScalingParams.fit(cohort)
    bundle = build_bundle(config, schema, scaling)
    buffer = FeatureBuffer(config.buffer_capacity, seed=config.seed) if bundle.input_source == "buffer" else None
    inputs = _Inputs(bundle, buffer, rng, tgen)
    bundle.generator.head.rng = tgen

    enc = [torch.from_numpy(encode_records(r.values, schema, scaling).astype(np.float32)) for r in cohort]
    lengths = cohort.lengths
    opt_g = _adam(bundle.generator.parameters(), config)
    opt_c = [_adam(c.parameters(), config) for c in bundle.critics]
    opt_v = _adam(bundle.vae.parameters(), config) if bundle.vae is not None else None

    trace = TrainTrace()
    t0 = time.perf_counter()
    caps = curriculum_schedule(config.curriculum, config.epochs)
    r_real_cache: dict[int, torch.Tensor] = {}
    iteration = 0
    for epoch, cap in enumerate(caps):
        want = n_critics_at(epoch + 1, bundle.new_critic_every)
        while len(bundle.critics) < want:
            bundle.critics.append(Critic(schema))
            opt_c.append(_adam(bundle.critics[-1].parameters(), config))
            log.info("epoch %d: added critic #%d", epoch + 1, len(bundle.critics))

        capped = np.minimum(lengths, cap)
        if cap not in r_real_cache:
            rows = torch.cat([e[:n] for e, n in zip(enc, capped)]).double()
            r_real_cache[cap] = losses.pearson(losses.scalarize(rows, schema))[0].float()
        r_real = r_real_cache[cap]

        buckets = {int(L): np.flatnonzero(capped == L) for L in np.unique(capped)}
        batches = []
        for L, idx in buckets.items():
            perm = rng.permutation(idx)
            for k in range(0, len(perm), config.batch_size):
                batches.append((L, perm[k: k + config.batch_size]))
        order = rng.permutation(len(batches))

        def real_batch(L, n):
            pick = rng.choice(buckets[L], size=min(n, len(buckets[L])), replace=False)
            return torch.stack([enc[i][:L] for i in pick])

        for b in order:
            L, chunk = batches[b]
            iteration += 1
            x_real = torch.stack([enc[i][:L] for i in chunk])
            n = len(chunk)

            if bundle.vae is not None:
                xi, gamma, sigma, x_hat = bundle.vae(x_real, generator=tgen)
                lv = losses.vae_loss(x_real, gamma, sigma, x_hat, schema, config.lambda_kl, config.kl_reduction)
                opt_v.zero_grad(set_to_none=True)
                lv.total.backward()
                opt_v.step()
                val = float(lv.total.detach())
                trace.append(TraceRow(epoch + 1, iteration, "V", 0, val, wall_time=time.perf_counter() - t0))
                _check(val, "VAE", trace)
                if buffer is not None:
                    buffer.append(gamma.detach().numpy(), sigma.detach().numpy())

            for t in range(config.n_critic):
                xr = real_batch(L, n)
                m = len(xr)
                z = inputs(m, L, xr)
                with torch.no_grad():
                    x_syn = bundle.generator(z)
                eps = torch.rand(m, generator=tgen)
                lc = losses.critic_loss(bundle.critics, xr, x_syn, eps, config.lambda_gp)
                for o in opt_c:
                    o.zero_grad(set_to_none=True)
                lc.total.backward()
                for o in opt_c:
                    o.step()
                val = float(lc.total.detach())
                trace.append(TraceRow(epoch + 1, iteration, "C", t + 1, val, wall_time=time.perf_counter() - t0))
                _check(val, "critic", trace)

            xr = real_batch(L, n) if (bundle.input_source == "vae" or bundle.lambda_fm) else None
            z = inputs(n if xr is None else len(xr), L, xr)
            x_syn = bundle.generator(z)
            r_syn, _ = losses.pearson(losses.scalarize(x_syn, schema).reshape(-1, len(schema)))
            lg = losses.generator_loss(bundle.critics, x_syn, r_syn, r_real, config.lambda_corr,
                                       use_alignment=config.use_alignment, x_real=xr, lambda_fm=bundle.lambda_fm)
            opt_g.zero_grad(set_to_none=True)
            lg.total.backward()
            opt_g.step()
            val = float(lg.total.detach())
            trace.append(TraceRow(epoch + 1, iteration, "G", 0, val, float(lg.components["alignment"].detach()),
                                  wall_time=time.perf_counter() - t0))
            _check(val, "generator", trace)

        log.info("epoch %d/%d cap=%d L_corr=%.4f", epoch + 1, config.epochs, cap, trace.final_l_corr())
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, bundle, buffer, trace)
    return bundle, buffer, trace


# ---------------------------------------------------------------------------


def generate_cohort(bundle: ModelBundle, buffer: FeatureBuffer | None, n_patients: int, months: int = 60,
                    seed: int = 0, batch_size: int = 256) -> Cohort:
    """Synthetic cohort of ``n_patients`` records, each ``months`` long.

    Replay variants sample stored features with replacement and add
    N(0, sigma) noise; the other variants draw inputs from N(0, I).
    """
    rng = np.random.default_rng(seed)
    tgen = torch.Generator().manual_seed(seed)
    if bundle.input_source == "buffer":
        if buffer is None or not len(buffer):
            raise ValueError("replay variants need a nonempty feature buffer to generate")
    outs = []
    bundle.generator.head.rng = tgen
    bundle.generator.eval()
    with torch.no_grad():
        for start in range(0, n_patients, batch_size):
            n = min(batch_size, n_patients - start)
            if bundle.input_source == "buffer":
                g, s = buffer.sample(n, rng, length=months)
                z = torch.from_numpy(make_generator_input(g, s, "test", rng))
            else:
                z = torch.randn(n, months, HIDDEN, generator=tgen)
            outs.append(bundle.generator(z).double().numpy())
    bundle.generator.train()
    values = np.concatenate(outs) if outs else np.zeros((0, months, bundle.schema.encoded_width))
    batch = EncodedBatch(values, np.full(n_patients, months), bundle.scaling,
                         [f"syn-{i:05d}" for i in range(n_patients)])
    return decode_cohort(batch, bundle.schema)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "replaygan-checkpoint/1"


class SchemaMismatch(ValueError):
    pass


def save_checkpoint(path: str | Path, bundle: ModelBundle, buffer: FeatureBuffer | None = None) -> None:
    obj = {
        "format": CHECKPOINT_FORMAT,
        "schema": bundle.schema.to_dict(),
        "schema_hash": bundle.schema.hash(),
        "variant": bundle.variant,
        "generator_kind": bundle.config.generator_kind,
        "config": bundle.config.to_dict(),
        "scaling": bundle.scaling.to_dict(),
        "n_critics": len(bundle.critics),
        "state": {k: m.state_dict() for k, m in bundle.modules().items()},
        "buffer": None,
    }
    if buffer is not None:
        st = buffer.state_dict()
        obj["buffer"] = {
            "capacity": st["capacity"],
            "gammas": [torch.from_numpy(g) for g in st["gammas"]],
            "sigmas": [torch.from_numpy(s) for s in st["sigmas"]],
            "rng": _stringify_ints(st["rng"]),
        }
    torch.save(obj, path)


def _stringify_ints(d):
    # numpy's PCG64 state holds 128-bit ints
    if isinstance(d, dict):
        return {k: _stringify_ints(v) for k, v in d.items()}
    if isinstance(d, int) and not isinstance(d, bool):
        return str(d)
    return d


def _unstringify_ints(d):
    if isinstance(d, dict):
        return {k: _unstringify_ints(v) for k, v in d.items()}
    if isinstance(d, str) and d.isdigit():
        return int(d)
    return d


def load_checkpoint(path: str | Path, schema: VariableSchema | None = None
                    ) -> tuple[ModelBundle, FeatureBuffer | None]:
    """Rebuild a bundle and its buffer; refuses a checkpoint written for another schema."""
    obj = torch.load(path, weights_only=True)
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    stored = VariableSchema.from_dict(obj["schema"])
    if schema is not None and schema.hash() != obj["schema_hash"]:
        raise SchemaMismatch(f"{path}: checkpoint schema hash {obj['schema_hash'][:12]} does not match "
                             f"{schema.hash()[:12]}")
    config = TrainConfig.from_dict(obj["config"])
    bundle = build_bundle(config, stored, ScalingParams.from_dict(obj["scaling"]))
    while len(bundle.critics) < obj["n_critics"]:
        bundle.critics.append(Critic(stored))
    for k, m in bundle.modules().items():
        m.load_state_dict(obj["state"][k])
    buffer = None
    if obj["buffer"] is not None:
        b = obj["buffer"]
        buffer = FeatureBuffer.from_state_dict({
            "capacity": b["capacity"],
            "gammas": [g.numpy() for g in b["gammas"]],
            "sigmas": [s.numpy() for s in b["sigmas"]],
            "rng": _unstringify_ints(b["rng"]),
        })
    return bundle, buffer
