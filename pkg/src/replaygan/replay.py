"""External feature buffer: fixed capacity, uniform random eviction, sampling with replacement."""
from __future__ import annotations

import numpy as np

SIGMA_FLOOR = 1e-4


class FeatureBuffer:
    """Stores whole-sequence VAE features: one entry is a record's ([T, D] gamma, [T, D] sigma)."""

    def __init__(self, capacity: int = 10_000, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.rng = np.random.default_rng(seed)
        self.gammas: list[np.ndarray] = []
        self.sigmas: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.gammas)

    def append(self, gamma_batch, sigma_batch) -> "FeatureBuffer":
        """Evict uniformly chosen entries to make room, then append the batch.

        A batch larger than the capacity keeps a uniformly chosen subset of itself.
        """
        gamma_batch = [np.asarray(g, dtype=np.float32) for g in gamma_batch]
        sigma_batch = [np.asarray(s, dtype=np.float32) for s in sigma_batch]
        if len(gamma_batch) != len(sigma_batch) or any(g.shape != s.shape for g, s in zip(gamma_batch, sigma_batch)):
            raise ValueError("gamma and sigma batches must be paired with equal shapes")
        k = len(gamma_batch)
        if k > self.capacity:
            keep = np.sort(self.rng.choice(k, self.capacity, replace=False))
            gamma_batch = [gamma_batch[i] for i in keep]
            sigma_batch = [sigma_batch[i] for i in keep]
            k = self.capacity
        overflow = len(self) + k - self.capacity
        if overflow > 0:
            victims = set(self.rng.choice(len(self), overflow, replace=False).tolist())
            self.gammas = [g for i, g in enumerate(self.gammas) if i not in victims]
            self.sigmas = [s for i, s in enumerate(self.sigmas) if i not in victims]
        self.gammas.extend(gamma_batch)
        self.sigmas.extend(sigma_batch)
        return self

    def sample(self, n: int, seed=None, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        return buffer_sample(self, n, seed, length)

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "gammas": [g.copy() for g in self.gammas],
            "sigmas": [s.copy() for s in self.sigmas],
            "rng": self.rng.bit_generator.state,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "FeatureBuffer":
        buf = cls(int(state["capacity"]))
        buf.gammas = [np.asarray(g, dtype=np.float32) for g in state["gammas"]]
        buf.sigmas = [np.asarray(s, dtype=np.float32) for s in state["sigmas"]]
        buf.rng.bit_generator.state = state["rng"]
        return buf


def buffer_append(buf: FeatureBuffer, gamma_batch, sigma_batch) -> FeatureBuffer:
    return buf.append(gamma_batch, sigma_batch)


def buffer_sample(buf: FeatureBuffer, n: int, seed=None, length: int | None = None):
    """``n`` i.i.d. uniform draws with replacement.

    Without ``length`` every drawn entry must share one shape. With ``length``
    each draw is fitted to that many time steps: longer entries are cropped,
    shorter ones are chained with further uniform draws before cropping.
    Returns stacked (gamma, sigma) arrays of shape [n, T, D].
    """
    if len(buf) == 0:
        raise ValueError("cannot sample from an empty buffer")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = buf.gammas[0].shape[-1]
    if n == 0:
        return np.zeros((0, length or 0, d), np.float32), np.zeros((0, length or 0, d), np.float32)
    idx = rng.integers(len(buf), size=n)
    if length is None:
        return np.stack([buf.gammas[i] for i in idx]), np.stack([buf.sigmas[i] for i in idx])
    gs, ss = [], []
    for i in idx:
        g, s = [buf.gammas[i]], [buf.sigmas[i]]
        have = len(g[0])
        while have < length:
            j = int(rng.integers(len(buf)))
            g.append(buf.gammas[j])
            s.append(buf.sigmas[j])
            have += len(buf.gammas[j])
        gs.append(np.concatenate(g)[:length])
        ss.append(np.concatenate(s)[:length])
    return np.stack(gs), np.stack(ss)


def make_generator_input(gamma, sigma, mode: str = "train", seed=None, floor: float = SIGMA_FLOOR):
    """Training: the stored features unchanged. Test: gamma + N(0, sigma) noise, sigma floored."""
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    if np.shape(gamma) != np.shape(sigma):
        raise ValueError("gamma and sigma must be paired")
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be strictly positive")
    if mode == "train":
        return gamma
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    gamma = np.asarray(gamma)
    return gamma + rng.standard_normal(gamma.shape).astype(gamma.dtype) * np.maximum(sigma, floor)
