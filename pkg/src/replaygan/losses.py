"""Critic, generator and VAE objectives and the Pearson correlation used by the alignment term."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .schema import VariableSchema


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, Tensor]
    weights: dict[str, float] = field(default_factory=dict)

    def floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out

    def weighted_sum(self) -> Tensor:
        return sum(self.weights.get(k, 1.0) * v for k, v in self.components.items())


def _mean_score(critics, x: Tensor) -> Tensor:
    """Mean critic score, averaged across critics when several are live."""
    if isinstance(critics, (list, tuple)):
        return torch.stack([c(x).mean() for c in critics]).mean()
    return critics(x).mean()


def gradient_penalty(critic, x_interp: Tensor) -> Tensor:
    with torch.enable_grad():
        x_interp = x_interp.detach().requires_grad_(True)
        scores = critic(x_interp)
        (grad,) = torch.autograd.grad(scores.sum(), x_interp, create_graph=True)
    norms = grad.flatten(1).norm(dim=1)
    if not torch.all(torch.isfinite(norms)):
        raise FloatingPointError("non-finite gradient norm in gradient penalty")
    return ((norms - 1.0) ** 2).mean()


def interpolate(x_real: Tensor, x_syn: Tensor, eps: Tensor) -> Tensor:
    """eps * x_real + (1 - eps) * x_syn with one eps per sample broadcast over time and channels."""
    e = eps.reshape(-1, *([1] * (x_real.dim() - 1)))
    return e * x_real + (1.0 - e) * x_syn


def critic_loss(critic, x_real: Tensor, x_syn: Tensor, eps: Tensor, lambda_gp: float = 10.0) -> LossBreakdown:
    """Wasserstein value mean C(syn) - mean C(real) plus the two-sided gradient penalty.

    ``critic`` may be a list of critics; the loss is then averaged across them.
    """
    if x_real.shape != x_syn.shape:
        raise ValueError(f"shape mismatch {tuple(x_real.shape)} vs {tuple(x_syn.shape)}")
    critics = critic if isinstance(critic, (list, tuple)) else [critic]
    x_t = interpolate(x_real, x_syn, eps)
    w = torch.stack([c(x_syn).mean() - c(x_real).mean() for c in critics]).mean()
    gp = torch.stack([gradient_penalty(c, x_t) for c in critics]).mean()
    return LossBreakdown(w + lambda_gp * gp, {"wasserstein": w, "gradient_penalty": gp},
                         {"wasserstein": 1.0, "gradient_penalty": lambda_gp})


def alignment(r_syn: Tensor, r_real: Tensor) -> Tensor:
    """Sum over unordered variable pairs (strict lower triangle) of |r_syn - r_real|."""
    if r_syn.shape != r_real.shape or r_syn.dim() != 2 or r_syn.shape[0] != r_syn.shape[1]:
        raise ValueError(f"correlation matrices must be same-shaped squares, got {tuple(r_syn.shape)} "
                         f"and {tuple(r_real.shape)}")
    i, j = torch.tril_indices(r_syn.shape[0], r_syn.shape[1], offset=-1)
    return (r_syn[i, j] - r_real[i, j]).abs().sum()


def feature_matching(critic, x_real: Tensor, x_syn: Tensor) -> Tensor:
    """Mean absolute gap between batch-mean embedding features of real and synthetic data."""
    f_real = critic.embedding(x_real).mean(dim=(0, 1))
    f_syn = critic.embedding(x_syn).mean(dim=(0, 1))
    return (f_real - f_syn).abs().mean()


def generator_loss(critic, x_syn: Tensor, r_syn: Tensor, r_real: Tensor, lambda_corr: float = 10.0,
                   *, use_alignment: bool = True, x_real: Tensor | None = None,
                   lambda_fm: float = 0.0) -> LossBreakdown:
    """-mean C(syn) + lambda_corr * alignment (+ lambda_fm * feature matching when enabled).

    The alignment component is always computed and reported; with
    ``use_alignment=False`` it carries zero weight.
    """
    adv = -_mean_score(critic, x_syn)
    align = alignment(r_syn, r_real)
    comps = {"adversarial": adv, "alignment": align}
    weights = {"adversarial": 1.0, "alignment": lambda_corr if use_alignment else 0.0}
    if lambda_fm:
        first = critic[0] if isinstance(critic, (list, tuple)) else critic
        comps["feature_matching"] = feature_matching(first, x_real, x_syn)
        weights["feature_matching"] = lambda_fm
    total = adv
    for k in comps:
        if k != "adversarial" and weights[k]:
            total = total + weights[k] * comps[k]
    return LossBreakdown(total, comps, weights)


# ---------------------------------------------------------------------------


def scalarize(x, schema: VariableSchema):
    """One scalar per variable per row: numeric channels as-is, simplex blocks as the index-weighted expectation."""
    lib = torch if isinstance(x, Tensor) else np
    cols = []
    for v, sl in schema.layout():
        if v.is_numeric:
            cols.append(x[..., sl.start])
        else:
            idx = lib.arange(len(v.levels), dtype=x.dtype) if lib is torch else np.arange(len(v.levels), dtype=float)
            cols.append((x[..., sl] * idx).sum(-1))
    return lib.stack(cols, -1) if lib is torch else np.stack(cols, -1)


def pearson(rows: Tensor) -> tuple[Tensor, list[int]]:
    """Pearson matrix of the columns of ``rows`` [n, V]; zero-variance columns get 0 off-diagonal."""
    if rows.shape[0] < 2:
        raise ValueError("pearson needs at least 2 rows")
    xc = rows - rows.mean(0, keepdim=True)
    ss = (xc * xc).sum(0)
    flat = (ss <= 0).nonzero().flatten().tolist()
    denom = torch.sqrt(torch.where(ss > 0, ss, torch.ones_like(ss)))
    z = xc / denom
    r = (z.T @ z).clamp(-1.0, 1.0)
    alive = (ss > 0).to(rows.dtype)
    r = r * alive[:, None] * alive[None, :]
    eye = torch.eye(r.shape[0], dtype=r.dtype)
    return r * (1 - eye) + eye, flat


def pearson_matrix(batch, schema: VariableSchema, lengths=None) -> tuple[Tensor, list[int]]:
    """Correlation between schema variables over all (record, month) rows of an encoded batch.

    Accepts a tensor or array of shape [batch, time, width]; returns the matrix
    and the indices of zero-variance variables.
    """
    x = batch if isinstance(batch, Tensor) else torch.as_tensor(np.asarray(batch), dtype=torch.float64)
    s = scalarize(x, schema)
    if lengths is not None:
        s = torch.cat([s[i, : int(n)] for i, n in enumerate(lengths)], 0)
    else:
        s = s.reshape(-1, s.shape[-1])
    return pearson(s)


# ---------------------------------------------------------------------------


def gaussian_kl(gamma: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(gamma, sigma^2) || N(0, 1)) elementwise."""
    return 0.5 * (gamma**2 + sigma**2 - 1.0 - torch.log(sigma**2))


def reconstruction_nll(x_real: Tensor, x_hat: Tensor, schema: VariableSchema) -> Tensor:
    """Squared error on numeric channels plus categorical cross-entropy per block, per row."""
    total = torch.zeros(x_real.shape[:-1], dtype=x_real.dtype)
    for v, sl in schema.layout():
        if v.is_numeric:
            total = total + (x_real[..., sl.start] - x_hat[..., sl.start]) ** 2
        else:
            total = total - torch.xlogy(x_real[..., sl], x_hat[..., sl].clamp_min(1e-12)).sum(-1)
    return total


def vae_loss(x_real: Tensor, gamma: Tensor, sigma: Tensor, x_hat: Tensor, schema: VariableSchema,
             lambda_kl: float = 1.0, kl_reduction: str = "mean") -> LossBreakdown:
    """Negative of the VAE objective: lambda_kl * KL + reconstruction NLL.

    The reconstruction NLL is summed over variables; the KL is averaged over
    latent dimensions (``kl_reduction="mean"``) or summed (``"sum"``). Both
    are then averaged over (batch, time). Summing the KL over 128 latent
    dimensions lets it swamp the reconstruction term and the posterior
    collapses onto the prior.
    """
    if torch.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    if kl_reduction not in ("mean", "sum"):
        raise ValueError(f"kl_reduction must be 'mean' or 'sum', got {kl_reduction!r}")
    kl_el = gaussian_kl(gamma, sigma)
    kl = (kl_el.mean(-1) if kl_reduction == "mean" else kl_el.sum(-1)).mean()
    rec = reconstruction_nll(x_real, x_hat, schema).mean()
    return LossBreakdown(lambda_kl * kl + rec, {"kl": kl, "reconstruction": rec},
                         {"kl": lambda_kl, "reconstruction": 1.0})
