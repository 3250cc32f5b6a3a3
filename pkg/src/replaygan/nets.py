"""Generator, critic and VAE networks.

All networks read and write the one-hot encoded layout of a
:class:`~replaygan.schema.VariableSchema`: numeric channels in [0, 1] and one
probability simplex per binary/categorical variable.
"""
from __future__ import annotations

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .schema import VariableSchema

HIDDEN = 128
SIGMA_MIN = 1e-4
SIGMA_MAX = 10.0
MAX_POSITIONS = 100


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.shape[-1] != width:
        raise ValueError(f"{what}: expected width {width}, got {x.shape[-1]}")


class SoftEmbedding(nn.Module):
    """Per-variable lookup tables; numeric channels pass through.

    A simplex block is embedded as the probability-weighted sum of its table
    rows, so a hard one-hot block reduces to a plain lookup.
    """

    def __init__(self, schema: VariableSchema):
        super().__init__()
        self.schema = schema
        self.layout = schema.layout()
        self.tables = nn.ParameterDict()
        for v, _ in self.layout:
            if not v.is_numeric:
                self.tables[self._key(v.name)] = nn.Parameter(torch.randn(len(v.levels), v.embed_dim) * 0.5)
        self.in_width = schema.encoded_width
        self.out_width = schema.embed_width

    @staticmethod
    def _key(name: str) -> str:
        # ParameterDict keys may not contain "."
        return name.replace(".", "_")

    def table(self, name: str) -> nn.Parameter:
        return self.tables[self._key(name)]

    def forward(self, x: Tensor) -> Tensor:
        _check_width(x, self.in_width, "soft_embed")
        parts = []
        for v, sl in self.layout:
            if v.is_numeric:
                parts.append(x[..., sl])
            else:
                parts.append(x[..., sl] @ self.table(v.name))
        return torch.cat(parts, dim=-1)


def soft_embed(x: Tensor, emb: SoftEmbedding) -> Tensor:
    return emb(x)


class OutputHead(nn.Module):
    """Sigmoid on numeric channels, softmax within every categorical block.

    With ``gumbel_tau`` set, each block is a Gumbel-softmax relaxation at that
    temperature, so argmax decoding draws a level from the emitted logits
    instead of always returning the modal level. Static variables share one
    noise draw per record across time.
    """

    def __init__(self, schema: VariableSchema, gumbel_tau: float | None = None):
        super().__init__()
        if gumbel_tau is not None and gumbel_tau <= 0:
            raise ValueError("gumbel_tau must be positive")
        self.layout = schema.layout()
        self.gumbel_tau = gumbel_tau
        self.rng: torch.Generator | None = None

    def forward(self, logits: Tensor) -> Tensor:
        parts = []
        for v, sl in self.layout:
            block = logits[..., sl]
            if v.is_numeric:
                parts.append(torch.sigmoid(block))
            elif self.gumbel_tau is None:
                parts.append(torch.softmax(block, dim=-1))
            else:
                shape = (block.shape[0], 1, block.shape[-1]) if v.static and block.dim() == 3 else block.shape
                u = torch.rand(shape, generator=self.rng, dtype=block.dtype).clamp(1e-10, 1 - 1e-10)
                parts.append(torch.softmax((block - torch.log(-torch.log(u))) / self.gumbel_tau, dim=-1))
        return torch.cat(parts, dim=-1)


class BiLSTM(nn.Module):
    """Bidirectional LSTM whose concatenated directions are projected back to ``hidden``."""

    def __init__(self, in_dim: int, hidden: int = HIDDEN):
        super().__init__()
        self.rnn = nn.LSTM(in_dim, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, hidden)

    def forward(self, x: Tensor) -> Tensor:
        out, _ = self.rnn(x)
        return self.proj(out)


class LSTMGenerator(nn.Module):
    kind = "bilstm"

    def __init__(self, schema: VariableSchema, input_dim: int = HIDDEN, hidden: int = HIDDEN,
                 gumbel_tau: float | None = None):
        super().__init__()
        self.input_dim = input_dim
        # the BiLSTM projection is the first of the three linear layers
        self.rnn = BiLSTM(input_dim, hidden)
        self.l2 = nn.Linear(hidden, hidden)
        self.l3 = nn.Linear(hidden, schema.encoded_width)
        self.head = OutputHead(schema, gumbel_tau)

    def forward(self, z: Tensor) -> Tensor:
        h = F.leaky_relu(self.rnn(z), 0.2)
        h = F.leaky_relu(self.l2(h), 0.2)
        return self.head(self.l3(h))


class EOTGenerator(nn.Module):
    """Encoder-only Transformer: self-attention across time steps, never across variables."""

    kind = "eot"

    def __init__(self, schema: VariableSchema, input_dim: int = HIDDEN, hidden: int = HIDDEN,
                 n_blocks: int = 3, n_heads: int = 8, max_len: int = MAX_POSITIONS,
                 gumbel_tau: float | None = None):
        super().__init__()
        self.input_dim = input_dim
        self.max_len = max_len
        self.inp = nn.Linear(input_dim, hidden)
        self.pos = nn.Embedding(max_len, hidden)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(hidden, n_heads, dim_feedforward=2 * hidden, dropout=0.0,
                                       batch_first=True)
            for _ in range(n_blocks)
        )
        self.out = nn.Linear(hidden, schema.encoded_width)
        self.head = OutputHead(schema, gumbel_tau)

    def forward(self, z: Tensor) -> Tensor:
        T = z.shape[1]
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds positional capacity {self.max_len}")
        h = self.inp(z) + self.pos(torch.arange(T, device=z.device))
        for blk in self.blocks:
            h = blk(h)
        return self.head(self.out(h))


def make_generator(kind: str, schema: VariableSchema, gumbel_tau: float | None = None) -> nn.Module:
    if kind == "bilstm":
        return LSTMGenerator(schema, gumbel_tau=gumbel_tau)
    if kind == "eot":
        return EOTGenerator(schema, gumbel_tau=gumbel_tau)
    raise ValueError(f"unknown generator kind {kind!r}")


def generate(generator: nn.Module, z: Tensor) -> Tensor:
    return generator(z)


class MinibatchDiscrimination(nn.Module):
    """Minibatch features appended per time step: ``n_kernels`` projections of size ``kernel_dim``."""

    def __init__(self, in_dim: int, n_kernels: int = 3, kernel_dim: int = 5):
        super().__init__()
        self.n_kernels, self.kernel_dim = n_kernels, kernel_dim
        self.T = nn.Parameter(torch.randn(in_dim, n_kernels * kernel_dim) * 0.1)

    @property
    def out_width(self) -> int:
        return self.n_kernels

    def forward(self, f: Tensor) -> Tensor:
        B, T, _ = f.shape
        M = (f @ self.T).view(B, T, self.n_kernels, self.kernel_dim)
        # L1 distance between every pair of batch members at the same time step
        diff = (M.unsqueeze(0) - M.unsqueeze(1)).abs().sum(-1)  # [B, B, T, K]
        o = torch.exp(-diff).sum(1) - 1.0  # drop self-similarity
        return torch.cat([f, o], dim=-1)


class Critic(nn.Module):
    """Soft-embedding, 2 linear layers, 1 BiLSTM and a final linear score layer.

    The score layer is applied per time step and averaged over time, giving one
    unbounded realism score per sequence.
    """

    def __init__(self, schema: VariableSchema, hidden: int = HIDDEN, embedding: SoftEmbedding | None = None,
                 minibatch_features: bool = False):
        super().__init__()
        self.embedding = embedding if embedding is not None else SoftEmbedding(schema)
        width = self.embedding.out_width
        self.mbd = MinibatchDiscrimination(width) if minibatch_features else None
        if self.mbd is not None:
            width += self.mbd.out_width
        self.in_width = width
        self.l1 = nn.Linear(width, hidden)
        self.l2 = nn.Linear(hidden, hidden)
        self.rnn = BiLSTM(hidden, hidden)
        self.score = nn.Linear(hidden, 1)

    def features(self, x: Tensor) -> Tensor:
        f = self.embedding(x)
        if self.mbd is not None:
            f = self.mbd(f)
        return f

    def forward(self, x: Tensor) -> Tensor:
        h = self.features(x)
        h = F.leaky_relu(self.l1(h), 0.2)
        h = F.leaky_relu(self.l2(h), 0.2)
        h = F.leaky_relu(self.rnn(h), 0.2)
        return self.score(h).squeeze(-1).mean(dim=1)


def criticize(critic: nn.Module, x: Tensor) -> Tensor:
    scores = critic(x)
    if not torch.all(torch.isfinite(scores)):
        bad = (~torch.isfinite(scores)).nonzero().flatten().tolist()
        raise FloatingPointError(f"critic produced non-finite scores for samples {bad[:10]}")
    return scores


class VAE(nn.Module):
    """Encoder shares the critic's soft-embedding module (same parameter storage)."""

    def __init__(self, schema: VariableSchema, embedding: SoftEmbedding, hidden: int = HIDDEN,
                 latent: int = HIDDEN):
        super().__init__()
        self.embedding = embedding
        self.inp = nn.Linear(embedding.out_width, hidden)
        self.res = nn.ModuleList(nn.Linear(hidden, hidden) for _ in range(3))
        self.mu = nn.Linear(hidden, latent)
        self.log_sigma = nn.Linear(hidden, latent)
        self.dec = nn.Linear(latent, schema.encoded_width)
        self.head = OutputHead(schema)

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = F.leaky_relu(self.inp(self.embedding(x)), 0.2)
        for lin in self.res:
            h = h + F.leaky_relu(lin(h), 0.2)
        gamma = self.mu(h)
        sigma = torch.exp(self.log_sigma(h).clamp(torch.log(torch.tensor(SIGMA_MIN)).item(),
                                                  torch.log(torch.tensor(SIGMA_MAX)).item()))
        return gamma, sigma

    def decode(self, xi: Tensor) -> Tensor:
        return self.head(self.dec(xi))

    def forward(self, x: Tensor, generator: torch.Generator | None = None):
        gamma, sigma = self.encode(x)
        rho = torch.randn(gamma.shape, generator=generator) * sigma
        xi = gamma + rho
        return xi, gamma, sigma, self.decode(xi)


def vae_encode(vae: VAE, x: Tensor) -> tuple[Tensor, Tensor]:
    return vae.encode(x)


def vae_decode(vae: VAE, xi: Tensor) -> Tensor:
    return vae.decode(xi)
