"""Stochastic statement selection.

A feed-forward network maps the flattened statement matrix to one
relevance probability per statement. During training the binary keep
decision is relaxed with Gumbel noise at temperature nu, which keeps
the sampling step differentiable; at evaluation time the top-K
probabilities become a hard gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import StatementMatrix, dropout_mask, unit_rms, _uniform

PROB_FLOOR = 1e-7


class SelectionNetwork(torch.nn.Module):
    """MLP from flattened (L*d) statement features to L keep-probabilities."""

    def __init__(
        self,
        n_statements: int,
        embed_dim: int,
        hidden_dim: int = 100,
        n_hidden: int = 3,
        dropout: float = 0.2,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.n_statements = n_statements
        self.dropout = dropout
        generator = torch.Generator().manual_seed(seed)
        widths = [n_statements * embed_dim] + [hidden_dim] * n_hidden + [n_statements]
        layers = []
        for fan_in, fan_out in zip(widths, widths[1:]):
            linear = torch.nn.Linear(fan_in, fan_out, dtype=torch.float64)
            bound = (6.0 / (fan_in + fan_out)) ** 0.5
            # Biases start small but nonzero: an exactly-zero bias vector
            # parks every unit on its ReLU kink whenever the previous
            # layer goes fully dead for a sample, which breaks gradient
            # checks and leaves top-K selection tied.
            with torch.no_grad():
                linear.weight.copy_(_uniform((fan_out, fan_in), bound, generator))
                linear.bias.copy_(_uniform((fan_out,), fan_in ** -0.5, generator))
            layers.append(linear)
        # The output layer's weight starts at zero so the initial ranking
        # is near-uniform (set by the small per-statement bias offsets,
        # which also keep top-K free of exact ties) and the learned
        # signal, not initialization noise, decides which rows surface.
        with torch.no_grad():
            layers[-1].weight.zero_()
        self.layers = torch.nn.ModuleList(layers)

    def forward(
        self,
        flattened: torch.Tensor,
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        if training and generator is None:
            raise ValueError("training mode needs an explicit generator for dropout")
        x = unit_rms(flattened)
        for linear in self.layers[:-1]:
            x = torch.relu(linear(x))
            if training and self.dropout > 0.0:
                x = x * dropout_mask(tuple(x.shape), self.dropout, generator)
        logits = self.layers[-1](x)
        return torch.sigmoid(logits).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)


def compute_probabilities(
    matrix: StatementMatrix,
    network: SelectionNetwork,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Per-statement keep-probabilities; padding rows get exactly 0."""
    flattened = matrix.values.reshape(1, -1)
    probs = network(flattened, training=training, generator=generator)[0]
    return probs * matrix.statement_mask


def gate_from_noise(
    probs: torch.Tensor, gumbel_a: torch.Tensor, gumbel_b: torch.Tensor, nu: float
) -> torch.Tensor:
    """Relaxed binary gate for given Gumbel noise.

    z = sigmoid(((log p - log(1-p)) + (a - b)) / nu), the stable form of
    exp((log p + a)/nu) / (exp((log p + a)/nu) + exp((log(1-p) + b)/nu)).
    Positions with p = 0 (padding) stay exactly 0.
    """
    if nu <= 0.0:
        raise ValueError(f"temperature must be positive, got {nu}")
    real = probs > 0.0
    safe = probs.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    logit = torch.log(safe) - torch.log1p(-safe)
    z = torch.sigmoid((logit + gumbel_a - gumbel_b) / nu)
    return torch.where(real, z, torch.zeros((), dtype=probs.dtype))


def sample_gates(
    probs: torch.Tensor,
    nu: float,
    noise_seed: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Draw one relaxed gate vector. Deterministic given the seed."""
    if generator is None:
        if noise_seed is None:
            raise ValueError("pass either noise_seed or generator")
        generator = torch.Generator().manual_seed(noise_seed)
    shape = tuple(probs.shape)
    # u = 0 would make -log(-log u) blow up; torch.rand lives in [0, 1).
    u_a = torch.rand(shape, generator=generator, dtype=torch.float64).clamp(min=1e-12)
    u_b = torch.rand(shape, generator=generator, dtype=torch.float64).clamp(min=1e-12)
    gumbel_a = -torch.log(-torch.log(u_a))
    gumbel_b = -torch.log(-torch.log(u_b))
    return gate_from_noise(probs, gumbel_a, gumbel_b, nu)


def mask_function(matrix_values: torch.Tensor, gates: torch.Tensor) -> torch.Tensor:
    """Row-wise product F~ = z * F."""
    if matrix_values.shape[:1] != gates.shape:
        raise ValueError(
            f"gate length {tuple(gates.shape)} does not match "
            f"{tuple(matrix_values.shape)} rows"
        )
    return gates.unsqueeze(-1) * matrix_values


def top_k(probs, k: int, statement_mask) -> list[int]:
    """Indices of the K most probable real statements, ascending by index.

    Ties go to the lower statement index. Fewer than K real statements
    returns them all.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    p = np.asarray(torch.as_tensor(probs).detach().cpu(), dtype=np.float64)
    mask = np.asarray(torch.as_tensor(statement_mask).detach().cpu())
    real = np.flatnonzero(mask > 0)
    if real.size <= k:
        return [int(i) for i in real]
    order = np.argsort(-p[real], kind="stable")[:k]
    return sorted(int(real[j]) for j in order)


def eval_gate(probs, k: int, statement_mask) -> np.ndarray:
    """Hard 0/1 gate that keeps exactly the top-K real statements."""
    mask = np.asarray(torch.as_tensor(statement_mask).detach().cpu())
    gate = np.zeros(mask.shape[0], dtype=np.int64)
    if (mask > 0).any():
        gate[top_k(probs, k, statement_mask)] = 1
    return gate


@dataclass
class SelectionResult:
    """Everything the selection step produces for one function."""

    probs: torch.Tensor
    gates: torch.Tensor
    masked: torch.Tensor
    topk: list[int] = field(default_factory=list)


def run_selection(
    matrix: StatementMatrix,
    network: SelectionNetwork,
    k: int,
    nu: float,
    training: bool = False,
    noise_seed: int | None = None,
    generator: torch.Generator | None = None,
) -> SelectionResult:
    probs = compute_probabilities(matrix, network, training=training, generator=generator)
    gates = sample_gates(probs, nu, noise_seed=noise_seed, generator=generator)
    masked = mask_function(matrix.values, gates)
    return SelectionResult(
        probs=probs,
        gates=gates,
        masked=masked,
        topk=top_k(probs.detach(), k, matrix.statement_mask),
    )
