"""Per-statement encoder.

Each statement row of token indices becomes one d-dimensional vector:
token embedding, dropout, a width-preserving 1-d convolution over the
token axis, then max pooling over that axis. Padding rows come out as
zero vectors. All parameters are float64 so numeric checks against
closed-form values hold tightly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .corpus import TokenizedFunction


def _uniform(shape: tuple[int, ...], bound: float, generator: torch.Generator) -> torch.Tensor:
    return (torch.rand(shape, generator=generator, dtype=torch.float64) * 2.0 - 1.0) * bound


def dropout_mask(
    shape: tuple[int, ...], rate: float, generator: torch.Generator
) -> torch.Tensor:
    """Inverted dropout scaling: kept entries are multiplied by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = 1.0 - rate
    mask = (torch.rand(shape, generator=generator, dtype=torch.float64) < keep)
    return mask.to(torch.float64) / keep


def unit_rms(x: torch.Tensor) -> torch.Tensor:
    """Scale each row of x to unit root-mean-square magnitude.

    The statement vectors leaving the encoder are small right after
    initialization (uniform embeddings through one convolution), which
    would leave downstream layers in the flat center of their
    nonlinearities. Scaling per sample keeps those layers responsive
    at any input magnitude. All-zero rows pass through unchanged.
    """
    rms = x.pow(2).mean(dim=-1, keepdim=True).sqrt()
    return x / rms.clamp(min=1e-12)


@dataclass
class StatementMatrix:
    """Encoded statements of one function plus the real-row mask."""

    values: torch.Tensor
    statement_mask: torch.Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.statement_mask.shape != self.values.shape[:1]:
            raise ValueError("values must be (L, d) with a length-L statement mask")


class StatementEncoder(torch.nn.Module):
    def __init__(
        self,
        vocab_size: int,
        embed_dim: int = 150,
        kernel_size: int = 3,
        dropout: float = 0.2,
        use_conv: bool = True,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if vocab_size < 2:
            raise ValueError("vocabulary must contain at least <PAD> and <UNK>")
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd so padding preserves length")
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.kernel_size = kernel_size
        self.dropout = dropout
        self.use_conv = use_conv
        generator = torch.Generator().manual_seed(seed)
        self.embedding = torch.nn.Parameter(
            _uniform((vocab_size, embed_dim), 0.05, generator)
        )
        fan_in = embed_dim * kernel_size
        fan_out = embed_dim * kernel_size
        bound = (6.0 / (fan_in + fan_out)) ** 0.5
        self.conv_weight = torch.nn.Parameter(
            _uniform((embed_dim, embed_dim, kernel_size), bound, generator)
        )
        self.conv_bias = torch.nn.Parameter(_uniform((embed_dim,), fan_in ** -0.5, generator))

    @property
    def conv_kernel(self) -> torch.Tensor:
        """Kernel viewed as (kernel_size, in_dim, out_dim)."""
        return self.conv_weight.permute(2, 1, 0)

    def forward(
        self,
        tokens: torch.Tensor,
        statement_mask: torch.Tensor,
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Encode (B, L, T) token indices into (B, L, d) statement vectors."""
        if tokens.ndim != 3:
            raise ValueError("tokens must have shape (batch, statements, tokens)")
        if int(tokens.max()) >= self.vocab_size or int(tokens.min()) < 0:
            raise ValueError("token index outside the vocabulary range")
        if training and generator is None:
            raise ValueError("training mode needs an explicit generator for dropout")
        batch, n_stmts, n_toks = tokens.shape
        x = self.embedding[tokens]
        if training and self.dropout > 0.0:
            x = x * dropout_mask(tuple(x.shape), self.dropout, generator)
        # Padding positions inside a statement are excluded from the max,
        # otherwise short statements would pool mostly over <PAD> activations.
        real_token = (tokens != 0).reshape(batch * n_stmts, 1, n_toks)
        if self.use_conv:
            flat = x.reshape(batch * n_stmts, n_toks, self.embed_dim).transpose(1, 2)
            flat = torch.nn.functional.conv1d(
                flat, self.conv_weight, self.conv_bias, padding=self.kernel_size // 2
            )
        else:
            flat = x.reshape(batch * n_stmts, n_toks, self.embed_dim).transpose(1, 2)
        filled = flat.masked_fill(~real_token, float("-inf"))
        pooled = filled.amax(dim=2)
        pooled = torch.where(
            torch.isfinite(pooled), pooled, torch.zeros((), dtype=pooled.dtype)
        )
        pooled = pooled.reshape(batch, n_stmts, self.embed_dim)
        mask = statement_mask.to(torch.float64)
        return pooled * mask.unsqueeze(-1)


def embed_tokens(
    function: TokenizedFunction,
    encoder: StatementEncoder,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> StatementMatrix:
    """Encode a single tokenized function into its statement matrix."""
    tokens = torch.from_numpy(function.tokens).unsqueeze(0)
    mask = torch.from_numpy(function.statement_mask).to(torch.float64).unsqueeze(0)
    values = encoder(tokens, mask, training=training, generator=generator)
    return StatementMatrix(values=values[0], statement_mask=mask[0])
