"""Function-level classifier over masked statement matrices.

The classifier q reads the flattened masked matrix and outputs the pair
(q0, q1). Its negative log-likelihood doubles as the training signal
for the selector: maximizing label likelihood from the masked input is
the tractable surrogate for making the kept statements informative
about the label.
"""

from __future__ import annotations

import torch

from .encoder import dropout_mask, unit_rms, _uniform

LOG_FLOOR = 1e-12


class FunctionClassifier(torch.nn.Module):
    """MLP from the flattened (L*d) masked matrix to two class logits."""

    def __init__(
        self,
        n_statements: int,
        embed_dim: int,
        hidden_dim: int = 100,
        n_hidden: int = 2,
        dropout: float = 0.2,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.dropout = dropout
        generator = torch.Generator().manual_seed(seed)
        widths = [n_statements * embed_dim] + [hidden_dim] * n_hidden + [2]
        layers = []
        for fan_in, fan_out in zip(widths, widths[1:]):
            linear = torch.nn.Linear(fan_in, fan_out, dtype=torch.float64)
            bound = (6.0 / (fan_in + fan_out)) ** 0.5
            # Nonzero bias init; see SelectionNetwork for why zero biases
            # are degenerate under ReLU.
            with torch.no_grad():
                linear.weight.copy_(_uniform((fan_out, fan_in), bound, generator))
                linear.bias.copy_(_uniform((fan_out,), fan_in ** -0.5, generator))
            layers.append(linear)
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
        return self.layers[-1](x)


def predict(
    masked: torch.Tensor,
    network: FunctionClassifier,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Class probability pair (q0, q1) for one masked statement matrix."""
    logits = network(masked.reshape(1, -1), training=training, generator=generator)
    return torch.softmax(logits, dim=1)[0]


def mi_surrogate_loss(predictions, labels) -> torch.Tensor:
    """Mean negative log-probability of the true label.

    predictions is a (B, 2) row-stochastic tensor (or a sequence of
    probability pairs); labels are 0/1. Logs are floored at 1e-12.
    """
    if isinstance(predictions, torch.Tensor):
        preds = predictions
    elif len(predictions) == 0:
        raise ValueError("predictions must be nonempty")
    else:
        preds = torch.stack([torch.as_tensor(p, dtype=torch.float64) for p in predictions])
    if preds.ndim != 2 or preds.shape[1] != 2:
        raise ValueError("predictions must be (batch, 2) probability pairs")
    label_t = torch.as_tensor(labels, dtype=torch.long)
    if label_t.shape != preds.shape[:1] or preds.shape[0] == 0:
        raise ValueError("need one 0/1 label per prediction, batch nonempty")
    if not bool(((label_t == 0) | (label_t == 1)).all()):
        raise ValueError("labels must be 0 or 1")
    picked = preds[torch.arange(preds.shape[0]), label_t]
    return -(picked.clamp(min=LOG_FLOOR).log()).mean()
