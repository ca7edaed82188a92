"""Joint training of encoder, selector, and classifier.

One training step runs the full pipeline on a mini-batch: encode,
compute keep-probabilities, sample relaxed gates, classify the masked
matrices, and in parallel build top-K fingerprints for the contrastive
term. The total loss is

    loss = mi_surrogate + alpha * contrastive (+ eta * annotation term)

minimized with Adam under global gradient-norm clipping. Every random
draw comes from an explicitly seeded generator, so a (corpus, config)
pair fully determines the trained parameters, the history file, and
the checkpoint bytes.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import pickle
import random
from dataclasses import dataclass

import numpy as np
import torch

from . import evaluator
from .classifier import FunctionClassifier, mi_surrogate_loss
from .contrastive import build_topk_representation, cscl_loss, kmeans_minibatch, scl_loss
from .corpus import DataError, TokenizedFunction, Vocabulary
from .encoder import StatementEncoder
from .selector import PROB_FLOOR, SelectionNetwork, sample_gates, top_k

CHECKPOINT_VERSION = 1
METHOD_VARIANTS = ("cscl", "cl", "none")


class NumericsError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


def _mix(seed: int, salt: int) -> int:
    """Derive independent RNG streams from one base seed."""
    return (seed * 1_000_003 + salt) % (2**63)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 100
    epochs: int = 10
    gate_temperature: float = 0.5
    contrastive_temperature: float = 0.5
    alpha: float = 1.0
    k_clusters: int = 5
    topk: int = 10
    eta: float = 1e-2
    semi_fraction: float = 0.0
    grad_clip_norm: float = 25.0
    seed: int = 42
    max_statements: int = 100
    max_tokens: int = 50
    embed_dim: int = 150
    hidden_dim: int = 100
    kernel_size: int = 3
    use_conv: bool = True
    method_variant: str = "cscl"
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def validate(self) -> None:
        positives = {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs_plus_one": self.epochs + 1,
            "gate_temperature": self.gate_temperature,
            "contrastive_temperature": self.contrastive_temperature,
            "k_clusters": self.k_clusters,
            "topk": self.topk,
            "grad_clip_norm": self.grad_clip_norm,
            "max_statements": self.max_statements,
            "max_tokens": self.max_tokens,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.alpha < 0 or self.eta < 0:
            raise ValueError("alpha and eta must be nonnegative")
        if not 0.0 <= self.semi_fraction <= 1.0:
            raise ValueError("semi_fraction must lie in [0, 1]")
        if self.method_variant not in METHOD_VARIANTS:
            raise ValueError(
                f"method_variant must be one of {METHOD_VARIANTS}, got {self.method_variant!r}"
            )
        if len(self.split_ratios) != 3:
            raise ValueError("split_ratios must have three entries")


@dataclass
class ModelState:
    encoder: StatementEncoder
    selector: "torch.nn.Module"
    classifier: FunctionClassifier
    vocab: Vocabulary
    config: TrainConfig
    optimizer: torch.optim.Adam
    epoch: int = 0

    def modules(self) -> dict[str, torch.nn.Module]:
        return {
            "encoder": self.encoder,
            "selector": self.selector,
            "classifier": self.classifier,
        }

    def parameters(self) -> list[torch.nn.Parameter]:
        params: list[torch.nn.Parameter] = []
        for module in self.modules().values():
            params.extend(module.parameters())
        return params


def init_model_state(config: TrainConfig, vocab: Vocabulary) -> ModelState:
    config.validate()
    encoder = StatementEncoder(
        vocab_size=len(vocab),
        embed_dim=config.embed_dim,
        kernel_size=config.kernel_size,
        use_conv=config.use_conv,
        seed=_mix(config.seed, 1),
    )
    selector = SelectionNetwork(
        n_statements=config.max_statements,
        embed_dim=config.embed_dim,
        hidden_dim=config.hidden_dim,
        seed=_mix(config.seed, 2),
    )
    classifier = FunctionClassifier(
        n_statements=config.max_statements,
        embed_dim=config.embed_dim,
        hidden_dim=config.hidden_dim,
        seed=_mix(config.seed, 3),
    )
    params = list(encoder.parameters()) + list(selector.parameters()) + list(
        classifier.parameters()
    )
    optimizer = torch.optim.Adam(
        params, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    return ModelState(
        encoder=encoder,
        selector=selector,
        classifier=classifier,
        vocab=vocab,
        config=config,
        optimizer=optimizer,
    )


def stack_batch(
    batch: list[TokenizedFunction],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    tokens = torch.from_numpy(np.stack([tf.tokens for tf in batch]))
    mask = torch.from_numpy(np.stack([tf.statement_mask for tf in batch])).to(torch.float64)
    labels = torch.tensor([tf.label for tf in batch], dtype=torch.long)
    return tokens, mask, labels


def semi_supervised_term(
    probs: torch.Tensor, annotated_indices, statement_mask: torch.Tensor
) -> torch.Tensor:
    """Bernoulli log-likelihood of a statement-level annotation.

    Annotated statements should have probability near 1, all other real
    statements near 0; returns the negated log-likelihood.
    """
    mask = statement_mask.to(torch.float64)
    annotated = torch.zeros_like(mask)
    for idx in annotated_indices:
        if idx < 0 or idx >= mask.shape[0] or mask[idx] == 0:
            raise ValueError(f"annotated index {idx} is not a real statement")
        annotated[idx] = 1.0
    safe = probs.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    positive = annotated * torch.log(safe)
    negative = (mask - annotated) * torch.log1p(-safe)
    return -(positive + negative).sum()


def combined_loss(
    batch: list[TokenizedFunction],
    state: ModelState,
    noise_seed: int,
    annotated_ids: frozenset[str] = frozenset(),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Total training loss for one mini-batch plus term diagnostics."""
    if not batch:
        raise ValueError("batch must be nonempty")
    cfg = state.config
    generator = torch.Generator().manual_seed(_mix(noise_seed, 11))
    tokens, mask, labels = stack_batch(batch)
    n = len(batch)

    features = state.encoder(tokens, mask, training=True, generator=generator)
    if not torch.isfinite(features.detach()).all():
        raise NumericsError("encoder produced non-finite statement vectors")
    probs = state.selector(features.reshape(n, -1), training=True, generator=generator)
    probs = probs * mask
    gates = sample_gates(probs, cfg.gate_temperature, generator=generator)
    masked = gates.unsqueeze(-1) * features
    logits = state.classifier(masked.reshape(n, -1), training=True, generator=generator)
    predictions = torch.softmax(logits, dim=1)
    ce_term = mi_surrogate_loss(predictions, labels)

    contrastive_term = torch.zeros((), dtype=torch.float64)
    if cfg.method_variant != "none" and n >= 2:
        # Each fingerprint row is the statement vector scaled by its
        # selection probability, so the contrastive term steers both
        # the selector and the encoder; only the choice of which rows
        # enter the fingerprint is treated as a constant.
        detached_probs = probs.detach()
        weighted = probs.unsqueeze(-1) * features
        reps = torch.stack(
            [
                build_topk_representation(
                    weighted[i],
                    top_k(detached_probs[i], cfg.topk, mask[i]),
                    cfg.topk,
                )
                for i in range(n)
            ]
        )
        if cfg.method_variant == "cscl":
            clusters = kmeans_minibatch(
                reps.detach().numpy(), cfg.k_clusters, seed=_mix(noise_seed, 13)
            )
            contrastive_term = cscl_loss(reps, labels, clusters, cfg.contrastive_temperature)
        else:
            contrastive_term = scl_loss(reps, labels, cfg.contrastive_temperature)

    semi_term = torch.zeros((), dtype=torch.float64)
    n_annotated = 0
    if annotated_ids:
        terms = []
        for i, tf in enumerate(batch):
            if tf.function_id in annotated_ids and tf.vuln_indices:
                terms.append(
                    semi_supervised_term(probs[i], sorted(tf.vuln_indices), mask[i])
                )
        if terms:
            n_annotated = len(terms)
            semi_term = torch.stack(terms).mean()

    loss = ce_term + cfg.alpha * contrastive_term + cfg.eta * semi_term
    diagnostics = {
        "loss": float(loss.detach()),
        "ce_term": float(ce_term.detach()),
        "cscl_term": float(contrastive_term.detach()),
        "semi_term": float(semi_term.detach()),
        "n_annotated": float(n_annotated),
    }
    return loss, diagnostics


def train_step(
    batch: list[TokenizedFunction],
    state: ModelState,
    noise_seed: int,
    annotated_ids: frozenset[str] = frozenset(),
) -> dict[str, float]:
    """One gradient update in place; returns the loss diagnostics."""
    loss, diagnostics = combined_loss(batch, state, noise_seed, annotated_ids)
    if not torch.isfinite(loss):
        raise NumericsError(f"non-finite training loss: {diagnostics}")
    state.optimizer.zero_grad()
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(state.parameters(), state.config.grad_clip_norm)
    if not torch.isfinite(grad_norm):
        raise NumericsError(f"non-finite gradient norm at loss {diagnostics}")
    state.optimizer.step()
    return diagnostics


def choose_annotated_ids(
    train: list[TokenizedFunction], fraction: float, seed: int
) -> frozenset[str]:
    """Pick the annotated subset: a seeded sample of vulnerable functions
    that still carry statement-level ground truth after truncation."""
    if fraction <= 0.0:
        return frozenset()
    eligible = sorted(tf.function_id for tf in train if tf.label == 1 and tf.vuln_indices)
    count = round(fraction * len(eligible))
    rng = random.Random(_mix(seed, 29))
    return frozenset(rng.sample(eligible, count)) if count else frozenset()


def _snapshot(state: ModelState) -> dict:
    return {
        "params": {
            name: copy.deepcopy(module.state_dict())
            for name, module in state.modules().items()
        },
        "optimizer": copy.deepcopy(state.optimizer.state_dict()),
        "epoch": state.epoch,
    }


def _restore(state: ModelState, snapshot: dict) -> None:
    for name, module in state.modules().items():
        module.load_state_dict(snapshot["params"][name])
    state.optimizer.load_state_dict(snapshot["optimizer"])
    state.epoch = snapshot["epoch"]


def fit(
    train: list[TokenizedFunction],
    valid: list[TokenizedFunction],
    config: TrainConfig,
    vocab: Vocabulary,
) -> tuple[ModelState, list[dict]]:
    """Train for config.epochs and keep the best-validation-VCP epoch.

    Returns the selected state and one history row per epoch. With
    epochs=0 the initial state and an empty history come back.
    """
    if not train or not valid:
        raise DataError("training and validation corpora must be nonempty")
    config.validate()
    state = init_model_state(config, vocab)
    annotated = choose_annotated_ids(train, config.semi_fraction, config.seed)
    history: list[dict] = []
    best: dict | None = None
    best_vcp = float("-inf")
    for epoch in range(config.epochs):
        order = list(range(len(train)))
        random.Random(_mix(config.seed, 1_000 + epoch)).shuffle(order)
        sums = {"loss": 0.0, "ce_term": 0.0, "cscl_term": 0.0}
        n_batches = 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train[i] for i in order[start : start + config.batch_size]]
            noise_seed = _mix(config.seed, (epoch + 1) * 1_000_003 + step)
            diagnostics = train_step(batch, state, noise_seed, annotated)
            for key in sums:
                sums[key] += diagnostics[key]
            n_batches += 1
        state.epoch = epoch + 1
        predictions = evaluator.predict_corpus(state, valid, config.topk)
        report = evaluator.compute_metrics(predictions, config.topk)
        row = {
            "epoch": epoch,
            "train_loss": sums["loss"] / n_batches,
            "ce_term": sums["ce_term"] / n_batches,
            "cscl_term": sums["cscl_term"] / n_batches,
            "valid_VCP": report.vcp,
            "valid_VCA": report.vca,
            "valid_ACC": report.function_acc,
        }
        history.append(row)
        score = report.vcp if report.vcp is not None else float("-inf")
        if score > best_vcp:
            best_vcp = score
            best = _snapshot(state)
    if best is not None:
        _restore(state, best)
    return state, history


HISTORY_COLUMNS = (
    "epoch", "train_loss", "ce_term", "cscl_term", "valid_VCP", "valid_VCA", "valid_ACC",
)


def write_history_csv(history: list[dict], path: str) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(
                [
                    "" if row[col] is None else repr(row[col]) if isinstance(row[col], float) else row[col]
                    for col in HISTORY_COLUMNS
                ]
            )


def _tree_to_numpy(node):
    if isinstance(node, torch.Tensor):
        return node.detach().cpu().numpy().copy()
    if isinstance(node, dict):
        return {key: _tree_to_numpy(value) for key, value in node.items()}
    if isinstance(node, (list, tuple)):
        converted = [_tree_to_numpy(value) for value in node]
        return type(node)(converted)
    return node


def _tree_to_torch(node):
    if isinstance(node, np.ndarray):
        return torch.from_numpy(node.copy())
    if isinstance(node, dict):
        return {key: _tree_to_torch(value) for key, value in node.items()}
    if isinstance(node, (list, tuple)):
        converted = [_tree_to_torch(value) for value in node]
        return type(node)(converted)
    return node


def save_checkpoint(state: ModelState, path: str) -> None:
    """Serialize parameters, optimizer moments, vocabulary, and config.

    The payload is plain pickled builtins and numpy arrays, so two runs
    reaching identical parameters produce byte-identical files.
    """
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(state.config),
        "vocab": state.vocab.tokens()[2:],
        "epoch": state.epoch,
        "params": {
            name: _tree_to_numpy(dict(module.state_dict()))
            for name, module in state.modules().items()
        },
        "optimizer": _tree_to_numpy(state.optimizer.state_dict()),
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)


def load_checkpoint(path: str) -> ModelState:
    try:
        with open(path, "rb") as fh:
            payload = pickle.load(fh)
    except (pickle.UnpicklingError, EOFError, AttributeError, ImportError) as exc:
        raise DataError(f"{path}: corrupt checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise DataError(f"{path}: not a checkpoint file")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: checkpoint format {payload['format_version']} is not "
            f"supported (expected {CHECKPOINT_VERSION})"
        )
    try:
        config_fields = dict(payload["config"])
        if "split_ratios" in config_fields:
            config_fields["split_ratios"] = tuple(config_fields["split_ratios"])
        config = TrainConfig(**config_fields)
        vocab = Vocabulary(payload["vocab"])
        state = init_model_state(config, vocab)
        for name, module in state.modules().items():
            module.load_state_dict(_tree_to_torch(payload["params"][name]))
        state.optimizer.load_state_dict(_tree_to_torch(payload["optimizer"]))
        state.epoch = payload["epoch"]
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise DataError(f"{path}: malformed checkpoint payload: {exc}") from exc
    return state
