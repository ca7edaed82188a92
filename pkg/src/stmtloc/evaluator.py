"""Statement-level and function-level evaluation.

Terminology used throughout:

- coverage proportion (VCP): of all ground-truth flawed statements,
  the fraction that appear in their function's top-K selection.
- coverage accuracy (VCA): fraction of functions whose entire truth
  set is selected; functions whose truth was cut off by the statement
  limit count as failures.
- top-K accuracy: fraction of functions with at least one true hit in
  the first K ranked statements.
- IFA: how many ranked statements an analyst inspects before the first
  true hit; a function with no hit contributes its full ranked length.
- coverage efficiency (VCE): true hits per selected statement at K.

Coverage metrics default to the vulnerable test functions that still
carry ground truth; a scope flag widens them to every test function,
in which case an empty truth set counts as covered for VCA, as missed
for top-K accuracy, and as a full inspection for IFA.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .corpus import FunctionRecord, TokenizedFunction
from .selector import eval_gate

SCOPES = ("vulnerable", "all")
_PREDICT_CHUNK = 256


@dataclass
class FunctionPrediction:
    """Ranking and classification outcome for one test function."""

    function_id: str
    ranking: list[int]
    selected: set[int]
    predicted_label: int
    true_label: int
    vuln_indices: set[int]
    truncated_truth: bool

    def __post_init__(self) -> None:
        if len(set(self.ranking)) != len(self.ranking):
            raise ValueError(f"{self.function_id}: duplicate indices in ranking")


@dataclass
class MetricsReport:
    vcp: float | None
    vca: float | None
    topk_acc: float | None
    ifa: float | None
    vce: float | None
    function_acc: float | None
    k: int
    n_functions: int
    n_scope: int


def _ranking(probs: np.ndarray, mask: np.ndarray) -> list[int]:
    """All real statement indices, most probable first, ties by index."""
    real = np.flatnonzero(mask > 0)
    order = np.argsort(-probs[real], kind="stable")
    return [int(real[j]) for j in order]


def predict_corpus(state, functions: list[TokenizedFunction], k: int) -> list[FunctionPrediction]:
    """Rank statements and classify every function with hard top-K gates."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    predictions: list[FunctionPrediction] = []
    with torch.no_grad():
        for start in range(0, len(functions), _PREDICT_CHUNK):
            chunk = functions[start : start + _PREDICT_CHUNK]
            tokens = torch.from_numpy(np.stack([tf.tokens for tf in chunk]))
            mask = torch.from_numpy(np.stack([tf.statement_mask for tf in chunk]))
            mask = mask.to(torch.float64)
            features = state.encoder(tokens, mask, training=False)
            probs = state.selector(features.reshape(len(chunk), -1)) * mask
            probs_np = probs.numpy()
            mask_np = mask.numpy()
            gates = torch.from_numpy(
                np.stack([eval_gate(probs_np[i], k, mask_np[i]) for i in range(len(chunk))])
            ).to(torch.float64)
            logits = state.classifier((gates.unsqueeze(-1) * features).reshape(len(chunk), -1))
            predicted = torch.argmax(logits, dim=1)
            for i, tf in enumerate(chunk):
                ranking = _ranking(probs_np[i], mask_np[i])
                predictions.append(
                    FunctionPrediction(
                        function_id=tf.function_id,
                        ranking=ranking,
                        selected=set(ranking[:k]),
                        predicted_label=int(predicted[i]),
                        true_label=tf.label,
                        vuln_indices=set(tf.vuln_indices),
                        truncated_truth=tf.truncated_truth,
                    )
                )
    return predictions


def in_scope(preds: list[FunctionPrediction], scope: str = "vulnerable") -> list[FunctionPrediction]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    if scope == "all":
        return list(preds)
    return [p for p in preds if p.true_label == 1 and p.vuln_indices]


def vcp(preds: list[FunctionPrediction], scope: str = "vulnerable") -> float | None:
    scoped = in_scope(preds, scope)
    total = sum(len(p.vuln_indices) for p in scoped)
    if total == 0:
        return None
    covered = sum(len(p.vuln_indices & p.selected) for p in scoped)
    return covered / total


def vca(preds: list[FunctionPrediction], scope: str = "vulnerable") -> float | None:
    scoped = in_scope(preds, scope)
    if not scoped:
        return None
    full = sum(
        1 for p in scoped if not p.truncated_truth and p.vuln_indices <= p.selected
    )
    return full / len(scoped)


def topk_acc(preds: list[FunctionPrediction], k: int = 10, scope: str = "vulnerable") -> float | None:
    scoped = in_scope(preds, scope)
    if not scoped:
        return None
    hits = sum(1 for p in scoped if p.vuln_indices & set(p.ranking[:k]))
    return hits / len(scoped)


def ifa(preds: list[FunctionPrediction], scope: str = "vulnerable") -> float | None:
    scoped = in_scope(preds, scope)
    if not scoped:
        return None
    counts = []
    for p in scoped:
        first_hit = next(
            (rank for rank, idx in enumerate(p.ranking) if idx in p.vuln_indices),
            len(p.ranking),
        )
        counts.append(first_hit)
    return sum(counts) / len(counts)


def vce(preds: list[FunctionPrediction], k: int, scope: str = "vulnerable") -> float | None:
    scoped = in_scope(preds, scope)
    if not scoped:
        return None
    hits = sum(len(p.vuln_indices & set(p.ranking[:k])) for p in scoped)
    return hits / (k * len(scoped))


def function_accuracy(preds: list[FunctionPrediction]) -> float | None:
    if not preds:
        return None
    correct = sum(1 for p in preds if p.predicted_label == p.true_label)
    return correct / len(preds)


def compute_metrics(
    preds: list[FunctionPrediction], k: int, scope: str = "vulnerable"
) -> MetricsReport:
    return MetricsReport(
        vcp=vcp(preds, scope),
        vca=vca(preds, scope),
        topk_acc=topk_acc(preds, k, scope),
        ifa=ifa(preds, scope),
        vce=vce(preds, k, scope),
        function_acc=function_accuracy(preds),
        k=k,
        n_functions=len(preds),
        n_scope=len(in_scope(preds, scope)),
    )


def emit_report(
    preds: list[FunctionPrediction],
    corpus: list[FunctionRecord],
    k: int,
    path: str,
) -> None:
    """Write the analyst-facing listing of every vulnerable function.

    Each selected statement is prefixed with ">>"; a selected statement
    that is a ground-truth hit gets ">>!". One header line and one
    hit-count line frame each function's statements.
    """
    by_id = {record.function_id: record for record in corpus}
    with open(path, "w", encoding="utf-8") as fh:
        for pred in preds:
            if pred.true_label != 1:
                continue
            record = by_id.get(pred.function_id)
            if record is None:
                raise ValueError(f"prediction for unknown function {pred.function_id!r}")
            truth = set(record.vuln_indices)
            hits = pred.selected & truth
            fh.write(f"=== {pred.function_id} (top {k} of {len(record.statements)}) ===\n")
            for idx, statement in enumerate(record.statements):
                if idx in pred.selected and idx in truth:
                    marker = ">>!"
                elif idx in pred.selected:
                    marker = ">>"
                else:
                    marker = ""
                fh.write(f"{marker:<4}{statement}\n")
            fh.write(f"hits: {len(hits)} of {len(truth)} flawed statements\n")


METRICS_COLUMNS = (
    "dataset", "split", "K", "method_variant",
    "VCP", "VCA", "Top10_ACC", "IFA", "VCE", "ACC", "seed",
)
_INT_COLUMNS = {"K", "seed"}
_FLOAT_COLUMNS = {"VCP", "VCA", "Top10_ACC", "IFA", "VCE", "ACC"}


def report_to_row(
    report: MetricsReport, dataset: str, split: str, method_variant: str, seed: int
) -> dict:
    return {
        "dataset": dataset,
        "split": split,
        "K": report.k,
        "method_variant": method_variant,
        "VCP": report.vcp,
        "VCA": report.vca,
        "Top10_ACC": report.topk_acc,
        "IFA": report.ifa,
        "VCE": report.vce,
        "ACC": report.function_acc,
        "seed": seed,
    }


def write_metrics_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            record = []
            for column in METRICS_COLUMNS:
                value = row[column]
                if value is None:
                    record.append("")
                elif column in _FLOAT_COLUMNS:
                    record.append(repr(float(value)))
                else:
                    record.append(value)
            writer.writerow(record)


def read_metrics_csv(path: str) -> list[dict]:
    """Parse rows written by write_metrics_csv back to typed values."""
    rows: list[dict] = []
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        for raw in reader:
            row: dict = {}
            for column in METRICS_COLUMNS:
                text = raw[column]
                if text == "":
                    row[column] = None
                elif column in _INT_COLUMNS:
                    row[column] = int(text)
                elif column in _FLOAT_COLUMNS:
                    row[column] = float(text)
                else:
                    row[column] = text
            rows.append(row)
    return rows
