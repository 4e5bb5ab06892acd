"""Detection via localization and the metric suite for both tasks.

A graph is flagged as under attack exactly when at least one node is
classified malicious; there is no separate detection head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InferenceError


@dataclass(frozen=True)
class PredictionResult:
    n_scores: np.ndarray   # per-node probabilities in (0,1)
    n_pred: np.ndarray     # per-node binary decisions
    g_pred: int            # 1 iff any node flagged


@dataclass(frozen=True)
class MetricsReport:
    task: str
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float

    def as_dict(self):
        return {
            "task": self.task, "tp": self.tp, "tn": self.tn,
            "fp": self.fp, "fn": self.fn, "accuracy": self.accuracy,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
        }


def detect_and_localize(model, graph, threshold: float = 0.5) -> PredictionResult:
    """Score every node, threshold, and derive the graph-level flag."""
    scores = model.forward(graph.x[None], graph.a, train=False)[0]
    return prediction_from_scores(scores, threshold)


def prediction_from_scores(scores: np.ndarray, threshold: float = 0.5) -> PredictionResult:
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise InferenceError(f"expected a flat score vector, got shape {scores.shape}")
    n_pred = (scores >= threshold).astype(np.uint8)
    return PredictionResult(scores, n_pred, int(n_pred.any()))


def _confusion(pred: np.ndarray, truth: np.ndarray):
    tp = int(np.sum((pred == 1) & (truth == 1)))
    tn = int(np.sum((pred == 0) & (truth == 0)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    return tp, tn, fp, fn


def _report(task, tp, tn, fp, fn) -> MetricsReport:
    total = tp + tn + fp + fn
    acc = (tp + tn) / total if total else 1.0
    # degenerate-denominator convention: 1.0 when there was nothing to find
    precision = tp / (tp + fp) if (tp + fp) else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if (tp + fn) else (1.0 if fp == 0 else 0.0)
    f1 = (2 * precision * recall / (precision + recall)
          if (precision + recall) > 0 else 0.0)
    return MetricsReport(task, tp, tn, fp, fn, acc, precision, recall, f1)


def localization_metrics(preds, truths) -> MetricsReport:
    """Node-level confusion aggregated over all graphs."""
    if len(preds) != len(truths):
        raise InferenceError(f"{len(preds)} predictions vs {len(truths)} truths")
    tp = tn = fp = fn = 0
    for pr, truth in zip(preds, truths):
        truth = np.asarray(truth)
        if pr.n_pred.shape != truth.shape:
            raise InferenceError("node vector length mismatch")
        a, b, c, d = _confusion(pr.n_pred, truth)
        tp += a; tn += b; fp += c; fn += d
    return _report("localization", tp, tn, fp, fn)


def detection_metrics(preds, truths) -> MetricsReport:
    """Graph-level confusion over attack/normal labels."""
    if len(preds) != len(truths):
        raise InferenceError(f"{len(preds)} predictions vs {len(truths)} truths")
    gp = np.array([p.g_pred for p in preds])
    gt = np.asarray(truths)
    return _report("detection", *_confusion(gp, gt))


def evaluate(model, graphs, indices=None, threshold: float = 0.5, batch_size=64):
    """Batched inference over a dataset slice; returns (preds, det, loc reports)."""
    if indices is None:
        indices = np.arange(len(graphs))
    preds = []
    a = graphs[0].a if len(graphs) else None
    for start in range(0, len(indices), batch_size):
        bidx = [int(i) for i in indices[start:start + batch_size]]
        x = np.stack([graphs[i].x for i in bidx])
        scores = model.forward(x, a, train=False)
        for row in scores:
            preds.append(prediction_from_scores(row, threshold))
    node_truth = [graphs[int(i)].node_labels for i in indices]
    graph_truth = [graphs[int(i)].graph_label for i in indices]
    det = detection_metrics(preds, graph_truth)
    loc = localization_metrics(preds, node_truth)
    return preds, det, loc
