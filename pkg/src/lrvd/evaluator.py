"""Posterior-mean and Monte Carlo predictive inference, with calibration metrics."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .models import BackboneModel
from .numerics import Rng

PROB_FLOOR = 1e-12


@dataclass
class PredictiveResult:
    kind: str
    k: int
    probs: np.ndarray | None = None  # classification, (n, classes)
    mean: np.ndarray | None = None  # regression, (n, d_out)
    var: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def correct(self) -> np.ndarray | None:
        if self.probs is None or self.labels is None:
            return None
        return self.probs.argmax(axis=1) == self.labels

    def __len__(self) -> int:
        arr = self.probs if self.probs is not None else self.mean
        return 0 if arr is None else arr.shape[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mc_predict(model: BackboneModel, inputs, k: int, rng: Rng | None = None, labels=None) -> PredictiveResult:
    """Predictive distribution from ``k`` posterior samples (``k = 0``: posterior mean).

    Sample ``s`` uses ``rng.substream(s)`` and lands in slot ``s`` before the
    average, so the result does not depend on evaluation order.
    """
    if k < 0:
        raise ValueError("mc_predict: k must be >= 0")
    labels = None if labels is None else np.asarray(labels)
    if k == 0:
        outs = model.forward(inputs, "deterministic")[None]
    else:
        if rng is None:
            raise ValueError("mc_predict: k >= 1 needs an rng")
        outs = np.stack([model.forward(inputs, "direct", rng.substream(s)) for s in range(k)])

    if model.task_kind == "classification":
        probs = np.stack([softmax(o) for o in outs]).mean(axis=0)
        probs /= probs.sum(axis=1, keepdims=True)
        return PredictiveResult("classification", k, probs=probs, labels=labels)
    return PredictiveResult("regression", k, mean=outs.mean(axis=0), var=outs.var(axis=0), labels=labels)


def accuracy(result: PredictiveResult) -> float:
    if result.labels is None:
        raise ValueError("accuracy: result has no labels")
    return float(np.mean(result.correct))


def ece(result: PredictiveResult, labels=None, n_bins: int = 15) -> float:
    """Expected calibration error over equal-width bins of max-probability confidence."""
    if result.probs is None or len(result) == 0:
        raise ValueError("ece: needs a non-empty classification result")
    labels = result.labels if labels is None else np.asarray(labels)
    conf = result.probs.max(axis=1)
    hit = result.probs.argmax(axis=1) == labels
    # bin b covers (b/n, (b+1)/n]; confidence 0 goes to the first bin
    bins = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    n = conf.shape[0]
    total = 0.0
    for b in range(n_bins):
        sel = bins == b
        if sel.any():
            total += sel.sum() / n * abs(hit[sel].mean() - conf[sel].mean())
    return float(total)


def nll(result: PredictiveResult, labels=None) -> float:
    """Mean negative log predictive probability of the true label (regression: Gaussian NLL)."""
    labels = result.labels if labels is None else np.asarray(labels)
    if result.probs is not None:
        p = result.probs[np.arange(len(labels)), labels.astype(int)]
        return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))
    raise ValueError("nll: use regression_nll for regression results")


def regression_nll(result: PredictiveResult, targets, obs_std: float = 1.0) -> float:
    """Gaussian NLL per example with variance ``obs_std**2 + predictive variance``."""
    var = obs_std**2 + result.var
    resid = np.asarray(targets) - result.mean
    per = 0.5 * (np.log(2 * np.pi * var) + resid**2 / var)
    return float(per.sum(axis=1).mean())


def mse(result: PredictiveResult, targets) -> float:
    return float(np.mean((np.asarray(targets) - result.mean) ** 2))


def summarize(result: PredictiveResult, targets, obs_std: float = 1.0, n_bins: int = 15) -> dict:
    if result.kind == "classification":
        return {
            "accuracy": accuracy(result),
            "ece": ece(result, n_bins=n_bins),
            "nll": nll(result),
        }
    return {"mse": mse(result, targets), "nll": regression_nll(result, targets, obs_std)}


METRIC_COLUMNS = ["k", "accuracy", "ece", "nll", "seconds"]


def sample_sweep(model: BackboneModel, inputs, labels, k_list, rng: Rng, n_bins: int = 15) -> list[dict]:
    """One metrics row per ``k``; every ``k`` reuses the same substreams from ``rng``."""
    k_list = list(k_list)
    if not k_list:
        raise ValueError("sample_sweep: k_list is empty")
    rows = []
    for k in k_list:
        t0 = time.perf_counter()
        result = mc_predict(model, inputs, int(k), rng, labels=labels)
        seconds = time.perf_counter() - t0
        if result.kind == "classification":
            row = {"k": int(k), "accuracy": accuracy(result), "ece": ece(result, n_bins=n_bins), "nll": nll(result)}
        else:
            row = {"k": int(k), "accuracy": None, "ece": None, "nll": regression_nll(result, labels)}
        row["seconds"] = seconds
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict], columns: list[str] = METRIC_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: "" if row.get(c) is None else row.get(c) for c in columns})
    return buf.getvalue()
