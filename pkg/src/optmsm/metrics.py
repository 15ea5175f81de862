"""Ranking and calibration metrics, reported per scenario."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

CLAMP = 1e-12


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied) / (P * N), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes (got {n_pos} positive, {n_neg} negative)")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(probs, labels) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if len(y) == 0:
        raise UndefinedMetricError("logloss of an empty set")
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


def per_scenario(probs: np.ndarray, labels: np.ndarray, scenario: np.ndarray,
                 scenario_count: int) -> dict[int, dict]:
    """{scenario: {"auc", "logloss", "n"}} with ``None`` where a metric is undefined."""
    out = {}
    for m in range(1, scenario_count + 1):
        sel = scenario == m
        rec = {"n": int(sel.sum()), "auc": None, "logloss": None}
        if rec["n"]:
            rec["logloss"] = logloss(probs[sel], labels[sel])
            try:
                rec["auc"] = auc(probs[sel], labels[sel])
            except UndefinedMetricError:
                pass
        out[m] = rec
    return out


def mean_auc(report: dict[int, dict]) -> float:
    vals = [r["auc"] for r in report.values() if r["auc"] is not None]
    return float(np.mean(vals)) if vals else float("nan")
