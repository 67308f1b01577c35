"""Accuracy metrics for policy-value estimates and evaluation reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy.stats import rankdata

REPORT_COLUMNS = ("estimator", "method", "policy_id", "estimate", "truth", "seed")


def _pair(estimates, truths):
    x = np.asarray(estimates, dtype=float).ravel()
    y = np.asarray(truths, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} estimates vs {y.size} truths")
    if x.size < 1:
        raise ValueError("need at least one policy")
    return x, y


def mae(estimates, truths) -> float:
    x, y = _pair(estimates, truths)
    return float(np.mean(np.abs(x - y)))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        raise ValueError("correlation needs at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise ValueError("correlation is undefined for a constant series")
    return float(np.clip(xc @ yc / (sx * sy), -1.0, 1.0))


def rank_correlation(estimates, truths) -> float:
    """Spearman correlation with average ranks for ties."""
    x, y = _pair(estimates, truths)
    return _pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def regret_at_1(estimates, truths) -> float:
    """(max true value - true value of the top-ranked policy) / max true value.

    Ties in the estimates go to the lowest policy index.
    """
    x, y = _pair(estimates, truths)
    best = float(np.max(y))
    if best == 0:
        raise ValueError("regret@1 is undefined when the best true value is 0")
    return float((best - y[int(np.argmax(x))]) / best)


def return_correlations(env_returns, human_returns=None) -> Dict[str, float]:
    """Pearson and Spearman correlation between environmental and human returns.

    Accepts two sequences, or a dataset whose env rewards are discounted and
    paired with its human returns.
    """
    if human_returns is None:
        ds = env_returns
        w = ds.spec.discount ** np.arange(ds.spec.horizon)
        x, y = ds.env_rewards @ w, ds.human_returns
    else:
        x, y = _pair(env_returns, human_returns)
    return {"pearson": _pearson(np.asarray(x, float), np.asarray(y, float)),
            "spearman": rank_correlation(x, y)}


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvaluationReport:
    """Rows of (estimator, method, policy_id, estimate, truth, seed) plus failed cells."""

    rows: List[dict] = field(default_factory=list)
    errors: List[dict] = field(default_factory=list)

    def add(self, estimator: str, method: str, policy_id: str, estimate: float, truth: float,
            seed: int) -> None:
        self.rows.append({"estimator": estimator, "method": method, "policy_id": policy_id,
                          "estimate": float(estimate), "truth": float(truth), "seed": int(seed)})

    def add_error(self, seed: int, method: str, estimator: str, message: str) -> None:
        self.errors.append({"seed": int(seed), "method": method, "estimator": estimator,
                            "error": message})

    def cells(self):
        return sorted({(r["estimator"], r["method"]) for r in self.rows})

    def seeds(self):
        return sorted({r["seed"] for r in self.rows})

    def select(self, estimator: str, method: str, seed: int):
        rows = [r for r in self.rows
                if r["estimator"] == estimator and r["method"] == method and r["seed"] == seed]
        return (np.array([r["estimate"] for r in rows]), np.array([r["truth"] for r in rows]))

    def metric_per_seed(self, estimator: str, method: str) -> Dict[str, Dict[int, float]]:
        out = {"mae": {}, "rank_correlation": {}, "regret_at_1": {}}
        for seed in self.seeds():
            est, truth = self.select(estimator, method, seed)
            if est.size == 0:
                continue
            out["mae"][seed] = mae(est, truth)
            for name, fn in (("rank_correlation", rank_correlation), ("regret_at_1", regret_at_1)):
                try:
                    out[name][seed] = fn(est, truth)
                except ValueError:
                    out[name][seed] = float("nan")
        return out

    def aggregate(self) -> dict:
        """Mean and standard error over seeds of each metric, per (estimator, method)."""
        agg = {}
        for est, meth in self.cells():
            per_seed = self.metric_per_seed(est, meth)
            entry = {}
            for name, by_seed in per_seed.items():
                vals = np.array([by_seed[s] for s in sorted(by_seed)], dtype=float)
                good = vals[np.isfinite(vals)]
                entry[name] = {
                    "mean": float(good.mean()) if good.size else None,
                    "se": float(good.std(ddof=1) / np.sqrt(good.size)) if good.size > 1 else 0.0,
                    "per_seed": {str(s): (float(v) if np.isfinite(v) else None)
                                 for s, v in zip(sorted(by_seed), vals)},
                }
            agg[f"{est}/{meth}"] = entry
        return agg

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "estimate": repr(r["estimate"]), "truth": repr(r["truth"])})
        return buf.getvalue()

    def to_json(self, extra: dict = None) -> str:
        doc = {"aggregate": self.aggregate(), "errors": self.errors}
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, text: str) -> "EvaluationReport":
        rep = cls()
        for r in csv.DictReader(io.StringIO(text)):
            rep.add(r["estimator"], r["method"], r["policy_id"], float(r["estimate"]),
                    float(r["truth"]), int(r["seed"]))
        return rep

