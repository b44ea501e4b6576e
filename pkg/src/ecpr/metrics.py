"""AUC, GAUC, Recall@K, RCS@K and the observed-vs-entire-chain loss gap."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .numerics import bce_loss

UNDEFINED = math.nan


def auc(scores, labels) -> float:
    """Rank-sum AUC with half credit for ties; NaN when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = rankdata(scores, method="average")
    # rank sums of tied groups are multiples of 1/2, exact in float64
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gauc(scores, labels, user_ids, weights=None) -> float:
    """Impression-weighted mean of per-user AUC over users with both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    user_ids = np.asarray(user_ids)
    order = np.argsort(user_ids, kind="stable")
    users, starts = np.unique(user_ids[order], return_index=True)
    bounds = np.append(starts, len(order))
    aucs, ws = [], []
    for u in range(len(users)):
        idx = order[bounds[u] : bounds[u + 1]]
        a = auc(scores[idx], labels[idx])
        if math.isnan(a):
            continue
        aucs.append(a)
        ws.append(float(len(idx) if weights is None else np.asarray(weights)[idx].sum()))
    den = math.fsum(ws)
    if den <= 0:
        return UNDEFINED
    # normalising first keeps a single user's AUC exact
    return math.fsum((w / den) * a for w, a in zip(ws, aucs))


def top_k(scores, item_ids, k: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    item_ids = np.asarray(item_ids)
    return item_ids[np.lexsort((item_ids, -scores))][:k]


def recall_one(ranked_items, targets, k: int) -> float:
    targets = set(np.asarray(targets).tolist())
    if not targets:
        return UNDEFINED
    hits = len(targets.intersection(np.asarray(ranked_items)[:k].tolist()))
    return hits / min(k, len(targets))


def rcs_one(pre_order, oracle_order, k: int) -> float:
    k = min(k, len(pre_order))
    if k == 0:
        return UNDEFINED
    return len(set(np.asarray(pre_order)[:k].tolist()) & set(np.asarray(oracle_order)[:k].tolist())) / k


def _mean_defined(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else UNDEFINED


@dataclass
class RankedList:
    request_id: int
    items: np.ndarray
    scores: np.ndarray
    exposed: np.ndarray
    clicked: np.ndarray
    oracle: np.ndarray | None = None

    @classmethod
    def build(cls, request_id, items, scores, y5, y6, oracle=None) -> "RankedList":
        items = np.asarray(items)
        scores = np.asarray(scores, dtype=np.float64)
        order = np.lexsort((items, -scores))
        return cls(
            request_id=int(request_id),
            items=items[order],
            scores=scores[order],
            exposed=items[np.asarray(y5) == 1],
            clicked=items[np.asarray(y6) == 1],
            oracle=None if oracle is None else np.asarray(oracle, dtype=np.float64)[order],
        )

    def oracle_order(self) -> np.ndarray:
        if self.oracle is None:
            raise ValueError("ranked list carries no oracle scores")
        return self.items[np.lexsort((self.items, -self.oracle))]


def recall_at_k(ranked: list[RankedList], k: int, target: str) -> float:
    """Mean over requests with a non-empty target set of ``|topK & T| / min(K, |T|)``."""
    if target not in ("exposure", "click"):
        raise ValueError(f"recall target must be 'exposure' or 'click', got {target!r}")
    return _mean_defined(
        recall_one(r.items, r.exposed if target == "exposure" else r.clicked, k) for r in ranked
    )


def rcs_at_k(ranked: list[RankedList], k: int) -> float:
    """Mean top-K overlap between the model order and the oracle order."""
    return _mean_defined(rcs_one(r.items, r.oracle_order(), k) for r in ranked)


def mean_bce(pred, y, weights=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    if len(pred) == 0:
        raise ValueError("loss over an empty split")
    losses = bce_loss(np.asarray(y), pred)
    if weights is None:
        return float(np.mean(losses))
    w = np.asarray(weights, dtype=np.float64)
    return float((w * losses).sum() / w.sum())


def bias_gap(pred_obs, y_obs, pred_full, y_full, obs_weights=None) -> float:
    """``|mean loss over the observed split - mean loss over the full split|``."""
    return abs(mean_bce(pred_obs, y_obs, obs_weights) - mean_bce(pred_full, y_full))


@dataclass
class MetricsReport:
    auc: float
    gauc: float
    recall: dict[str, dict[int, float]]
    rcs: dict[int, float]
    bias_gap: float
    n_requests: int
    n_records: int
    n_exposed: int
    n_clicked: int
    extra: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["recall"] = {t: {str(k): v for k, v in per.items()} for t, per in self.recall.items()}
        d["rcs"] = {str(k): v for k, v in self.rcs.items()}
        return d

    def rows(self) -> list[tuple[str, str, float]]:
        """``(metric, k, value)`` triples in a fixed order."""
        out = [("auc", "", self.auc), ("gauc", "", self.gauc)]
        for t in ("exposure", "click"):
            out += [(f"recall_{t}", str(k), v) for k, v in self.recall[t].items()]
        out += [("rcs", str(k), v) for k, v in self.rcs.items()]
        out.append(("bias_gap", "", self.bias_gap))
        for name in ("n_requests", "n_records", "n_exposed", "n_clicked"):
            out.append((name, "", getattr(self, name)))
        out += [(name, "", v) for name, v in self.extra.items()]
        return out
