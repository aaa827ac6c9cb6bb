"""Evaluation metrics: confusion counts, ROC/AUC, FGain, info gain and run reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .learners import Dataset
from .simulator import RunResult

SWEEP_COLUMNS = ("n", "window_len", "error", "fpr", "tpr", "bl_size", "wl_hits", "auc")


class MetricError(ValueError):
    pass


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def error(self) -> float | None:
        return _ratio(self.fp + self.fn, self.total)

    @property
    def tpr(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def fpr(self) -> float | None:
        return _ratio(self.fp, self.fp + self.tn)


def confusion(outcomes: Iterable) -> ConfusionCounts:
    """Rejections are positive predictions; spam emails are positives."""
    tp = tn = fp = fn = 0
    for o in outcomes:
        if o.accepted:
            if o.spam_class:
                fn += 1
            else:
                tn += 1
        elif o.spam_class:
            tp += 1
        else:
            fp += 1
    return ConfusionCounts(tp, tn, fp, fn)


@dataclass(frozen=True)
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    thresholds: tuple[float, ...]  # thresholds[k] produces point k+1; point 0 is (0, 0)
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))


def roc_auc(scored: Sequence[tuple[float, bool]] | None = None, *, scores=None, labels=None) -> RocCurve:
    """ROC by sweeping a threshold down through the distinct scores; AUC by trapezoids.

    Accepts either a sequence of ``(score, is_positive)`` pairs or the
    ``scores``/``labels`` arrays.
    """
    if scored is not None:
        s = np.array([float(a) for a, _ in scored])
        y = np.array([bool(b) for _, b in scored])
    else:
        s = np.asarray(scores, dtype=float)
        y = np.asarray(labels, dtype=bool)
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise MetricError(f"AUC undefined with {pos} positives and {neg} negatives")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    fpr = np.r_[0.0, fp / neg]
    tpr = np.r_[0.0, tp / pos]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(tuple(fpr.tolist()), tuple(tpr.tolist()), tuple(s[last].tolist()), auc)


def mann_whitney_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via average ranks."""
    from scipy.stats import rankdata

    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise MetricError("AUC undefined for a single class")
    r = rankdata(s)
    return float((r[y].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def fgain(wl_hits: int, bl_hits: int, total_emails: int) -> float:
    """Share of emails resolved by a list hit and so spared content inspection."""
    if total_emails <= 0:
        raise MetricError("fgain needs a positive email count")
    return (wl_hits + bl_hits) / total_emails


# ---------------------------------------------------------------------------
# Information gain
# ---------------------------------------------------------------------------

def entropy(labels) -> float:
    labels = np.asarray(labels)
    if not len(labels):
        return 0.0
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def discretize(values, bins: int = 10) -> np.ndarray:
    """Equal-frequency bin ids; columns with at most ``bins`` distinct values stay as they are."""
    x = np.asarray(values, dtype=float)
    distinct = np.unique(x)
    if len(distinct) <= bins:
        return np.searchsorted(distinct, x)
    edges = np.unique(np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1]))
    return np.searchsorted(edges, x, side="right")


def infogain(data: Dataset, column: str | int, bins: int = 10) -> float:
    """H(target) - sum_v p(v) H(target | v) over the discretised column, in bits."""
    j = column if isinstance(column, int) else data.columns.index(column)
    y = data.y
    base = entropy(y)
    if base == 0.0:
        return 0.0
    v = discretize(data.X[:, j], bins)
    cond = 0.0
    for val in np.unique(v):
        sel = v == val
        cond += sel.mean() * entropy(y[sel])
    return max(base - cond, 0.0)


def rank_features(data: Dataset, bins: int = 10) -> list[tuple[str, float]]:
    gains = [(c, infogain(data, c, bins)) for c in data.columns]
    return sorted(gains, key=lambda kv: (-kv[1], data.columns.index(kv[0])))


# ---------------------------------------------------------------------------
# Run report
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    kind: str
    emails: int
    tp: int
    tn: int
    fp: int
    fn: int
    error: float | None
    tpr: float | None
    fpr: float | None
    auc: float | None
    bl_size: int
    wl_hits: int
    bl_hits: int
    fgain: float | None
    roc_ips: int
    roc: RocCurve | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def to_dict(self, with_roc: bool = True) -> dict:
        d = asdict(self)
        d.pop("roc")
        if with_roc and self.roc is not None:
            d["roc"] = {"fpr": list(self.roc.fpr), "tpr": list(self.roc.tpr),
                        "thresholds": list(self.roc.thresholds), "auc": self.roc.auc}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        roc = d.pop("roc", None)
        if roc is not None:
            roc = RocCurve(tuple(roc["fpr"]), tuple(roc["tpr"]), tuple(roc["thresholds"]), roc["auc"])
        return cls(roc=roc, **d)


def ip_ground_truth(result: RunResult, blt: float | None = None) -> dict[int, bool]:
    """IP is a spam sender iff its spam fraction over the whole validation log exceeds blt."""
    blt = result.thresholds.blt if blt is None else blt
    log = result.log
    if not len(log):
        return {}
    ips, inv = np.unique(log.ip, return_inverse=True)
    spam = np.bincount(inv, weights=log.spam_class.astype(float))
    count = np.bincount(inv)
    frac = spam / count
    return {int(ip): bool(f > blt) for ip, f in zip(ips, frac)}


def last_scores(result: RunResult) -> dict[int, float]:
    out: dict[int, float] = {}
    for e in result.trace:
        out[e.ip] = e.score
    return out


def ip_roc(result: RunResult) -> RocCurve | None:
    truth = ip_ground_truth(result)
    scores = last_scores(result)
    ips = sorted(scores)
    labels = [truth[ip] for ip in ips]
    if not ips or all(labels) or not any(labels):
        return None
    return roc_auc(scores=[scores[ip] for ip in ips], labels=labels)


def report(result: RunResult, params: dict | None = None) -> RunReport:
    cc = confusion(result.outcomes)
    roc = ip_roc(result)
    lists = result.lists
    n = len(result.outcomes)
    return RunReport(
        kind=result.kind, emails=n, tp=cc.tp, tn=cc.tn, fp=cc.fp, fn=cc.fn,
        error=cc.error, tpr=cc.tpr, fpr=cc.fpr, auc=None if roc is None else roc.auc,
        bl_size=len(lists.ever_blacklisted), wl_hits=lists.wl_hits, bl_hits=lists.bl_hits,
        fgain=fgain(lists.wl_hits, lists.bl_hits, n) if n else None,
        roc_ips=len(last_scores(result)), roc=roc, params=dict(params or {}),
    )


def write_report(rep: RunReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report(path: str | Path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text()))


def write_roc_csv(roc: RocCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        w.writerow(["inf", 0.0, 0.0])
        for thr, f, t in zip(roc.thresholds, roc.fpr[1:], roc.tpr[1:]):
            w.writerow([repr(thr), repr(f), repr(t)])


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_sweep_csv(rows: Sequence[dict], path: str | Path, columns: Sequence[str] = SWEEP_COLUMNS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def read_sweep_csv(path: str | Path) -> list[dict]:
    ints = {"n", "bl_size", "wl_hits"}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            d = {}
            for k, v in row.items():
                if v == "":
                    d[k] = None
                elif k in ints:
                    d[k] = int(v)
                else:
                    try:
                        d[k] = float(v)
                    except ValueError:
                        d[k] = v
            out.append(d)
    return out
