"""Historical data set: per-IP aggregates over exponentially growing windows.

Every window is start-exclusive / end-inclusive, ``(T0 - w0*2**i, T0]``.
Aggregates come from per-IP prefix sums, so a window costs two binary
searches no matter how many emails it holds.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .emaillog import EmailLog, format_ip

# per-window statistics, in column order
STAT_NAMES = (
    "nr_sum", "nr_mean", "nr_var",
    "ae_sum", "ae_mean", "ae_var",
    "pt_sum", "pt_mean", "pt_var",
    "spam_sum", "spam_mean", "spam_var",
    "ec", "erraticness",
)
N_STATS = len(STAT_NAMES)
HDS_ID_COLUMNS = ("ip", "t0", "target_spammingness", "target_erraticness", "defined")


@dataclass(frozen=True)
class HdsConfig:
    w0: float = 60.0
    n: int = 5
    pred: float = 60.0
    record_cadence: float | None = None  # defaults to w0

    def __post_init__(self):
        if not self.w0 > 0:
            raise ValueError(f"w0 must be > 0, got {self.w0}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be an integer >= 1, got {self.n}")
        if not self.pred > 0:
            raise ValueError(f"pred must be > 0, got {self.pred}")
        if self.record_cadence is not None and not self.record_cadence > 0:
            raise ValueError(f"record_cadence must be > 0, got {self.record_cadence}")

    @property
    def cadence(self) -> float:
        return self.w0 if self.record_cadence is None else self.record_cadence

    @property
    def total_history(self) -> float:
        return self.w0 * 2 ** (self.n - 1)

    @property
    def window_lengths(self) -> np.ndarray:
        return self.w0 * 2.0 ** np.arange(self.n)


def hds_feature_names(cfg: HdsConfig | int) -> list[str]:
    n = cfg if isinstance(cfg, int) else cfg.n
    return [f"w{i}_{s}" for i in range(n) for s in STAT_NAMES]


class FeatureSet(NamedTuple):
    nr_sum: float
    nr_mean: float
    nr_var: float
    ae_sum: float
    ae_mean: float
    ae_var: float
    pt_sum: float
    pt_mean: float
    pt_var: float
    spam_sum: float
    spam_mean: float
    spam_var: float
    ec: float
    erraticness: float

    @property
    def empty(self) -> bool:
        return self.ec == 0


class SenderHistory:
    """Append-only email history of one IP with prefix sums for window queries."""

    # prefix columns: nr, nr^2, ae, ae^2, pt, pt^2, spam, class changes
    _W = 8

    def __init__(self, capacity: int = 16):
        self.size = 0
        self.times = np.empty(capacity)
        self.prefix = np.zeros((capacity + 1, self._W))
        self._last_spam = -1

    @classmethod
    def from_arrays(cls, t, nr, ae, pt, spam) -> "SenderHistory":
        h = cls.__new__(cls)
        k = len(t)
        h.size = k
        h.times = np.array(t, dtype=float)
        nr = np.asarray(nr, dtype=float)
        ae = np.asarray(ae, dtype=float)
        pt = np.asarray(pt, dtype=float)
        spam = np.asarray(spam, dtype=float)
        change = np.zeros(k)
        if k > 1:
            change[1:] = spam[1:] != spam[:-1]
        vals = np.column_stack([nr, nr * nr, ae, ae * ae, pt, pt * pt, spam, change])
        h.prefix = np.zeros((k + 1, cls._W))
        np.cumsum(vals, axis=0, out=h.prefix[1:])
        h._last_spam = int(spam[-1]) if k else -1
        return h

    def append(self, t: float, nr: float, ae: float, pt: float, spam: int) -> None:
        k = self.size
        if k == len(self.times):
            cap = max(16, 2 * k)
            times = np.empty(cap)
            times[:k] = self.times[:k]
            prefix = np.zeros((cap + 1, self._W))
            prefix[: k + 1] = self.prefix[: k + 1]
            self.times, self.prefix = times, prefix
        self.times[k] = t
        change = 1.0 if (self._last_spam >= 0 and spam != self._last_spam) else 0.0
        p = self.prefix
        row = p[k]
        p[k + 1] = (row[0] + nr, row[1] + nr * nr, row[2] + ae, row[3] + ae * ae,
                    row[4] + pt, row[5] + pt * pt, row[6] + spam, row[7] + change)
        self._last_spam = spam
        self.size = k + 1

    def bounds(self, start, end):
        """Index ranges [lo, hi) of emails with start < t <= end."""
        times = self.times[: self.size]
        return (np.searchsorted(times, start, side="right"),
                np.searchsorted(times, end, side="right"))

    def count(self, start: float, end: float) -> int:
        lo, hi = self.bounds(start, end)
        return int(hi - lo)

    def spam_count(self, start: float, end: float) -> tuple[int, int]:
        lo, hi = self.bounds(start, end)
        return int(hi - lo), int(round(self.prefix[hi, 6] - self.prefix[lo, 6]))

    def spammingness(self, start: float, end: float) -> float | None:
        c, s = self.spam_count(start, end)
        return s / c if c else None

    def erraticness(self, start: float, end: float) -> int | None:
        lo, hi = self.bounds(start, end)
        if hi == lo:
            return None
        return int(round(self.prefix[hi, 7] - self.prefix[lo + 1, 7]))

    def window_stats(self, starts, ends) -> np.ndarray:
        """Statistics for windows (starts[j], ends[j]]; returns (m, 14) array."""
        starts = np.atleast_1d(np.asarray(starts, dtype=float))
        ends = np.atleast_1d(np.asarray(ends, dtype=float))
        lo, hi = self.bounds(starts, ends)
        return _stats_from_prefix(self.prefix, lo, hi)

    def features(self, t0: float, lengths: np.ndarray) -> np.ndarray:
        """Flattened feature row for reference time t0 (smallest window first)."""
        return self.window_stats(t0 - lengths, np.full(len(lengths), t0)).ravel()


def _stats_from_prefix(prefix: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    count = (hi - lo).astype(float)
    sums = prefix[hi] - prefix[lo]
    out = np.zeros((len(count), N_STATS))
    nz = count > 0
    safe = np.where(nz, count, 1.0)
    for j, col in enumerate((0, 2, 4)):
        s = sums[:, col]
        mean = s / safe
        var = np.maximum(sums[:, col + 1] / safe - mean * mean, 0.0)
        out[:, 3 * j] = s
        out[:, 3 * j + 1] = mean
        out[:, 3 * j + 2] = var
    spam = np.rint(sums[:, 6])
    m = spam / safe
    out[:, 9] = spam
    out[:, 10] = m
    out[:, 11] = m * (1.0 - m)
    out[:, 12] = count
    # class changes between consecutive in-window emails: pairs (j-1, j), lo < j < hi
    first_pair = np.minimum(lo + 1, hi)
    out[:, 13] = np.rint(prefix[hi, 7] - prefix[first_pair, 7])
    out[~nz] = 0.0
    return out


class LogIndex:
    """Per-IP SenderHistory objects built from a whole log."""

    def __init__(self, log: EmailLog):
        self.histories: dict[int, SenderHistory] = {}
        if not len(log):
            return
        order = np.argsort(log.ip, kind="stable")
        ips = log.ip[order]
        cuts = np.flatnonzero(np.diff(ips)) + 1
        for seg in np.split(order, cuts):
            ip = int(log.ip[seg[0]])
            self.histories[ip] = SenderHistory.from_arrays(
                log.t[seg], log.nr[seg], log.ae[seg], log.pt[seg], log.spam_class[seg])

    def get(self, ip: int) -> SenderHistory | None:
        return self.histories.get(int(ip))


def log_index(log: EmailLog) -> LogIndex:
    idx = log._index.get("ip")
    if idx is None:
        idx = log._index["ip"] = LogIndex(log)
    return idx


def _check_window(window) -> tuple[float, float]:
    start, end = window
    if not start < end:
        raise ValueError(f"window start must be < end, got ({start}, {end}]")
    return float(start), float(end)


def spammingness(log: EmailLog, ip: int, window: tuple[float, float]) -> float | None:
    """Fraction of the ip's emails in (start, end] labeled spam; None if it sent none."""
    start, end = _check_window(window)
    h = log_index(log).get(ip)
    return None if h is None else h.spammingness(start, end)


def erraticness(log: EmailLog, ip: int, window: tuple[float, float]) -> int | None:
    """Number of spam/ham switches between consecutive emails of the ip in (start, end]."""
    start, end = _check_window(window)
    h = log_index(log).get(ip)
    return None if h is None else h.erraticness(start, end)


def feature_set(log: EmailLog, ip: int, window: tuple[float, float]) -> FeatureSet:
    start, end = _check_window(window)
    h = log_index(log).get(ip)
    if h is None:
        return FeatureSet(*([0.0] * N_STATS))
    return FeatureSet(*h.window_stats([start], [end])[0].tolist())


class HdsRecord(NamedTuple):
    ip: int
    t0: float
    feature_sets: tuple[FeatureSet, ...]
    target_spammingness: float | None
    target_erraticness: int | None

    @property
    def defined(self) -> bool:
        return self.target_spammingness is not None


@dataclass(frozen=True, eq=False)
class HdsTable:
    """Column-wise HDS: one row per (ip, t0)."""

    cfg: HdsConfig
    ip: np.ndarray
    t0: np.ndarray
    X: np.ndarray  # (rows, n * 14)
    target_spammingness: np.ndarray  # nan where undefined
    target_erraticness: np.ndarray  # nan where undefined

    def __len__(self) -> int:
        return len(self.t0)

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.target_spammingness)

    @property
    def feature_names(self) -> list[str]:
        return hds_feature_names(self.cfg)

    def record(self, i: int) -> HdsRecord:
        sets = tuple(FeatureSet(*row) for row in self.X[i].reshape(self.cfg.n, N_STATS).tolist())
        ys = self.target_spammingness[i]
        zs = self.target_erraticness[i]
        return HdsRecord(int(self.ip[i]), float(self.t0[i]), sets,
                         None if np.isnan(ys) else float(ys), None if np.isnan(zs) else int(zs))

    def records(self) -> list[HdsRecord]:
        return [self.record(i) for i in range(len(self))]


def _grid_points(times: np.ndarray, cadence: float, span_end: float, history: float) -> np.ndarray:
    """Grid T0 = k*cadence (k >= 1, T0 <= span_end) with an email in (T0 - history, T0]."""
    kmax = math.floor(span_end / cadence + 1e-9)
    if kmax < 1 or not len(times):
        return np.zeros(0)
    # T0 in [t, t + history)  <=>  k in [ceil(t/c), ceil((t+history)/c) - 1]
    k_lo = np.maximum(np.ceil(times / cadence - 1e-9).astype(np.int64), 1)
    k_hi = np.minimum(np.ceil((times + history) / cadence - 1e-9).astype(np.int64) - 1, kmax)
    keep = k_hi >= k_lo
    k_lo, k_hi = k_lo[keep], k_hi[keep]
    if not len(k_lo):
        return np.zeros(0)
    # merge overlapping integer ranges (k_lo is sorted because times are)
    run_hi = np.maximum.accumulate(k_hi)
    starts = np.r_[True, k_lo[1:] > run_hi[:-1] + 1]
    seg_lo = k_lo[starts]
    seg_hi = run_hi[np.r_[np.flatnonzero(starts)[1:] - 1, len(k_lo) - 1]]
    ks = np.concatenate([np.arange(a, b + 1) for a, b in zip(seg_lo, seg_hi)])
    return ks * cadence


def build_hds(log: EmailLog, cfg: HdsConfig) -> HdsTable:
    """Build HDS rows for every IP and every active reference time on the cadence grid.

    Targets are measured over (T0, T0 + pred]; rows whose prediction window
    is empty keep NaN targets and are flagged undefined.
    """
    span_end = log.span_end
    if len(log) and cfg.total_history >= span_end:
        warnings.warn(f"total history {cfg.total_history} min >= log span {span_end} min", stacklevel=2)
    lengths = cfg.window_lengths
    idx = log_index(log)
    ips, t0s, xs, ys, zs = [], [], [], [], []
    for ip in sorted(idx.histories):
        h = idx.histories[ip]
        t0 = _grid_points(h.times[: h.size], cfg.cadence, span_end, cfg.total_history)
        if not len(t0):
            continue
        m = len(t0)
        starts = (t0[:, None] - lengths[None, :]).ravel()
        ends = np.repeat(t0, cfg.n)
        X = h.window_stats(starts, ends).reshape(m, cfg.n * N_STATS)
        fut = h.window_stats(t0, t0 + cfg.pred)
        defined = fut[:, 12] > 0
        ips.append(np.full(m, ip, dtype=np.uint32))
        t0s.append(t0)
        xs.append(X)
        ys.append(np.where(defined, fut[:, 10], np.nan))
        zs.append(np.where(defined, fut[:, 13], np.nan))
    width = cfg.n * N_STATS
    if not ips:
        e = np.zeros(0)
        return HdsTable(cfg, e.astype(np.uint32), e, np.zeros((0, width)), e, e)
    # rows ordered by (t0, ip)
    ip_a, t0_a = np.concatenate(ips), np.concatenate(t0s)
    order = np.lexsort((ip_a, t0_a))
    return HdsTable(cfg, ip_a[order], t0_a[order], np.concatenate(xs)[order],
                    np.concatenate(ys)[order], np.concatenate(zs)[order])


def _fmt(v: float) -> str:
    if np.isnan(v):
        return ""
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_hds_csv(table: HdsTable, path: str | Path) -> None:
    names = table.feature_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(HDS_ID_COLUMNS) + names)
        for i in range(len(table)):
            w.writerow([format_ip(table.ip[i]), _fmt(table.t0[i]), _fmt(table.target_spammingness[i]),
                        _fmt(table.target_erraticness[i]), int(table.defined[i])]
                       + [_fmt(v) for v in table.X[i]])


def read_hds_header(path: str | Path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh))


def hds_query_rows(histories: dict[int, SenderHistory], ips: Sequence[int], now: float,
                   cfg: HdsConfig) -> np.ndarray:
    """Feature rows for several IPs at one reference time (missing IPs give zero rows)."""
    lengths = cfg.window_lengths
    X = np.zeros((len(ips), cfg.n * N_STATS))
    for r, ip in enumerate(ips):
        h = histories.get(ip)
        if h is not None and h.size:
            X[r] = h.features(now, lengths)
    return X
