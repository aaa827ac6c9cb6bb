"""Email-log data model, CSV I/O, subnet decomposition and synthetic logs.

Timestamps are minutes (float) from the start of the log.  A log is stored
column-wise in numpy arrays so the aggregation code can work on whole
columns; ``EmailLog.records`` gives the row view.
"""

from __future__ import annotations

import csv
import ipaddress
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

LOG_HEADER = ("ip", "t", "nr", "ae", "pt", "spam_class")
TRUTH_HEADER = ("ip", "archetype", "switch_time")
ARCHETYPE_KINDS = ("benign", "spammer", "compromised", "erratic")


class LogFormatError(ValueError):
    """Malformed line in a log file."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class LogValidationError(LogFormatError):
    """A well-formed line whose values break a record invariant."""


class ConfigurationError(ValueError):
    pass


class EmailRecord(NamedTuple):
    ip: int
    t: float
    nr: int
    ae: int
    pt: float
    spam_class: int


class IpFeatures(NamedTuple):
    ip8: int
    ip16: int
    ip24: int
    ip32: int


def parse_ip(value: str | int) -> int:
    """Accept dotted-quad or unsigned-integer text and return the 32-bit value."""
    if isinstance(value, (int, np.integer)):
        ip = int(value)
    else:
        value = value.strip()
        if value.isdigit():
            ip = int(value)
        else:
            ip = int(ipaddress.IPv4Address(value))
    if not 0 <= ip <= 0xFFFFFFFF:
        raise ValueError(f"ip out of range: {value}")
    return ip


def format_ip(ip: int) -> str:
    return str(ipaddress.IPv4Address(int(ip)))


def subnet_features(ip: int | str) -> IpFeatures:
    ip = parse_ip(ip)
    return IpFeatures(ip >> 24, ip >> 16, ip >> 8, ip)


def subnet_columns(ips: np.ndarray) -> np.ndarray:
    """Vectorised subnet_features: (m, 4) float array of ip8, ip16, ip24, ip32."""
    ips = np.asarray(ips, dtype=np.uint32).astype(np.int64)
    return np.stack([ips >> 24, ips >> 16, ips >> 8, ips], axis=1).astype(float)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmailLog:
    """Chronologically ordered email log (stable order among equal timestamps)."""

    ip: np.ndarray
    t: np.ndarray
    nr: np.ndarray
    ae: np.ndarray
    pt: np.ndarray
    spam_class: np.ndarray
    duration: float | None = None
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        cols = {
            "ip": np.asarray(self.ip, dtype=np.uint32),
            "t": np.asarray(self.t, dtype=float),
            "nr": np.asarray(self.nr, dtype=np.int64),
            "ae": np.asarray(self.ae, dtype=np.int64),
            "pt": np.asarray(self.pt, dtype=float),
            "spam_class": np.asarray(self.spam_class, dtype=np.int8),
        }
        m = len(cols["t"])
        if any(len(c) != m for c in cols.values()):
            raise ValueError("column lengths differ")
        order = np.argsort(cols["t"], kind="stable")
        if m and np.any(order != np.arange(m)):
            cols = {k: v[order] for k, v in cols.items()}
        for k, v in cols.items():
            object.__setattr__(self, k, _frozen(v))

    @classmethod
    def from_records(cls, records: Sequence[EmailRecord], duration: float | None = None) -> "EmailLog":
        if not records:
            return cls.empty(duration)
        ip, t, nr, ae, pt, sc = zip(*records)
        return cls(np.array(ip, dtype=np.uint32), t, nr, ae, pt, sc, duration=duration)

    @classmethod
    def empty(cls, duration: float | None = None) -> "EmailLog":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, duration=duration)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[EmailRecord]:
        for row in zip(self.ip.tolist(), self.t.tolist(), self.nr.tolist(),
                       self.ae.tolist(), self.pt.tolist(), self.spam_class.tolist()):
            yield EmailRecord(*row)

    @property
    def records(self) -> list[EmailRecord]:
        return list(self)

    def __getitem__(self, i: int) -> EmailRecord:
        return EmailRecord(int(self.ip[i]), float(self.t[i]), int(self.nr[i]),
                           int(self.ae[i]), float(self.pt[i]), int(self.spam_class[i]))

    @property
    def span_end(self) -> float:
        """End of the observed span: the declared duration, else the last timestamp."""
        if self.duration is not None:
            return float(self.duration)
        return float(self.t[-1]) if len(self) else 0.0

    def distinct_ips(self) -> np.ndarray:
        return np.unique(self.ip)

    def select(self, mask: np.ndarray) -> "EmailLog":
        return EmailLog(self.ip[mask], self.t[mask], self.nr[mask], self.ae[mask],
                        self.pt[mask], self.spam_class[mask], duration=self.duration)

    def spam_fraction(self) -> float:
        return float(self.spam_class.mean()) if len(self) else float("nan")

    def el_features(self) -> np.ndarray:
        """Per-email feature rows: ip8, ip16, ip24, ip32, nr, ae, pt, t."""
        return np.column_stack([subnet_columns(self.ip), self.nr, self.ae, self.pt, self.t]).astype(float)

    def same_as(self, other: "EmailLog") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in
                   ("ip", "t", "nr", "ae", "pt", "spam_class"))


EL_FEATURE_NAMES = ("ip8", "ip16", "ip24", "ip32", "nr", "ae", "pt", "t")


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _check_row(lineno: int, row: list[str]) -> EmailRecord:
    if len(row) != len(LOG_HEADER):
        raise LogFormatError(lineno, f"expected {len(LOG_HEADER)} fields, got {len(row)}")
    try:
        ip = parse_ip(row[0])
        t = float(row[1])
        nr = int(row[2])
        ae = int(row[3])
        pt = float(row[4])
        sc = int(row[5])
    except ValueError as exc:
        raise LogFormatError(lineno, str(exc)) from None
    if sc not in (0, 1):
        raise LogValidationError(lineno, f"spam_class must be 0 or 1, got {sc}")
    if not np.isfinite(t) or t < 0:
        raise LogValidationError(lineno, f"t must be a non-negative number, got {row[1]}")
    if nr < 1:
        raise LogValidationError(lineno, f"nr must be >= 1, got {nr}")
    if ae < 0:
        raise LogValidationError(lineno, f"ae must be >= 0, got {ae}")
    if not np.isfinite(pt) or pt < 0:
        raise LogValidationError(lineno, f"pt must be >= 0, got {row[4]}")
    return EmailRecord(ip, t, nr, ae, pt, sc)


def read_log(stream: io.TextIOBase, duration: float | None = None) -> EmailLog:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        return EmailLog.empty(duration)
    if tuple(h.strip() for h in header) != LOG_HEADER:
        raise LogFormatError(1, f"bad header {header!r}, expected {','.join(LOG_HEADER)}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        records.append(_check_row(lineno, row))
    return EmailLog.from_records(records, duration=duration)


def parse_log(path: str | Path, duration: float | None = None) -> EmailLog:
    with open(path, newline="", encoding="utf-8") as fh:
        return read_log(fh, duration)


def write_log(log: EmailLog, path: str | Path, dotted: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in log:
            w.writerow([format_ip(r.ip) if dotted else r.ip, repr(r.t), r.nr, r.ae, repr(r.pt), r.spam_class])


# ---------------------------------------------------------------------------
# Synthetic logs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassDist:
    """Per-class distribution parameters for nr, ae (geometric) and pt (log-normal).

    ``nr_mean`` is the mean recipient count (>= 1), ``ae_mean`` the mean
    addressing-error count (>= 0), ``pt_median``/``pt_sigma`` the log-normal
    processing time in milliseconds.
    """

    nr_mean: float = 1.5
    ae_mean: float = 0.2
    pt_median: float = 40.0
    pt_sigma: float = 0.5


HAM_DIST = ClassDist()
SPAM_DIST = ClassDist(nr_mean=6.0, ae_mean=2.5, pt_median=90.0, pt_sigma=0.7)


@dataclass(frozen=True)
class SenderArchetype:
    kind: str
    rate: float  # emails per hour
    spam_prob_before: float = 0.0
    spam_prob_after: float | None = None
    switch_time: float | None = None  # compromised: fixed minute, or None for uniform per IP
    flip_period: float | None = None  # erratic: mean minutes between state flips
    spam_spell: float | None = None  # erratic: mean length of a spamming spell (default flip_period)
    ham: ClassDist = HAM_DIST
    spam: ClassDist = SPAM_DIST
    prefixes: tuple[int, ...] = ()  # /16 prefixes to draw addresses from; empty = anywhere
    name: str | None = None
    rate_sigma: float = 0.0  # per-IP log-normal spread of the rate (mean preserved)
    burst_span: float | None = None  # if set, mail only goes out in short active windows of this length
    bursts: float = 1.0  # mean number of active windows per IP (at least one)

    def __post_init__(self):
        if self.kind not in ARCHETYPE_KINDS:
            raise ConfigurationError(f"unknown archetype kind {self.kind!r}")
        if not self.rate > 0:
            raise ConfigurationError(f"rate must be > 0, got {self.rate}")
        for p in (self.spam_prob_before, self.spam_prob_after):
            if p is not None and not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"probability out of [0,1]: {p}")
        if self.kind == "erratic" and not (self.flip_period and self.flip_period > 0):
            raise ConfigurationError("erratic archetype needs flip_period > 0")
        if self.spam_spell is not None and not self.spam_spell > 0:
            raise ConfigurationError(f"spam_spell must be > 0, got {self.spam_spell}")
        if self.rate_sigma < 0:
            raise ConfigurationError(f"rate_sigma must be >= 0, got {self.rate_sigma}")
        if self.burst_span is not None and not (self.burst_span > 0 and self.bursts >= 1):
            raise ConfigurationError("bursty archetype needs burst_span > 0 and bursts >= 1")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def after(self) -> float:
        return self.spam_prob_before if self.spam_prob_after is None else self.spam_prob_after

    @property
    def spell_lengths(self) -> tuple[float, float]:
        """Mean (clean, spamming) spell lengths of an erratic sender."""
        return self.flip_period, self.flip_period if self.spam_spell is None else self.spam_spell

    def expected_spam_prob(self, duration: float) -> float:
        """Long-run expected fraction of this archetype's emails labeled spam."""
        if self.kind == "compromised":
            if self.switch_time is None:
                return 0.5 * (self.spam_prob_before + self.after)
            s = min(max(self.switch_time, 0.0), duration) / duration
            return s * self.spam_prob_before + (1 - s) * self.after
        if self.kind == "erratic":
            on = self.spell_lengths[1] / sum(self.spell_lengths)
            return (1 - on) * self.spam_prob_before + on * self.after
        return self.spam_prob_before

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("kind", "rate", "spam_prob_before", "spam_prob_after",
                                           "switch_time", "flip_period", "spam_spell", "name", "rate_sigma",
                                           "burst_span", "bursts")}
        d["prefixes"] = list(self.prefixes)
        d["ham"] = vars(self.ham).copy()
        d["spam"] = vars(self.spam).copy()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SenderArchetype":
        d = dict(d)
        d["ham"] = ClassDist(**d["ham"]) if "ham" in d else HAM_DIST
        d["spam"] = ClassDist(**d["spam"]) if "spam" in d else SPAM_DIST
        d["prefixes"] = tuple(d.get("prefixes", ()))
        return cls(**d)


@dataclass(frozen=True)
class GroundTruth:
    ip: int
    archetype: str
    switch_time: float | None


@dataclass(frozen=True, eq=False)
class SyntheticLog:
    log: EmailLog
    truth: dict[int, GroundTruth]


def expected_spam_fraction(archetypes: Sequence[tuple[SenderArchetype, int]], duration: float) -> float:
    """Rate-weighted closed-form spam fraction of a synthetic mix."""
    w = np.array([a.rate * n for a, n in archetypes], dtype=float)
    p = np.array([a.expected_spam_prob(duration) for a, _ in archetypes])
    return float((w * p).sum() / w.sum())


def _draw_ips(rng: np.random.Generator, count: int, prefixes: tuple[int, ...], taken: set[int]) -> list[int]:
    out = []
    while len(out) < count:
        if prefixes:
            hi = int(prefixes[rng.integers(len(prefixes))]) << 16
            ip = hi | int(rng.integers(1, 1 << 16))
        else:
            ip = int(rng.integers(1 << 24, 224 << 24))
        if ip not in taken:
            taken.add(ip)
            out.append(ip)
    return out


def _erratic_state(rng: np.random.Generator, spells: tuple[float, float], t: np.ndarray,
                   duration: float) -> np.ndarray:
    """Alternating renewal process: 1 while spamming, 0 otherwise, sampled at ``t``."""
    mean_off, mean_on = spells
    state = int(rng.random() < mean_on / (mean_on + mean_off))  # start in the stationary mix
    edges, now = [], 0.0
    while now < duration:
        now += rng.exponential(mean_on if state else mean_off)
        edges.append(now)
        state ^= 1
    first = state ^ (len(edges) % 2)
    return (np.searchsorted(np.asarray(edges), t, side="right") + first) % 2


def _send_times(rng: np.random.Generator, arch: SenderArchetype, duration: float) -> np.ndarray:
    """Poisson send times for one IP; bursty senders emit only inside their active windows."""
    mean = arch.rate / 60.0 * duration
    if arch.rate_sigma > 0:
        mean *= rng.lognormal(-0.5 * arch.rate_sigma ** 2, arch.rate_sigma)
    k = rng.poisson(mean)
    if arch.burst_span is None:
        return np.sort(rng.uniform(0.0, duration, k))
    span = min(arch.burst_span, duration)
    b = 1 + rng.poisson(arch.bursts - 1.0)
    starts = rng.uniform(0.0, duration - span, b)
    # uniform over the union of the windows: pick a window, then an offset in it
    which = rng.integers(b, size=k)
    return np.sort(starts[which] + rng.uniform(0.0, span, k))


def _sample_class(rng: np.random.Generator, dist: ClassDist, k: int):
    # geometric on {1,2,...} with mean nr_mean; ae geometric on {0,1,...}
    nr = rng.geometric(1.0 / max(dist.nr_mean, 1.0), k)
    ae = rng.geometric(1.0 / (1.0 + dist.ae_mean), k) - 1
    pt = np.round(rng.lognormal(np.log(dist.pt_median), dist.pt_sigma, k), 3)
    return nr, ae, pt


def synthesize_log(archetypes: Sequence[tuple[SenderArchetype, int]], duration: float, seed: int) -> SyntheticLog:
    """Generate a labeled log from sender archetypes.

    Each IP emits a Poisson stream at its archetype's rate (optionally scaled
    per IP, optionally confined to a few active windows).  Spam labels are
    Bernoulli with a probability that depends on the archetype's state at the
    send time; nr/ae/pt are drawn from the archetype's per-class parameters.
    """
    if not duration > 0:
        raise ConfigurationError(f"duration must be > 0, got {duration}")
    if sum(n for _, n in archetypes) < 1:
        raise ConfigurationError("synthesis needs at least one IP")
    rng = np.random.default_rng(seed)
    taken: set[int] = set()
    cols: list[tuple] = []
    truth: dict[int, GroundTruth] = {}
    for arch, count in archetypes:
        ips = _draw_ips(rng, count, arch.prefixes, taken)
        for ip in ips:
            t = _send_times(rng, arch, duration)
            k = len(t)
            switch = None
            if arch.kind == "compromised":
                switch = arch.switch_time if arch.switch_time is not None else float(np.round(rng.uniform(0, duration), 3))
                p = np.where(t < switch, arch.spam_prob_before, arch.after)
            elif arch.kind == "erratic":
                state = _erratic_state(rng, arch.spell_lengths, t, duration)
                p = np.where(state == 1, arch.after, arch.spam_prob_before)
            else:
                p = np.full(k, arch.spam_prob_before)
            spam = (rng.random(k) < p).astype(np.int8)
            nr_h, ae_h, pt_h = _sample_class(rng, arch.ham, k)
            nr_s, ae_s, pt_s = _sample_class(rng, arch.spam, k)
            s = spam == 1
            cols.append((np.full(k, ip, dtype=np.uint32), np.round(t, 4),
                         np.where(s, nr_s, nr_h), np.where(s, ae_s, ae_h), np.where(s, pt_s, pt_h), spam))
            truth[ip] = GroundTruth(ip, arch.label, switch)
    if cols:
        ip, t, nr, ae, pt, sc = (np.concatenate(c) for c in zip(*cols))
    else:
        ip = t = nr = ae = pt = sc = np.zeros(0)
    return SyntheticLog(EmailLog(ip, t, nr, ae, pt, sc, duration=float(duration)), truth)


def write_truth(truth: dict[int, GroundTruth], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for ip in sorted(truth):
            g = truth[ip]
            w.writerow([format_ip(ip), g.archetype, "" if g.switch_time is None else repr(g.switch_time)])


def read_truth(path: str | Path) -> dict[int, GroundTruth]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            ip = parse_ip(row["ip"])
            st = row["switch_time"]
            out[ip] = GroundTruth(ip, row["archetype"], float(st) if st else None)
    return out


def split_by_ip(log: EmailLog, fraction: float, seed: int) -> tuple[EmailLog, EmailLog]:
    """Partition a log so that every distinct IP lands wholly in one part.

    About ``fraction`` of the distinct IPs (rounded) go to the first part.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0,1], got {fraction}")
    ips = log.distinct_ips()
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ips))
    k = int(round(fraction * len(ips)))
    first = np.zeros(len(ips), dtype=bool)
    first[perm[:k]] = True
    mask = np.isin(log.ip, ips[first])
    return log.select(mask), log.select(~mask)
