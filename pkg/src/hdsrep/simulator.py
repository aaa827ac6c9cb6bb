"""Evaluation environment: white-list, black-list and an SRM in front of a mail stream.

Per email, in timestamp order: a white-list hit is accepted, a black-list
hit is rejected, anything else is classified by the SRM.  In continuous mode
the SRM decides on the spot from what it has seen so far; in batch mode the
email is accepted by default and the SRM runs at every batch boundary over
the IPs that sent mail since the previous one.

Every accepted email, white-list hits included, is labeled downstream and
fed to the SRM's history, and every email from a non-blacklisted IP triggers
a decision, so a white-listed sender that turns bad can be moved to the
black-list.  Rejected emails never reach a history-keeping SRM.  The EL SRM
keeps no history and scores every email, black-list hits included.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .emaillog import EmailLog, EmailRecord, format_ip
from .srm import BLACKLIST, NONE, WHITELIST, SrmState, Thresholds, Verdict, el_verdict, hds_decide_many, heuristic_decide

ROUTES = ("wl-hit", "bl-hit", "srm-accept", "srm-reject", "default-accept")
ACCEPTING = {"wl-hit": True, "bl-hit": False, "srm-accept": True, "srm-reject": False, "default-accept": True}


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    mode: str = "continuous"
    batch_period: float | None = None
    clear_period: float | None = None
    thresholds: Thresholds | None = None  # overrides the SRM's own thresholds

    def __post_init__(self):
        if self.mode not in ("continuous", "batch"):
            raise SimConfigError(f"mode must be continuous or batch, got {self.mode!r}")
        if self.mode == "batch" and not (self.batch_period and self.batch_period > 0):
            raise SimConfigError("batch mode needs batch_period > 0")
        if self.clear_period is not None and not self.clear_period > 0:
            raise SimConfigError(f"clear_period must be > 0, got {self.clear_period}")


class EmailOutcome(NamedTuple):
    index: int  # position of the email in the validation log
    t: float
    ip: int
    route: str
    accepted: bool
    spam_class: int


class TraceEntry(NamedTuple):
    ip: int
    at: float
    kind: str
    action: str
    score: float
    seq: int  # index of the first email the decision can affect

    def to_json(self) -> dict:
        return {"ip": format_ip(self.ip), "at": self.at, "kind": self.kind, "action": self.action,
                "score": self.score, "seq": self.seq}


class AddressLists:
    """Black- and white-list keyed by IP with insertion times and hit counters."""

    def __init__(self):
        self.blacklist: dict[int, float] = {}
        self.whitelist: dict[int, float] = {}
        self.bl_hits = 0
        self.wl_hits = 0
        self.bl_hits_since_clear = 0
        self.wl_hits_since_clear = 0
        self.ever_blacklisted: set[int] = set()
        self.ever_whitelisted: set[int] = set()
        self.bl_insertions = 0
        self.clears: list[float] = []

    def lookup(self, ip: int) -> str | None:
        if ip in self.whitelist:
            return WHITELIST
        if ip in self.blacklist:
            return BLACKLIST
        return None

    def hit(self, which: str) -> None:
        if which == WHITELIST:
            self.wl_hits += 1
            self.wl_hits_since_clear += 1
        else:
            self.bl_hits += 1
            self.bl_hits_since_clear += 1

    def add(self, ip: int, action: str, at: float) -> None:
        if action == BLACKLIST:
            self.whitelist.pop(ip, None)
            self.blacklist[ip] = at
            self.ever_blacklisted.add(ip)
            self.bl_insertions += 1
        elif action == WHITELIST:
            self.blacklist.pop(ip, None)
            self.whitelist[ip] = at
            self.ever_whitelisted.add(ip)

    def clear(self, at: float) -> None:
        self.blacklist.clear()
        self.whitelist.clear()
        self.bl_hits_since_clear = 0
        self.wl_hits_since_clear = 0
        self.clears.append(at)

    def to_json(self) -> dict:
        return {
            "blacklist": {format_ip(k): v for k, v in sorted(self.blacklist.items())},
            "whitelist": {format_ip(k): v for k, v in sorted(self.whitelist.items())},
            "bl_hits": self.bl_hits, "wl_hits": self.wl_hits,
            "bl_size": len(self.ever_blacklisted), "clears": self.clears,
        }


@dataclass(eq=False)
class RunResult:
    log: EmailLog
    kind: str
    cfg: SimConfig
    outcomes: list[EmailOutcome]
    trace: list[TraceEntry]
    lists: AddressLists
    feed: list[int] = field(default_factory=list)  # outcome indices handed to the SRM history
    # (time, seq, number of trace entries recorded before the clear)
    clear_seqs: list[tuple[float, int, int]] = field(default_factory=list)
    conflicts: list[dict] = field(default_factory=list)
    thresholds: Thresholds = Thresholds()


def batch_boundaries(span: tuple[float, float], period: float) -> list[float]:
    """Boundaries start+period, start+2*period, ... plus a final partial one at the span end."""
    start, end = span
    if not period > 0:
        raise ValueError(f"period must be > 0, got {period}")
    if end <= start:
        return []
    k = math.floor((end - start) / period + 1e-9)
    out = [start + i * period for i in range(1, k + 1)]
    if not out or end - out[-1] > 1e-9 * max(1.0, abs(end)):
        out.append(end)
    else:
        out[-1] = end
    return out


def clear_times(span_end: float, period: float | None) -> list[float]:
    if period is None:
        return []
    k = math.floor(span_end / period + 1e-9)
    return [i * period for i in range(1, k + 1)]


def merge_batch(blacklist: set[int], whitelist: set[int]) -> tuple[set[int], set[int], set[int]]:
    """Resolve the two address sets returned at a boundary; the black-list wins conflicts."""
    conflicts = blacklist & whitelist
    return set(blacklist), whitelist - conflicts, conflicts


def _route_for(action: str) -> str:
    if action == BLACKLIST:
        return "srm-reject"
    if action == WHITELIST:
        return "srm-accept"
    return "default-accept"


def run(validation_log: EmailLog, srm: SrmState, cfg: SimConfig | None = None) -> RunResult:
    """Stream a validation log through the lists and the SRM.

    The SRM's visible history is reset first; its model is never refit.
    """
    cfg = cfg or SimConfig()
    state = srm.fresh()
    if cfg.thresholds is not None:
        state.cfg = replace(state.cfg, thresholds=cfg.thresholds)
    th = state.thresholds
    log = validation_log
    m = len(log)
    lists = AddressLists()
    outcomes: list[EmailOutcome] = []
    trace: list[TraceEntry] = []
    feed: list[int] = []
    clear_seqs: list[tuple[float, int, int]] = []
    conflicts: list[dict] = []
    kind = state.kind
    is_el = kind == "el"

    ips = log.ip.tolist()
    ts = log.t.tolist()
    nrs = log.nr.tolist()
    aes = log.ae.tolist()
    pts = log.pt.tolist()
    labels = log.spam_class.tolist()
    el_scores = None
    if is_el and m:
        el_scores = state.model.predict_score(log.el_features()).tolist()

    span_end = log.span_end
    clears = clear_times(span_end, cfg.clear_period)
    ci = 0

    def do_clears(upto: float, seq: int, inclusive: bool) -> None:
        nonlocal ci
        while ci < len(clears) and (clears[ci] <= upto if inclusive else clears[ci] < upto):
            lists.clear(clears[ci])
            clear_seqs.append((clears[ci], seq, len(trace)))
            ci += 1

    def route_email(i: int) -> str | None:
        """Route a listed email and count the hit; None if the IP is on neither list."""
        ip = ips[i]
        where = lists.lookup(ip)
        if where is None:
            return None
        lists.hit(where)
        route = "wl-hit" if where == WHITELIST else "bl-hit"
        outcomes.append(EmailOutcome(i, ts[i], ip, route, where == WHITELIST, labels[i]))
        return route

    def after_route(i: int, route: str) -> None:
        # accepted mail is labeled downstream and reaches the SRM's history
        if not is_el and ACCEPTING[route]:
            state.observe(EmailRecord(ips[i], ts[i], nrs[i], aes[i], pts[i], labels[i]))
            feed.append(i)

    if cfg.mode == "continuous":
        for i in range(m):
            do_clears(ts[i], i, inclusive=False)
            ip, t = ips[i], ts[i]
            listed = lists.lookup(ip)
            if listed == BLACKLIST and not is_el:
                route_email(i)
                continue
            if kind == "heuristic":
                v = heuristic_decide(state, ip, t)
            elif is_el:
                v = el_verdict(ip, el_scores[i], t, th)
            else:
                v = hds_decide_many(state, [ip], t)[0]
            trace.append(TraceEntry(ip, t, kind, v.action, v.score, i + 1))
            route = route_email(i)
            if route is None:
                route = _route_for(v.action)
                outcomes.append(EmailOutcome(i, t, ip, route, ACCEPTING[route], labels[i]))
            lists.add(ip, v.action, t)
            after_route(i, route)
        do_clears(span_end, m, inclusive=True)
    else:
        bounds = batch_boundaries((0.0, span_end), cfg.batch_period) if m else []
        bounds.append(float("inf"))
        pending: dict[int, list[int]] = {}
        i = 0
        for b in bounds:
            while i < m and ts[i] <= b:
                do_clears(ts[i], i, inclusive=False)
                route = route_email(i)
                if route is None:
                    route = "default-accept"
                    outcomes.append(EmailOutcome(i, ts[i], ips[i], route, True, labels[i]))
                if route != "bl-hit" or is_el:
                    pending.setdefault(ips[i], []).append(i)
                after_route(i, route)
                i += 1
            if b == float("inf"):
                break
            do_clears(b, i, inclusive=True)
            if not pending:
                continue
            batch_ips = sorted(pending)
            verdicts = _batch_verdicts(state, batch_ips, pending, b, el_scores, th)
            bl = {v.ip for v in verdicts if v.action == BLACKLIST}
            wl = {v.ip for v in verdicts if v.action == WHITELIST}
            bl, wl, clash = merge_batch(bl, wl)
            for ip in sorted(clash):
                conflicts.append({"ip": format_ip(ip), "at": b, "resolved": BLACKLIST})
            for v in verdicts:
                trace.append(TraceEntry(v.ip, b, kind, v.action, v.score, i))
                if v.ip in bl:
                    lists.add(v.ip, BLACKLIST, b)
                elif v.ip in wl:
                    lists.add(v.ip, WHITELIST, b)
            pending.clear()
    return RunResult(log, kind, cfg, outcomes, trace, lists, feed, clear_seqs, conflicts, th)


def _batch_verdicts(state: SrmState, ips: list[int], pending: dict[int, list[int]], now: float,
                    el_scores, th: Thresholds) -> list[Verdict]:
    if state.kind == "heuristic":
        return [heuristic_decide(state, ip, now) for ip in ips]
    if state.kind == "el":
        # replay the logged emails in order; the latest decisive one sets the IP's action
        out = []
        for ip in ips:
            last = None
            for j in pending[ip]:
                v = el_verdict(ip, el_scores[j], now, th)
                if v.action != NONE or last is None or last.action == NONE:
                    last = v
            out.append(last)
        return out
    return hds_decide_many(state, ips, now)


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------

def audit(result: RunResult, n_emails: int | None = None) -> dict:
    """Check the run's invariants and return a JSON-able report of violations."""
    outcomes, trace, lists = result.outcomes, result.trace, result.lists
    n = len(result.log) if n_emails is None else n_emails
    violations: list[dict] = []

    def bad(kind: str, **detail) -> None:
        violations.append({"type": kind, **detail})

    # routing totality and consistency
    o_idx = np.array([o.index for o in outcomes], dtype=np.int64)
    o_ip = np.array([o.ip for o in outcomes], dtype=np.int64)
    routes = [o.route for o in outcomes]
    known = np.array([r in ACCEPTING for r in routes], dtype=bool)
    acc = np.array([o.accepted for o in outcomes], dtype=bool)
    should = np.array([ACCEPTING.get(r, False) for r in routes], dtype=bool)
    for k in np.flatnonzero(~known):
        bad("routing", index=int(o_idx[k]), detail=f"unknown route {routes[k]!r}")
    for k in np.flatnonzero(known & (acc != should)):
        bad("routing", index=int(o_idx[k]), detail=f"route {routes[k]} with accepted={bool(acc[k])}")
    inside = known & (o_idx >= 0) & (o_idx < n)
    for k in np.flatnonzero(known & ~inside):
        bad("routing", index=int(o_idx[k]), detail="outcome for an email outside the log")
    seen = np.bincount(o_idx[inside], minlength=n)[:n] if n else np.zeros(0, dtype=np.int64)
    for idx in np.flatnonzero(seen != 1):
        bad("routing", index=int(idx), detail=f"{seen[idx]} outcomes for one email")

    # one listing action per decision event; two emails stamped the same minute are two events
    pos = np.array([k for k, e in enumerate(trace) if e.action != NONE], dtype=np.int64)
    e_ip = np.array([trace[k].ip for k in pos], dtype=np.int64)
    e_seq = np.array([trace[k].seq for k in pos], dtype=np.int64)
    e_bl = np.array([trace[k].action == BLACKLIST for k in pos], dtype=bool)
    _, ip_code = np.unique(np.concatenate([e_ip, o_ip]), return_inverse=True)
    ip_code = ip_code.ravel()
    if len(pos):
        pair = ip_code[:len(pos)] * (int(e_seq.max()) + 1) + e_seq
        groups, inv = np.unique(pair, return_inverse=True)
        inv = inv.ravel()
        n_bl = np.bincount(inv, weights=e_bl, minlength=len(groups))
        n_wl = np.bincount(inv, weights=~e_bl, minlength=len(groups))
        for g in np.flatnonzero((n_bl > 0) & (n_wl > 0)):
            first = np.flatnonzero(inv == g)[0]
            bad("exclusivity", ip=format_ip(int(e_ip[first])), at=trace[pos[first]].at,
                detail="black- and white-listed by one decision")

    # replay the trace against the outcomes: an email sees every event with seq <= its index,
    # and a clear sits just before the trace entry it preceded
    c_seq = np.array([seq for _, seq, _ in result.clear_seqs], dtype=np.int64)
    c_pos = np.array([p for _, _, p in result.clear_seqs], dtype=float) - 0.5
    ev_seq = np.concatenate([e_seq, c_seq])
    order = np.lexsort((np.concatenate([pos.astype(float), c_pos]), ev_seq))
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    cutoff = np.searchsorted(ev_seq[order], o_idx, side="right")  # events applied before each email
    clear_rank = np.sort(rank[len(pos):])
    k = np.searchsorted(clear_rank, cutoff, side="left") - 1
    last_clear = np.where(k >= 0, clear_rank[np.maximum(k, 0)], -1) if len(clear_rank) else np.full(len(k), -1)
    # latest listing of the email's IP among the applied events
    stride = len(order) + 1
    lkey = ip_code[:len(pos)] * stride + rank[:len(pos)]
    lsort = np.argsort(lkey)
    lkey = lkey[lsort]
    j = np.searchsorted(lkey, ip_code[len(pos):] * stride + cutoff, side="left") - 1
    jj = np.maximum(j, 0)
    hit = (j >= 0) & (lkey[jj] // stride == ip_code[len(pos):]) if len(lkey) else np.zeros(len(o_idx), bool)
    if len(lkey):
        hit &= rank[:len(pos)][lsort][jj] > last_clear
        state = np.where(hit, np.where(e_bl[lsort][jj], 1, 2), 0)
    else:
        state = np.zeros(len(o_idx), dtype=np.int64)
    expect = np.array([{"bl-hit": 1, "wl-hit": 2}.get(r, 0) for r in routes], dtype=np.int64)
    names = {0: None, 1: BLACKLIST, 2: WHITELIST}
    for k in np.flatnonzero(state != expect):
        bad("routing", index=int(o_idx[k]),
            detail=f"route {routes[k]} but replayed list state is {names[int(state[k])]}")
    if set(lists.blacklist) & set(lists.whitelist):
        for ip in sorted(set(lists.blacklist) & set(lists.whitelist)):
            bad("exclusivity", ip=format_ip(ip), detail="present on both final lists")

    # rejected mail, black-list hits included, never reaches a history-keeping SRM
    if result.kind != "el":
        ok_at = np.full(n, -1, dtype=np.int8)
        ok_at[o_idx[inside]] = should[inside]
        for i in result.feed:
            r = int(ok_at[i]) if 0 <= i < n else -1
            if r != 1:
                route = routes[int(np.flatnonzero(o_idx == i)[0])] if r == 0 else None
                bad("feed", index=i, detail=f"{route} email fed to the {result.kind} SRM")
    elif result.feed:
        bad("feed", detail="EL SRM keeps no history but was fed emails")

    counts: dict[str, int] = {}
    for v in violations:
        counts[v["type"]] = counts.get(v["type"], 0) + 1
    return {"ok": not violations, "violations": violations, "counts": counts,
            "batch_conflicts": result.conflicts, "emails": n, "outcomes": len(outcomes)}


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

def write_outcomes(result: RunResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "ip", "route", "accepted", "spam_class"])
        for o in result.outcomes:
            w.writerow([repr(o.t), format_ip(o.ip), o.route, int(o.accepted), o.spam_class])


def write_trace(trace: Sequence[TraceEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in trace:
            fh.write(json.dumps(e.to_json()) + "\n")


def read_trace(path: str | Path) -> list[TraceEntry]:
    from .emaillog import parse_ip

    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(TraceEntry(parse_ip(d["ip"]), d["at"], d["kind"], d["action"], d["score"],
                                      d.get("seq", 0)))
    return out
