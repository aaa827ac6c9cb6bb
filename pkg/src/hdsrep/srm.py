"""Sender reputation mechanisms.

Four kinds share one state object:

* ``heuristic``  lists an IP on its recent spam fraction alone;
* ``el``         scores single emails with a model trained on raw log rows;
* ``hds-spam``   gates the heuristic rule with a model of future spam fraction;
* ``hds-err``    applies the heuristic rule only to senders predicted stable.

Heuristic and HDS kinds keep a per-IP history of the emails they were fed;
the simulator controls what gets fed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .emaillog import EL_FEATURE_NAMES, EmailLog, EmailRecord, subnet_features
from .hds import HdsConfig, SenderHistory, build_hds, hds_feature_names, hds_query_rows
from .learners import Dataset, Model, train

SRM_KINDS = ("heuristic", "el", "hds-spam", "hds-err")
BLACKLIST, WHITELIST, NONE = "blacklist", "whitelist", "none"


class SrmError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    blt: float = 0.5
    wlt: float = 0.05
    epsilon: float = 0.5

    def __post_init__(self):
        for name in ("blt", "wlt"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        if not self.wlt < self.blt:
            raise ValueError(f"wlt ({self.wlt}) must be < blt ({self.blt})")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


class Verdict(NamedTuple):
    ip: int
    action: str
    score: float
    at: float


@dataclass(frozen=True)
class SrmConfig:
    learner: str = "naive-bayes"
    hds: HdsConfig = HdsConfig()
    history: float = 960.0  # heuristic look-back, minutes
    thresholds: Thresholds = Thresholds()
    hyper: dict = field(default_factory=dict)


@dataclass(eq=False)
class SrmState:
    kind: str
    cfg: SrmConfig
    model: Model | None = None
    histories: dict[int, SenderHistory] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SRM_KINDS:
            raise SrmError(f"unknown SRM kind {self.kind!r}; expected one of {SRM_KINDS}")
        if self.kind == "heuristic" and self.model is not None:
            raise SrmError("heuristic SRM holds no model")

    @property
    def thresholds(self) -> Thresholds:
        return self.cfg.thresholds

    @property
    def uses_history(self) -> bool:
        return self.kind != "el"

    def observe(self, rec: EmailRecord) -> None:
        """Feed one labeled email into the visible history."""
        h = self.histories.get(rec.ip)
        if h is None:
            h = self.histories[rec.ip] = SenderHistory()
        h.append(rec.t, rec.nr, rec.ae, rec.pt, rec.spam_class)

    def fresh(self) -> "SrmState":
        """Same trained model, empty visible history."""
        return SrmState(self.kind, self.cfg, self.model)

    def _hist_spammingness(self, ip: int, now: float, length: float) -> float | None:
        h = self.histories.get(ip)
        if h is None:
            return None
        return h.spammingness(now - length, now)


def _rule(value: float | None, th: Thresholds) -> str:
    if value is None:
        return NONE
    if value > th.blt:
        return BLACKLIST
    if value < th.wlt:
        return WHITELIST
    return NONE


def _require(state: SrmState, *kinds: str) -> None:
    if state.kind not in kinds:
        raise SrmError(f"operation needs SRM kind {'/'.join(kinds)}, state is {state.kind}")
    if state.kind != "heuristic" and state.model is None:
        raise SrmError(f"{state.kind} SRM has no trained model")


def heuristic_decide(state: SrmState, ip: int, now: float) -> Verdict:
    _require(state, "heuristic")
    y = state._hist_spammingness(ip, now, state.cfg.history)
    return Verdict(ip, _rule(y, state.thresholds), 0.5 if y is None else y, now)


def el_row(rec: EmailRecord) -> list[float]:
    return [*subnet_features(rec.ip), rec.nr, rec.ae, rec.pt, rec.t]


def el_verdict(ip: int, score: float, now: float, th: Thresholds) -> Verdict:
    return Verdict(ip, _rule(score, th), score, now)


def el_decide(state: SrmState, record: EmailRecord) -> Verdict:
    _require(state, "el")
    score = float(state.model.predict_score(el_row(record))[0])
    return el_verdict(record.ip, score, record.t, state.thresholds)


def _hds_spam_verdict(ip, now, p, hist, th: Thresholds) -> Verdict:
    if p > 0.5 and hist is not None and hist > th.blt:
        action = BLACKLIST
    elif p < 0.5 and hist is not None and hist < th.wlt:
        action = WHITELIST
    else:
        action = NONE
    return Verdict(ip, action, p, now)


def _hds_err_verdict(ip, now, p_erratic, hist, th: Thresholds) -> Verdict:
    stability = 1.0 - p_erratic
    if p_erratic >= th.epsilon:
        action = NONE
    else:
        action = _rule(hist, th)
    y = 0.5 if hist is None else hist
    return Verdict(ip, action, float(min(max(stability * y, 0.0), 1.0)), now)


def hds_decide_many(state: SrmState, ips: Sequence[int], now: float) -> list[Verdict]:
    """HDS verdicts for several IPs at one reference time (one model call)."""
    _require(state, "hds-spam", "hds-err")
    cfg = state.cfg.hds
    th = state.thresholds
    out: list[Verdict | None] = [None] * len(ips)
    live = []
    for i, ip in enumerate(ips):
        h = state.histories.get(ip)
        if h is None or h.size == 0:
            out[i] = Verdict(ip, NONE, 0.5, now)
        else:
            live.append(i)
    if live:
        X = hds_query_rows(state.histories, [ips[i] for i in live], now, cfg)
        p = state.model.predict_score(X)
        # spam mean of the largest window
        hist_col = (cfg.n - 1) * 14 + 10
        count_col = (cfg.n - 1) * 14 + 12
        for k, i in enumerate(live):
            hist = float(X[k, hist_col]) if X[k, count_col] > 0 else None
            if state.kind == "hds-spam":
                out[i] = _hds_spam_verdict(ips[i], now, float(p[k]), hist, th)
            else:
                out[i] = _hds_err_verdict(ips[i], now, float(p[k]), hist, th)
    return out


def hds_spam_decide(state: SrmState, ip: int, now: float) -> Verdict:
    _require(state, "hds-spam")
    return hds_decide_many(state, [ip], now)[0]


def hds_err_decide(state: SrmState, ip: int, now: float) -> Verdict:
    _require(state, "hds-err")
    return hds_decide_many(state, [ip], now)[0]


def decide(state: SrmState, ip: int, now: float, record: EmailRecord | None = None) -> Verdict:
    if state.kind == "heuristic":
        return heuristic_decide(state, ip, now)
    if state.kind == "el":
        if record is None:
            raise SrmError("EL SRM decides on an email record")
        return el_decide(state, record)
    return hds_decide_many(state, [ip], now)[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def hds_training_set(train_log: EmailLog, kind: str, cfg: SrmConfig) -> Dataset:
    table = build_hds(train_log, cfg.hds)
    d = table.defined
    if not d.any():
        raise SrmError(f"no HDS rows with a defined target for {cfg.hds}")
    if kind == "hds-spam":
        y = (table.target_spammingness[d] > 0.5).astype(float)
    else:
        y = (table.target_erraticness[d] > cfg.thresholds.epsilon).astype(float)
    return Dataset(table.X[d], y, tuple(hds_feature_names(cfg.hds)))


def fit_srm(kind: str, train_log: EmailLog, cfg: SrmConfig | None = None) -> SrmState:
    """Train the model behind an SRM on a (training) log; heuristic needs none."""
    cfg = cfg or SrmConfig()
    if kind not in SRM_KINDS:
        raise SrmError(f"unknown SRM kind {kind!r}; expected one of {SRM_KINDS}")
    if kind == "heuristic":
        return SrmState(kind, cfg)
    if not len(train_log):
        raise SrmError("training log is empty")
    if kind == "el":
        data = Dataset(train_log.el_features(), train_log.spam_class.astype(float), EL_FEATURE_NAMES)
    else:
        data = hds_training_set(train_log, kind, cfg)
    return SrmState(kind, cfg, train(cfg.learner, data, **cfg.hyper))


def observe_all(state: SrmState, records: Iterable[EmailRecord]) -> None:
    for r in records:
        state.observe(r)
