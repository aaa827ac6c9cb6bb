"""Benchmark mixes, experiment presets and the train/validate/report pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .emaillog import ClassDist, EmailLog, SenderArchetype, SyntheticLog, split_by_ip, synthesize_log
from .hds import HdsConfig
from .metrics import RunReport, report
from .simulator import RunResult, SimConfig, audit, run
from .srm import SRM_KINDS, SrmConfig, SrmState, Thresholds, fit_srm

WEEK = 168 * 60.0
BATCH_PERIODS = (0.5, 1.0, 2.0, 5.0, 20.0, 60.0)
PRESETS = ("continuous-comparison", "batch-frequency-sweep", "history-length-sweep", "custom")


def _prefixes(rng: np.random.Generator, count: int, first_octets: Sequence[int]) -> tuple[int, ...]:
    a = rng.choice(first_octets, count)
    b = rng.integers(0, 256, count)
    return tuple(int(x) << 8 | int(y) for x, y in zip(a, b))


def standard_mix(ips: int = 2000, erratic_share: float = 0.12, compromised_share: float = 0.14,
                 layout_seed: int = 20110) -> list[tuple[SenderArchetype, int]]:
    """Default archetype mix: about 12% spam by volume, >= 25% behaviour-changing senders.

    Per-IP volume is heavy-tailed (log-normal rate multipliers).  Bots are spammers that send in
    short bursts and then go silent.  ``layout_seed`` fixes which /16 blocks
    each population lives in; it is independent of the synthesis seed.
    """
    rng = np.random.default_rng(layout_seed)
    clean = _prefixes(rng, 60, [24, 62, 80, 81, 82, 84, 85, 87, 91, 193, 194, 195, 212, 213, 217])
    dirty = _prefixes(rng, 25, [58, 59, 110, 111, 112, 113, 114, 115, 116, 117, 118, 119, 121, 122, 123, 186, 187, 189, 190, 201])
    mixed = clean[:20] + dirty[:10]
    # residential ranges carry quiet home senders next to spammers

    spam_like_ham = ClassDist(nr_mean=3.0, ae_mean=1.2, pt_median=60.0, pt_sigma=0.6)
    n_err = int(round(ips * erratic_share))
    n_comp = int(round(ips * compromised_share))
    n_spam = int(round(ips * 0.04))
    n_bot = int(round(ips * 0.06))
    n_busy = int(round(ips * 0.15))
    n_benign = ips - n_err - n_comp - n_spam - n_bot - n_busy
    return [
        (SenderArchetype("benign", rate=0.2, spam_prob_before=0.02, prefixes=clean + dirty, rate_sigma=1.0,
                         name="benign"), n_benign),
        (SenderArchetype("benign", rate=2.4, spam_prob_before=0.01, prefixes=clean, rate_sigma=1.0,
                         name="benign-mta"), n_busy),
        (SenderArchetype("spammer", rate=0.5, spam_prob_before=0.85, ham=spam_like_ham, prefixes=dirty,
                         rate_sigma=1.0, name="spammer"), n_spam),
        (SenderArchetype("spammer", rate=0.1, spam_prob_before=0.95, prefixes=mixed, burst_span=30.0,
                         bursts=2.0, name="bot"), n_bot),
        (SenderArchetype("compromised", rate=0.4, spam_prob_before=0.02, spam_prob_after=0.9,
                         prefixes=clean, rate_sigma=1.0, name="compromised"), n_comp),
        (SenderArchetype("erratic", rate=1.2, spam_prob_before=0.03, spam_prob_after=0.9, flip_period=360.0,
                         spam_spell=90.0, prefixes=mixed, rate_sigma=1.0, name="erratic"), n_err),
    ]


def erratic_mix(ips: int = 2000, layout_seed: int = 20110) -> list[tuple[SenderArchetype, int]]:
    """Benchmark variant in which 30% of the IPs flip between spamming and legitimate sending."""
    return standard_mix(ips, erratic_share=0.30, compromised_share=0.06, layout_seed=layout_seed)


def benchmark_log(seed: int, ips: int = 2000, duration: float = WEEK, mix: str = "standard") -> SyntheticLog:
    arch = erratic_mix(ips) if mix == "erratic" else standard_mix(ips)
    return synthesize_log(arch, duration, seed)


DAY = 1440.0


@dataclass
class Cell:
    kind: str
    result: RunResult
    report: RunReport
    audit: dict


def prepare(log: EmailLog, seed: int, train_fraction: float = 0.5) -> tuple[EmailLog, EmailLog]:
    return split_by_ip(log, train_fraction, seed)


def fit_all(train_log: EmailLog, kinds: Sequence[str], cfg: SrmConfig) -> dict[str, SrmState]:
    return {k: fit_srm(k, train_log, cfg) for k in kinds}


def evaluate(state: SrmState, validation: EmailLog, sim: SimConfig, params: dict | None = None) -> Cell:
    res = run(validation, state, sim)
    return Cell(state.kind, res, report(res, params), audit(res))


def compare(seed: int, kinds: Sequence[str] = SRM_KINDS, srm_cfg: SrmConfig | None = None,
            sim: SimConfig | None = None, ips: int = 2000, duration: float = WEEK,
            mix: str = "standard") -> dict[str, Cell]:
    """Generate a benchmark log, split it by IP, train every SRM and run each once."""
    srm_cfg = srm_cfg or SrmConfig()
    sim = sim or SimConfig(clear_period=DAY)
    syn = benchmark_log(seed, ips, duration, mix)
    tr, va = prepare(syn.log, seed)
    states = fit_all(tr, kinds, srm_cfg)
    return {k: evaluate(states[k], va, sim, {"seed": seed}) for k in kinds}


# ---------------------------------------------------------------------------
# Experiment specs
# ---------------------------------------------------------------------------

class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    """Fully resolved description of one experiment; serialises to the run directory."""

    preset: str = "custom"
    seed: int = 1
    log: str | None = None  # path to a CSV log; None means synthesise
    ips: int = 2000
    duration: float = WEEK
    mix: str = "standard"
    train_fraction: float = 0.5
    srm: list[str] = field(default_factory=lambda: list(SRM_KINDS))
    learner: str = "naive-bayes"
    mode: str = "continuous"
    batch_period: float | None = None
    clear_period: float | None = DAY
    blt: float = 0.5
    wlt: float = 0.05
    epsilon: float = 0.5
    history: float = 960.0
    w0: float = 60.0
    windows: int = 5
    pred: float = 60.0
    cadence: float | None = None
    batch_periods: list[float] = field(default_factory=list)
    window_counts: list[int] = field(default_factory=list)

    def validate(self) -> "ExperimentSpec":
        if self.preset not in PRESETS:
            raise SpecError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        bad = [k for k in self.srm if k not in SRM_KINDS]
        if bad or not self.srm:
            raise SpecError(f"srm must be a non-empty subset of {SRM_KINDS}, got {self.srm}")
        if self.mix not in ("standard", "erratic"):
            raise SpecError(f"mix must be standard or erratic, got {self.mix!r}")
        if not self.duration > 0:
            raise SpecError(f"duration must be > 0 minutes, got {self.duration}")
        if self.ips < 1:
            raise SpecError(f"ips must be >= 1, got {self.ips}")
        if not 0.0 < self.train_fraction < 1.0:
            raise SpecError(f"train_fraction must be in (0,1), got {self.train_fraction}")
        if self.mode == "batch" and self.batch_period is None and not self.batch_periods:
            raise SpecError("batch mode needs --batch-period")
        if self.mode == "continuous" and self.batch_period is not None:
            raise SpecError("--batch-period given but mode is continuous; add --mode batch")
        if any(not b > 0 for b in self.batch_periods):
            raise SpecError(f"batch periods must be > 0, got {self.batch_periods}")
        if any(int(n) != n or n < 1 for n in self.window_counts):
            raise SpecError(f"window counts must be integers >= 1, got {self.window_counts}")
        try:
            self.sim_config(self.batch_periods[0] if self.batch_period is None and self.batch_periods else None)
            self.srm_config()
        except ValueError as e:
            raise SpecError(str(e)) from None
        return self

    @property
    def thresholds(self) -> Thresholds:
        return Thresholds(self.blt, self.wlt, self.epsilon)

    def hds_config(self, windows: int | None = None) -> HdsConfig:
        return HdsConfig(self.w0, self.windows if windows is None else windows, self.pred, self.cadence)

    def srm_config(self, windows: int | None = None) -> SrmConfig:
        return SrmConfig(self.learner, self.hds_config(windows), self.history, self.thresholds)

    def sim_config(self, batch_period: float | None = None) -> SimConfig:
        bp = self.batch_period if batch_period is None else batch_period
        return SimConfig(self.mode, bp if self.mode == "batch" else None, self.clear_period)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown spec keys: {sorted(extra)}")
        return cls(**d)


PRESET_DEFAULTS: dict[str, dict] = {
    "continuous-comparison": {"mode": "continuous", "srm": list(SRM_KINDS), "w0": 60.0, "windows": 5, "pred": 60.0},
    "batch-frequency-sweep": {"mode": "batch", "srm": list(SRM_KINDS), "w0": 60.0, "windows": 5, "pred": 60.0,
                              "batch_periods": list(BATCH_PERIODS)},
    "history-length-sweep": {"mode": "continuous", "srm": ["hds-spam"], "w0": 0.25, "pred": 60.0,
                             "cadence": 60.0, "window_counts": list(range(1, 15))},
    "custom": {},
}


def resolve_spec(preset: str = "custom", base: dict | None = None, overrides: dict | None = None) -> ExperimentSpec:
    """Preset defaults, then a spec file's values, then explicit overrides (flags win)."""
    if preset not in PRESETS:
        raise SpecError(f"preset must be one of {PRESETS}, got {preset!r}")
    d: dict = {}
    d.update(PRESET_DEFAULTS[preset])
    d.update(base or {})
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    d["preset"] = preset
    if preset == "history-length-sweep" and "windows" not in (overrides or {}) and d.get("window_counts"):
        d["windows"] = max(d["window_counts"])
    return ExperimentSpec.from_dict(d).validate()


def load_log(spec: ExperimentSpec) -> tuple[EmailLog, SyntheticLog | None]:
    if spec.log:
        from .emaillog import parse_log

        return parse_log(spec.log, duration=None), None
    syn = benchmark_log(spec.seed, spec.ips, spec.duration, spec.mix)
    return syn.log, syn


def _sweep_row(rep: RunReport, **extra) -> dict:
    return {**extra, "error": rep.error, "fpr": rep.fpr, "tpr": rep.tpr, "bl_size": rep.bl_size,
            "wl_hits": rep.wl_hits, "auc": rep.auc}


def run_cells(spec: ExperimentSpec, log: EmailLog):
    """Yield (key, Cell) for every cell the experiment spec asks for, in a fixed order."""
    tr, va = prepare(log, spec.seed, spec.train_fraction)
    if spec.preset == "history-length-sweep":
        for n in spec.window_counts:
            cfg = spec.srm_config(n)
            for kind in spec.srm:
                yield {"srm": kind, "n": n, "window_len": spec.w0 * 2 ** (n - 1)}, \
                    evaluate(fit_srm(kind, tr, cfg), va, spec.sim_config(), {"seed": spec.seed, "n": n})
        return
    cfg = spec.srm_config()
    states = fit_all(tr, spec.srm, cfg)
    periods = spec.batch_periods if spec.mode == "batch" and spec.batch_periods else [spec.batch_period]
    for kind in spec.srm:
        for bp in periods:
            key = {"srm": kind} if bp is None else {"srm": kind, "batch_period": bp}
            yield key, evaluate(states[kind], va, spec.sim_config(bp), {"seed": spec.seed, **key})
