import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdsrep.emaillog import SenderArchetype, split_by_ip, synthesize_log
from hdsrep.learners import Dataset
from hdsrep.metrics import (
    MetricError,
    RunReport,
    confusion,
    discretize,
    entropy,
    fgain,
    infogain,
    ip_ground_truth,
    mann_whitney_auc,
    rank_features,
    read_report,
    read_sweep_csv,
    report,
    roc_auc,
    write_report,
    write_roc_csv,
    write_sweep_csv,
)
from hdsrep.simulator import EmailOutcome, SimConfig, run
from hdsrep.srm import SrmConfig, SrmState, fit_srm


def outcome(accepted, spam, i=0):
    return EmailOutcome(i, float(i), 1, "srm-accept" if accepted else "srm-reject", accepted, spam)


def pairwise_auc(scored):
    """Brute force over all positive/negative pairs; ties count half."""
    pos = [s for s, y in scored if y]
    neg = [s for s, y in scored if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


# --- confusion -------------------------------------------------------------

def test_confusion_one_each():
    cc = confusion([outcome(False, 1), outcome(True, 1), outcome(False, 0), outcome(True, 0)])
    assert (cc.tp, cc.tn, cc.fp, cc.fn) == (1, 1, 1, 1)
    assert cc.error == 0.5


def test_confusion_all_ham_accepted():
    cc = confusion([outcome(True, 0) for _ in range(7)])
    assert cc.tn == cc.total == 7
    assert cc.error == 0 and cc.fpr == 0 and cc.tpr is None


def test_confusion_matches_tally():
    rng = np.random.default_rng(5)
    outs = [outcome(bool(a), int(s), i) for i, (a, s) in enumerate(rng.integers(0, 2, (20, 2)))]
    tally = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
    for o in outs:
        key = ("f" if o.accepted == bool(o.spam_class) else "t") + ("n" if o.accepted else "p")
        tally[key] += 1
    cc = confusion(outs)
    assert (cc.tp, cc.tn, cc.fp, cc.fn) == (tally["tp"], tally["tn"], tally["fp"], tally["fn"])
    assert cc.total == 20
    assert cc.error == pytest.approx((cc.fp + cc.fn) / 20)


# --- ROC / AUC ---------------------------------------------------------------

def test_auc_perfect():
    assert roc_auc([(0.9, True), (0.8, True), (0.3, False), (0.1, False)]).auc == 1.0


def test_auc_constant():
    assert roc_auc([(0.4, True), (0.4, False), (0.4, True), (0.4, False), (0.4, False)]).auc == 0.5


def test_auc_four_examples():
    scored = [(0.9, True), (0.8, False), (0.7, True), (0.1, False)]
    assert pairwise_auc(scored) == 0.75
    assert roc_auc(scored).auc == 0.75


def test_auc_single_class():
    with pytest.raises(MetricError):
        roc_auc([(0.1, True), (0.2, True)])
    with pytest.raises(MetricError):
        mann_whitney_auc([0.1, 0.2], [0, 0])


def test_roc_csv(tmp_path):
    roc = roc_auc(scores=[0.9, 0.5, 0.5, 0.1], labels=[1, 1, 0, 0])
    write_roc_csv(roc, tmp_path / "roc.csv")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr"
    assert lines[1] == "inf,0.0,0.0" and lines[-1].endswith(",1.0,1.0")
    assert len(lines) == 1 + len(roc.fpr)


@st.composite
def scored_sets(draw):
    n = draw(st.integers(2, 60))
    scores = draw(st.lists(st.integers(0, 20).map(lambda k: k / 20), min_size=n, max_size=n))
    labels = draw(st.lists(st.booleans(), min_size=n, max_size=n).filter(lambda ls: 0 < sum(ls) < len(ls)))
    return scores, labels


@given(scored_sets())
def test_auc_equals_mann_whitney(data):
    scores, labels = data
    roc = roc_auc(scores=scores, labels=labels)
    assert abs(roc.auc - mann_whitney_auc(scores, labels)) < 1e-9
    assert abs(roc.auc - pairwise_auc(list(zip(scores, labels)))) < 1e-9
    assert roc.points[0] == (0.0, 0.0) and roc.points[-1] == (1.0, 1.0)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)


# --- FGain -------------------------------------------------------------------

def test_fgain_published_figure():
    assert fgain(2_373_756, 0, 2_864_208) == pytest.approx(0.8288, abs=0.0005)


def test_fgain_edges():
    assert fgain(0, 0, 10) == 0.0
    assert fgain(6, 4, 10) == 1.0
    with pytest.raises(MetricError):
        fgain(0, 0, 0)


# --- infogain ----------------------------------------------------------------

def test_infogain_perfect_column():
    y = np.array([0, 1, 1, 0, 1, 0, 0, 0], dtype=float)
    d = Dataset(np.column_stack([y, np.ones(8)]), y, ("same", "flat"))
    assert infogain(d, "same") == pytest.approx(entropy(y))
    assert infogain(d, "flat") == 0.0
    assert rank_features(d)[0][0] == "same"


def test_infogain_hand_fixture():
    y = np.array([1, 1, 1, 0, 0, 0, 0, 1], dtype=float)
    c = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=float)
    # H(y) = 1 bit; each half holds a 3:1 split, H = -(.75 log2 .75 + .25 log2 .25)
    h31 = -(0.75 * math.log2(0.75) + 0.25 * math.log2(0.25))
    assert infogain(Dataset(c[:, None], y, ("c",)), "c") == pytest.approx(1.0 - h31)


def test_infogain_constant_target():
    assert infogain(Dataset(np.arange(8.0)[:, None], np.ones(8), ("c",)), 0) == 0.0


def test_discretize_equal_frequency():
    x = np.arange(100.0)
    bins = discretize(x, 10)
    assert np.array_equal(np.bincount(bins), np.full(10, 10))
    assert np.array_equal(discretize([3.0, 1.0, 3.0], 10), [1, 0, 1])


# --- reports -----------------------------------------------------------------

def test_report_all_ham_whitelist():
    syn = synthesize_log([(SenderArchetype("benign", rate=6.0, spam_prob_before=0.0), 10)], 1440, 2)
    rep = report(run(syn.log, SrmState("heuristic", SrmConfig())))
    assert rep.error == 0 and rep.bl_size == 0 and rep.fpr == 0 and rep.tpr is None
    assert rep.fgain > 0.95
    assert rep.auc is None and rep.roc is None  # no spam sender to rank


@pytest.fixture(scope="module")
def mixed_run():
    mix = [(SenderArchetype("benign", rate=3.0, spam_prob_before=0.02), 30),
           (SenderArchetype("spammer", rate=3.0, spam_prob_before=0.9), 15),
           (SenderArchetype("compromised", rate=3.0, spam_prob_after=0.9), 15)]
    syn = synthesize_log(mix, 1440, 12)
    tr, va = split_by_ip(syn.log, 0.5, 12)
    return run(va, fit_srm("el", tr, SrmConfig()), SimConfig(clear_period=720.0))


def test_report_recomputed_from_traces(mixed_run):
    res = mixed_run
    rep = report(res, {"seed": 12})
    routes = [o.route for o in res.outcomes]
    acc = np.array([o.accepted for o in res.outcomes])
    spam = np.array([o.spam_class for o in res.outcomes], dtype=bool)
    tp, fp = int((~acc & spam).sum()), int((~acc & ~spam).sum())
    tn, fn = int((acc & ~spam).sum()), int((acc & spam).sum())
    assert (rep.tp, rep.tn, rep.fp, rep.fn) == (tp, tn, fp, fn)
    assert rep.error == pytest.approx((fp + fn) / len(acc))
    assert rep.tpr == pytest.approx(tp / (tp + fn)) and rep.fpr == pytest.approx(fp / (fp + tn))
    assert rep.wl_hits == routes.count("wl-hit") and rep.bl_hits == routes.count("bl-hit")
    assert rep.fgain == pytest.approx((rep.wl_hits + rep.bl_hits) / len(acc))
    listed = {e.ip for e in res.trace if e.action == "blacklist"}
    assert rep.bl_size == len(listed)
    # IP-level ROC: last trace score per IP against whole-span spammingness > blt
    last = {}
    for e in res.trace:
        last[e.ip] = e.score
    truth = {}
    for o in res.outcomes:
        truth.setdefault(o.ip, []).append(o.spam_class)
    ips = sorted(last)
    scored = [(last[ip], np.mean(truth[ip]) > 0.5) for ip in ips]
    assert rep.roc_ips == len(ips)
    assert rep.auc == pytest.approx(pairwise_auc(scored), abs=1e-12)
    assert ip_ground_truth(res) == {ip: bool(np.mean(v) > 0.5) for ip, v in truth.items()}


def test_report_json_roundtrip(tmp_path, mixed_run):
    rep = report(mixed_run, {"seed": 12})
    write_report(rep, tmp_path / "r.json")
    back = read_report(tmp_path / "r.json")
    assert back.to_dict() == rep.to_dict()
    assert isinstance(back, RunReport) and back.roc.auc == rep.auc


def test_sweep_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    rows = [{"n": n, "window_len": 0.25 * 2 ** (n - 1), "error": float(rng.random()), "fpr": float(rng.random()),
             "tpr": None if n == 3 else float(rng.random()), "bl_size": int(rng.integers(100)),
             "wl_hits": int(rng.integers(10**6)), "auc": float(rng.random())} for n in range(1, 15)]
    p = tmp_path / "sweep.csv"
    write_sweep_csv(rows, p)
    assert p.read_text().splitlines()[0] == "n,window_len,error,fpr,tpr,bl_size,wl_hits,auc"
    assert read_sweep_csv(p) == rows
