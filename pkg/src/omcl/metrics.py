"""Open-set evaluation: closed-set accuracy, AUROC and OSCR.

Known test samples are positives.  A sample's score is the model's largest
known-class probability, so unknowns should score low.

OSCR convention: thresholds are the distinct scores in descending order and
a sample is accepted when ``score >= threshold``.  The curve of
``(FPR, CCR)`` points is closed on the left by ``(0, CCR at the strictest
threshold)`` and on the right by ``FPR = 1``, then integrated with the
trapezoidal rule.

Each metric has a brute-force twin (``*_bruteforce``) used as a test oracle.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

OSCR_CONVENTION = "accept if score >= threshold; trapezoidal; left end (0, CCR at max score), right end FPR=1"


class MetricInputError(ValueError):
    pass


def _nonempty(name, arr):
    arr = np.asarray(arr)
    if arr.size == 0:
        raise MetricInputError(f"{name}: empty input")
    return arr


def closed_accuracy(predicted, true) -> float:
    predicted = _nonempty("closed_accuracy", predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape:
        raise MetricInputError("closed_accuracy: predicted/true length mismatch")
    return float(np.mean(predicted == true))


def auroc(known_scores, unknown_scores) -> float:
    """Mann-Whitney AUROC with mid-ranks: P(known > unknown) + P(tie) / 2."""
    known = _nonempty("auroc", known_scores).astype(np.float64).ravel()
    unknown = _nonempty("auroc", unknown_scores).astype(np.float64).ravel()
    ranks = rankdata(np.concatenate([known, unknown]))
    n_pos, n_neg = len(known), len(unknown)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_bruteforce(known_scores, unknown_scores) -> float:
    known = _nonempty("auroc", known_scores).astype(np.float64).ravel()
    unknown = _nonempty("auroc", unknown_scores).astype(np.float64).ravel()
    wins = 0.0
    for k in known:
        for u in unknown:
            wins += 1.0 if k > u else 0.5 if k == u else 0.0
    return wins / (len(known) * len(unknown))


def oscr_curve(known_scores, known_correct, unknown_scores):
    """Return ``(thresholds, fpr, ccr)`` arrays, thresholds descending."""
    ks = _nonempty("oscr", known_scores).astype(np.float64).ravel()
    kc = np.asarray(known_correct, dtype=bool).ravel()
    us = _nonempty("oscr", unknown_scores).astype(np.float64).ravel()
    if kc.shape != ks.shape:
        raise MetricInputError("oscr: known_correct must match known_scores")
    thresholds = np.unique(np.concatenate([ks, us]))[::-1]
    correct_sorted = np.sort(ks[kc])
    unknown_sorted = np.sort(us)
    # count of values >= threshold
    ccr = (len(correct_sorted) - np.searchsorted(correct_sorted, thresholds, side="left")) / len(ks)
    fpr = (len(unknown_sorted) - np.searchsorted(unknown_sorted, thresholds, side="left")) / len(us)
    return thresholds, fpr, ccr


def _close_and_integrate(fpr, ccr) -> float:
    x = np.concatenate([[0.0], fpr])
    y = np.concatenate([[ccr[0]], ccr])
    if x[-1] < 1.0:
        x = np.append(x, 1.0)
        y = np.append(y, y[-1])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def oscr(known_scores, known_correct, unknown_scores) -> float:
    _, fpr, ccr = oscr_curve(known_scores, known_correct, unknown_scores)
    return _close_and_integrate(fpr, ccr)


def oscr_bruteforce(known_scores, known_correct, unknown_scores) -> float:
    ks = _nonempty("oscr", known_scores)
    us = _nonempty("oscr", unknown_scores)
    pairs = [(float(s), bool(c)) for s, c in zip(np.ravel(ks), np.ravel(known_correct))]
    unknown = [float(s) for s in np.ravel(us)]
    fpr, ccr = [], []
    for theta in sorted(set(p[0] for p in pairs) | set(unknown), reverse=True):
        ccr.append(sum(1 for s, c in pairs if c and s >= theta) / len(pairs))
        fpr.append(sum(1 for s in unknown if s >= theta) / len(unknown))
    return _close_and_integrate(np.array(fpr), np.array(ccr))


def roc_curve(known_scores, unknown_scores):
    """Return ``(thresholds, fpr, tpr)`` with the same ``>=`` convention."""
    ks = np.sort(_nonempty("roc", known_scores).astype(np.float64).ravel())
    us = np.sort(_nonempty("roc", unknown_scores).astype(np.float64).ravel())
    thresholds = np.unique(np.concatenate([ks, us]))[::-1]
    tpr = (len(ks) - np.searchsorted(ks, thresholds, side="left")) / len(ks)
    fpr = (len(us) - np.searchsorted(us, thresholds, side="left")) / len(us)
    return thresholds, fpr, tpr


def curve_csv(thresholds, fpr, second, second_name: str = "ccr") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "fpr", second_name])
    for row in zip(thresholds, fpr, second):
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    acc_c: float
    auroc_o: float
    oscr_o: float
    trial: int = 0
    n_known: int = 0
    n_unknown: int = 0
    config_digest: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("acc_c", "auroc_o", "oscr_o"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise MetricInputError(f"{name}={value} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps({"oscr_convention": OSCR_CONVENTION, **asdict(self)}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        data.pop("oscr_convention", None)
        return cls(**data)


def evaluate_scores(known_pred, known_true, known_scores, unknown_scores, **kw) -> EvalReport:
    known_pred, known_true = np.asarray(known_pred), np.asarray(known_true)
    correct = known_pred == known_true
    return EvalReport(
        acc_c=closed_accuracy(known_pred, known_true),
        auroc_o=auroc(known_scores, unknown_scores),
        oscr_o=oscr(known_scores, correct, unknown_scores),
        n_known=len(known_true),
        n_unknown=len(np.asarray(unknown_scores)),
        **kw,
    )


@dataclass
class TrialSummary:
    mean: dict[str, float]
    std: dict[str, float]
    n_trials: int
    config_digest: str


def aggregate_trials(reports) -> TrialSummary:
    """Mean and sample standard deviation (0 for a single trial) per metric."""
    reports = list(reports)
    if not reports:
        raise MetricInputError("aggregate_trials: no reports")
    digests = {r.config_digest for r in reports}
    if len(digests) > 1:
        raise MetricInputError(f"aggregate_trials: mixed configs {sorted(digests)}")
    mean, std = {}, {}
    for name in ("acc_c", "auroc_o", "oscr_o"):
        values = np.array([getattr(r, name) for r in reports])
        mean[name] = float(values.mean())
        std[name] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return TrialSummary(mean, std, len(reports), digests.pop())


def format_table(rows: dict[str, TrialSummary]) -> str:
    """Render ``label -> summary`` as a fixed-width percent table."""
    width = max([len("method")] + [len(k) for k in rows])
    lines = [f"{'method':<{width}}  {'Acc_c%':>12}  {'AUROC_o%':>12}  {'OSCR_o%':>12}  trials"]
    for label, summary in rows.items():
        cells = []
        for name in ("acc_c", "auroc_o", "oscr_o"):
            mu, sd = 100 * summary.mean[name], 100 * summary.std[name]
            cells.append(f"{mu:6.1f} ±{sd:4.1f}" if not math.isnan(sd) else f"{mu:6.1f}")
        lines.append(f"{label:<{width}}  " + "  ".join(f"{c:>12}" for c in cells) + f"  {summary.n_trials}")
    lines.append(f"OSCR: {OSCR_CONVENTION}")
    return "\n".join(lines)
