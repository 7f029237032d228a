"""Evaluation protocol: one-vs-rest per-class rates, unweighted and
support-weighted averages, multi-seed mean and standard error, and Welch's
unequal-variance t-test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from notedx.errors import InputError

METRICS = ("ACC", "TNR", "FPR", "FNR", "Precision", "Recall", "F1")

# short names accepted on the command line
METRIC_ALIASES = {name.lower(): name for name in METRICS}
METRIC_ALIASES.update({"w" + name.lower(): "W" + name for name in METRICS})
METRIC_ALIASES.update({"p": "Precision", "r": "Recall", "wp": "WPrecision", "wr": "WRecall", "accuracy": "accuracy"})


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows gold, columns predicted
    classes: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion(gold: Sequence, pred: Sequence, classes: Sequence[str]) -> ConfusionMatrix:
    if len(gold) != len(pred):
        raise InputError(f"{len(gold)} gold labels but {len(pred)} predictions")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for g, p in zip(gold, pred):
        if g not in index or p not in index:
            raise InputError(f"label {g if g not in index else p!r} is not one of the classes")
        counts[index[g], index[p]] += 1
    return ConfusionMatrix(counts, list(classes))


@dataclass
class ClassMetrics:
    label: str
    tp: int
    fp: int
    fn: int
    tn: int
    values: dict[str, float]
    degenerate: list[str] = field(default_factory=list)


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def per_class_metrics(cm: ConfusionMatrix) -> list[ClassMetrics]:
    """One-vs-rest rates per class; any 0/0 is reported as 0 and flagged."""
    total = cm.total
    if total == 0:
        raise InputError("confusion matrix is empty")
    out = []
    col = cm.counts.sum(axis=0)
    row = cm.counts.sum(axis=1)
    for i, label in enumerate(cm.classes):
        tp = int(cm.counts[i, i])
        fp = int(col[i] - tp)
        fn = int(row[i] - tp)
        tn = total - tp - fp - fn
        flags: list[str] = []
        precision = _ratio(tp, tp + fp, "Precision", flags)
        recall = _ratio(tp, tp + fn, "Recall", flags)
        if precision + recall == 0:
            flags.append("F1")
            f1 = 0.0
        else:
            f1 = 2 * precision * recall / (precision + recall)
        values = {
            "ACC": (tp + tn) / total,
            "TNR": _ratio(tn, tn + fp, "TNR", flags),
            "FPR": _ratio(fp, tn + fp, "FPR", flags),
            "FNR": _ratio(fn, tp + fn, "FNR", flags),
            "Precision": precision,
            "Recall": recall,
            "F1": f1,
        }
        out.append(ClassMetrics(label, tp, fp, fn, tn, values, flags))
    return out


def aggregate(records: Sequence[Mapping[str, float]], supports: Sequence[float]):
    """Macro and support-weighted averages of every metric in ``records``."""
    supports = np.asarray(supports, dtype=np.float64)
    if len(records) != len(supports):
        raise InputError("one support value per class record is required")
    if supports.sum() <= 0:
        raise InputError("supports are all zero")
    weights = supports / supports.sum()
    names = list(records[0])
    macro = {m: float(np.mean([r[m] for r in records])) for m in names}
    weighted = {m: float(sum(w * r[m] for w, r in zip(weights, records))) for m in names}
    return macro, weighted


@dataclass
class MetricsReport:
    classes: list[str]
    per_class: list[ClassMetrics]
    macro: dict[str, float]
    weighted: dict[str, float]
    weights: list[float]
    supports: list[int]
    accuracy: float
    n: int
    seed: int | None = None
    confusion: list[list[int]] | None = None

    def value(self, key: str) -> float:
        key = METRIC_ALIASES.get(key.lower(), key)
        if key == "accuracy":
            return self.accuracy
        if key.startswith("W") and key[1:] in METRICS:
            return self.weighted[key[1:]]
        return self.macro[key]

    def to_dict(self) -> dict:
        agg = {m: self.macro[m] for m in METRICS}
        agg.update({"W" + m: self.weighted[m] for m in METRICS})
        return {
            "seed": self.seed,
            "n": self.n,
            "classes": self.classes,
            "accuracy": self.accuracy,
            "aggregate": agg,
            "per_class": [
                {"label": c.label, "support": s, "weight": w, "TP": c.tp, "FP": c.fp, "FN": c.fn, "TN": c.tn,
                 **c.values, "degenerate": c.degenerate}
                for c, s, w in zip(self.per_class, self.supports, self.weights)
            ],
            "confusion": self.confusion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per_class = [
            ClassMetrics(r["label"], r["TP"], r["FP"], r["FN"], r["TN"], {m: r[m] for m in METRICS}, r["degenerate"])
            for r in d["per_class"]
        ]
        agg = d["aggregate"]
        return cls(
            d["classes"],
            per_class,
            {m: agg[m] for m in METRICS},
            {m: agg["W" + m] for m in METRICS},
            [r["weight"] for r in d["per_class"]],
            [r["support"] for r in d["per_class"]],
            d["accuracy"],
            d["n"],
            d.get("seed"),
            d.get("confusion"),
        )


def evaluate(gold, pred, classes, seed=None) -> MetricsReport:
    cm = confusion(gold, pred, classes)
    records = per_class_metrics(cm)
    supports = cm.supports()
    macro, weighted = aggregate([r.values for r in records], supports)
    weights = (supports / supports.sum()).tolist()
    return MetricsReport(
        list(classes), records, macro, weighted, weights, supports.tolist(), cm.accuracy, cm.total, seed,
        cm.counts.tolist(),
    )


@dataclass
class AggregateReport:
    classes: list[str]
    n: int
    mean: dict[str, float]
    stderr: dict[str, float] | None
    seeds: list

    def to_dict(self) -> dict:
        return {"classes": self.classes, "n": self.n, "seeds": self.seeds, "mean": self.mean, "stderr": self.stderr}


def _report_values(r: MetricsReport) -> dict[str, float]:
    vals = {"accuracy": r.accuracy}
    vals.update({m: r.macro[m] for m in METRICS})
    vals.update({"W" + m: r.weighted[m] for m in METRICS})
    for c in r.per_class:
        vals.update({f"{c.label}/{m}": v for m, v in c.values.items()})
    return vals


def _stderr(values) -> float:
    if min(values) == max(values):
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def aggregate_seeds(reports: Sequence[MetricsReport]) -> AggregateReport:
    """Mean and standard error (sample std / sqrt(n)) of every metric over seeds."""
    if not reports:
        raise InputError("no reports to aggregate")
    classes = reports[0].classes
    if any(r.classes != classes for r in reports):
        raise InputError("reports disagree on the class set")
    table = [_report_values(r) for r in reports]
    n = len(reports)
    mean = {k: float(np.mean([t[k] for t in table])) for k in table[0]}
    stderr = None
    if n >= 2:
        stderr = {k: _stderr([t[k] for t in table]) for k in table[0]}
    return AggregateReport(classes, n, mean, stderr, [r.seed for r in reports])


# -- Welch's t-test -----------------------------------------------------------------


def _betacf(a, b, x, max_iter=10_000, tol=1e-16):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise InputError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class WelchResult:
    t: float
    df: float
    p: float

    def to_dict(self):
        return {"t": self.t, "df": self.df, "p": self.p}


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InputError("each sample needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        df = float(a.size + b.size - 2)
        if diff == 0.0:
            return WelchResult(0.0, df, 1.0)
        return WelchResult(math.copysign(math.inf, diff), df, 0.0)
    t = diff / math.sqrt(se2)
    # rescale before squaring so tiny variances do not underflow
    ra, rb = va / max(va, vb), vb / max(va, vb)
    df = (ra + rb) ** 2 / (ra**2 / (a.size - 1) + rb**2 / (b.size - 1))
    return WelchResult(float(t), float(df), t_two_sided_p(t, df))


# -- files -------------------------------------------------------------------------


def write_predictions(path, rows) -> None:
    """JSON lines ``{"id", "gold", "pred", "probs"}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps({"id": r["id"], "gold": r["gold"], "pred": r["pred"], "probs": [float(p) for p in r["probs"]]}))
            fh.write("\n")


def read_predictions(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_report(report: MetricsReport, path) -> None:
    dump_json(report.to_dict(), path)


def load_report(path) -> MetricsReport:
    with open(path, encoding="utf-8") as fh:
        return MetricsReport.from_dict(json.load(fh))
