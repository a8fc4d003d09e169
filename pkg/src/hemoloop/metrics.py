"""Case-level evaluation: confusion metrics, Dice, ROC/AUC, threshold
calibration, and report export (CSV and self-contained SVG charts)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInput, OneClassOnly, ShapeMismatch, UnsupportedFormat

POSITIVE = "pos"
NEGATIVE = "neg"

CSV_HEADER = "model,partition,dice,sens,spec,auc,accu,preci,f1"


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(scores, labels, threshold: float) -> ConfusionCounts:
    """Count outcomes with 'predicted positive' meaning score >= threshold."""
    if len(scores) == 0:
        raise EmptyInput("no scores")
    if len(scores) != len(labels):
        raise ValueError("scores and labels must have equal length")
    tp = fp = tn = fn = 0
    for score, label in zip(scores, labels):
        if not math.isfinite(score):
            raise ValueError(f"non-finite score {score}")
        predicted_pos = score >= threshold
        if label == POSITIVE:
            if predicted_pos:
                tp += 1
            else:
                fn += 1
        elif label == NEGATIVE:
            if predicted_pos:
                fp += 1
            else:
                tn += 1
        else:
            raise ValueError(f"label must be {POSITIVE!r} or {NEGATIVE!r}, got {label!r}")
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def basic_metrics(c: ConfusionCounts) -> dict[str, float]:
    """Sens/spec/accu/preci/f1 with zero-denominator conventions pinned to 0."""
    sens = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 0.0
    spec = c.tn / (c.tn + c.fp) if (c.tn + c.fp) else 0.0
    accu = (c.tp + c.tn) / c.total if c.total else 0.0
    preci = c.tp / (c.tp + c.fp) if (c.tp + c.fp) else 0.0
    f1 = 2 * preci * sens / (preci + sens) if (preci + sens) else 0.0
    return {"sens": sens, "spec": spec, "accu": accu, "preci": preci, "f1": f1}


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Overlap 2|A&B| / (|A|+|B|); two empty masks count as perfect agreement."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    size_a = int(a.sum())
    size_b = int(b.sum())
    if size_a == 0 and size_b == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (size_a + size_b)


def roc_auc(scores, labels) -> tuple[float, list[tuple[float, float, float]]]:
    """ROC by sweeping every distinct score threshold, AUC by trapezoids.

    Returns (auc, points) with points = [(fpr, tpr, threshold), ...] running
    from (0, 0) at threshold +inf to (1, 1) at the lowest score. Tied scores
    collapse onto one point, which makes the trapezoidal area equal the
    Mann-Whitney estimator with the half-tie rule.
    """
    n_pos = sum(1 for lab in labels if lab == POSITIVE)
    n_neg = sum(1 for lab in labels if lab == NEGATIVE)
    if n_pos + n_neg != len(labels):
        raise ValueError("labels must all be pos or neg")
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("need at least one positive and one negative case")

    order = sorted(zip(scores, labels), key=lambda p: -p[0])
    points: list[tuple[float, float, float]] = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    while i < len(order):
        threshold = order[i][0]
        while i < len(order) and order[i][0] == threshold:
            if order[i][1] == POSITIVE:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / n_neg, tp / n_pos, threshold))

    auc = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return auc, points


def sens_at_spec(scores, labels, min_spec: float = 0.9) -> float:
    """Best sensitivity achievable while holding specificity >= min_spec."""
    _, points = roc_auc(scores, labels)
    best = 0.0
    for fpr, tpr, _ in points:
        if fpr <= 1.0 - min_spec + 1e-12:
            best = max(best, tpr)
    return best


# --- threshold calibration ----------------------------------------------------

@dataclass
class CalibrationMap:
    """Monotone piecewise-linear map from raw score to calibrated confidence.

    Built by isotonic pooling over validation scores; constant beyond the
    observed score range. An empty map is the identity.
    """

    xs: list[float] = field(default_factory=list)
    ys: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.xs) != len(self.ys):
            raise ValueError("xs and ys must have equal length")
        if any(b < a for a, b in zip(self.ys, self.ys[1:])):
            raise ValueError("calibration map must be non-decreasing")

    @property
    def is_identity(self) -> bool:
        return not self.xs

    def apply(self, value):
        if self.is_identity:
            return value
        return np.interp(value, self.xs, self.ys)

    def to_json(self) -> dict:
        return {"xs": list(self.xs), "ys": list(self.ys)}

    @classmethod
    def from_json(cls, obj) -> "CalibrationMap":
        if obj is None:
            return cls()
        return cls(xs=list(obj["xs"]), ys=list(obj["ys"]))


def pav_isotonic(values: list[float], weights: list[float]) -> list[float]:
    """Pool-adjacent-violators fit of a non-decreasing sequence.

    Returns the fitted value for each input position (weighted mean of its
    pooled block).
    """
    blocks: list[list[float]] = []  # [sum, weight, count]
    for v, w in zip(values, weights):
        blocks.append([v * w, w, 1])
        while len(blocks) > 1 and blocks[-2][0] / blocks[-2][1] > blocks[-1][0] / blocks[-1][1]:
            s, w2, c = blocks.pop()
            blocks[-1][0] += s
            blocks[-1][1] += w2
            blocks[-1][2] += c
    fitted: list[float] = []
    for s, w, c in blocks:
        fitted.extend([s / w] * c)
    return fitted


def calibrate_threshold(scores, labels, method: str = "youden"):
    """Pick the operating threshold and fit the score->confidence map.

    The threshold is the midpoint between adjacent distinct scores that
    maximizes Youden's J = sens + spec - 1, ties resolved toward the higher
    threshold (favoring specificity). The returned CalibrationMap is the
    isotonic fit of the empirical positive rate at each distinct score,
    interpolated linearly.
    """
    if method != "youden":
        raise ValueError(f"unknown calibration method {method!r}")
    n_pos = sum(1 for lab in labels if lab == POSITIVE)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("need both classes to calibrate")

    distinct = sorted(set(scores))
    candidates = [(a + b) / 2.0 for a, b in zip(distinct, distinct[1:])]
    if not candidates:
        candidates = [distinct[0]]

    best_threshold = None
    best_j = -math.inf
    for t in candidates:  # ascending, so >= keeps the highest tied candidate
        c = confusion(scores, labels, t)
        m = basic_metrics(c)
        j = m["sens"] + m["spec"] - 1.0
        if j >= best_j:
            best_j = j
            best_threshold = t

    # Pool ties per distinct score, then isotonic-fit the positive rate.
    pos_count = {s: 0 for s in distinct}
    tot_count = {s: 0 for s in distinct}
    for s, lab in zip(scores, labels):
        tot_count[s] += 1
        if lab == POSITIVE:
            pos_count[s] += 1
    rates = [pos_count[s] / tot_count[s] for s in distinct]
    weights = [float(tot_count[s]) for s in distinct]
    fitted = pav_isotonic(rates, weights)
    calibration = CalibrationMap(xs=[float(s) for s in distinct], ys=fitted)
    return best_threshold, best_j, calibration


# --- evaluation reports ---------------------------------------------------------

@dataclass
class CaseOutcome:
    case_id: str
    score: float
    label: str
    outcome: str  # TP / FP / TN / FN
    dice: float | None = None

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "score": self.score,
            "label": self.label,
            "outcome": self.outcome,
            "dice": self.dice,
        }


@dataclass
class EvaluationReport:
    model_version: int
    partition: str
    threshold: float
    counts: ConfusionCounts
    sens: float
    spec: float
    accu: float
    preci: float
    f1: float
    auc: float
    roc_points: list[tuple[float, float, float]]
    dice: float | None = None
    per_case: list[CaseOutcome] = field(default_factory=list)
    skipped_unlabeled: int = 0

    def metric(self, name: str) -> float:
        if name == "dice":
            return self.dice if self.dice is not None else 0.0
        return getattr(self, name)

    def to_json(self) -> dict:
        return {
            "model_version": self.model_version,
            "partition": self.partition,
            "threshold": self.threshold,
            "counts": {"tp": self.counts.tp, "fp": self.counts.fp,
                       "tn": self.counts.tn, "fn": self.counts.fn},
            "dice": self.dice,
            "sens": self.sens,
            "spec": self.spec,
            "auc": self.auc,
            "accu": self.accu,
            "preci": self.preci,
            "f1": self.f1,
            "roc_points": [[p[0], p[1], (None if math.isinf(p[2]) else p[2])]
                           for p in self.roc_points],
            "per_case": [c.to_json() for c in self.per_case],
            "skipped_unlabeled": self.skipped_unlabeled,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvaluationReport":
        counts = ConfusionCounts(**obj["counts"])
        points = [(p[0], p[1], math.inf if p[2] is None else p[2])
                  for p in obj["roc_points"]]
        per_case = [CaseOutcome(**c) for c in obj.get("per_case", [])]
        return cls(
            model_version=obj["model_version"],
            partition=obj["partition"],
            threshold=obj["threshold"],
            counts=counts,
            sens=obj["sens"],
            spec=obj["spec"],
            accu=obj["accu"],
            preci=obj["preci"],
            f1=obj["f1"],
            auc=obj["auc"],
            roc_points=points,
            dice=obj.get("dice"),
            per_case=per_case,
            skipped_unlabeled=obj.get("skipped_unlabeled", 0),
        )


def evaluate_cases(
    model_version: int,
    partition: str,
    rows: list[CaseOutcome] | None = None,
    scores=None,
    labels=None,
    case_ids=None,
    dices=None,
    threshold: float = 0.5,
    skipped_unlabeled: int = 0,
) -> EvaluationReport:
    """Assemble an EvaluationReport from per-case scores and labels."""
    if rows is None:
        rows = []
        dices = dices if dices is not None else [None] * len(scores)
        case_ids = case_ids if case_ids is not None else [str(i) for i in range(len(scores))]
        for cid, score, label, dc in zip(case_ids, scores, labels, dices):
            predicted_pos = score >= threshold
            if label == POSITIVE:
                outcome = "TP" if predicted_pos else "FN"
            else:
                outcome = "FP" if predicted_pos else "TN"
            rows.append(CaseOutcome(case_id=cid, score=score, label=label,
                                    outcome=outcome, dice=dc))
    scores = [r.score for r in rows]
    labels = [r.label for r in rows]
    c = confusion(scores, labels, threshold)
    m = basic_metrics(c)
    auc, points = roc_auc(scores, labels)
    dice_values = [r.dice for r in rows if r.label == POSITIVE and r.dice is not None]
    mean_dice = sum(dice_values) / len(dice_values) if dice_values else None
    return EvaluationReport(
        model_version=model_version,
        partition=partition,
        threshold=threshold,
        counts=c,
        sens=m["sens"],
        spec=m["spec"],
        accu=m["accu"],
        preci=m["preci"],
        f1=m["f1"],
        auc=auc,
        roc_points=points,
        dice=mean_dice,
        per_case=rows,
        skipped_unlabeled=skipped_unlabeled,
    )


# --- export -------------------------------------------------------------------

def export_report(reports: list[EvaluationReport], fmt: str, path: str | Path) -> Path:
    """Write one or more reports to path as csv, svg_roc, or svg_bars."""
    path = Path(path)
    if fmt == "csv":
        text = export_csv(reports)
    elif fmt == "svg_roc":
        text = export_svg_roc(reports)
    elif fmt == "svg_bars":
        text = export_svg_bars(reports)
    else:
        raise UnsupportedFormat(f"unknown export format {fmt!r}")
    path.write_text(text)
    return path


def export_csv(reports: list[EvaluationReport]) -> str:
    lines = [CSV_HEADER]
    for r in reports:
        dice_cell = "" if r.dice is None else f"{r.dice:.6f}"
        lines.append(
            f"{r.model_version},{r.partition},{dice_cell},"
            f"{r.sens:.6f},{r.spec:.6f},{r.auc:.6f},"
            f"{r.accu:.6f},{r.preci:.6f},{r.f1:.6f}"
        )
    return "\n".join(lines) + "\n"


_SVG_W, _SVG_H = 480, 480
_MARGIN = 50
_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def roc_svg_xy(fpr: float, tpr: float) -> tuple[float, float]:
    """Map an ROC point into SVG coordinates (y axis flipped)."""
    plot = _SVG_W - 2 * _MARGIN
    return (_MARGIN + fpr * plot, _SVG_H - _MARGIN - tpr * plot)


def export_svg_roc(reports: list[EvaluationReport]) -> str:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
    ]
    x0, y0 = roc_svg_xy(0, 0)
    x1, y1 = roc_svg_xy(1, 1)
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    parts.append(
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#bbbbbb" stroke-dasharray="4 4"/>'
    )
    parts.append(f'<text x="{_SVG_W / 2}" y="{_SVG_H - 12}" text-anchor="middle" '
                 f'font-size="13">false positive rate</text>')
    parts.append(f'<text x="14" y="{_SVG_H / 2}" text-anchor="middle" font-size="13" '
                 f'transform="rotate(-90 14 {_SVG_H / 2})">true positive rate</text>')
    for i, r in enumerate(reports):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(
            f"{x:.2f},{y:.2f}" for x, y in (roc_svg_xy(p[0], p[1]) for p in r.roc_points)
        )
        parts.append(
            f'<polyline class="roc" points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{_SVG_W - _MARGIN - 4}" y="{_MARGIN + 16 * (i + 1)}" text-anchor="end" '
            f'font-size="12" fill="{color}">v{r.model_version} {r.partition} AUC={r.auc:.3f}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


BAR_METRICS = ["sens", "spec", "accu", "auc"]


def export_svg_bars(reports: list[EvaluationReport]) -> str:
    """Grouped bar chart: one group per model version, one bar per metric."""
    n_groups = len(reports)
    n_bars = len(BAR_METRICS)
    plot_w = _SVG_W - 2 * _MARGIN
    plot_h = _SVG_H - 2 * _MARGIN
    group_w = plot_w / max(n_groups, 1)
    bar_w = group_w / (n_bars + 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{_MARGIN}" y1="{_SVG_H - _MARGIN}" x2="{_SVG_W - _MARGIN}" '
        f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_SVG_H - _MARGIN}" x2="{_MARGIN}" y2="{_MARGIN}" stroke="black"/>',
    ]
    for g, r in enumerate(reports):
        gx = _MARGIN + g * group_w
        for b, metric in enumerate(BAR_METRICS):
            value = r.metric(metric)
            h = value * plot_h
            x = gx + (b + 0.5) * bar_w
            y = _SVG_H - _MARGIN - h
            color = _PALETTE[b % len(_PALETTE)]
            parts.append(
                f'<rect class="bar" data-model="{r.model_version}" data-metric="{metric}" '
                f'x="{x:.2f}" y="{y:.2f}" width="{bar_w * 0.9:.2f}" height="{h:.2f}" fill="{color}"/>'
            )
        parts.append(
            f'<text x="{gx + group_w / 2:.2f}" y="{_SVG_H - _MARGIN + 18}" text-anchor="middle" '
            f'font-size="12">v{r.model_version}</text>'
        )
    for b, metric in enumerate(BAR_METRICS):
        color = _PALETTE[b % len(_PALETTE)]
        parts.append(
            f'<text x="{_MARGIN + 70 * b + 30}" y="{_MARGIN - 16}" font-size="12" '
            f'fill="{color}">{metric}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
