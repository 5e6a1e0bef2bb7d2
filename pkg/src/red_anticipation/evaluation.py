"""Per-chunk AP, calibrated AP, clip accuracy and anticipation delay.

Precision terms are accumulated in 40-digit decimal arithmetic and rounded
to float once, so AP values are correctly rounded and do not depend on
summation order.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from fractions import Fraction

import numpy as np

from . import rl
from .data import fmt_float

DECIMAL_DIGITS = 40


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredFrame:
    video_id: str
    chunk: int
    cls: int
    score: float
    is_positive: bool


def _to_decimal(w) -> Decimal:
    if isinstance(w, Fraction):
        return Decimal(w.numerator) / Decimal(w.denominator)
    return Decimal(float(w))


def ranked_precision_ap(scores, positives, w=1) -> float:
    """AP over a ranking with calibrated precision TP / (TP + FP / w).

    Ranking is by descending score; ties keep input order. ``w`` may be a
    float or a Fraction; w = 1 gives the plain AP.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError("scores and positive flags must be equal-length vectors")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not w > 0:
        raise ValueError("w must be positive")
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    pos = positives[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    with localcontext() as ctx:
        ctx.prec = DECIMAL_DIGITS
        wd = _to_decimal(w)
        total = Decimal(0)
        for k in np.flatnonzero(pos):
            t = Decimal(int(tp[k]))
            total += t / (t + Decimal(int(fp[k])) / wd)
        return float(total / n_pos)


def _unpack(items):
    scores = np.array([it.score for it in items], dtype=np.float64)
    positives = np.array([it.is_positive for it in items], dtype=bool)
    return scores, positives


def average_precision(items) -> float:
    return ranked_precision_ap(*_unpack(items))


def calibration_ratio(positives) -> Fraction:
    """Negative-to-positive ratio w of a pool."""
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise UndefinedMetricError("calibration ratio needs at least one positive")
    n_neg = len(positives) - n_pos
    return Fraction(n_neg, n_pos) if n_neg else Fraction(1)


def calibrated_average_precision(items, w=None) -> float:
    """cAP; ``w`` defaults to the negative/positive ratio of ``items``."""
    scores, positives = _unpack(items)
    if w is None:
        w = calibration_ratio(positives)
    return ranked_precision_ap(scores, positives, w)


# ---------------------------------------------------------------- horizon sweeps

@dataclass
class Predictions:
    """Class distributions for every scored (video, chunk, horizon).

    ``probs[h]`` is (n_h, C+1) aligned with ``video_ids[h]``/``chunks[h]``,
    rows ordered by (video id, chunk).
    """
    n_classes: int
    horizons: tuple
    video_ids: dict = field(default_factory=dict)
    chunks: dict = field(default_factory=dict)
    probs: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["video", "chunk", "horizon", "class", "score"])
        for h in self.horizons:
            for vid, ch, row in zip(self.video_ids[h], self.chunks[h], self.probs[h]):
                for c, s in enumerate(row):
                    w.writerow([vid, int(ch), h, c, fmt_float(s)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Predictions":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty prediction dump")
        n_classes = max(int(r["class"]) for r in rows)
        table: dict = {}
        for r in rows:
            key = (int(r["horizon"]), r["video"], int(r["chunk"]))
            table.setdefault(key, np.zeros(n_classes + 1))[int(r["class"])] = float(r["score"])
        horizons = tuple(sorted({k[0] for k in table}))
        p = cls(n_classes, horizons)
        for h in horizons:
            keys = sorted(k for k in table if k[0] == h)
            p.video_ids[h] = [k[1] for k in keys]
            p.chunks[h] = np.array([k[2] for k in keys], dtype=np.int64)
            p.probs[h] = np.stack([table[k] for k in keys])
        return p


def _check_horizons(model, horizons):
    horizons = tuple(int(h) for h in horizons)
    bad = [h for h in horizons if h not in model.horizons]
    if bad or not horizons:
        raise ValueError(f"horizons {bad or horizons} not produced by the model "
                         f"(available: {model.horizons})")
    return horizons


def predict_horizons(model, videos, horizons) -> Predictions:
    """Slide over every anchor; step h of the window at anchor t scores chunk t+h-1."""
    horizons = _check_horizons(model, horizons)
    preds = Predictions(model.n_classes, horizons)
    for h in horizons:
        preds.video_ids[h], preds.chunks[h], preds.probs[h] = [], [], []
    for video in sorted(videos, key=lambda v: v.video_id):
        n = len(video.features)
        anchors = np.arange(model.t_enc, n)
        if anchors.size == 0:
            continue
        probs = model.predict(video.features, anchors)
        for h in horizons:
            k = model.horizons.index(h)
            keep = anchors + h - 1 < n
            preds.video_ids[h].extend([video.video_id] * int(keep.sum()))
            preds.chunks[h].append(anchors[keep] + h - 1)
            preds.probs[h].append(probs[keep, k])
    for h in horizons:
        preds.chunks[h] = (np.concatenate(preds.chunks[h]) if preds.chunks[h]
                           else np.zeros(0, dtype=np.int64))
        preds.probs[h] = (np.concatenate(preds.probs[h]) if preds.probs[h]
                          else np.zeros((0, model.n_classes + 1)))
    return preds


@dataclass
class ClassMetrics:
    cls: int
    horizon: int
    ap: float
    cap: float
    w: float


@dataclass
class MetricsReport:
    chunk_seconds: float
    horizons: tuple
    rows: list  # ClassMetrics
    mean_ap: dict  # horizon -> mAP over classes with positives
    mean_cap: dict
    accuracy: dict  # horizon -> per-chunk accuracy (argmax over all classes)
    config: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "horizon_chunks", "horizon_seconds", "ap", "cap", "w"])
        for h in self.horizons:
            secs = fmt_float(h * self.chunk_seconds)
            for r in (r for r in self.rows if r.horizon == h):
                w.writerow([r.cls, h, secs, fmt_float(r.ap), fmt_float(r.cap), fmt_float(r.w)])
            w.writerow(["__mean__", h, secs, fmt_float(self.mean_ap[h]),
                        fmt_float(self.mean_cap[h]), ""])
        return buf.getvalue()


def metrics_from_predictions(preds: Predictions, videos, chunk_seconds=0.25,
                             global_w: bool = False, config=None) -> MetricsReport:
    """Per-class AP/cAP for every horizon of ``preds`` against the videos' labels.

    Classes with no positive chunk at a horizon are left out of that horizon.
    """
    labels = {v.video_id: v.labels.labels for v in videos}
    rows, mean_ap, mean_cap, acc = [], {}, {}, {}
    for h in preds.horizons:
        if len(preds.chunks[h]) == 0:
            raise UndefinedMetricError(f"no chunk can be scored at horizon {h}")
        y = np.array([labels[v][c] for v, c in zip(preds.video_ids[h], preds.chunks[h])])
        P = preds.probs[h]
        acc[h] = float(np.mean(P.argmax(axis=1) == y))
        w_all = None
        if global_w:
            w_all = calibration_ratio(y != 0) if np.any(y != 0) else None
        aps, caps = [], []
        for c in range(1, preds.n_classes + 1):
            pos = y == c
            if not pos.any():
                continue
            w = w_all if w_all is not None else calibration_ratio(pos)
            ap = ranked_precision_ap(P[:, c], pos)
            cap = ranked_precision_ap(P[:, c], pos, w)
            rows.append(ClassMetrics(c, h, ap, cap, float(w)))
            aps.append(ap)
            caps.append(cap)
        if not aps:
            raise UndefinedMetricError(f"no positive chunk at horizon {h}")
        mean_ap[h] = float(np.mean(aps))
        mean_cap[h] = float(np.mean(caps))
    return MetricsReport(chunk_seconds, preds.horizons, rows, mean_ap, mean_cap, acc,
                         dict(config or {}))


def evaluate_horizons(model, videos, horizons, global_w: bool = False) -> MetricsReport:
    preds = predict_horizons(model, videos, horizons)
    secs = getattr(getattr(model, "hyper", None), "chunk_seconds", 0.25)
    config = {"t_enc": model.t_enc, "horizons": list(preds.horizons), "global_w": global_w}
    return metrics_from_predictions(preds, videos, secs, global_w, config)


# ---------------------------------------------------------------- clips / earliness

@dataclass
class Clip:
    features: np.ndarray  # (n, d) history
    label: int  # 1..C


def clip_accuracy(model, clips, horizon: int = 4) -> float:
    """Fraction of clips whose mean distribution over steps 1..horizon
    has its largest action-class probability on the clip's label."""
    if not clips:
        raise UndefinedMetricError("no clips to score")
    steps = [k for k, h in enumerate(model.horizons) if h <= horizon]
    if not steps:
        raise ValueError(f"model has no output step within horizon {horizon}")
    correct = 0
    for clip in clips:
        probs = model.predict_history(clip.features)
        mean = probs[steps].mean(axis=0)
        correct += int(1 + np.argmax(mean[1:]) == clip.label)
    return correct / len(clips)


def anticipation_delay(model, videos) -> float:
    """Mean steps between an action onset and the first correct action prediction.

    For every onset s (background at s-1, action at s) with a full window
    in bounds, the model anchored at t = s anticipates K steps; the delay is
    the first step j whose argmax equals the (nonzero) label of chunk s+j,
    or K when no step matches.
    """
    K = len(model.horizons)
    if model.horizons != tuple(range(1, K + 1)):
        raise ValueError("anticipation delay needs a model anticipating steps 1..K")
    delays = []
    for video in sorted(videos, key=lambda v: v.video_id):
        y = video.labels.labels
        n = len(y)
        onsets = [s for s in range(model.t_enc, n - K + 1)
                  if y[s] != 0 and rl.transfer_time(y[s - 1:s + 1]) == 1]
        if not onsets:
            continue
        pred = model.predict(video.features, np.array(onsets)).argmax(axis=2)
        for s, p in zip(onsets, pred):
            hit = [j for j in range(K) if y[s + j] != 0 and p[j] == y[s + j]]
            delays.append(hit[0] if hit else K)
    if not delays:
        raise UndefinedMetricError("no action onset with a full anticipation window")
    return float(np.mean(delays))
