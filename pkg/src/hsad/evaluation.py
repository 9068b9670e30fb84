"""Detection metrics: ROC/AUC over score thresholds, threshold-axis AUCs,
adaptive score truncation, the signal-to-noise-probability ratio in dB, and
benchmark-level summaries with CSV export.

Conventions frozen here: a pixel is detected at threshold τ when score ≥ τ;
ROC points traverse the unique score values in descending order plus a
sentinel above the maximum; trapezoids integrate consecutive points. The
threshold-axis curves integrate P_d(τ) and P_f(τ) over ascending τ drawn from
the maxmin-normalized map plus the {0, 1} endpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cube import GroundTruthMap
from .detectors import ScoreMap

SNPR_CAP_DB = 80.0


@dataclass(frozen=True)
class RocCurve:
    """Threshold sweep: taus descending (taus[0] = +inf sentinel), detection
    rate p_d, false-alarm rate p_f, and (TP, FN, FP, TN) per threshold."""

    taus: np.ndarray
    p_d: np.ndarray
    p_f: np.ndarray
    counts: np.ndarray


@dataclass(frozen=True)
class SceneMetrics:
    """Per-scene results; auc_d_tau / auc_f_tau are the adaptive (truncated)
    threshold-axis AUCs, so asnpr_db is recomputable from the stored row."""

    scene_id: str
    auc: float
    auc_d_tau: float
    auc_f_tau: float
    asnpr_db: float
    seconds: float

    def __post_init__(self):
        for name in ("auc", "auc_d_tau", "auc_f_tau", "asnpr_db", "seconds"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc {self.auc} outside [0, 1]")


@dataclass(frozen=True)
class BenchmarkSummary:
    scenes: tuple[SceneMetrics, ...]
    mauc: float
    masnpr_db: float
    mean_seconds: float


def _check_pair(score: ScoreMap, gt: GroundTruthMap) -> None:
    if (score.height, score.width) != (gt.height, gt.width):
        raise ValueError(
            f"score shape {(score.height, score.width)} != truth shape "
            f"{(gt.height, gt.width)}"
        )
    targets = int(gt.labels.sum())
    if targets < 1:
        raise ValueError("ground truth has no target pixels")
    if targets == gt.labels.size:
        raise ValueError("ground truth has no background pixels")


def roc(score: ScoreMap, gt: GroundTruthMap) -> RocCurve:
    """One point per unique score value (descending), plus the (0,0) sentinel."""
    _check_pair(score, gt)
    s = score.scores.ravel()
    y = gt.labels.ravel().astype(bool)
    n_t = int(y.sum())
    n_b = y.size - n_t
    order = np.argsort(-s, kind="stable")
    ss, ys = s[order], y[order]
    cum_t = np.cumsum(ys)
    cum_b = np.cumsum(~ys)
    last = np.nonzero(np.r_[ss[1:] != ss[:-1], True])[0]
    tp = np.r_[0, cum_t[last]]
    fp = np.r_[0, cum_b[last]]
    taus = np.r_[np.inf, ss[last]]
    counts = np.stack([tp, n_t - tp, fp, n_b - fp], axis=1)
    return RocCurve(taus, tp / n_t, fp / n_b, counts)


def _trapezoid(xs: np.ndarray, ys: np.ndarray) -> float:
    return float(0.5 * np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1])))


def auc(curve: RocCurve) -> float:
    """Trapezoid area of P_d over P_f along the threshold sweep."""
    return _trapezoid(curve.p_f, curve.p_d)


def adaptive_truncate(score: ScoreMap, gt: GroundTruthMap) -> ScoreMap:
    """Clip the map at the median target score (even count: lower middle)."""
    if (score.height, score.width) != (gt.height, gt.width):
        raise ValueError("score/truth shape mismatch")
    target_scores = np.sort(score.scores[gt.labels == 1])
    if target_scores.size == 0:
        raise ValueError("adaptive truncation needs at least one target pixel")
    clip = target_scores[(target_scores.size - 1) // 2]
    return ScoreMap(np.minimum(score.scores, clip))


def threshold_aucs(score: ScoreMap, gt: GroundTruthMap) -> tuple[float, float]:
    """Areas under P_d(τ) and P_f(τ) for τ ascending over the maxmin-normalized
    scores plus {0, 1}; an all-equal map returns (0, 0) (degenerate rule)."""
    _check_pair(score, gt)
    s = score.scores
    lo, hi = s.min(), s.max()
    if hi == lo:
        return 0.0, 0.0
    z = (s - lo) / (hi - lo)
    taus = np.unique(np.concatenate([z.ravel(), [0.0, 1.0]]))
    targets = np.sort(z[gt.labels == 1])
    background = np.sort(z[gt.labels == 0])
    p_d = 1.0 - np.searchsorted(targets, taus, side="left") / targets.size
    p_f = 1.0 - np.searchsorted(background, taus, side="left") / background.size
    return _trapezoid(taus, p_d), _trapezoid(taus, p_f)


def asnpr_db(score: ScoreMap, gt: GroundTruthMap) -> float:
    """Adaptive SNPR: 10·log10(AUC_d,τ / AUC_f,τ) on the truncated map.

    All-equal truncated map -> 0 dB exactly; zero false-alarm area with
    positive detection area -> capped at +80 dB.
    """
    _check_pair(score, gt)
    truncated = adaptive_truncate(score, gt)
    if truncated.scores.max() == truncated.scores.min():
        return 0.0
    d, f = threshold_aucs(truncated, gt)
    if f == 0.0:
        return SNPR_CAP_DB
    return float(10.0 * np.log10(d / f))


def evaluate_scene(
    score: ScoreMap, gt: GroundTruthMap, scene_id: str = "", seconds: float = 0.0
) -> SceneMetrics:
    """Raw-score ROC AUC plus the adaptive threshold-axis metrics."""
    raw_auc = auc(roc(score, gt))
    truncated = adaptive_truncate(score, gt)
    if truncated.scores.max() == truncated.scores.min():
        d = f = 0.0
        snpr = 0.0
    else:
        d, f = threshold_aucs(truncated, gt)
        snpr = SNPR_CAP_DB if f == 0.0 else float(10.0 * np.log10(d / f))
    return SceneMetrics(scene_id, raw_auc, d, f, snpr, seconds)


def summarize(results: list[SceneMetrics]) -> BenchmarkSummary:
    """Arithmetic means over scenes (the benchmark's headline numbers)."""
    if not results:
        raise ValueError("cannot summarize an empty result list")
    return BenchmarkSummary(
        scenes=tuple(results),
        mauc=float(np.mean([m.auc for m in results])),
        masnpr_db=float(np.mean([m.asnpr_db for m in results])),
        mean_seconds=float(np.mean([m.seconds for m in results])),
    )


_CSV_FIELDS = ("scene_id", "auc", "auc_d_tau", "auc_f_tau", "asnpr_db", "seconds")


def write_metrics_csv(summary: BenchmarkSummary, path: str | Path) -> None:
    """Per-scene rows plus a MEAN row; floats stored at full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS)
        for m in summary.scenes:
            writer.writerow(
                [m.scene_id, m.auc, m.auc_d_tau, m.auc_f_tau, m.asnpr_db, m.seconds]
            )
        writer.writerow(
            [
                "MEAN",
                summary.mauc,
                float(np.mean([m.auc_d_tau for m in summary.scenes])),
                float(np.mean([m.auc_f_tau for m in summary.scenes])),
                summary.masnpr_db,
                summary.mean_seconds,
            ]
        )
