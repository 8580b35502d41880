"""
evaluation.py - Contamination-ratio thresholding, F1 and multi-run aggregation

Scores follow one convention everywhere: higher = more anomalous. The top
ceil(rho * N) scores are flagged, ties broken by ascending sample index.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import precision_recall_fscore_support

from errors import DataError, DomainError

logger = logging.getLogger(__name__)


@dataclass
class ScoreReport:
    scorer: str
    scores: np.ndarray
    labels: np.ndarray
    predicted: np.ndarray
    threshold: float
    precision: float
    recall: float
    f1: float
    seed: int

    def summary(self) -> Dict:
        return {
            "scorer": self.scorer,
            "seed": self.seed,
            "threshold": self.threshold,
            "flagged": int(self.predicted.sum()),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class RunAggregate:
    f1s: List[float]
    mean: float
    std: float
    single_run: bool = False

    def summary(self) -> Dict:
        return asdict(self)


@dataclass
class PairedComparison:
    mean_a: float
    mean_b: float
    mean_difference: float
    t_statistic: float
    p_value: float
    runs: int

    def summary(self) -> Dict:
        return asdict(self)


def _flag_count(rho: float, n: int) -> int:
    # round() absorbs float noise such as (1/3) * 3 = 1.0000000000000002
    return min(n, math.ceil(round(rho * n, 9)))


def threshold_by_ratio(scores, rho: float) -> Tuple[float, np.ndarray]:
    """
    Flag the top ceil(rho * N) scores as anomalies.

    Args:
        scores: anomaly scores (higher = more anomalous)
        rho: expected contamination ratio, 0 < rho < 1

    Returns:
        (threshold, predicted labels) where threshold is the lowest flagged score
    """
    if not 0.0 < rho < 1.0:
        raise DomainError(f"contamination ratio must lie in (0, 1), got {rho}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = scores.size
    predicted = np.zeros(n, dtype=np.int64)
    if n == 0:
        return math.inf, predicted
    k = _flag_count(rho, n)
    # lexsort: last key is primary -> descending score, then ascending index
    order = np.lexsort((np.arange(n), -scores))
    flagged = order[:k]
    predicted[flagged] = 1
    threshold = float(scores[flagged[-1]]) if k else math.inf
    return threshold, predicted


def f1_score(predicted, labels) -> Tuple[float, float, float]:
    """Binary precision, recall and F1 with anomaly as the positive class (0/0 -> 0)"""
    predicted = np.asarray(predicted).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predicted.size != labels.size:
        raise DataError(f"{predicted.size} predictions for {labels.size} labels")
    precision, recall, f1, _ = precision_recall_fscore_support(
        labels, predicted, average="binary", pos_label=1, labels=[0, 1], zero_division=0
    )
    return float(precision), float(recall), float(f1)


def evaluate_scores(scorer: str, scores, labels, rho: Optional[float] = None, seed: int = 0) -> ScoreReport:
    """Threshold at rho (default: the share of positive labels) and score the prediction"""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if rho is None:
        rho = float(labels.mean()) if labels.size else 0.0
    if not 0.0 < rho < 1.0:
        raise DataError(f"degenerate contamination ratio {rho}: validation needs both normal rows and anomalies")
    threshold, predicted = threshold_by_ratio(scores, rho)
    precision, recall, f1 = f1_score(predicted, labels)
    return ScoreReport(scorer, scores, labels, predicted, threshold, precision, recall, f1, seed)


def aggregate_runs(f1s: Sequence[float]) -> RunAggregate:
    """Mean and sample standard deviation (n - 1); a single run gets std 0 and a flag"""
    values = np.asarray(list(f1s), dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot aggregate zero runs")
    if values.size == 1:
        logger.warning("⚠️ Only one run: standard deviation reported as 0")
        return RunAggregate([float(values[0])], float(values[0]), 0.0, single_run=True)
    return RunAggregate(values.tolist(), float(values.mean()), float(values.std(ddof=1)))


def paired_comparison(a: Sequence[float], b: Sequence[float]) -> PairedComparison:
    """One-sided paired t-test of H1: mean(a) > mean(b)"""
    a = np.asarray(list(a), dtype=np.float64)
    b = np.asarray(list(b), dtype=np.float64)
    if a.size != b.size or a.size < 2:
        raise DataError(f"paired comparison needs two equal-length samples of >= 2 runs, got {a.size} and {b.size}")
    result = stats.ttest_rel(a, b, alternative="greater")
    return PairedComparison(float(a.mean()), float(b.mean()), float((a - b).mean()),
                            float(result.statistic), float(result.pvalue), int(a.size))


def random_ranking_f1(rho: float) -> float:
    """Expected F1 of a random ranking thresholded at rho: precision = recall = rho"""
    if not 0.0 < rho < 1.0:
        raise DomainError(f"contamination ratio must lie in (0, 1), got {rho}")
    return rho


# =========================================================================
# REPORT FILES
# =========================================================================

def write_scores_csv(report: ScoreReport, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        "sample_index": np.arange(report.scores.size),
        "score": report.scores,
        "label": report.labels,
        "flagged": report.predicted,
    })
    frame.to_csv(path, index=False, float_format="%.17g")


def write_json(payload: Dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
