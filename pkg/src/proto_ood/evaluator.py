"""OOD metrics (FPR at 95% TPR, AUROC) under the two evaluation protocols.

ID-dataset predictions are the positives and scores are oriented so that a
higher energy means "more in-distribution".

Protocol ``A`` scores every prediction.  Protocol ``B`` keeps, for each
ID-dataset image, only the ``K`` predictions with the highest classification
score, ``K`` being the number of annotated objects in that image; OOD-dataset
predictions are never filtered.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datasets import DatasetSplit, ImageGroup, Kind, ScoredPrediction
from .proto_head import ModelState, classify_ood, score_features

logger = logging.getLogger(__name__)

PROTOCOLS = ("A", "B")
REPORT_FIELDS = ("protocol", "fpr95", "auroc", "threshold", "n_id", "n_ood")


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    protocol: str
    fpr95: float
    auroc: float
    threshold: float
    n_id: int
    n_ood: int

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        missing = [k for k in REPORT_FIELDS if k not in doc]
        if missing:
            raise EvaluationError(f"report missing field(s): {', '.join(missing)}")
        return cls(**{k: doc[k] for k in REPORT_FIELDS})

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "MetricsReport":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _normalize_protocol(protocol: str) -> str:
    p = protocol.upper()
    if p not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    return p


def protocol_filter(groups: list[ImageGroup], protocol: str) -> list[ScoredPrediction]:
    protocol = _normalize_protocol(protocol)
    kept: list[ScoredPrediction] = []
    for grp in groups:
        preds = grp.predictions
        if protocol == "B" and grp.source == "id_dataset":
            if grp.k > len(preds):
                logger.warning("image %s: K=%d exceeds its %d predictions; keeping all",
                               grp.image_id, grp.k, len(preds))
            # stable sort keeps input order among equal scores
            order = sorted(range(len(preds)), key=lambda i: -preds[i].cls_score)[:grp.k]
            preds = [preds[i] for i in sorted(order)]
        kept.extend(preds)
    return kept


def _check_nonempty(id_scores, ood_scores):
    id_scores = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    ood_scores = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise EvaluationError("both ID and OOD score lists must be non-empty")
    return id_scores, ood_scores


def fpr_at_95_tpr(id_scores, ood_scores, tpr: float = 0.95) -> tuple[float, float]:
    """Return ``(fpr, threshold)``.

    The threshold is the largest ``x`` with ``mean(id_scores >= x) >= tpr``,
    i.e. the ``ceil(tpr * n)``-th largest ID score; fpr is
    ``mean(ood_scores >= threshold)``.
    """
    id_scores, ood_scores = _check_nonempty(id_scores, ood_scores)
    n = id_scores.size
    # smallest count m with m / n >= tpr, computed exactly to avoid 0.95 * n rounding
    m = min(n, max(1, math.ceil(tpr * n - 1e-9)))
    while m > 1 and (m - 1) / n >= tpr:
        m -= 1
    while m / n < tpr:
        m += 1
    threshold = float(np.sort(id_scores)[::-1][m - 1])
    fpr = float(np.count_nonzero(ood_scores >= threshold)) / ood_scores.size
    return fpr, threshold


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney estimate of P(id > ood) with ties counted as one half.

    Computed from integer pair counts so the result equals the pairwise
    definition exactly.
    """
    id_scores, ood_scores = _check_nonempty(id_scores, ood_scores)
    ood_sorted = np.sort(ood_scores)
    below = np.searchsorted(ood_sorted, id_scores, side="left")
    below_or_eq = np.searchsorted(ood_sorted, id_scores, side="right")
    wins = int(below.sum())
    ties = int((below_or_eq - below).sum())
    # (2 * wins + ties) / (2 * n * m), rounded once
    return (2 * wins + ties) / (2 * id_scores.size * ood_scores.size)


def metrics_from_predictions(preds: list[ScoredPrediction], protocol: str) -> MetricsReport:
    id_scores = [p.ood_score for p in preds if p.source == "id_dataset"]
    ood_scores = [p.ood_score for p in preds if p.source == "ood_dataset"]
    fpr, thr = fpr_at_95_tpr(id_scores, ood_scores)
    return MetricsReport(_normalize_protocol(protocol), fpr, auroc(id_scores, ood_scores), thr,
                         len(id_scores), len(ood_scores))


def evaluate_groups(groups: list[ImageGroup], protocol: str) -> MetricsReport:
    return metrics_from_predictions(protocol_filter(groups, protocol), protocol)


def score_split(state: ModelState, split: DatasetSplit, source: str, reduction: str | None = None) -> list[ImageGroup]:
    """Score every record of ``split`` and group the predictions by image."""
    if split.h != state.h:
        raise EvaluationError(f"split width h={split.h} does not match model h={state.h}")
    E = score_features(state, split.features(), reduction).E if len(split) else np.zeros(0)
    g = classify_ood(E, state.decision)
    groups: dict[int, ImageGroup] = {}
    for rec, e, gi in zip(split.records, E, g):
        grp = groups.get(rec.image_id)
        if grp is None:
            grp = groups[rec.image_id] = ImageGroup(rec.image_id, source, 0)
        if rec.annotated and rec.kind is Kind.ID:
            grp.k += 1
        grp.predictions.append(ScoredPrediction(rec.image_id, source, rec.cls_score, float(e), int(gi)))
    return list(groups.values())


def evaluate(state: ModelState, id_split: DatasetSplit, ood_split: DatasetSplit, protocol: str,
             reduction: str | None = None) -> MetricsReport:
    groups = score_split(state, id_split, "id_dataset", reduction) + score_split(state, ood_split, "ood_dataset", reduction)
    return evaluate_groups(groups, protocol)
