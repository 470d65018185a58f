"""Session-level decisions, metrics, speaker-disjoint folds and the CV driver."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyMatrix,
    EmptyPredictions,
    EmptySession,
    LengthMismatch,
    OutOfRange,
    SingleClass,
    TooFewSpeakers,
)
from .features import FoldStats, assemble_feature_matrix, compute_fold_stats
from .gcnn_model import GCNN, ModelConfig, decide
from .training import TrainConfig, TrainResult, train_fold

log = logging.getLogger(__name__)

CLASS_LABELS = ("D", "M", "H")
MMSE_RANGES = {"D": (0, 23), "M": (24, 26), "H": (27, 30)}
CONDITIONS = ("dvh", "dvmh", "dmvh", "3class")
DEFAULT_BUDGETS = (4.0, 8.0, 20.0, 40.0, 60.0, 300.0, math.inf)
EXCLUDED = None


def map_mmse_to_class(score: int) -> str:
    if not 0 <= score <= 30:
        raise OutOfRange(f"MMSE score {score} outside 0-30")
    if score <= 23:
        return "D"
    if score <= 26:
        return "M"
    return "H"


def condition_relabel(label: str, condition: str):
    """Map a D/M/H label to a class index under ``condition``, or ``EXCLUDED``.

    Binary conditions use 1 for the positive (impaired) group and 0 for the
    negative group; ``3class`` maps D, M, H to 0, 1, 2.
    """
    if label not in CLASS_LABELS:
        raise ValueError(f"unknown class label {label!r}")
    condition = condition.lower()
    if condition == "dvh":
        return {"D": 1, "H": 0}.get(label, EXCLUDED)
    if condition == "dvmh":
        return 1 if label == "D" else 0
    if condition == "dmvh":
        return 0 if label == "H" else 1
    if condition == "3class":
        return CLASS_LABELS.index(label)
    raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")


def class_count(condition: str) -> int:
    return 3 if condition.lower() == "3class" else 2


def class_names(condition: str) -> tuple[str, ...]:
    return {
        "dvh": ("H", "D"),
        "dvmh": ("M+H", "D"),
        "dmvh": ("H", "D+M"),
        "3class": CLASS_LABELS,
    }[condition.lower()]


def majority_vote(predictions: Sequence[tuple[int, object]]) -> int:
    """Most frequent label; ties go to the mean probability.

    Each prediction is ``(label, prob)`` where ``prob`` is the positive-class
    probability (binary) or a class-probability vector. A binary tie resolves
    to positive iff the mean positive probability is >= 0.5; a multi-class tie
    to the tied label with the highest mean probability.
    """
    if not predictions:
        raise EmptyPredictions("cannot vote over zero segments")
    counts = Counter(int(label) for label, _ in predictions)
    top = max(counts.values())
    tied = sorted(label for label, c in counts.items() if c == top)
    if len(tied) == 1:
        return tied[0]
    probs = np.array([np.asarray(p, dtype=np.float64) for _, p in predictions])
    if probs.ndim == 1 or probs.shape[1] == 1:
        return int(probs.reshape(len(predictions)).mean() >= 0.5)
    mean = probs.mean(axis=0)
    return max(tied, key=lambda label: (mean[label], -label))


@dataclass(frozen=True)
class Segment:
    lld: np.ndarray = field(repr=False)
    start_s: float
    duration_s: float


def duration_budget_select(segments: Sequence, budget_s: float) -> list:
    """Earliest segments whose cumulative duration fits the budget (at least one)."""
    if not segments:
        raise EmptySession("session has no segments")
    ordered = sorted(segments, key=lambda s: s.start_s)
    chosen = [ordered[0]]
    total = ordered[0].duration_s
    for seg in ordered[1:]:
        if total + seg.duration_s > budget_s + 1e-9:
            break
        chosen.append(seg)
        total += seg.duration_s
    return chosen


# -- metrics ---------------------------------------------------------------------


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> np.ndarray:
    """Counts indexed (actual, predicted)."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {labels.size} labels")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix is empty")
    return float(np.trace(cm) / total)


def cohen_kappa(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix is empty")
    p_o = np.trace(cm) / total
    p_e = float(np.dot(cm.sum(axis=1), cm.sum(axis=0)) / total**2)
    if p_e >= 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.size} scores vs {labels.size} labels")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC/DET need both classes present")
    return scores, labels, n_pos, n_neg


def _sweep(scores, labels):
    """Cumulative TP/FP counts accepting scores >= each distinct threshold, descending."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    return s[last], tp[last], fp[last]


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    """ROC points at every distinct threshold and the trapezoidal AUC.

    The first point is the reject-all threshold (+inf) at (0, 0).
    """
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    thr, tp, fp = _sweep(scores, labels)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(np.r_[np.inf, thr], fpr, tpr), auc


def det_points(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, FPR, FNR) with thresholds ascending; the last is reject-all."""
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    thr, tp, fp = _sweep(scores, labels)
    pts = [(float(t), float(f / n_neg), float(1.0 - p / n_pos)) for t, p, f in zip(thr, tp, fp)]
    pts.reverse()
    pts.append((math.inf, 0.0, 1.0))
    return pts


def error_rates(cm) -> tuple[float, float]:
    """(FPR, FNR) of a binary confusion matrix indexed (actual, predicted), 1 = positive."""
    cm = np.asarray(cm, dtype=np.float64)
    fpr = cm[0, 1] / max(cm[0].sum(), 1.0)
    fnr = cm[1, 0] / max(cm[1].sum(), 1.0)
    return float(fpr), float(fnr)


# -- fold planning ------------------------------------------------------------------


@dataclass
class SessionRecord:
    session_id: str
    speaker_id: str
    class_label: str
    mmse: int | None = None
    duration_s: float = 0.0
    patient_wav: str | None = None
    interviewer_wav: str | None = None
    turns: str | None = None
    dataset: str = ""

    def __post_init__(self):
        if not self.speaker_id:
            raise ValueError(f"session {self.session_id}: empty speaker id")
        if self.class_label is None and self.mmse is None:
            raise ValueError(f"session {self.session_id}: needs mmse or class_label")
        if self.class_label is None:
            self.class_label = map_mmse_to_class(self.mmse)
        if self.class_label not in CLASS_LABELS:
            raise ValueError(f"session {self.session_id}: bad class label {self.class_label!r}")
        if self.mmse is not None and map_mmse_to_class(self.mmse) != self.class_label:
            raise ValueError(
                f"session {self.session_id}: MMSE {self.mmse} inconsistent with label {self.class_label}"
            )


@dataclass
class FoldPlan:
    k: int
    assignment: dict[str, int]

    def test_speakers(self, fold: int) -> set[str]:
        return {s for s, f in self.assignment.items() if f == fold}

    def train_speakers(self, fold: int) -> set[str]:
        return {s for s, f in self.assignment.items() if f != fold}

    def split(self, sessions: Sequence[SessionRecord], fold: int):
        train = [s for s in sessions if self.assignment[s.speaker_id] != fold]
        test = [s for s in sessions if self.assignment[s.speaker_id] == fold]
        return train, test


def plan_folds(sessions: Sequence[SessionRecord], k: int = 10, seed: int = 0) -> FoldPlan:
    """Greedy speaker-level assignment balancing fold size and per-class session counts.

    Speakers are visited by session count (descending, seeded shuffle among
    equals). Each goes to a fold with the fewest speakers so far; among those,
    the one holding the fewest sessions of the speaker's classes, then the
    lowest index.
    """
    by_speaker: dict[str, Counter] = defaultdict(Counter)
    for s in sessions:
        by_speaker[s.speaker_id][s.class_label] += 1
    speakers = sorted(by_speaker)
    if len(speakers) < k:
        raise TooFewSpeakers(f"{len(speakers)} speakers cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    shuffled = [speakers[i] for i in rng.permutation(len(speakers))]
    ordered = sorted(shuffled, key=lambda sp: -sum(by_speaker[sp].values()))

    fold_speakers = [0] * k
    fold_classes = [Counter() for _ in range(k)]
    assignment = {}
    for sp in ordered:
        fewest = min(fold_speakers)
        candidates = [f for f in range(k) if fold_speakers[f] == fewest]
        mine = by_speaker[sp]
        best = min(candidates, key=lambda f: (sum(fold_classes[f][c] * n for c, n in mine.items()), f))
        assignment[sp] = best
        fold_speakers[best] += 1
        fold_classes[best].update(mine)
    return FoldPlan(k, assignment)


# -- cross-validation -----------------------------------------------------------


def budget_name(budget: float) -> str:
    return "all" if math.isinf(budget) else f"{budget:g}"


def parse_budgets(text: str) -> tuple[float, ...]:
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        if not part:
            continue
        try:
            value = math.inf if part in ("all", "inf") else float(part)
        except ValueError as exc:
            raise ConfigError(f"bad budget {part!r}") from exc
        if not value > 0:
            raise ConfigError(f"budget must be positive, got {part!r}")
        out.append(value)
    if not out:
        raise ConfigError("no budgets given")
    return tuple(out)


@dataclass
class BudgetMetrics:
    budget: float
    fold_cms: list = field(default_factory=list)
    session_ids: list = field(default_factory=list)
    session_labels: list = field(default_factory=list)
    session_preds: list = field(default_factory=list)
    session_scores: list = field(default_factory=list)
    session_folds: list = field(default_factory=list)

    @property
    def pooled_cm(self) -> np.ndarray:
        return np.sum(self.fold_cms, axis=0)

    @property
    def fold_accuracies(self) -> list[float]:
        return [accuracy(cm) if cm.sum() else float("nan") for cm in self.fold_cms]

    @property
    def mean_accuracy(self) -> float:
        return float(np.nanmean(self.fold_accuracies))

    @property
    def pooled_accuracy(self) -> float:
        return accuracy(self.pooled_cm)

    @property
    def kappa(self) -> float:
        return cohen_kappa(self.pooled_cm)

    @property
    def fold_kappas(self) -> list[float]:
        return [cohen_kappa(cm) if cm.sum() else float("nan") for cm in self.fold_cms]

    def roc(self):
        return roc_auc(self.session_scores, self.session_labels)

    def det(self):
        return det_points(self.session_scores, self.session_labels)

    def error_rates(self) -> tuple[float, float]:
        return error_rates(self.pooled_cm)


@dataclass
class MetricsReport:
    condition: str
    classes: int
    budgets: dict[float, BudgetMetrics]
    segment_fold_cms: list
    audit: list  # per fold: dict(fold, train_speakers, test_speakers)

    @property
    def segment_cm(self) -> np.ndarray:
        return np.sum(self.segment_fold_cms, axis=0)


@dataclass
class CVResult:
    report: MetricsReport
    plan: FoldPlan
    fold_results: dict[int, TrainResult]


def session_score(probs: Sequence) -> object:
    """Mean segment probability: positive-class scalar (binary) or class vector."""
    return np.mean(np.asarray(probs, dtype=np.float64), axis=0)


def labelled_sessions(sessions, segments, condition):
    """Sessions taking part in ``condition`` that have segments, plus their class indices."""
    kept, label_of = [], {}
    for s in sessions:
        y = condition_relabel(s.class_label, condition)
        if y is not EXCLUDED and segments.get(s.session_id):
            kept.append(s)
            label_of[s.session_id] = y
    return kept, label_of


def evaluate_cv(
    sessions: Sequence[SessionRecord],
    segments: Mapping[str, Sequence[Segment]],
    condition: str = "dvh",
    model_config: ModelConfig | None = None,
    train_config: TrainConfig = TrainConfig(),
    budgets: Iterable[float] = DEFAULT_BUDGETS,
    k: int = 10,
    seed: int = 0,
    folds: Iterable[int] | None = None,
    models: Mapping[int, GCNN] | None = None,
    on_fold: Callable[[int, TrainResult], None] | None = None,
) -> CVResult:
    """Speaker-disjoint k-fold training and session-level evaluation.

    Each fold trains on every segment of its training sessions (labels come
    from the session under ``condition``), normalizes with training-fold
    statistics, and scores test sessions by majority vote over the segments
    each duration budget admits. Pre-trained ``models`` (keyed by fold) skip
    training; they must carry their own ``feature_stats``.
    """
    n_classes = class_count(condition)
    if model_config is None:
        model_config = ModelConfig(classes=n_classes)
    if model_config.classes != n_classes:
        raise ValueError(f"condition {condition} needs a {n_classes}-class model")
    budgets = tuple(budgets)
    kept, label_of = labelled_sessions(sessions, segments, condition)
    plan = plan_folds(kept, k=k, seed=seed)

    per_budget = {b: BudgetMetrics(b) for b in budgets}
    segment_cms = []
    audit = []
    fold_results = {}
    for fold in range(k) if folds is None else folds:
        train, test = plan.split(kept, fold)
        audit.append(
            {
                "fold": fold,
                "train_speakers": sorted({s.speaker_id for s in train}),
                "test_speakers": sorted({s.speaker_id for s in test}),
            }
        )
        if models is not None and fold in models:
            model = models[fold]
            stats = model.feature_stats
        else:
            result = fit_fold(train, segments, label_of, model_config, train_config, seed + fold)
            fold_results[fold] = result
            model = result.model
            stats = model.feature_stats
            if on_fold is not None:
                on_fold(fold, result)

        seg_preds, seg_labels = [], []
        for b in budgets:
            per_budget[b].fold_cms.append(np.zeros((n_classes, n_classes), dtype=np.int64))
        for s in test:
            segs = sorted(segments[s.session_id], key=lambda g: g.start_s)
            x = np.stack([assemble_feature_matrix(g.lld, stats).values for g in segs]).astype(np.float32)
            probs = model.predict_proba(x)
            y = label_of[s.session_id]
            by_id = {id(g): p for g, p in zip(segs, probs)}
            seg_preds.extend(decide(p) for p in probs)
            seg_labels.extend([y] * len(segs))
            for b in budgets:
                chosen = duration_budget_select(segs, b)
                votes = [(decide(by_id[id(g)]), by_id[id(g)]) for g in chosen]
                pred = majority_vote(votes)
                m = per_budget[b]
                m.fold_cms[-1][y, pred] += 1
                m.session_ids.append(s.session_id)
                m.session_labels.append(y)
                m.session_preds.append(pred)
                m.session_scores.append(session_score([v[1] for v in votes]))
                m.session_folds.append(fold)
        segment_cms.append(
            confusion_matrix(seg_preds, seg_labels, n_classes)
            if seg_preds
            else np.zeros((n_classes, n_classes), dtype=np.int64)
        )
        log.info(
            "fold %d: %d train / %d test sessions, acc(all budgets) %s",
            fold,
            len(train),
            len(test),
            ", ".join(f"{budget_name(b)}={_safe_acc(per_budget[b].fold_cms[-1]):.3f}" for b in budgets),
        )
    report = MetricsReport(condition, n_classes, per_budget, segment_cms, audit)
    return CVResult(report, plan, fold_results)


def _safe_acc(cm) -> float:
    return accuracy(cm) if np.sum(cm) else float("nan")


def fit_fold(train, segments, label_of, model_config, train_config, seed) -> TrainResult:
    """Fold statistics, assembly and training for one fold's training sessions."""
    llds, labels = [], []
    for s in train:
        for g in segments[s.session_id]:
            llds.append(g.lld)
            labels.append(label_of[s.session_id])
    stats = compute_fold_stats(llds)
    # round to the precision the weight file stores so a reloaded model scores identically
    stats = FoldStats(stats.mean.astype(np.float32).astype(np.float64), stats.std.astype(np.float32).astype(np.float64))
    x = np.stack([assemble_feature_matrix(m, stats).values for m in llds]).astype(np.float32)
    cfg = TrainConfig(**{**train_config.__dict__, "seed": seed})
    result = train_fold(x, labels, model_config, cfg)
    result.model.feature_stats = stats
    return result
