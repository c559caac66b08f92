"""Evaluation harness: fluency, attribute transfer, fairness gaps, task
scores, and biased training-set sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .backends import EmbeddingBackend
from .corpus import Occurrence, context_window
from .errors import InsufficientCellError, PreconditionError, UndefinedMetricError
from .lm import LMBackend
from .subspace import ClassifierConfig, _train_on_matrices
from .tokenizer import WordpieceTokenizer

log = logging.getLogger(__name__)

_tokenizer = WordpieceTokenizer()


@dataclass
class EvalScores:
    perplexity: float
    transfer_accuracy: float

    def __post_init__(self):
        if self.perplexity <= 0:
            raise PreconditionError("perplexity must be positive")
        if not 0.0 <= self.transfer_accuracy <= 1.0:
            raise PreconditionError("transfer_accuracy must be in [0, 1]")


@dataclass
class FairnessReport:
    tprd: float
    fprd: float
    accuracy: float
    f1: float
    group_counts: dict

    def to_dict(self):
        return {
            "tprd": self.tprd,
            "fprd": self.fprd,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "group_counts": self.group_counts,
        }


@dataclass
class BiasSampleSpec:
    n: int
    positive_fraction: float
    female_in_positive_fraction: float
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise PreconditionError("n must be positive")
        for name in ("positive_fraction", "female_in_positive_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise PreconditionError(f"{name} must be in [0, 1]")

    def cell_counts(self) -> dict[tuple[int, str], int]:
        """Integer cell sizes: floor rounding, remainder to the majority
        cell of each split."""
        n_pos = int(self.n * self.positive_fraction)
        n_neg = self.n - n_pos
        f_pos = int(n_pos * self.female_in_positive_fraction)
        m_pos = n_pos - f_pos
        # negatives mirror the positive-class imbalance
        f_neg = int(n_neg * (1.0 - self.female_in_positive_fraction))
        m_neg = n_neg - f_neg
        return {
            (1, "female"): f_pos, (1, "male"): m_pos,
            (0, "female"): f_neg, (0, "male"): m_neg,
        }


def perplexity(texts, lm: LMBackend, tokenizer: WordpieceTokenizer | None = None) -> float:
    """exp of the token-pooled mean negative log-likelihood."""
    texts = list(texts)
    if not texts:
        raise PreconditionError("perplexity needs at least one text")
    tokenizer = tokenizer or _tokenizer
    total_nll = 0.0
    total_tokens = 0
    for text in texts:
        tokens = tokenizer.word_tokens(text) if isinstance(text, str) else list(text)
        nll, count = lm.nll(tokens)
        total_nll += nll
        total_tokens += count
    if total_tokens == 0:
        raise PreconditionError("no tokens to score")
    return float(np.exp(total_nll / total_tokens))


class TextAttributeClassifier:
    """Document-level attribute classifier over mean-pooled embeddings.

    Uses the same feed-forward trainer as the subspace classifier, fit on
    group-labeled original texts.
    """

    def __init__(self, backend: EmbeddingBackend, classifier, groups: tuple[str, str],
                 tokenizer: WordpieceTokenizer | None = None, window: int = 16):
        self.backend = backend
        self.classifier = classifier
        self.groups = groups
        self.tokenizer = tokenizer or _tokenizer
        self.window = window

    @classmethod
    def fit(cls, texts, groups, backend: EmbeddingBackend,
            config: ClassifierConfig | None = None,
            tokenizer: WordpieceTokenizer | None = None, window: int = 16):
        texts = list(texts)
        groups = list(groups)
        if len(texts) != len(groups):
            raise PreconditionError("texts and groups must have equal length")
        labels = sorted({g for g in groups if g is not None})
        if len(labels) != 2:
            raise PreconditionError(f"exactly two groups required, got {labels}")
        tokenizer = tokenizer or _tokenizer
        pooled = {labels[0]: [], labels[1]: []}
        helper = cls(backend, None, (labels[0], labels[1]), tokenizer, window)
        for text, group in zip(texts, groups):
            if group is None:
                continue
            pooled[group].append(helper.pool(text))
        classifier = _train_on_matrices(
            np.stack(pooled[labels[0]]), np.stack(pooled[labels[1]]),
            config or ClassifierConfig(),
        )
        helper.classifier = classifier
        return helper

    def pool(self, text) -> np.ndarray:
        tokens = self.tokenizer.word_tokens(text) if isinstance(text, str) else list(text)
        if not tokens:
            return np.zeros(self.backend.dim)
        vectors = []
        for i, token in enumerate(tokens):
            context, center = context_window(tokens, i, self.window)
            occ = Occurrence(token.lower(), "query", i, context, center)
            vectors.append(self.backend.embed(occ).vector)
        return np.mean(vectors, axis=0)

    def predict_proba(self, text) -> dict[str, float]:
        pa, pb = self.classifier.classify(self.pool(text))
        return {self.groups[0]: pa, self.groups[1]: pb}


def transfer_accuracy(originals, counterfactuals, attr_clf: TextAttributeClassifier) -> float:
    """Mean over instances of 1 - P(original attribute | counterfactual).

    The original attribute is the classifier's own call on the original
    text, so no gold group labels are needed at scoring time.
    """
    originals = list(originals)
    counterfactuals = list(counterfactuals)
    if len(originals) != len(counterfactuals):
        raise PreconditionError("originals and counterfactuals must have equal length")
    if not originals:
        raise PreconditionError("transfer accuracy needs at least one pair")
    total = 0.0
    for original, counterfactual in zip(originals, counterfactuals):
        source_probs = attr_clf.predict_proba(original)
        source_attr = max(sorted(source_probs), key=lambda g: source_probs[g])
        total += 1.0 - attr_clf.predict_proba(counterfactual)[source_attr]
    return total / len(originals)


def _rate(cells, group, label) -> Fraction:
    hits, total = cells[(group, label)]
    if total == 0:
        raise UndefinedMetricError(f"(group={group!r}, label={label})")
    return Fraction(hits, total)


def tprd_fprd(predictions, labels, groups) -> FairnessReport:
    """Absolute true/false-positive-rate differences between two groups,
    computed with exact rational arithmetic on the raw counts."""
    predictions = [int(p) for p in predictions]
    labels = [int(y) for y in labels]
    groups = list(groups)
    if not len(predictions) == len(labels) == len(groups):
        raise PreconditionError("predictions, labels, groups must have equal length")
    if any(p not in (0, 1) for p in predictions) or any(y not in (0, 1) for y in labels):
        raise PreconditionError("labels and predictions must be binary")
    names = sorted(set(groups))
    if len(names) != 2:
        raise PreconditionError(f"exactly two groups required, got {names}")
    cells = {(g, y): [0, 0] for g in names for y in (0, 1)}
    for pred, label, group in zip(predictions, labels, groups):
        cell = cells[(group, label)]
        cell[0] += pred
        cell[1] += 1
    tprd = abs(_rate(cells, names[0], 1) - _rate(cells, names[1], 1))
    fprd = abs(_rate(cells, names[0], 0) - _rate(cells, names[1], 0))
    acc, f1 = accuracy_f1(predictions, labels)
    counts = {f"{g}/{'pos' if y else 'neg'}": cells[(g, y)][1] for g in names for y in (0, 1)}
    return FairnessReport(float(tprd), float(fprd), acc, f1, counts)


def accuracy_f1(predictions, labels) -> tuple[float, float]:
    """Accuracy and F1 of the positive class; F1 is 0 (with a warning)
    when no positives exist on either side."""
    predictions = [int(p) for p in predictions]
    labels = [int(y) for y in labels]
    if len(predictions) != len(labels):
        raise PreconditionError("predictions and labels must have equal length")
    if not predictions:
        raise PreconditionError("empty prediction list")
    tp = sum(1 for p, y in zip(predictions, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(predictions, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(predictions, labels) if p == 0 and y == 1)
    correct = sum(1 for p, y in zip(predictions, labels) if p == y)
    accuracy = float(Fraction(correct, len(predictions)))
    if tp == 0:
        if fp == 0 and fn == 0:
            log.warning("no positive predictions or labels; defining F1 = 0")
        return accuracy, 0.0
    f1 = Fraction(2 * tp, 2 * tp + fp + fn)
    return accuracy, float(f1)


def induce_bias_sample(dataset, spec: BiasSampleSpec, female_group: str = "female"):
    """Deterministically sample a label/group-imbalanced training set.

    Cell sizes come from ``spec.cell_counts()`` (floor rounding); within
    each cell the sample is a seeded choice without replacement. Raises when a cell has
    too few candidates, naming the cell.
    """
    dataset = list(dataset)
    by_cell: dict[tuple[int, str], list[int]] = {}
    for i, record in enumerate(dataset):
        label = int(record["label"] if isinstance(record, dict) else record.label)
        group = record["group"] if isinstance(record, dict) else record.group
        side = female_group if group == female_group else "male"
        by_cell.setdefault((label, side), []).append(i)
    rng = np.random.default_rng(spec.seed)
    chosen: list[int] = []
    for cell, need in sorted(spec.cell_counts().items(), key=str):
        pool = by_cell.get(cell, [])
        if len(pool) < need:
            raise InsufficientCellError(cell, len(pool), need)
        picked = rng.choice(len(pool), size=need, replace=False)
        chosen.extend(pool[j] for j in sorted(picked))
    return [dataset[i] for i in sorted(chosen)]


def load_predictions(path):
    """Read prediction records {"pred", "label", "group"} from JSONL."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            for key in ("pred", "label", "group"):
                if key not in record:
                    raise PreconditionError(f"{path}:line {lineno}: missing {key!r}")
            rows.append(record)
    if not rows:
        raise PreconditionError(f"no prediction records in {path}")
    return rows
