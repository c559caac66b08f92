"""Attribute-subspace classifier: training from a word-pair prompt and
threshold-based attribute-word discovery."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backends import EmbeddingBackend, embedding_matrix
from .checkpoint import read_checkpoint, write_checkpoint
from .corpus import DEFAULT_WINDOW, TokenizedCorpus, find_occurrences
from .errors import (
    DimensionMismatchError,
    InsufficientOccurrencesError,
    PreconditionError,
    TrainingDivergenceError,
)

log = logging.getLogger(__name__)

SIDE_A = "a"
SIDE_B = "b"


@dataclass(frozen=True)
class PromptPair:
    word_a: str
    word_b: str

    def __post_init__(self):
        if not self.word_a or not self.word_b:
            raise PreconditionError("prompt words must be non-empty")
        if self.word_a.lower() == self.word_b.lower():
            raise PreconditionError("prompt words must differ")


@dataclass
class LabeledEmbeddingSet:
    embeddings: list
    label: str

    def __post_init__(self):
        if self.label not in (SIDE_A, SIDE_B):
            raise PreconditionError(f"label must be {SIDE_A!r} or {SIDE_B!r}")

    def matrix(self) -> np.ndarray:
        return embedding_matrix(self.embeddings)


@dataclass
class ClassifierConfig:
    hidden: int | None = None
    epochs: int = 200
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0
    holdout: float = 0.2
    patience: int = 25


@dataclass
class DiscoveryConfig:
    threshold_phi: float = 0.95
    min_instance_count: int = 1
    max_instances_per_word: int = 256

    def __post_init__(self):
        if not 0.0 < self.threshold_phi <= 1.0:
            raise PreconditionError("threshold_phi must be in (0, 1]")
        if self.min_instance_count < 1:
            raise PreconditionError("min_instance_count must be >= 1")


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, 2),
        )

    def forward(self, x):
        return self.net(x)


class SubspaceClassifier:
    """One-hidden-layer feed-forward net producing P(a), P(b)."""

    def __init__(self, module: _Mlp, input_dim: int, hidden: int, meta: dict):
        self._module = module
        self.input_dim = input_dim
        self.hidden = hidden
        self.meta = meta

    @property
    def holdout_accuracy(self) -> float:
        return self.meta["holdout_accuracy"]

    def probabilities(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
        if vectors.shape[1] != self.input_dim:
            raise DimensionMismatchError(
                f"expected dimension {self.input_dim}, got {vectors.shape[1]}"
            )
        with torch.no_grad():
            logits = self._module(torch.from_numpy(vectors))
            probs = torch.softmax(logits, dim=1)
        return probs.numpy().astype(np.float64)

    def classify(self, embedding) -> tuple[float, float]:
        vector = embedding.vector if hasattr(embedding, "vector") else embedding
        pa, pb = self.probabilities(np.asarray(vector))[0]
        return float(pa), float(pb)

    def save(self, path) -> None:
        arrays = {k: v.detach().numpy() for k, v in self._module.state_dict().items()}
        meta = dict(self.meta, input_dim=self.input_dim, hidden=self.hidden)
        write_checkpoint(path, "subspace-classifier", meta, arrays)

    @classmethod
    def load(cls, path) -> "SubspaceClassifier":
        meta, arrays = read_checkpoint(path, "subspace-classifier")
        module = _Mlp(meta["input_dim"], meta["hidden"])
        module.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        module.eval()
        extra = {k: v for k, v in meta.items() if k not in ("input_dim", "hidden")}
        return cls(module, meta["input_dim"], meta["hidden"], extra)


def collect_prompt_embeddings(corpus: TokenizedCorpus, backend: EmbeddingBackend,
                              prompt: PromptPair, min_instance_count: int = 1,
                              window: int = DEFAULT_WINDOW,
                              max_instances: int | None = None):
    """Embed every instance of the two prompt words."""
    sets = []
    for word, label in ((prompt.word_a, SIDE_A), (prompt.word_b, SIDE_B)):
        occs = find_occurrences(corpus, word, window)
        if len(occs) < min_instance_count:
            raise InsufficientOccurrencesError(word, len(occs), min_instance_count)
        if max_instances is not None:
            occs = occs[:max_instances]
        sets.append(LabeledEmbeddingSet(backend.embed_many(occs), label))
    return sets[0], sets[1]


def default_hidden_width(dim: int) -> int:
    return max(64, dim // 4)


def _train_on_matrices(mat_a: np.ndarray, mat_b: np.ndarray,
                       config: ClassifierConfig) -> SubspaceClassifier:
    if mat_a.size == 0 or mat_b.size == 0:
        raise PreconditionError("both embedding sets must be non-empty")
    if mat_a.shape[1] != mat_b.shape[1]:
        raise DimensionMismatchError(
            f"set dimensions differ: {mat_a.shape[1]} vs {mat_b.shape[1]}"
        )
    rng = np.random.default_rng(config.seed)
    # balance the classes by downsampling the larger side
    n = min(len(mat_a), len(mat_b))
    if len(mat_a) > n:
        mat_a = mat_a[rng.choice(len(mat_a), size=n, replace=False)]
    if len(mat_b) > n:
        mat_b = mat_b[rng.choice(len(mat_b), size=n, replace=False)]
    x = np.concatenate([mat_a, mat_b]).astype(np.float32)
    y = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    n_val = max(1, int(round(config.holdout * len(x)))) if len(x) > 1 else 0
    x_val, y_val = x[:n_val], y[:n_val]
    x_tr, y_tr = x[n_val:], y[n_val:]
    if len(x_tr) == 0:
        x_tr, y_tr = x, y

    dim = x.shape[1]
    hidden = config.hidden or default_hidden_width(dim)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        module = _Mlp(dim, hidden)
        optimizer = torch.optim.Adam(module.parameters(), lr=config.lr)
        loss_fn = nn.CrossEntropyLoss()
        xt = torch.from_numpy(x_tr)
        yt = torch.from_numpy(y_tr)
        eval_x = torch.from_numpy(x_val) if n_val else xt
        eval_y = torch.from_numpy(y_val) if n_val else yt
        best_state = {k: v.clone() for k, v in module.state_dict().items()}
        best_loss = float("inf")
        best_epoch = 0
        stale = 0
        for epoch in range(config.epochs):
            perm = torch.from_numpy(rng.permutation(len(xt)))
            module.train()
            for start in range(0, len(xt), config.batch):
                idx = perm[start:start + config.batch]
                optimizer.zero_grad()
                loss = loss_fn(module(xt[idx]), yt[idx])
                if not torch.isfinite(loss):
                    raise TrainingDivergenceError(epoch)
                loss.backward()
                optimizer.step()
            module.eval()
            with torch.no_grad():
                val_loss = float(loss_fn(module(eval_x), eval_y))
            if not np.isfinite(val_loss):
                raise TrainingDivergenceError(epoch)
            if val_loss < best_loss - 1e-6:
                best_loss = val_loss
                best_epoch = epoch
                best_state = {k: v.clone() for k, v in module.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale > config.patience:
                    break
        module.load_state_dict(best_state)
        module.eval()
        with torch.no_grad():
            pred = module(eval_x).argmax(dim=1)
            holdout_acc = float((pred == eval_y).to(torch.float64).mean())
    meta = {
        "seed": config.seed,
        "epochs_run": best_epoch + 1,
        "holdout_accuracy": holdout_acc,
    }
    return SubspaceClassifier(module, dim, hidden, meta)


def train_subspace_classifier(set_a: LabeledEmbeddingSet, set_b: LabeledEmbeddingSet,
                              config: ClassifierConfig | None = None) -> SubspaceClassifier:
    """Fit the classifier on two labeled embedding sets.

    Training is deterministic given the seed; the larger class is
    downsampled; held-out accuracy on a 20% split is recorded in the
    model metadata.
    """
    config = config or ClassifierConfig()
    return _train_on_matrices(set_a.matrix(), set_b.matrix(), config)


@dataclass(frozen=True)
class WordScore:
    word: str
    max_prob_a: float
    max_prob_b: float
    instance_count: int


def score_vocabulary(corpus: TokenizedCorpus, backend: EmbeddingBackend,
                     classifier: SubspaceClassifier, config: DiscoveryConfig,
                     window: int = DEFAULT_WINDOW) -> list[WordScore]:
    """Per-word maxima of the classifier probabilities over instances.

    Only single-subtoken words with at least ``min_instance_count``
    instances are scored; scoring is capped at
    ``max_instances_per_word`` instances per word.
    """
    scores = []
    for word, count in sorted(corpus.vocabulary().items()):
        if count < config.min_instance_count:
            continue
        if corpus.subtoken_count(word) != 1:
            continue
        occs = find_occurrences(corpus, word, window)[:config.max_instances_per_word]
        probs = classifier.probabilities(embedding_matrix(backend.embed_many(occs)))
        scores.append(WordScore(
            word=word,
            max_prob_a=float(probs[:, 0].max()),
            max_prob_b=float(probs[:, 1].max()),
            instance_count=len(occs),
        ))
    return scores


def discover_attribute_words(corpus: TokenizedCorpus, backend: EmbeddingBackend,
                             classifier: SubspaceClassifier, config: DiscoveryConfig,
                             prompt: PromptPair | None = None,
                             window: int = DEFAULT_WINDOW,
                             scores: list[WordScore] | None = None):
    """Words with at least one instance scoring above the threshold.

    Returns (set_a, set_b); a word can land in both.  When a prompt is
    given and the classifier's held-out accuracy clears the threshold,
    the prompt words are included on their own sides.
    """
    if scores is None:
        scores = score_vocabulary(corpus, backend, classifier, config, window)
    phi = config.threshold_phi
    set_a = {s.word for s in scores if s.max_prob_a > phi}
    set_b = {s.word for s in scores if s.max_prob_b > phi}
    if prompt is not None and classifier.holdout_accuracy > phi:
        set_a.add(prompt.word_a.lower())
        set_b.add(prompt.word_b.lower())
    return set_a, set_b


def write_discovery_report(path, scores: list[WordScore], config: DiscoveryConfig) -> None:
    """TSV report: word, side, max probability, instance count."""
    with open(path, "w", encoding="utf-8") as fh:
        for score in scores:
            for side, prob in ((SIDE_A, score.max_prob_a), (SIDE_B, score.max_prob_b)):
                if prob > config.threshold_phi:
                    fh.write(f"{score.word}\t{side}\t{prob:.6f}\t{score.instance_count}\n")
