"""Invertible disentangling flow over contextual embeddings.

Identity-initialized invertible linear mixing layers alternate with
affine coupling blocks (fixed seeded permutations inside each coupling)
to map an embedding to an interpretable vector whose leading ``k``
dimensions carry the attribute. Training pulls same-group pairs together
in that leading block; swapping the block with the complementary group's
prototype and inverting yields a counterfactual embedding.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backends import EmbeddingBackend, embedding_matrix
from .checkpoint import read_checkpoint, write_checkpoint
from .corpus import DEFAULT_WINDOW, TokenizedCorpus, find_occurrences
from .dictionary import PairCandidate
from .errors import (
    DimensionMismatchError,
    EstimationError,
    NotFittedError,
    NumericOverflowError,
    PreconditionError,
    TrainingDivergenceError,
)

log = logging.getLogger(__name__)


@dataclass
class FlowTrainConfig:
    sigma: float = 0.9
    epochs: int = 400
    batch: int = 256
    lr: float = 1e-3
    seed: int = 0
    k: int | None = None
    depth: int = 2
    width_mult: int = 2
    scale_clamp: float = 1.0
    estimate_epochs: int = 120
    variance_ratio: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.sigma < 1.0:
            raise PreconditionError("sigma must lie strictly inside (0, 1)")


class _InvertibleLinear(nn.Module):
    """Trainable invertible mixing, parameterized as L U with unit lower
    and upper triangular factors and a positive diagonal. Initialized to
    the identity; the log-determinant is the sum of the diagonal
    log-scales."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.lower = nn.Parameter(torch.zeros(dim, dim))
        self.upper = nn.Parameter(torch.zeros(dim, dim))
        self.log_diag = nn.Parameter(torch.zeros(dim))
        self.register_buffer("mask_lower", torch.tril(torch.ones(dim, dim), -1))
        self.register_buffer("mask_upper", torch.triu(torch.ones(dim, dim), 1))

    def _factors(self):
        eye = torch.eye(self.dim, dtype=self.log_diag.dtype)
        lower = eye + self.lower * self.mask_lower
        upper = torch.diag(torch.exp(self.log_diag)) + self.upper * self.mask_upper
        return lower, upper

    def forward(self, x):
        lower, upper = self._factors()
        y = x @ upper.T @ lower.T
        return y, self.log_diag.sum().expand(x.shape[0])

    def inverse(self, y):
        lower, upper = self._factors()
        x = torch.linalg.solve_triangular(lower, y.T, upper=False, unitriangular=True)
        x = torch.linalg.solve_triangular(upper, x, upper=True)
        return x.T


class _CouplingBlock(nn.Module):
    """Affine coupling: the first half conditions a scale/shift of the
    second half. The scale is tanh-clamped and the last linear layer is
    zero-initialized, so a fresh block is exactly the identity."""

    def __init__(self, dim: int, width: int, scale_clamp: float, perm: np.ndarray):
        super().__init__()
        self.dim = dim
        self.d1 = dim // 2
        self.d2 = dim - self.d1
        self.scale_clamp = scale_clamp
        self.register_buffer("perm", torch.from_numpy(perm.astype(np.int64)))
        self.register_buffer("inv_perm", torch.from_numpy(np.argsort(perm).astype(np.int64)))
        self.net = nn.Sequential(
            nn.Linear(self.d1, width),
            nn.GELU(),
            nn.Linear(width, width),
            nn.GELU(),
            nn.Linear(width, 2 * self.d2),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def _scale_shift(self, x1):
        raw = self.net(x1)
        s, t = raw[:, :self.d2], raw[:, self.d2:]
        s = self.scale_clamp * torch.tanh(s / self.scale_clamp)
        return s, t

    def forward(self, x):
        # couple in permuted coordinates, then return to the original
        # ordering so a zero-initialized block is exactly the identity
        x = x[:, self.perm]
        x1, x2 = x[:, :self.d1], x[:, self.d1:]
        s, t = self._scale_shift(x1)
        y2 = x2 * torch.exp(s) + t
        y = torch.cat([x1, y2], dim=1)
        return y[:, self.inv_perm], s.sum(dim=1)

    def inverse(self, y):
        y = y[:, self.perm]
        y1, y2 = y[:, :self.d1], y[:, self.d1:]
        s, t = self._scale_shift(y1)
        x2 = (y2 - t) * torch.exp(-s)
        x = torch.cat([y1, x2], dim=1)
        return x[:, self.inv_perm]


class FlowModel(nn.Module):
    """Stack of coupling blocks with per-group prototypes over the
    leading ``k`` interpretable dimensions."""

    def __init__(self, dim: int, k: int, depth: int = 2, width_mult: int = 2,
                 scale_clamp: float = 1.0, seed: int = 0, meta: dict | None = None):
        super().__init__()
        if not 1 <= k < dim:
            raise PreconditionError(f"k must satisfy 1 <= k < dim, got k={k}, dim={dim}")
        self.dim = dim
        self.k = k
        self.depth = depth
        self.width_mult = width_mult
        self.scale_clamp = scale_clamp
        self.seed = seed
        self.meta = meta or {}
        rng = np.random.default_rng(seed)
        width = max(8, width_mult * dim)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            blocks = []
            for _ in range(depth):
                blocks.append(_InvertibleLinear(dim))
                blocks.append(_CouplingBlock(dim, width, scale_clamp, rng.permutation(dim)))
            self.blocks = nn.ModuleList(blocks)
        self.register_buffer("prototype_a", torch.zeros(k, dtype=torch.float64))
        self.register_buffer("prototype_b", torch.zeros(k, dtype=torch.float64))
        self.register_buffer("has_prototypes", torch.tensor(False))
        self.double()

    def _as_tensor(self, z) -> tuple[torch.Tensor, bool]:
        array = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if array.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"expected dimension {self.dim}, got {array.shape[1]}"
            )
        if not np.all(np.isfinite(array)):
            raise PreconditionError("input contains non-finite values")
        return torch.from_numpy(array), np.asarray(z).ndim == 1

    def _forward_tensor(self, x: torch.Tensor):
        logdet = torch.zeros(x.shape[0], dtype=x.dtype)
        for i, block in enumerate(self.blocks):
            x, ld = block(x)
            if not torch.all(torch.isfinite(x)):
                raise NumericOverflowError(i, "forward")
            logdet = logdet + ld
        return x, logdet

    def _inverse_tensor(self, y: torch.Tensor):
        for i, block in enumerate(reversed(self.blocks)):
            y = block.inverse(y)
            if not torch.all(torch.isfinite(y)):
                raise NumericOverflowError(len(self.blocks) - 1 - i, "inverse")
        return y

    def forward_np(self, z):
        """Map to the interpretable space; returns (z_tilde, logdet)."""
        x, single = self._as_tensor(z)
        with torch.no_grad():
            y, logdet = self._forward_tensor(x)
        y = y.numpy()
        logdet = logdet.numpy()
        if single:
            return y[0], float(logdet[0])
        return y, logdet

    def inverse_np(self, z_tilde):
        x, single = self._as_tensor(z_tilde)
        with torch.no_grad():
            y = self._inverse_tensor(x)
        y = y.numpy()
        return y[0] if single else y

    def log_likelihood(self, z):
        """Base-Gaussian density of the transformed point plus the
        log-determinant of the transformation."""
        x, single = self._as_tensor(z)
        with torch.no_grad():
            y, logdet = self._forward_tensor(x)
            ll = (
                -0.5 * (y ** 2).sum(dim=1)
                - 0.5 * self.dim * np.log(2 * np.pi)
                + logdet
            ).numpy()
        return float(ll[0]) if single else ll

    def prototype(self, group: str) -> np.ndarray:
        if not bool(self.has_prototypes):
            raise NotFittedError("prototypes not fitted; train the flow first")
        if group == "a":
            return self.prototype_a.numpy().copy()
        if group == "b":
            return self.prototype_b.numpy().copy()
        raise PreconditionError(f"unknown group {group!r}")

    def set_prototypes(self, proto_a, proto_b) -> None:
        proto_a = torch.as_tensor(proto_a, dtype=torch.float64)
        proto_b = torch.as_tensor(proto_b, dtype=torch.float64)
        if not (torch.isfinite(proto_a).all() and torch.isfinite(proto_b).all()):
            raise PreconditionError("prototypes must be finite")
        self.prototype_a.copy_(proto_a)
        self.prototype_b.copy_(proto_b)
        self.has_prototypes.fill_(True)

    def save(self, path) -> None:
        arrays = {name: tensor.detach().numpy() for name, tensor in self.state_dict().items()}
        meta = dict(
            self.meta,
            dim=self.dim, k=self.k, depth=self.depth,
            width_mult=self.width_mult, scale_clamp=self.scale_clamp,
            seed=self.seed,
        )
        write_checkpoint(path, "flow", meta, arrays)

    @classmethod
    def load(cls, path) -> "FlowModel":
        meta, arrays = read_checkpoint(path, "flow")
        core = {k: meta.pop(k) for k in ("dim", "k", "depth", "width_mult", "scale_clamp", "seed")}
        model = cls(core["dim"], core["k"], core["depth"], core["width_mult"],
                    core["scale_clamp"], core["seed"], meta=meta)
        state = {name: torch.from_numpy(value) for name, value in arrays.items()}
        model.load_state_dict(state)
        model.eval()
        return model


def pair_loss(model: FlowModel, z1: torch.Tensor, z2: torch.Tensor,
              k: int, sigma: float) -> torch.Tensor:
    """Per-pair training loss for same-group embedding pairs.

    Full-vector Gaussian pull on the first member, off-block pull on the
    second, both log-determinant terms, and the sigma-correlation penalty
    tying the leading blocks of the pair together.
    """
    y1, ld1 = model._forward_tensor(z1)
    y2, ld2 = model._forward_tensor(z2)
    corr = ((y2[:, :k] - sigma * y1[:, :k]) ** 2).sum(dim=1) / (1.0 - sigma ** 2)
    return (
        (y1 ** 2).sum(dim=1) - ld1
        + (y2[:, k:] ** 2).sum(dim=1) - ld2
        + corr
    )


def _group_matrices(labeled):
    """Split (vector, label) pairs into exactly two labeled matrices."""
    if isinstance(labeled, dict):
        items = [(np.asarray(v), k) for k, v in labeled.items()]
        groups = {label: matrix for matrix, label in items}
    else:
        buckets: dict[str, list] = {}
        for vector, label in labeled:
            buckets.setdefault(label, []).append(np.asarray(vector, dtype=np.float64))
        groups = {label: np.stack(vectors) for label, vectors in buckets.items()}
    if len(groups) != 2:
        raise PreconditionError(
            f"exactly two attribute groups required, got {sorted(groups)}"
        )
    keys = sorted(groups)
    mats = [np.asarray(groups[k], dtype=np.float64) for k in keys]
    if mats[0].shape[1] != mats[1].shape[1]:
        raise DimensionMismatchError("group dimensions differ")
    for key, mat in zip(keys, mats):
        if len(mat) < 2:
            raise PreconditionError(f"group {key!r} needs at least 2 embeddings to pair")
    return keys, mats


def forward(model: FlowModel, z):
    """Map to the interpretable space; returns (z_tilde, log-determinant)."""
    return model.forward_np(z)


def inverse(model: FlowModel, z_tilde):
    """Map back from the interpretable space."""
    return model.inverse_np(z_tilde)


def log_likelihood(model: FlowModel, z):
    return model.log_likelihood(z)


def _fit(labeled, config: FlowTrainConfig, k: int, epochs: int) -> FlowModel:
    keys, (mat_a, mat_b) = _group_matrices(labeled)
    dim = mat_a.shape[1]
    model = FlowModel(dim, k, config.depth, config.width_mult,
                      config.scale_clamp, config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    t_a = torch.from_numpy(mat_a)
    t_b = torch.from_numpy(mat_b)
    history = []
    for epoch in range(epochs):
        firsts, seconds = [], []
        for mat in (t_a, t_b):
            z1_idx = rng.permutation(len(mat))
            half = len(z1_idx) // 2
            firsts.append(mat[z1_idx[:half]])
            seconds.append(mat[z1_idx[half:2 * half]])
        z1 = torch.cat(firsts)
        z2 = torch.cat(seconds)
        order = rng.permutation(len(z1))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch):
            idx = torch.from_numpy(order[start:start + config.batch])
            optimizer.zero_grad()
            loss = pair_loss(model, z1[idx], z2[idx], k, config.sigma).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(epoch)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        history.append(epoch_loss / max(1, n_batches))
    model.meta["loss_history"] = history
    model.meta["groups"] = keys
    with torch.no_grad():
        proto_a = model._forward_tensor(t_a)[0][:, :k].mean(dim=0)
        proto_b = model._forward_tensor(t_b)[0][:, :k].mean(dim=0)
    model.set_prototypes(proto_a, proto_b)
    model.eval()
    return model


def estimate_k(labeled, config: FlowTrainConfig, candidate_range=None) -> int:
    """Estimate the attribute-block width from the data.

    A preliminary flow (provisional block of dim/2) is trained, then the
    interpretable dimensions are ranked by between-group over within-group
    variance; k is the number of dimensions whose ratio clears the
    configured threshold (at least 1, at most dim - 1).
    """
    keys, (mat_a, mat_b) = _group_matrices(labeled)
    dim = mat_a.shape[1]
    lo, hi = candidate_range or (1, dim - 1)
    if not 1 <= lo <= hi <= dim - 1:
        raise PreconditionError(f"candidate range must lie within [1, {dim - 1}]")
    total = np.concatenate([mat_a, mat_b])
    if not np.all(np.isfinite(total)) or float(total.var()) == 0.0:
        raise EstimationError("degenerate training data: zero variance")
    provisional = max(1, dim // 2)
    prelim = _fit(labeled, config, provisional, config.estimate_epochs)
    ya = prelim.forward_np(mat_a)[0]
    yb = prelim.forward_np(mat_b)[0]
    mu_a, mu_b = ya.mean(axis=0), yb.mean(axis=0)
    mu = np.concatenate([ya, yb]).mean(axis=0)
    n_a, n_b = len(ya), len(yb)
    between = (n_a * (mu_a - mu) ** 2 + n_b * (mu_b - mu) ** 2) / (n_a + n_b)
    within = (((ya - mu_a) ** 2).sum(axis=0) + ((yb - mu_b) ** 2).sum(axis=0)) / (n_a + n_b)
    if np.all(within <= 0):
        raise EstimationError("degenerate training data: zero within-group variance")
    ratios = between / np.maximum(within, 1e-12)
    k = int((ratios > config.variance_ratio).sum())
    return int(np.clip(k, lo, hi))


def train_flow(labeled, config: FlowTrainConfig | None = None) -> FlowModel:
    """Train the disentangling flow on labeled same-group embeddings.

    ``labeled`` is a sequence of (vector, group) items or a dict of group
    matrices; pairs are drawn uniformly within each group and reshuffled
    every epoch. When ``config.k`` is unset the block width is estimated
    first; either way the value and its origin are recorded in the model
    metadata, and the per-group prototypes are fit at the end.
    """
    config = config or FlowTrainConfig()
    if config.k is not None:
        k, rule = config.k, "fixed"
    else:
        k, rule = estimate_k(labeled, config), f"variance-ratio>{config.variance_ratio}"
    model = _fit(labeled, config, k, config.epochs)
    model.meta["k_rule"] = rule
    model.meta["sigma"] = config.sigma
    return model


def counterfactual_embedding(model: FlowModel, z, target_group: str) -> np.ndarray:
    """Swap the leading interpretable block for the target group's
    prototype and invert. Dimensions beyond the block are untouched."""
    proto = model.prototype(target_group)
    z_tilde, _ = model.forward_np(z)
    single = np.asarray(z).ndim == 1
    z_tilde = np.atleast_2d(z_tilde)
    z_tilde[:, :model.k] = proto
    out = model.inverse_np(z_tilde)
    return out[0] if single and out.ndim == 2 else out


def swap_leading_block(model: FlowModel, z_tilde: np.ndarray, prototype: np.ndarray) -> np.ndarray:
    """Replace the leading k dimensions of an interpretable vector."""
    out = np.array(z_tilde, dtype=np.float64, copy=True)
    if out.ndim == 1:
        out[:model.k] = prototype
    else:
        out[:, :model.k] = prototype
    return out


@dataclass
class VocabTable:
    """Static decoding table: one mean contextual embedding per word."""

    words: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        if len(self.words) != len(self.matrix):
            raise PreconditionError("vocab table rows do not match words")


def build_vocab_table(corpus: TokenizedCorpus, backend: EmbeddingBackend,
                      min_count: int = 1, cap: int = 256,
                      window: int = DEFAULT_WINDOW,
                      single_subtoken_only: bool = True) -> VocabTable:
    words = []
    rows = []
    for word, count in sorted(corpus.vocabulary().items()):
        if count < min_count:
            continue
        if single_subtoken_only and corpus.subtoken_count(word) != 1:
            continue
        occs = find_occurrences(corpus, word, window)[:cap]
        rows.append(embedding_matrix(backend.embed_many(occs)).mean(axis=0))
        words.append(word)
    if not words:
        raise PreconditionError("empty vocabulary table")
    return VocabTable(words, np.stack(rows))


def decode_word(z_prime, table: VocabTable) -> str:
    """Nearest vocabulary word by cosine similarity; exact ties break
    to the lexicographically smaller word."""
    if not table.words:
        raise PreconditionError("empty vocabulary table")
    z_prime = np.asarray(z_prime, dtype=np.float64)
    if z_prime.shape != (table.matrix.shape[1],):
        raise DimensionMismatchError(
            f"expected dimension {table.matrix.shape[1]}, got {z_prime.shape}"
        )
    norms = np.linalg.norm(table.matrix, axis=1) * (np.linalg.norm(z_prime) or 1.0)
    sims = table.matrix @ z_prime / np.maximum(norms, 1e-12)
    best = sims.max()
    candidates = [w for w, s in zip(table.words, sims) if s == best]
    return min(candidates)


def generate_word_pairs(corpus: TokenizedCorpus, set_a, set_b,
                        backend: EmbeddingBackend, model: FlowModel,
                        table: VocabTable | None = None, cap: int = 256,
                        window: int = DEFAULT_WINDOW) -> list[PairCandidate]:
    """Majority-vote counterfactual pairs for the discovered words.

    Every instance of each word is swapped toward the complementary group
    and decoded; the modal decode wins. Words whose modal counterfactual
    is themselves produce no pair.
    """
    table = table or build_vocab_table(corpus, backend, cap=cap, window=window)
    candidates = []
    for side, words, target in (("a", set_a, "b"), ("b", set_b, "a")):
        for word in sorted(words):
            occs = find_occurrences(corpus, word, window)[:cap]
            if not occs:
                continue
            vectors = embedding_matrix(backend.embed_many(occs))
            swapped = counterfactual_embedding(model, vectors, target)
            votes = Counter(decode_word(row, table) for row in np.atleast_2d(swapped))
            top = max(votes.values())
            modal = min(w for w, c in votes.items() if c == top)
            if modal == word:
                continue
            candidates.append(PairCandidate(word, modal, votes[modal], len(occs), side))
    return candidates
