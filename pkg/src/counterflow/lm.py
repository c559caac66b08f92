"""Count-based n-gram toys: plausibility scoring, mask infilling, and
autoregressive scoring for perplexity.

These are the hermetic stand-ins for the pretrained discriminator,
infiller, and fluency scorer.  They are fit on reference token sequences
(normally the original corpus) and are fully deterministic.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections import Counter, defaultdict

from .rewrite import DiscriminatorBackend, InfillerBackend, MaskedText, apply_casing
from .tokenizer import MASK, WordpieceTokenizer

BOS = "<s>"
EOS = "</s>"


def _fold(tokens):
    return [t.lower() for t in tokens]


class TrigramStats:
    """Trigram/bigram/unigram counts over padded token sequences."""

    def __init__(self, sequences, alpha: float = 0.1):
        self.alpha = alpha
        self.tri = Counter()
        self.bi = Counter()
        self.uni = Counter()
        self.vocab = set()
        for seq in sequences:
            padded = [BOS, BOS] + _fold(seq) + [EOS, EOS]
            self.vocab.update(padded[2:-2])
            for i in range(len(padded)):
                self.uni[padded[i]] += 1
                if i + 1 < len(padded):
                    self.bi[(padded[i], padded[i + 1])] += 1
                if i + 2 < len(padded):
                    self.tri[(padded[i], padded[i + 1], padded[i + 2])] += 1
        self.left_ctx = Counter()
        self.mid_ctx = Counter()
        self.right_ctx = Counter()
        self.left_best = defaultdict(int)
        self.mid_best = defaultdict(int)
        self.right_best = defaultdict(int)
        for (x, y, z), count in self.tri.items():
            self.left_ctx[(x, y)] += count
            self.mid_ctx[(x, z)] += count
            self.right_ctx[(y, z)] += count
            self.left_best[(x, y)] = max(self.left_best[(x, y)], count)
            self.mid_best[(x, z)] = max(self.mid_best[(x, z)], count)
            self.right_best[(y, z)] = max(self.right_best[(y, z)], count)

    def cond_prob(self, word: str, left2: str, left1: str) -> float:
        """Smoothed P(word | left2, left1) with bigram/unigram backoff."""
        v = len(self.vocab) + 2
        if self.left_ctx[(left2, left1)] > 0:
            return (self.tri[(left2, left1, word)] + self.alpha) / (
                self.left_ctx[(left2, left1)] + self.alpha * v)
        if self.uni[left1] > 0:
            return (self.bi[(left1, word)] + self.alpha) / (
                self.uni[left1] + self.alpha * v)
        return 1.0 / v


class NgramPlausibility(DiscriminatorBackend):
    """Token plausibility as the worst-case trigram view.

    Each token is judged as the final, middle, and initial element of the
    trigram windows covering it; views whose context was never observed
    are uninformative and skipped.  A view scores 1 when its window was
    ever observed; an unseen window in a known context scores
    alpha / (best_count + alpha), so better-attested contexts condemn an
    unseen token more strongly.  The token score is the minimum over
    informative views, which lands in (0, 1] and drops near zero exactly
    when some observed context never licenses this token.
    """

    deterministic = True

    def __init__(self, reference_sequences, alpha: float = 0.1, name: str = "toy-ngram"):
        self.name = name
        self.stats = TrigramStats(reference_sequences, alpha)

    def score_tokens(self, tokens) -> list[float]:
        stats = self.stats
        alpha = stats.alpha
        padded = [BOS, BOS] + _fold(tokens) + [EOS, EOS]
        scores = []
        for i in range(2, len(padded) - 2):
            token = padded[i]
            views = []
            left = (padded[i - 2], padded[i - 1])
            if stats.left_ctx[left] > 0:
                views.append((stats.tri[(left[0], left[1], token)], stats.left_best[left]))
            mid = (padded[i - 1], padded[i + 1])
            if stats.mid_ctx[mid] > 0:
                views.append((stats.tri[(mid[0], token, mid[1])], stats.mid_best[mid]))
            right = (padded[i + 1], padded[i + 2])
            if stats.right_ctx[right] > 0:
                views.append((stats.tri[(token, right[0], right[1])], stats.right_best[right]))
            if not views:
                scores.append(1.0)
                continue
            scores.append(min(
                1.0 if count > 0 else alpha / (best + alpha)
                for count, best in views
            ))
        return scores


class NgramInfiller(InfillerBackend):
    """Greedy left-to-right mask filling with trigram chain scoring.

    Candidates are the reference vocabulary words plus the empty fill; a
    candidate is scored by how well it is licensed by its left context
    and how well it licenses the following token.  The winning word is
    emitted as its subtoken pieces with the masked token's casing pattern.
    """

    deterministic = True

    def __init__(self, reference_sequences, tokenizer: WordpieceTokenizer,
                 alpha: float = 0.01, name: str = "toy-ngram"):
        self.name = name
        self.tokenizer = tokenizer
        self.stats = TrigramStats(reference_sequences, alpha)
        self.candidates = sorted(self.stats.vocab)

    def _word_sequence(self, masked: MaskedText):
        words = []
        for i, token in enumerate(masked.origin_tokens):
            if i in set(masked.masked_token_indices):
                words.append(MASK)
            else:
                words.append(token)
        return words

    def fill(self, masked: MaskedText) -> list[tuple[str, ...]]:
        stats = self.stats
        words = self._word_sequence(masked)
        fills: list[tuple[str, ...]] = []
        resolved: list[str] = []
        for i, word in enumerate(words):
            if word != MASK:
                resolved.append(word)
                continue
            left2, left1 = ([BOS, BOS] + _fold(resolved))[-2:]
            rest = _fold([w for w in words[i + 1:] if w != MASK]) + [EOS, EOS]
            right1, right2 = rest[0], rest[1]
            best_word = ""
            # per-transition geometric means keep the two-transition empty
            # fill comparable with three-transition word fills; deleting is
            # only an option when the resulting adjacency was ever observed
            if stats.bi[(left1, right1)] > 0:
                best_score = (stats.cond_prob(right1, left2, left1)
                              * stats.cond_prob(right2, left1, right1)) ** (1 / 2)
            else:
                best_score = 0.0
            for cand in self.candidates:
                score = (stats.cond_prob(cand, left2, left1)
                         * stats.cond_prob(right1, left1, cand)
                         * stats.cond_prob(right2, cand, right1)) ** (1 / 3)
                # candidates are sorted, so on ties the lexicographically
                # smaller word sticks; a word beats the empty fill on a tie
                if score > best_score or (score == best_score and best_word == ""):
                    best_word = cand
                    best_score = score
            if best_word:
                cased = apply_casing(masked.origin_tokens[i], best_word)
                fills.append(tuple(self.tokenizer.subtokenize(cased)))
                resolved.append(best_word)
            else:
                fills.append(())
        return fills


class LMBackend(ABC):
    """Autoregressive scorer: total negative log-likelihood of a token
    sequence plus the number of scored positions."""

    name: str

    @abstractmethod
    def nll(self, tokens) -> tuple[float, int]:
        raise NotImplementedError


class UniformLM(LMBackend):
    """Assigns probability 1/V to every token."""

    def __init__(self, vocab_size: int, name: str = "uniform"):
        if vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        self.vocab_size = vocab_size
        self.name = name

    def nll(self, tokens) -> tuple[float, int]:
        n = len(tokens)
        return n * math.log(self.vocab_size), n


class BigramLM(LMBackend):
    """Add-alpha smoothed bigram model fit on reference sequences."""

    def __init__(self, reference_sequences, alpha: float = 0.1, name: str = "toy-bigram"):
        self.name = name
        self.alpha = alpha
        self.bi = Counter()
        self.uni = Counter()
        self.vocab = set()
        for seq in reference_sequences:
            padded = [BOS] + _fold(seq) + [EOS]
            self.vocab.update(padded[1:-1])
            for i in range(len(padded) - 1):
                self.uni[padded[i]] += 1
                self.bi[(padded[i], padded[i + 1])] += 1
        # outcomes: vocabulary plus end-of-sequence and unseen-word bucket
        self._v = len(self.vocab) + 2

    def _prob(self, prev: str, token: str) -> float:
        return (self.bi[(prev, token)] + self.alpha) / (self.uni[prev] + self.alpha * self._v)

    def nll(self, tokens) -> tuple[float, int]:
        padded = [BOS] + [t if t in self.vocab else "<unk>" for t in _fold(tokens)] + [EOS]
        total = 0.0
        for i in range(1, len(padded)):
            total -= math.log(self._prob(padded[i - 1], padded[i]))
        return total, len(padded) - 1
