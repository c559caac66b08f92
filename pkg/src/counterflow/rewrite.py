"""Dictionary substitution and two-step error correction (detect, mask, infill)."""

from __future__ import annotations

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

from .dictionary import WordPairDictionary
from .errors import BackendError, CounterflowError, PreconditionError
from .tokenizer import MASK, WordpieceTokenizer

log = logging.getLogger(__name__)


@dataclass
class RewriteTrace:
    """Audit trail of one document rewrite.

    ``masked_spans`` and ``infills`` accumulate across correction passes;
    each span indexes the subtoken stream of its own pass's input text,
    and spans within one pass never overlap.
    """

    substitutions: list = field(default_factory=list)   # (token_index, original, replacement)
    masked_spans: list = field(default_factory=list)    # subtoken (start, end) spans
    infills: list = field(default_factory=list)         # ((start, end), inserted subtokens)
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            "substitutions": [list(s) for s in self.substitutions],
            "masked_spans": [list(s) for s in self.masked_spans],
            "infills": [[list(span), list(fill)] for span, fill in self.infills],
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class MaskedText:
    """Subtoken sequence where each flagged word's full piece span has
    been collapsed into a single mask sentinel."""

    subtokens: tuple[str, ...]
    origin_tokens: tuple[str, ...]
    masked_token_indices: tuple[int, ...]
    masked_spans: tuple[tuple[int, int], ...]


@dataclass
class CorrectionConfig:
    threshold_theta: float = 0.1
    max_mask_fraction: float = 0.3
    protect_substituted: bool = True
    iterations: int = 1

    def __post_init__(self):
        if not 0.0 <= self.threshold_theta < 1.0:
            raise PreconditionError("threshold_theta must be in [0, 1)")
        if self.iterations < 1 or self.iterations > 3:
            raise PreconditionError("iterations must be between 1 and 3")


class DiscriminatorBackend(ABC):
    """Scores each token's in-context plausibility in [0, 1]."""

    name: str
    deterministic: bool

    @abstractmethod
    def score_tokens(self, tokens) -> list[float]:
        raise NotImplementedError


class InfillerBackend(ABC):
    """Proposes replacement subtokens for each mask (zero or more per mask)."""

    name: str
    deterministic: bool

    @abstractmethod
    def fill(self, masked: MaskedText) -> list[tuple[str, ...]]:
        raise NotImplementedError


def apply_casing(template: str, word: str) -> str:
    """Transfer one of the three declared casing patterns onto ``word``."""
    if template.isupper() and len(template) > 1:
        return word.upper()
    if template[:1].isupper():
        return word[:1].upper() + word[1:]
    return word.lower()


def substitute(tokens, dictionary: WordPairDictionary):
    """Replace every token whose case-folded form is in the dictionary
    with its counterpart, preserving the casing pattern."""
    out = list(tokens)
    trace = RewriteTrace()
    for i, token in enumerate(out):
        counterpart = dictionary.counterpart(token)
        if counterpart is not None:
            replacement = apply_casing(token, counterpart)
            trace.substitutions.append((i, token, replacement))
            out[i] = replacement
    return out, trace


def detect_erratic(tokens, discriminator: DiscriminatorBackend,
                   config: CorrectionConfig, protected=()) -> list[int]:
    """Indices of tokens scoring strictly below the threshold.

    Protected indices (substituted attribute tokens) are never flagged.
    At most ``max_mask_fraction`` of the tokens are returned, keeping the
    lowest-scoring ones; of two adjacent flagged tokens only the more
    implausible one is kept per pass, so its neighbour stays available as
    infilling context (a later iteration can still rewrite it).
    """
    try:
        scores = discriminator.score_tokens(list(tokens))
    except CounterflowError:
        raise
    except Exception as exc:
        raise BackendError(f"discriminator {discriminator.name!r} failed: {exc}") from exc
    if len(scores) != len(tokens):
        raise BackendError("discriminator returned wrong number of scores")
    protected = set(protected)
    candidates = sorted(
        (i for i, score in enumerate(scores)
         if score < config.threshold_theta and i not in protected),
        key=lambda i: (scores[i], i),
    )
    cap = int(config.max_mask_fraction * len(tokens))
    kept: list[int] = []
    for index in candidates:
        if len(kept) >= cap:
            break
        if all(abs(index - j) > 1 for j in kept):
            kept.append(index)
    return sorted(kept)


def mask_subtoken_groups(tokens, indices, tokenizer: WordpieceTokenizer) -> MaskedText:
    """Replace each flagged token's entire subtoken span with one mask.

    Adjacent flagged tokens produce adjacent sentinels; unflagged tokens
    keep their full piece sequence.
    """
    indices = set(indices)
    if indices and (min(indices) < 0 or max(indices) >= len(tokens)):
        raise PreconditionError("mask index out of range")
    subtokens: list[str] = []
    spans: list[tuple[int, int]] = []  # spans index the original subtoken stream
    original_pos = 0
    for i, token in enumerate(tokens):
        pieces = tokenizer.subtokenize(token)
        if i in indices:
            spans.append((original_pos, original_pos + len(pieces)))
            subtokens.append(MASK)
        else:
            subtokens.extend(pieces)
        original_pos += len(pieces)
    return MaskedText(
        subtokens=tuple(subtokens),
        origin_tokens=tuple(tokens),
        masked_token_indices=tuple(sorted(indices)),
        masked_spans=tuple(spans),
    )


def _request_fills(masked: MaskedText, infiller: InfillerBackend):
    try:
        fills = infiller.fill(masked)
    except CounterflowError:
        raise
    except Exception as exc:
        raise BackendError(f"infiller {infiller.name!r} failed: {exc}") from exc
    n_masks = sum(1 for s in masked.subtokens if s == MASK)
    if len(fills) != n_masks:
        raise BackendError("infiller returned wrong number of fills")
    return [tuple(fill) for fill in fills]


def infill(masked: MaskedText, infiller: InfillerBackend, tokenizer: WordpieceTokenizer):
    """Replace every mask with generated subtokens and reassemble tokens.

    Returns (tokens, fills) where fills holds the per-mask subtoken
    sequences. Non-masked content is untouched.
    """
    fills = _request_fills(masked, infiller)
    filled: list[str] = []
    fill_iter = iter(fills)
    for piece in masked.subtokens:
        if piece == MASK:
            filled.extend(next(fill_iter))
        else:
            filled.append(piece)
    return tokenizer.merge_subtokens(filled), fills


def correct_tokens(tokens, discriminator, infiller, tokenizer,
                   config: CorrectionConfig, protected=(), trace: RewriteTrace | None = None):
    """Run detect-mask-infill up to ``config.iterations`` times.

    Protected token indices are never masked, and their positions are
    re-derived after each pass since empty or multi-word fills shift
    later indices.
    """
    trace = trace if trace is not None else RewriteTrace()
    current = list(tokens)
    protected = set(protected)
    touched: set[int] = set()
    for _ in range(config.iterations):
        flagged = detect_erratic(current, discriminator, config, protected | touched)
        if not flagged:
            break
        masked = mask_subtoken_groups(current, flagged, tokenizer)
        trace.masked_spans.extend(masked.masked_spans)
        fills = _request_fills(masked, infiller)
        for span, fill in zip(masked.masked_spans, fills):
            trace.infills.append((span, fill))
        new_tokens: list[str] = []
        new_protected: set[int] = set()
        new_touched: set[int] = set()
        fill_iter = iter(fills)
        flagged_set = set(flagged)
        for i, token in enumerate(current):
            if i in flagged_set:
                fill_words = tokenizer.merge_subtokens(next(fill_iter))
                new_touched.update(range(len(new_tokens), len(new_tokens) + len(fill_words)))
                new_tokens.extend(fill_words)
            else:
                if i in protected:
                    new_protected.add(len(new_tokens))
                if i in touched:
                    new_touched.add(len(new_tokens))
                new_tokens.append(token)
        current, protected, touched = new_tokens, new_protected, new_touched
    return current, trace


@dataclass
class ParallelRecord:
    doc_id: str
    source: str
    target: str
    trace: RewriteTrace
    noop: bool = False


def rewrite_document(doc, dictionary, discriminator, infiller, tokenizer,
                     config: CorrectionConfig, correction: bool = True):
    """Substitute then (optionally) error-correct one document."""
    tokens, trace = substitute(doc.tokens, dictionary)
    noop = not trace.substitutions
    if noop:
        trace.flags.append("noop")
    if correction and not noop:
        protected = {i for i, _, _ in trace.substitutions} if config.protect_substituted else set()
        tokens, trace = correct_tokens(
            tokens, discriminator, infiller, tokenizer, config,
            protected=protected, trace=trace,
        )
    target = tokenizer.detokenize(tokens)
    return ParallelRecord(doc.doc_id, doc.text, target, trace, noop)


def build_parallel_corpus(corpus, dictionary, discriminator, infiller,
                          config: CorrectionConfig, correction: bool = True,
                          include_noop: bool = True) -> list[ParallelRecord]:
    """One (original, counterfactual) pair per document.

    Per-document failures are logged and skipped; the rest of the corpus
    still goes through.  With ``correction=False`` the output is the raw
    substitution (the ablation path).
    """
    records = []
    for doc in corpus.documents:
        try:
            record = rewrite_document(
                doc, dictionary, discriminator, infiller, corpus.tokenizer,
                config, correction=correction,
            )
        except CounterflowError as exc:
            log.warning("skipping document %s: %s", doc.doc_id, exc)
            continue
        if record.noop and not include_noop:
            continue
        records.append(record)
    return records


def write_parallel_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps({
                "id": record.doc_id,
                "src": record.source,
                "tgt": record.target,
                "trace": record.trace.to_dict(),
            }, sort_keys=True) + "\n")


def read_parallel_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise BackendError(f"{path}:line {lineno}: invalid JSON ({exc.msg})") from exc
    return rows
