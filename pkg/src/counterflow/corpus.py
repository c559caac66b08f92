"""Corpus ingestion, tokenization bookkeeping, and occurrence lookup."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

from .errors import EmptyCorpusError, ParseError
from .tokenizer import WordpieceTokenizer

DEFAULT_WINDOW = 64


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    tokens: tuple[str, ...]
    subtokens: tuple[str, ...]
    spans: tuple[tuple[int, int], ...]
    label: int | None = None
    group: str | None = None


@dataclass(frozen=True)
class Occurrence:
    """One appearance of a word: its document, token position, and a
    token window around it (``center`` is the word's index inside the
    window)."""

    word: str
    doc_id: str
    token_index: int
    context: tuple[str, ...]
    center: int


class TokenizedCorpus:
    def __init__(self, documents, tokenizer: WordpieceTokenizer):
        self.documents: list[Document] = list(documents)
        self.tokenizer = tokenizer
        self._by_id = {}
        for doc in self.documents:
            if doc.doc_id in self._by_id:
                raise ParseError(f"duplicate document id {doc.doc_id!r}")
            self._by_id[doc.doc_id] = doc

    def __len__(self):
        return len(self.documents)

    def document(self, doc_id: str) -> Document:
        return self._by_id[doc_id]

    def vocabulary(self) -> Counter:
        """Case-folded token counts over the whole corpus."""
        counts: Counter = Counter()
        for doc in self.documents:
            counts.update(t.lower() for t in doc.tokens)
        return counts

    def subtoken_count(self, word: str) -> int:
        return len(self.tokenizer.subtokenize(word.lower()))


def _make_document(tokenizer, doc_id, text, label=None, group=None) -> Document:
    tokens, subtokens, spans = tokenizer.tokenize(text)
    return Document(
        doc_id=doc_id,
        text=text,
        tokens=tuple(tokens),
        subtokens=tuple(subtokens),
        spans=tuple(spans),
        label=label,
        group=group,
    )


def load_corpus(path, format: str = "jsonl", tokenizer: WordpieceTokenizer | None = None) -> TokenizedCorpus:
    """Load a corpus from disk.

    ``jsonl``: one object per line with a required ``text`` field and
    optional ``id``, ``label`` (integer), ``group`` fields.
    ``plain``: one document per non-blank line.
    """
    tokenizer = tokenizer or WordpieceTokenizer()
    documents = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if format == "jsonl":
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"invalid JSON ({exc.msg})", line=lineno, path=str(path)) from exc
                if not isinstance(record, dict) or "text" not in record:
                    raise ParseError('missing "text" field', line=lineno, path=str(path))
                text = record["text"]
                if not isinstance(text, str):
                    raise ParseError('"text" must be a string', line=lineno, path=str(path))
                label = record.get("label")
                if label is not None and not isinstance(label, int):
                    raise ParseError('"label" must be an integer', line=lineno, path=str(path))
                group = record.get("group")
                doc_id = str(record.get("id", f"doc{lineno:06d}"))
                documents.append(_make_document(tokenizer, doc_id, text, label, group))
            elif format == "plain":
                documents.append(_make_document(tokenizer, f"doc{lineno:06d}", line.rstrip("\n")))
            else:
                raise ParseError(f"unknown corpus format {format!r}")
    if not documents:
        raise EmptyCorpusError(f"no documents in {path}")
    return TokenizedCorpus(documents, tokenizer)


def context_window(tokens, index: int, window: int = DEFAULT_WINDOW):
    """Window of up to ``window // 2`` tokens on each side of ``index``."""
    half = max(1, window // 2)
    start = max(0, index - half)
    end = min(len(tokens), index + half + 1)
    return tuple(tokens[start:end]), index - start


def find_occurrences(corpus: TokenizedCorpus, word: str, window: int = DEFAULT_WINDOW) -> list[Occurrence]:
    """All case-folded matches of ``word``, in document order."""
    if not word:
        raise ParseError("word must be non-empty")
    key = word.lower()
    found = []
    for doc in corpus.documents:
        for i, token in enumerate(doc.tokens):
            if token.lower() == key:
                context, center = context_window(doc.tokens, i, window)
                found.append(Occurrence(key, doc.doc_id, i, context, center))
    return found
