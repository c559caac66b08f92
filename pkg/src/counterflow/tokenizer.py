"""Word-level tokenization with optional wordpiece-style subtoken splitting."""

from __future__ import annotations

import re

WORD_RE = re.compile(r"\w+(?:'\w+)*|[^\w\s]")

MASK = "<mask>"
CONTINUATION = "##"

_NO_SPACE_BEFORE = set(".,;:!?)]}%")
_NO_SPACE_AFTER = set("([{")


class WordpieceTokenizer:
    """Splits text into word tokens and each word into vocabulary pieces.

    Without a vocabulary every word is a single piece, which is the plain
    whitespace+punctuation behaviour used by the toy path.  With a
    vocabulary, a word decomposes greedily (longest match first) into a
    root piece plus ``##`` continuation pieces; words that do not fully
    decompose are kept whole.  Pieces are literal slices of the original
    word, so reassembly is lossless and casing survives.
    """

    def __init__(self, vocab=None, max_pieces: int = 8):
        self.roots: set[str] = set()
        self.continuations: set[str] = set()
        for piece in vocab or ():
            if piece.startswith(CONTINUATION):
                self.continuations.add(piece[len(CONTINUATION):].lower())
            else:
                self.roots.add(piece.lower())
        self.max_pieces = max_pieces

    def word_tokens(self, text: str) -> list[str]:
        return WORD_RE.findall(text)

    def subtokenize(self, word: str) -> list[str]:
        lower = word.lower()
        if not self.roots or lower in self.roots:
            return [word]
        pieces = []
        pos = 0
        for end in range(len(lower) - 1, 0, -1):
            if lower[:end] in self.roots:
                pieces.append(word[:end])
                pos = end
                break
        else:
            return [word]
        while pos < len(lower):
            for end in range(len(lower), pos, -1):
                if lower[pos:end] in self.continuations:
                    pieces.append(CONTINUATION + word[pos:end])
                    pos = end
                    break
            else:
                return [word]
            if len(pieces) > self.max_pieces:
                return [word]
        return pieces

    def tokenize(self, text: str):
        """Return (tokens, subtokens, spans); spans[i] indexes into subtokens."""
        tokens = self.word_tokens(text)
        subtokens: list[str] = []
        spans: list[tuple[int, int]] = []
        for token in tokens:
            pieces = self.subtokenize(token)
            spans.append((len(subtokens), len(subtokens) + len(pieces)))
            subtokens.extend(pieces)
        return tokens, subtokens, spans

    def detokenize(self, tokens) -> str:
        out: list[str] = []
        prev = None
        for token in tokens:
            if out and token not in _NO_SPACE_BEFORE and prev not in _NO_SPACE_AFTER:
                out.append(" ")
            out.append(token)
            prev = token
        return "".join(out)

    def detokenize_subtokens(self, subtokens) -> str:
        words: list[str] = []
        for piece in subtokens:
            if piece.startswith(CONTINUATION) and words:
                words[-1] += piece[len(CONTINUATION):]
            else:
                words.append(piece)
        return self.detokenize(words)

    def merge_subtokens(self, subtokens) -> list[str]:
        """Reassemble a subtoken sequence into word-level tokens."""
        words: list[str] = []
        for piece in subtokens:
            if piece.startswith(CONTINUATION) and words:
                words[-1] += piece[len(CONTINUATION):]
            else:
                words.append(piece)
        return words


def normalize_whitespace(text: str) -> str:
    """The declared whitespace normalization: collapse runs to single
    spaces, strip the ends, and drop spaces that sit against punctuation
    (before closers, after openers)."""
    s = re.sub(r"\s+", " ", text.strip())
    s = re.sub(r" (?=[.,;:!?)\]}%])", "", s)
    s = re.sub(r"(?<=[(\[{]) ", "", s)
    return s


def load_vocab(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]
