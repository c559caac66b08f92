"""Bidirectional attribute word-pair dictionaries."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .errors import ParseError, PreconditionError

log = logging.getLogger(__name__)

_SOURCE_ORDER = {"prompt": 0, "discovered": 1, "name": 2}


@dataclass(frozen=True)
class PairEntry:
    word_a: str
    word_b: str
    source: str
    votes: int | None = None
    total: int | None = None

    def sort_key(self):
        return (_SOURCE_ORDER.get(self.source, 99), self.word_a, self.word_b)


@dataclass(frozen=True)
class PairCandidate:
    """One majority-vote result from counterfactual word generation."""

    word: str
    counterfactual: str
    votes: int
    total: int
    side: str = "a"


class WordPairDictionary:
    """A set of word pairs whose bidirectional lookup is a bijection.

    Keys are case-folded; self-pairs are rejected; a word never maps to
    two different counterparts.
    """

    def __init__(self, entries=()):
        self.entries: list[PairEntry] = []
        self.conflicts: list[str] = []
        self.flags: dict[str, list[str]] = {}
        self._lookup: dict[str, str] = {}
        for entry in entries:
            self.add(entry)

    def add(self, entry: PairEntry) -> bool:
        """Add a pair if it does not contradict an existing one.

        Returns True when the entry was accepted.  Mirror duplicates of an
        existing pair are silently absorbed; contradictions are logged and
        dropped (existing entries win).
        """
        a, b = entry.word_a.lower(), entry.word_b.lower()
        if not a or not b:
            raise PreconditionError("dictionary words must be non-empty")
        if any(ch.isspace() for ch in a + b):
            raise PreconditionError(
                f"dictionary entries must be single word tokens: ({a!r}, {b!r})"
            )
        if a == b:
            raise PreconditionError(f"self-pair rejected: {a!r}")
        entry = PairEntry(a, b, entry.source, entry.votes, entry.total)
        existing_a = self._lookup.get(a)
        existing_b = self._lookup.get(b)
        if existing_a == b and existing_b == a:
            return False
        if existing_a is not None or existing_b is not None:
            clash = f"({a} -> {existing_a})" if existing_a else f"({b} -> {existing_b})"
            message = f"conflict: ({a}, {b}) vs existing {clash}; existing kept"
            self.conflicts.append(message)
            log.warning(message)
            return False
        self._lookup[a] = b
        self._lookup[b] = a
        self.entries.append(entry)
        return True

    def counterpart(self, word: str) -> str | None:
        return self._lookup.get(word.lower())

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._lookup

    def __len__(self):
        return len(self.entries)

    def words(self) -> set[str]:
        return set(self._lookup)

    def flag(self, word: str, note: str) -> None:
        self.flags.setdefault(word.lower(), []).append(note)

    def sorted_entries(self) -> list[PairEntry]:
        return sorted(self.entries, key=PairEntry.sort_key)

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for entry in self.entries:
            for x, y in ((entry.word_a, entry.word_b), (entry.word_b, entry.word_a)):
                if x in seen and seen[x] != y:
                    raise PreconditionError(f"bijection violated at {x!r}")
                seen[x] = y
            if entry.word_a == entry.word_b:
                raise PreconditionError(f"self-pair {entry.word_a!r}")


def assemble(prompt, candidates, min_votes: float = 0.5, ambiguous=()) -> WordPairDictionary:
    """Build a dictionary from vote-ranked pair candidates.

    The prompt pair is always included and wins conflicts.  Candidates are
    kept when their vote fraction reaches ``min_votes``; on conflicting
    mappings the higher-vote pair wins.  Words listed in ``ambiguous``
    (high-confidence instances on both sides) are flagged for audit but
    still admitted.
    """
    dictionary = WordPairDictionary()
    dictionary.add(PairEntry(prompt.word_a, prompt.word_b, "prompt"))
    kept = [
        c for c in candidates
        if c.total > 0 and c.votes / c.total >= min_votes
    ]
    # Mirror duplicates collapse onto the higher-vote orientation.
    kept.sort(key=lambda c: (-c.votes / c.total, -c.votes, c.word, c.counterfactual))
    ambiguous = {w.lower() for w in ambiguous}
    for cand in kept:
        entry = PairEntry(cand.word, cand.counterfactual, "discovered",
                          cand.votes, cand.total)
        if cand.side == "b":
            entry = PairEntry(cand.counterfactual, cand.word, "discovered",
                              cand.votes, cand.total)
        added = dictionary.add(entry)
        if added:
            for w in (entry.word_a, entry.word_b):
                if w in ambiguous:
                    dictionary.flag(w, "high-confidence instances in both groups")
    return dictionary


def names_intervention(list_a, list_b) -> WordPairDictionary:
    """Pair names across groups by descending frequency rank.

    Rank i of one group maps to rank i of the other; the longer list's
    tail is dropped. Ties in frequency break lexicographically, so the
    matching is independent of input order.
    """
    ranked_a = sorted(list_a, key=lambda nf: (-nf[1], nf[0]))
    ranked_b = sorted(list_b, key=lambda nf: (-nf[1], nf[0]))
    dictionary = WordPairDictionary()
    for (name_a, _), (name_b, _) in zip(ranked_a, ranked_b):
        dictionary.add(PairEntry(name_a, name_b, "name"))
    return dictionary


def merge(base: WordPairDictionary, extra: WordPairDictionary) -> WordPairDictionary:
    """Union of two dictionaries; base entries win conflicts."""
    merged = WordPairDictionary()
    for entry in base.entries:
        merged.add(entry)
    for entry in extra.entries:
        merged.add(entry)
    for source in (base, extra):
        for word, notes in source.flags.items():
            for note in notes:
                merged.flag(word, note)
    merged.validate()
    return merged


def save_dictionary(path, dictionary: WordPairDictionary) -> None:
    """Serialize as TSV: word_a, word_b, source, votes, total.

    Ordering is canonical (prompt < discovered < name, then lexicographic)
    so equal dictionaries serialize to identical bytes.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for entry in dictionary.sorted_entries():
            votes = "" if entry.votes is None else str(entry.votes)
            total = "" if entry.total is None else str(entry.total)
            fh.write(f"{entry.word_a}\t{entry.word_b}\t{entry.source}\t{votes}\t{total}\n")


def load_dictionary(path) -> WordPairDictionary:
    dictionary = WordPairDictionary()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise ParseError(f"expected 5 columns, got {len(parts)}",
                                 line=lineno, path=str(path))
            word_a, word_b, source, votes, total = parts
            try:
                entry = PairEntry(
                    word_a, word_b, source,
                    int(votes) if votes else None,
                    int(total) if total else None,
                )
            except ValueError as exc:
                raise ParseError(f"bad vote counts: {exc}", line=lineno, path=str(path)) from exc
            dictionary.add(entry)
    dictionary.validate()
    return dictionary


def load_name_list(path) -> list[tuple[str, int]]:
    """Read a name-frequency TSV (name<TAB>count)."""
    names = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected 2 columns, got {len(parts)}",
                                 line=lineno, path=str(path))
            name, freq = parts[0].lower(), parts[1]
            try:
                count = int(freq)
            except ValueError as exc:
                raise ParseError(f"bad frequency {freq!r}", line=lineno, path=str(path)) from exc
            if count < 0:
                raise ParseError(f"negative frequency for {name!r}", line=lineno, path=str(path))
            if name in seen:
                raise ParseError(f"duplicate name {name!r}", line=lineno, path=str(path))
            seen.add(name)
            names.append((name, count))
    return names
