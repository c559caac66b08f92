"""A small synthetic grammar of gendered English sentences.

Sentences are generated from templates where every gendered token sits
within two positions of another gendered token, so a single swapped word
always breaks at least one trigram.  Each sentence is internally
consistent in gender, which gives the n-gram toys and the membership
check a crisp notion of agreement.
"""

from __future__ import annotations

import numpy as np

FEMALE_TERMS = {
    "subj": "she", "poss": "her", "refl": "herself",
    "person": "woman", "people": "women",
}
MALE_TERMS = {
    "subj": "he", "poss": "his", "refl": "himself",
    "person": "man", "people": "men",
}

FEMALE_SLOTS = {
    "name": ["laura", "anna", "mary", "emma", "sophia"],
    "kin": ["sister", "mother", "aunt"],
    "royal": ["queen", "duchess"],
    "royals": ["queens", "duchesses"],
}
MALE_SLOTS = {
    "name": ["anthony", "john", "peter", "james", "louis"],
    "kin": ["brother", "father", "uncle"],
    "royal": ["king", "duke"],
    "royals": ["kings", "dukes"],
}
NEUTRAL_SLOTS = {
    "skill": ["python", "chess", "algebra", "painting", "music",
              "history", "carving", "sailing"],
    "object": ["book", "letter", "violin", "recipe", "map",
               "basket", "ladder", "candle"],
    "place": ["library", "market", "harbor", "station", "museum",
              "orchard", "bakery", "forge"],
    "adj": ["old", "quiet", "bright", "small", "busy", "narrow"],
    "noun": ["clock", "bridge", "engine", "lantern", "mill", "wagon"],
}

GENDERED_TEMPLATES = [
    "{name} taught {refl} {skill} .",
    "the {person} said {subj} liked the {object} .",
    "{name} and {poss} {kin} visited the {place} .",
    "{subj} thanked {poss} {kin} for the {object} .",
    "the {royal} trusted {poss} {kin} .",
    "the {people} are {royals} .",
]
NEUTRAL_TEMPLATES = [
    "the {adj} {noun} stood near the {place} .",
    "a {adj} {noun} appeared at the {place} .",
]

# Name frequencies for the rank-matching fixture; equal ranks pair up.
FEMALE_NAME_FREQUENCIES = [
    ("laura", 120), ("anna", 90), ("mary", 60), ("emma", 40), ("sophia", 20),
]
MALE_NAME_FREQUENCIES = [
    ("anthony", 110), ("john", 85), ("peter", 55), ("james", 35), ("louis", 15),
]


def _counterpart_map() -> dict[str, str]:
    pairs: dict[str, str] = {}

    def link(a: str, b: str):
        pairs[a] = b
        pairs[b] = a

    for key in FEMALE_TERMS:
        link(FEMALE_TERMS[key], MALE_TERMS[key])
    for key in FEMALE_SLOTS:
        for fem, masc in zip(FEMALE_SLOTS[key], MALE_SLOTS[key]):
            link(fem, masc)
    return pairs


COUNTERPARTS = _counterpart_map()


class TemplateGrammar:
    """Sampling, vocabulary, and membership checks for the fixture grammar."""

    def __init__(self):
        self._matchers = []
        for template in GENDERED_TEMPLATES:
            for terms, slots in ((FEMALE_TERMS, FEMALE_SLOTS), (MALE_TERMS, MALE_SLOTS)):
                self._matchers.append(self._compile(template, terms, slots))
        for template in NEUTRAL_TEMPLATES:
            self._matchers.append(self._compile(template, {}, {}))

    @staticmethod
    def _compile(template: str, terms, slots):
        items = []
        for token in template.split():
            if token.startswith("{") and token.endswith("}"):
                slot = token[1:-1]
                if slot in terms:
                    items.append({terms[slot]})
                elif slot in slots:
                    items.append(set(slots[slot]))
                else:
                    items.append(set(NEUTRAL_SLOTS[slot]))
            else:
                items.append({token})
        return items

    def is_grammatical(self, tokens) -> bool:
        tokens = [t.lower() for t in tokens]
        for matcher in self._matchers:
            if len(matcher) == len(tokens) and all(
                tok in allowed for tok, allowed in zip(tokens, matcher)
            ):
                return True
        return False

    def sample_sentence(self, rng: np.random.Generator, gender: str | None = None) -> tuple[str, str | None]:
        if gender is None:
            template = NEUTRAL_TEMPLATES[rng.integers(len(NEUTRAL_TEMPLATES))]
            terms, slots = {}, {}
        else:
            template = GENDERED_TEMPLATES[rng.integers(len(GENDERED_TEMPLATES))]
            terms = FEMALE_TERMS if gender == "female" else MALE_TERMS
            slots = FEMALE_SLOTS if gender == "female" else MALE_SLOTS
        words = []
        for token in template.split():
            if token.startswith("{") and token.endswith("}"):
                slot = token[1:-1]
                if slot in terms:
                    words.append(terms[slot])
                    continue
                pool = slots.get(slot) or NEUTRAL_SLOTS[slot]
                words.append(pool[rng.integers(len(pool))])
            else:
                words.append(token)
        return " ".join(words), gender

    def sample(self, n: int, seed: int = 0, neutral_fraction: float = 0.25):
        """n (text, gender) samples; genders alternate female/male among
        the gendered share so both groups are balanced."""
        rng = np.random.default_rng(seed)
        out = []
        gendered_seen = 0
        for _ in range(n):
            if rng.random() < neutral_fraction:
                out.append(self.sample_sentence(rng, None))
            else:
                gender = "female" if gendered_seen % 2 == 0 else "male"
                gendered_seen += 1
                out.append(self.sample_sentence(rng, gender))
        return out

    def gendered_words(self) -> set[str]:
        words = set(FEMALE_TERMS.values()) | set(MALE_TERMS.values())
        for slots in (FEMALE_SLOTS, MALE_SLOTS):
            for values in slots.values():
                words.update(values)
        return words

    def neutral_words(self) -> set[str]:
        words = set()
        for values in NEUTRAL_SLOTS.values():
            words.update(values)
        for template in GENDERED_TEMPLATES + NEUTRAL_TEMPLATES:
            for token in template.split():
                if not token.startswith("{"):
                    words.add(token)
        return words - self.gendered_words()

    def all_words(self) -> set[str]:
        return self.gendered_words() | self.neutral_words()

    @staticmethod
    def counterpart(word: str) -> str | None:
        return COUNTERPARTS.get(word.lower())
