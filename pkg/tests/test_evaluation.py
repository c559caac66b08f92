import json
from fractions import Fraction

import numpy as np
import pytest

from counterflow.errors import (
    InsufficientCellError,
    PreconditionError,
    UndefinedMetricError,
)
from counterflow.evaluation import (
    BiasSampleSpec,
    TextAttributeClassifier,
    accuracy_f1,
    induce_bias_sample,
    load_predictions,
    perplexity,
    tprd_fprd,
    transfer_accuracy,
)
from counterflow.lm import BigramLM, UniformLM


def test_uniform_perplexity_exact_power_of_two():
    # one 16-token text and V = 32 keep every float step exact
    lm = UniformLM(32)
    text = " ".join(["tok"] * 16)
    assert perplexity([text], lm) == 32.0


def test_uniform_perplexity_general_vocab():
    lm = UniformLM(50)
    texts = ["a b c", "d e f g"]
    assert perplexity(texts, lm) == pytest.approx(50.0, rel=1e-12)


def test_memorized_bigram_low_perplexity():
    sentence = "the queen trusted her aunt .".split()
    lm = BigramLM([sentence] * 50)
    assert perplexity([" ".join(sentence)], lm) <= 1.1


def test_shuffled_text_scores_worse():
    rng = np.random.default_rng(0)
    sentences = [f"the w{i} liked the w{(i + 1) % 9} today".split() for i in range(9)]
    lm = BigramLM(sentences * 5)
    original = [" ".join(s) for s in sentences]
    shuffled = []
    for s in sentences:
        mixed = list(s)
        rng.shuffle(mixed)
        shuffled.append(" ".join(mixed))
    assert perplexity(shuffled, lm) > perplexity(original, lm)


def test_perplexity_requires_texts():
    with pytest.raises(PreconditionError):
        perplexity([], UniformLM(10))


class StubAttrClassifier:
    def __init__(self, table):
        self.table = table

    def predict_proba(self, text):
        return dict(self.table[text])


def test_transfer_accuracy_definition_arithmetic():
    table = {
        "orig1": {"f": 1.0, "m": 0.0},
        "orig2": {"f": 0.9, "m": 0.1},
        "cf1": {"f": 0.1, "m": 0.9},
        "cf2": {"f": 0.3, "m": 0.7},
    }
    clf = StubAttrClassifier(table)
    score = transfer_accuracy(["orig1", "orig2"], ["cf1", "cf2"], clf)
    assert score == pytest.approx((0.9 + 0.7) / 2)


def test_transfer_accuracy_zero_when_original_kept():
    table = {"o": {"f": 1.0, "m": 0.0}, "c": {"f": 1.0, "m": 0.0}}
    clf = StubAttrClassifier(table)
    assert transfer_accuracy(["o"], ["c"], clf) == 0.0


def test_transfer_accuracy_length_mismatch():
    clf = StubAttrClassifier({})
    with pytest.raises(PreconditionError):
        transfer_accuracy(["a"], [], clf)


def test_identity_counterfactuals_score_low(fixture_corpus, toy_backend):
    from counterflow.subspace import ClassifierConfig

    docs = [d for d in fixture_corpus.documents if d.group][:120]
    texts = [d.text for d in docs]
    groups = [d.group for d in docs]
    clf = TextAttributeClassifier.fit(
        texts, groups, toy_backend,
        ClassifierConfig(seed=0, epochs=400, patience=100),
    )
    assert transfer_accuracy(texts[:40], texts[:40], clf) <= 0.05


def test_tprd_equal_rates_zero():
    preds = [1, 0, 0, 1, 0, 0]
    labels = [1, 1, 0, 1, 1, 0]
    groups = ["f", "f", "f", "m", "m", "m"]
    report = tprd_fprd(preds, labels, groups)
    assert report.tprd == 0.0
    assert report.fprd == 0.0


def test_tprd_definition_arithmetic():
    preds, labels, groups = [], [], []
    for group, hits in (("a", 8), ("b", 6)):
        for i in range(10):
            preds.append(1 if i < hits else 0)
            labels.append(1)
            groups.append(group)
        preds.append(0)
        labels.append(0)
        groups.append(group)
    report = tprd_fprd(preds, labels, groups)
    assert report.tprd == pytest.approx(0.2)
    assert report.group_counts == {"a/pos": 10, "a/neg": 1, "b/pos": 10, "b/neg": 1}


def brute_force_rates(preds, labels, groups):
    names = sorted(set(groups))
    rates = {}
    for name in names:
        for value in (0, 1):
            rows = [(p, y) for p, y, g in zip(preds, labels, groups)
                    if g == name and y == value]
            rates[(name, value)] = Fraction(sum(p for p, _ in rows), len(rows))
    tprd = abs(rates[(names[0], 1)] - rates[(names[1], 1)])
    fprd = abs(rates[(names[0], 0)] - rates[(names[1], 0)])
    return float(tprd), float(fprd)


def test_tprd_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(12)
    preds = rng.integers(0, 2, size=1000).tolist()
    labels = rng.integers(0, 2, size=1000).tolist()
    groups = ["f" if x else "m" for x in rng.integers(0, 2, size=1000)]
    report = tprd_fprd(preds, labels, groups)
    tprd, fprd = brute_force_rates(preds, labels, groups)
    assert report.tprd == tprd and report.fprd == fprd


def test_tprd_invariances():
    rng = np.random.default_rng(3)
    preds = rng.integers(0, 2, size=200).tolist()
    labels = rng.integers(0, 2, size=200).tolist()
    groups = ["f" if x else "m" for x in rng.integers(0, 2, size=200)]
    base = tprd_fprd(preds, labels, groups)
    swapped = tprd_fprd(preds, labels, ["m" if g == "f" else "f" for g in groups])
    assert base.tprd == swapped.tprd and base.fprd == swapped.fprd
    order = rng.permutation(200)
    permuted = tprd_fprd([preds[i] for i in order], [labels[i] for i in order],
                         [groups[i] for i in order])
    assert permuted.tprd == base.tprd and permuted.fprd == base.fprd


def test_tprd_empty_cell_named():
    with pytest.raises(PreconditionError):
        tprd_fprd([1, 0], [1, 0], ["f", "f"])
    with pytest.raises(UndefinedMetricError) as err:
        tprd_fprd([1, 1, 0], [1, 1, 0], ["f", "m", "f"])
    assert "'m'" in str(err.value) and "label=0" in str(err.value)


def test_accuracy_f1_perfect_and_degenerate():
    assert accuracy_f1([1, 0, 1], [1, 0, 1]) == (1.0, 1.0)
    acc, f1 = accuracy_f1([0, 0, 0, 0], [1, 1, 0, 0])
    assert acc == 0.5 and f1 == 0.0
    acc, f1 = accuracy_f1([0, 0], [0, 0])
    assert acc == 1.0 and f1 == 0.0


def test_accuracy_f1_matches_recount():
    rng = np.random.default_rng(4)
    preds = rng.integers(0, 2, size=500).tolist()
    labels = rng.integers(0, 2, size=500).tolist()
    acc, f1 = accuracy_f1(preds, labels)
    tp = sum(1 for p, y in zip(preds, labels) if p == y == 1)
    fp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 1)
    assert acc == sum(1 for p, y in zip(preds, labels) if p == y) / 500
    assert f1 == pytest.approx(2 * tp / (2 * tp + fp + fn))


def make_population(n_per_cell=12000, seed=0):
    population = []
    i = 0
    for label in (0, 1):
        for group in ("female", "male"):
            for _ in range(n_per_cell):
                population.append({"id": i, "label": label, "group": group})
                i += 1
    return population


def test_bias_sampler_table_recipe():
    spec = BiasSampleSpec(n=18000, positive_fraction=0.50,
                          female_in_positive_fraction=0.12, seed=1)
    counts = spec.cell_counts()
    assert counts[(1, "female")] == 1080
    assert counts[(1, "female")] + counts[(1, "male")] == 9000
    assert counts[(0, "female")] + counts[(0, "male")] == 9000
    sample = induce_bias_sample(make_population(), spec)
    tally = {}
    for record in sample:
        key = (record["label"], record["group"])
        tally[key] = tally.get(key, 0) + 1
    assert tally[(1, "female")] == 1080
    assert tally[(1, "male")] == 7920
    assert len(sample) == 18000


def test_bias_sampler_balanced_case():
    spec = BiasSampleSpec(n=400, positive_fraction=0.5,
                          female_in_positive_fraction=0.5, seed=2)
    sample = induce_bias_sample(make_population(200), spec)
    tally = {}
    for record in sample:
        key = (record["label"], record["group"])
        tally[key] = tally.get(key, 0) + 1
    assert all(v == 100 for v in tally.values())


def test_bias_sampler_deterministic():
    spec = BiasSampleSpec(n=1000, positive_fraction=0.4,
                          female_in_positive_fraction=0.25, seed=9)
    population = make_population(600)
    first = induce_bias_sample(population, spec)
    second = induce_bias_sample(population, spec)
    assert [r["id"] for r in first] == [r["id"] for r in second]


def test_bias_sampler_insufficient_cell_named():
    spec = BiasSampleSpec(n=100, positive_fraction=0.9,
                          female_in_positive_fraction=0.9, seed=0)
    with pytest.raises(InsufficientCellError) as err:
        induce_bias_sample(make_population(20), spec)
    assert "female" in str(err.value)


def test_load_predictions(tmp_path):
    path = tmp_path / "preds.jsonl"
    path.write_text(json.dumps({"pred": 1, "label": 1, "group": "f"}) + "\n")
    rows = load_predictions(path)
    assert rows[0]["pred"] == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"pred": 1}) + "\n")
    with pytest.raises(PreconditionError):
        load_predictions(bad)
