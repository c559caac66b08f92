"""Bundled synthetic fixture: corpus files, name lists, tokenizer
vocabulary, and a ready-to-run pipeline configuration.

Everything is generated deterministically from a seed so the end-to-end
pipeline can run hermetically and reproducibly.
"""

from __future__ import annotations

import json
from pathlib import Path

from .grammar import (
    FEMALE_NAME_FREQUENCIES,
    MALE_NAME_FREQUENCIES,
    TemplateGrammar,
)

# Word pairs carrying the planted embedding signal in the toy backend.
ATTRIBUTE_FIXTURE_PAIRS = [("she", "he"), ("her", "his"), ("woman", "man")]

# Suffix pieces let the regular plurals split into root + continuation.
SUFFIX_PIECES = ["##s", "##es", "##ed", "##ing"]
_SPLIT_WORDS = {"queens", "kings", "duchesses", "dukes"}


def fixture_tokenizer_vocab() -> list[str]:
    grammar = TemplateGrammar()
    words = sorted(grammar.all_words() - _SPLIT_WORDS)
    names = [n for n, _ in FEMALE_NAME_FREQUENCIES + MALE_NAME_FREQUENCIES]
    return sorted(set(words) | set(names)) + SUFFIX_PIECES


def corpus_records(n_docs: int, seed: int) -> list[dict]:
    grammar = TemplateGrammar()
    records = []
    for i, (text, gender) in enumerate(grammar.sample(n_docs, seed=seed)):
        tokens = set(text.split())
        label = int(bool(tokens & {"queen", "duchess", "king", "duke",
                                   "queens", "duchesses", "kings", "dukes"}))
        records.append({
            "id": f"doc{i:05d}",
            "text": text,
            "group": gender,
            "label": label,
        })
    return records


def default_config(fixture_dir: str, seed: int = 7, dim: int = 32) -> dict:
    fixture_dir = str(fixture_dir)
    return {
        "seed": seed,
        "corpus": {
            "train_path": f"{fixture_dir}/train.jsonl",
            "eval_path": f"{fixture_dir}/eval.jsonl",
            "format": "jsonl",
            "tokenizer_vocab": f"{fixture_dir}/tokenizer_vocab.txt",
            "context_window": 16,
        },
        "backend": {
            "name": "toy",
            "dim": dim,
            "attribute_pairs": [list(p) for p in ATTRIBUTE_FIXTURE_PAIRS],
            "signal": 1.5,
            "context_weight": 0.2,
            "noise": 0.1,
            "seed": seed,
        },
        "prompt": {"word_a": "she", "word_b": "he"},
        "subspace": {
            "phi": 0.9,
            "min_instance_count": 2,
            "epochs": 120,
            "lr": 1e-3,
            "max_instances_per_word": 256,
        },
        "flow": {
            "sigma": 0.9,
            "k": None,
            "depth": 2,
            "width_mult": 2,
            "scale_clamp": 1.0,
            "epochs": 250,
            "estimate_epochs": 80,
            "batch": 256,
            "lr": 1e-3,
        },
        "dictionary": {
            "min_votes": 0.5,
            "names_a": f"{fixture_dir}/names_female.tsv",
            "names_b": f"{fixture_dir}/names_male.tsv",
        },
        "rewrite": {
            "theta": 0.1,
            "max_mask_fraction": 0.3,
            "protect_substituted": True,
            "iterations": 2,
            "discriminator": {"backend": "toy"},
            "infiller": {"backend": "toy"},
        },
        "generator": {
            "width": 96,
            "layers": 2,
            "epochs": 150,
            "lr": 2e-3,
            "batch": 32,
            "max_len": 64,
            "include_noop": True,
        },
        "eval": {
            "lm": "toy-bigram",
            "predictions_path": None,
        },
    }


def write_fixture(out_dir, n_train: int = 320, n_eval: int = 96, seed: int = 7) -> dict:
    """Write the full fixture bundle; returns the generated config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.jsonl", "w", encoding="utf-8") as fh:
        for record in corpus_records(n_train, seed):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(out / "eval.jsonl", "w", encoding="utf-8") as fh:
        for record in corpus_records(n_eval, seed + 1):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(out / "names_female.tsv", "w", encoding="utf-8") as fh:
        for name, freq in FEMALE_NAME_FREQUENCIES:
            fh.write(f"{name}\t{freq}\n")
    with open(out / "names_male.tsv", "w", encoding="utf-8") as fh:
        for name, freq in MALE_NAME_FREQUENCIES:
            fh.write(f"{name}\t{freq}\n")
    with open(out / "tokenizer_vocab.txt", "w", encoding="utf-8") as fh:
        for piece in fixture_tokenizer_vocab():
            fh.write(piece + "\n")
    config = default_config(str(out), seed=seed)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return config
