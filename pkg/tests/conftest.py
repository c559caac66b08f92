import json
import warnings

import numpy as np
import pytest
import torch

from counterflow.backends import ToyEmbeddingBackend
from counterflow.corpus import load_corpus
from counterflow.fixtures import ATTRIBUTE_FIXTURE_PAIRS, write_fixture
from counterflow.tokenizer import WordpieceTokenizer, load_vocab

warnings.filterwarnings("ignore", category=UserWarning)

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    write_fixture(out, n_train=320, n_eval=96, seed=7)
    return out


@pytest.fixture(scope="session")
def fixture_config(fixture_dir):
    return json.loads((fixture_dir / "config.json").read_text())


@pytest.fixture(scope="session")
def fixture_tokenizer(fixture_dir):
    return WordpieceTokenizer(load_vocab(fixture_dir / "tokenizer_vocab.txt"))


@pytest.fixture(scope="session")
def fixture_corpus(fixture_dir, fixture_tokenizer):
    return load_corpus(fixture_dir / "train.jsonl", "jsonl", fixture_tokenizer)


@pytest.fixture(scope="session")
def toy_backend():
    return ToyEmbeddingBackend(
        dim=32, attribute_pairs=ATTRIBUTE_FIXTURE_PAIRS,
        signal=1.5, context_weight=0.2, noise=0.1, seed=7,
    )


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return path


@pytest.fixture()
def jsonl_writer():
    return write_jsonl


def gaussian_clouds(dim=16, n=200, separation=3.0, std=0.1, seed=0):
    """Two well-separated clouds along the first axis."""
    rng = np.random.default_rng(seed)
    base_a = rng.standard_normal((n, dim)) * std
    base_b = rng.standard_normal((n, dim)) * std
    base_a[:, 0] += separation
    base_b[:, 0] -= separation
    return base_a, base_b
