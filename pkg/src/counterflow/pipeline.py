"""Staged pipeline with persisted, hash-checked, resumable artifacts.

Each stage reads its inputs, writes its artifact files atomically, and
records config and input hashes in ``manifest.json``. Re-running a stage
with unchanged config and inputs is a no-op; changed config against an
existing artifact is refused unless forced.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import torch

from . import dictionary as dict_mod
from . import evaluation, flow, generator, rewrite, subspace
from .backends import ToyEmbeddingBackend
from .corpus import find_occurrences, load_corpus
from .errors import (
    ConfigMismatchError,
    LockHeldError,
    MissingArtifactError,
    ParseError,
    PreconditionError,
)
from .lm import BigramLM, NgramInfiller, NgramPlausibility
from .tokenizer import WordpieceTokenizer, load_vocab

log = logging.getLogger(__name__)

STAGES = (
    "discover",
    "train-flow",
    "build-dict",
    "build-parallel",
    "train-generator",
    "generate",
    "evaluate",
)

_UPSTREAM = {
    "discover": {},
    "train-flow": {"discover": ("classifier.bin", "sets.json")},
    "build-dict": {"discover": ("sets.json",), "train-flow": ("flow.bin",)},
    "build-parallel": {"build-dict": ("dictionary.tsv",)},
    "train-generator": {"build-parallel": ("parallel.jsonl",)},
    "generate": {"train-generator": ("generator.bin",)},
    "evaluate": {"generate": ("generated.jsonl",)},
}

_CONFIG_SECTIONS = {
    "discover": ("corpus", "backend", "prompt", "subspace"),
    "train-flow": ("corpus", "backend", "flow"),
    "build-dict": ("corpus", "backend", "dictionary"),
    "build-parallel": ("corpus", "rewrite"),
    "train-generator": ("generator",),
    "generate": ("corpus",),
    "evaluate": ("corpus", "backend", "eval"),
}

DEFAULT_CONFIG = {
    "seed": 0,
    "corpus": {
        "train_path": None,
        "eval_path": None,
        "format": "jsonl",
        "tokenizer_vocab": None,
        "context_window": 64,
    },
    "backend": {
        "name": "toy",
        "dim": 32,
        "attribute_pairs": [],
        "signal": 1.5,
        "context_weight": 0.2,
        "noise": 0.1,
        "seed": 0,
    },
    "prompt": {"word_a": None, "word_b": None},
    "subspace": {
        "phi": 0.95,
        "min_instance_count": 1,
        "max_instances_per_word": 256,
        "hidden": None,
        "epochs": 200,
        "lr": 1e-3,
    },
    "flow": {
        "sigma": 0.9,
        "k": None,
        "depth": 2,
        "width_mult": 2,
        "scale_clamp": 1.0,
        "epochs": 400,
        "estimate_epochs": 120,
        "batch": 256,
        "lr": 1e-3,
    },
    "dictionary": {
        "min_votes": 0.5,
        "names_a": None,
        "names_b": None,
        "manual_path": None,
    },
    "rewrite": {
        "theta": 0.1,
        "max_mask_fraction": 0.3,
        "protect_substituted": True,
        "iterations": 1,
        "correction": True,
        "include_noop": True,
        "discriminator": {"backend": "toy"},
        "infiller": {"backend": "toy"},
    },
    "generator": {
        "width": 128,
        "layers": 2,
        "epochs": 200,
        "lr": 2e-3,
        "batch": 32,
        "max_len": 128,
        "include_noop": False,
    },
    "eval": {"lm": "toy-bigram", "predictions_path": None},
}


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid config JSON: {exc.msg}", path=str(path)) from exc
    if not isinstance(user, dict):
        raise ParseError("config root must be an object", path=str(path))
    return _deep_merge(DEFAULT_CONFIG, user)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def file_sha(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def stage_config_hash(stage: str, config: dict) -> str:
    payload = {"seed": config.get("seed", 0)}
    for section in _CONFIG_SECTIONS[stage]:
        payload[section] = config.get(section, {})
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def stage_seed(config: dict, stage: str) -> int:
    digest = hashlib.sha256(f"{config.get('seed', 0)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class _Lock:
    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeldError(
                f"another stage holds the lock at {self.path}; remove it if stale"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc_info):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


class Manifest:
    def __init__(self, path: Path):
        self.path = path
        if path.exists():
            self.data = json.loads(path.read_text(encoding="utf-8"))
        else:
            self.data = {"version": 1, "stages": {}}

    def entry(self, stage: str) -> dict | None:
        return self.data["stages"].get(stage)

    def update(self, stage: str, config_hash: str, inputs: dict, outputs: dict) -> None:
        self.data["stages"][stage] = {
            "config_hash": config_hash,
            "inputs": inputs,
            "outputs": outputs,
        }
        atomic_write_text(self.path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _require(config, *keys):
    node = config
    dotted = ".".join(keys)
    for key in keys:
        if not isinstance(node, dict) or node.get(key) in (None, ""):
            raise PreconditionError(f"config value {dotted!r} is required")
        node = node[key]
    return node


def _tokenizer_from(config) -> WordpieceTokenizer:
    vocab_path = config["corpus"].get("tokenizer_vocab")
    vocab = load_vocab(vocab_path) if vocab_path else None
    return WordpieceTokenizer(vocab)


def _backend_from(config):
    spec = config["backend"]
    name = spec.get("name", "toy")
    if name == "toy":
        return ToyEmbeddingBackend(
            dim=spec.get("dim", 32),
            attribute_pairs=[tuple(p) for p in spec.get("attribute_pairs", [])],
            signal=spec.get("signal", 1.5),
            context_weight=spec.get("context_weight", 0.2),
            noise=spec.get("noise", 0.1),
            seed=spec.get("seed", 0),
        )
    if name.startswith("pretrained:"):
        from .pretrained import PretrainedEncoderBackend

        return PretrainedEncoderBackend(name.split(":", 1)[1])
    raise PreconditionError(f"unknown embedding backend {name!r}")


def _load_train_corpus(config):
    return load_corpus(
        _require(config, "corpus", "train_path"),
        config["corpus"].get("format", "jsonl"),
        _tokenizer_from(config),
    )


def _load_eval_corpus(config):
    return load_corpus(
        _require(config, "corpus", "eval_path"),
        config["corpus"].get("format", "jsonl"),
        _tokenizer_from(config),
    )


def _input_files(stage: str, config: dict, artifacts: Path) -> dict[str, Path]:
    """Logical name -> path for everything the stage reads."""
    corpus_cfg = config["corpus"]
    inputs: dict[str, Path] = {}

    def add(name, value):
        if value:
            inputs[name] = Path(value)

    if stage in ("discover", "train-flow", "build-dict", "build-parallel"):
        add("corpus.train", corpus_cfg.get("train_path"))
        add("corpus.tokenizer_vocab", corpus_cfg.get("tokenizer_vocab"))
    if stage in ("generate", "evaluate"):
        add("corpus.eval", corpus_cfg.get("eval_path"))
        add("corpus.tokenizer_vocab", corpus_cfg.get("tokenizer_vocab"))
    if stage == "build-dict":
        add("names.a", config["dictionary"].get("names_a"))
        add("names.b", config["dictionary"].get("names_b"))
        add("dictionary.manual", config["dictionary"].get("manual_path"))
    if stage == "evaluate":
        add("predictions", config["eval"].get("predictions_path"))
    upstream_map = _UPSTREAM[stage]
    if stage == "build-dict" and config["dictionary"].get("manual_path"):
        upstream_map = {}  # user-supplied dictionary replaces the flow path
    for upstream, files in upstream_map.items():
        for name in files:
            inputs[f"{upstream}/{name}"] = artifacts / upstream / name
    return inputs


# ---------------------------------------------------------------------------
# stage implementations; each returns {filename: text_or_bytes_writer}


def _stage_discover(config, out_dir: Path, seed: int):
    corpus = _load_train_corpus(config)
    backend = _backend_from(config)
    prompt = subspace.PromptPair(
        _require(config, "prompt", "word_a"), _require(config, "prompt", "word_b")
    )
    sub = config["subspace"]
    window = config["corpus"].get("context_window", 64)
    set_a, set_b = subspace.collect_prompt_embeddings(
        corpus, backend, prompt,
        min_instance_count=sub.get("min_instance_count", 1),
        window=window,
        max_instances=sub.get("max_instances_per_word", 256),
    )
    clf = subspace.train_subspace_classifier(
        set_a, set_b,
        subspace.ClassifierConfig(
            hidden=sub.get("hidden"),
            epochs=sub.get("epochs", 200),
            lr=sub.get("lr", 1e-3),
            seed=seed,
        ),
    )
    discovery_cfg = subspace.DiscoveryConfig(
        threshold_phi=sub.get("phi", 0.95),
        min_instance_count=sub.get("min_instance_count", 1),
        max_instances_per_word=sub.get("max_instances_per_word", 256),
    )
    scores = subspace.score_vocabulary(corpus, backend, clf, discovery_cfg, window)
    words_a, words_b = subspace.discover_attribute_words(
        corpus, backend, clf, discovery_cfg, prompt=prompt, window=window, scores=scores,
    )
    clf.save(out_dir / "classifier.bin.tmp")
    os.replace(out_dir / "classifier.bin.tmp", out_dir / "classifier.bin")
    subspace.write_discovery_report(out_dir / "discovery.tsv.tmp", scores, discovery_cfg)
    os.replace(out_dir / "discovery.tsv.tmp", out_dir / "discovery.tsv")
    sets = {
        "a": sorted(words_a),
        "b": sorted(words_b),
        "ambiguous": sorted(words_a & words_b),
        "prompt": [prompt.word_a.lower(), prompt.word_b.lower()],
        "holdout_accuracy": clf.holdout_accuracy,
    }
    atomic_write_text(out_dir / "sets.json", json.dumps(sets, indent=2, sort_keys=True) + "\n")


def _flow_training_data(config, corpus, backend, sets, window):
    cap = config["subspace"].get("max_instances_per_word", 256)
    ambiguous = set(sets["ambiguous"])
    labeled = []
    for side in ("a", "b"):
        words = [w for w in sets[side] if w not in ambiguous]
        for word in sorted(words):
            occs = find_occurrences(corpus, word, window)[:cap]
            for emb in backend.embed_many(occs):
                labeled.append((emb.vector, side))
    if not labeled:
        raise PreconditionError("no discovered words to train the flow on")
    return labeled


def _stage_train_flow(config, out_dir: Path, seed: int, artifacts: Path):
    corpus = _load_train_corpus(config)
    backend = _backend_from(config)
    sets = json.loads((artifacts / "discover" / "sets.json").read_text(encoding="utf-8"))
    window = config["corpus"].get("context_window", 64)
    labeled = _flow_training_data(config, corpus, backend, sets, window)
    fl = config["flow"]
    model = flow.train_flow(labeled, flow.FlowTrainConfig(
        sigma=fl.get("sigma", 0.9),
        epochs=fl.get("epochs", 400),
        batch=fl.get("batch", 256),
        lr=fl.get("lr", 1e-3),
        seed=seed,
        k=fl.get("k"),
        depth=fl.get("depth", 2),
        width_mult=fl.get("width_mult", 2),
        scale_clamp=fl.get("scale_clamp", 1.0),
        estimate_epochs=fl.get("estimate_epochs", 120),
    ))
    model.save(out_dir / "flow.bin.tmp")
    os.replace(out_dir / "flow.bin.tmp", out_dir / "flow.bin")


def _stage_build_dict(config, out_dir: Path, seed: int, artifacts: Path):
    dict_cfg = config["dictionary"]
    manual = dict_cfg.get("manual_path")
    if manual:
        built = dict_mod.load_dictionary(manual)
        candidates = []
    else:
        corpus = _load_train_corpus(config)
        backend = _backend_from(config)
        sets = json.loads((artifacts / "discover" / "sets.json").read_text(encoding="utf-8"))
        model = flow.FlowModel.load(artifacts / "train-flow" / "flow.bin")
        window = config["corpus"].get("context_window", 64)
        cap = config["subspace"].get("max_instances_per_word", 256)
        candidates = flow.generate_word_pairs(
            corpus, set(sets["a"]), set(sets["b"]), backend, model,
            cap=cap, window=window,
        )
        prompt = subspace.PromptPair(sets["prompt"][0], sets["prompt"][1])
        built = dict_mod.assemble(
            prompt, candidates,
            min_votes=dict_cfg.get("min_votes", 0.5),
            ambiguous=sets["ambiguous"],
        )
    names_a, names_b = dict_cfg.get("names_a"), dict_cfg.get("names_b")
    if names_a and names_b:
        names = dict_mod.names_intervention(
            dict_mod.load_name_list(names_a), dict_mod.load_name_list(names_b)
        )
        built = dict_mod.merge(built, names)
    dict_mod.save_dictionary(out_dir / "dictionary.tsv.tmp", built)
    os.replace(out_dir / "dictionary.tsv.tmp", out_dir / "dictionary.tsv")
    lines = [
        f"{c.word}\t{c.counterfactual}\t{c.votes}\t{c.total}\t{c.side}"
        for c in sorted(candidates, key=lambda c: (c.side, c.word))
    ]
    atomic_write_text(out_dir / "candidates.tsv", "\n".join(lines) + ("\n" if lines else ""))


def _toy_reference_sequences(corpus):
    return [[t.lower() for t in doc.tokens] for doc in corpus.documents]


def _stage_build_parallel(config, out_dir: Path, seed: int, artifacts: Path):
    corpus = _load_train_corpus(config)
    built = dict_mod.load_dictionary(artifacts / "build-dict" / "dictionary.tsv")
    rw = config["rewrite"]
    disc_name = rw.get("discriminator", {}).get("backend", "toy")
    infill_name = rw.get("infiller", {}).get("backend", "toy")
    references = _toy_reference_sequences(corpus)
    if disc_name == "toy":
        discriminator = NgramPlausibility(references)
    elif disc_name.startswith("pretrained:"):
        from .pretrained import PretrainedDiscriminator

        discriminator = PretrainedDiscriminator(disc_name.split(":", 1)[1])
    else:
        raise PreconditionError(f"unknown discriminator backend {disc_name!r}")
    if infill_name == "toy":
        infiller = NgramInfiller(references, corpus.tokenizer)
    elif infill_name.startswith("pretrained:"):
        from .pretrained import PretrainedInfiller

        infiller = PretrainedInfiller(infill_name.split(":", 1)[1])
    else:
        raise PreconditionError(f"unknown infiller backend {infill_name!r}")
    correction_cfg = rewrite.CorrectionConfig(
        threshold_theta=rw.get("theta", 0.1),
        max_mask_fraction=rw.get("max_mask_fraction", 0.3),
        protect_substituted=rw.get("protect_substituted", True),
        iterations=rw.get("iterations", 1),
    )
    records = rewrite.build_parallel_corpus(
        corpus, built, discriminator, infiller, correction_cfg,
        correction=rw.get("correction", True),
        include_noop=rw.get("include_noop", True),
    )
    rewrite.write_parallel_jsonl(out_dir / "parallel.jsonl.tmp", records)
    os.replace(out_dir / "parallel.jsonl.tmp", out_dir / "parallel.jsonl")


def _stage_train_generator(config, out_dir: Path, seed: int, artifacts: Path):
    rows = rewrite.read_parallel_jsonl(artifacts / "build-parallel" / "parallel.jsonl")
    include_noop = config["generator"].get("include_noop", False)
    pairs = []
    for row in rows:
        if not include_noop and "noop" in row.get("trace", {}).get("flags", []):
            continue
        if not row["src"].strip() or not row["tgt"].strip():
            log.warning("skipping empty parallel pair %s", row.get("id"))
            continue
        pairs.append(generator.ParallelPair.from_texts(row["src"], row["tgt"]))
    if not pairs:
        raise PreconditionError("no substantive parallel pairs to train on")
    gen_cfg = config["generator"]
    model = generator.finetune(pairs, generator.GeneratorConfig(
        width=gen_cfg.get("width", 128),
        layers=gen_cfg.get("layers", 2),
        epochs=gen_cfg.get("epochs", 200),
        lr=gen_cfg.get("lr", 2e-3),
        batch=gen_cfg.get("batch", 32),
        seed=seed,
        max_len=gen_cfg.get("max_len", 128),
    ))
    model.save(out_dir / "generator.bin.tmp")
    os.replace(out_dir / "generator.bin.tmp", out_dir / "generator.bin")


def _read_jsonl(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno, path=str(path)) from exc
    return rows


def _stage_generate(config, out_dir: Path, seed: int, artifacts: Path):
    rows = _read_jsonl(_require(config, "corpus", "eval_path"))
    model = generator.GeneratorModel.load(artifacts / "train-generator" / "generator.bin")
    lines = []
    for row in rows:
        if "text" not in row:
            raise ParseError('record missing "text"', path=str(config["corpus"]["eval_path"]))
        out = dict(row)
        out["generated"] = generator.generate(model, row["text"])
        lines.append(json.dumps(out, sort_keys=True))
    atomic_write_text(out_dir / "generated.jsonl", "\n".join(lines) + "\n")


def _stage_evaluate(config, out_dir: Path, seed: int, artifacts: Path):
    rows = _read_jsonl(artifacts / "generate" / "generated.jsonl")
    if not rows:
        raise PreconditionError("no generated records to evaluate")
    originals = [row["text"] for row in rows]
    generated = [row["generated"] for row in rows]
    groups = [row.get("group") for row in rows]
    lm_name = config["eval"].get("lm", "toy-bigram")
    if lm_name == "toy-bigram":
        tokenizer = _tokenizer_from(config)
        lm = BigramLM([tokenizer.word_tokens(t) for t in originals])
    elif lm_name.startswith("pretrained:"):
        from .pretrained import PretrainedLM

        lm = PretrainedLM(lm_name.split(":", 1)[1])
    else:
        raise PreconditionError(f"unknown eval lm {lm_name!r}")
    ppl = evaluation.perplexity(generated, lm)
    backend = _backend_from(config)
    labeled = [(t, g) for t, g in zip(originals, groups) if g]
    clf = evaluation.TextAttributeClassifier.fit(
        [t for t, _ in labeled], [g for _, g in labeled], backend,
        subspace.ClassifierConfig(seed=seed),
    )
    orig_labeled = [t for t, grp in zip(originals, groups) if grp]
    gen_labeled = [g for g, grp in zip(generated, groups) if grp]
    transfer = evaluation.transfer_accuracy(orig_labeled, gen_labeled, clf)
    scores = evaluation.EvalScores(perplexity=ppl, transfer_accuracy=transfer)
    metrics = {"perplexity": scores.perplexity,
               "transfer_accuracy": scores.transfer_accuracy}
    extra = {}
    predictions_path = config["eval"].get("predictions_path")
    if predictions_path:
        preds = evaluation.load_predictions(predictions_path)
        report = evaluation.tprd_fprd(
            [r["pred"] for r in preds],
            [r["label"] for r in preds],
            [r["group"] for r in preds],
        )
        metrics.update(tprd=report.tprd, fprd=report.fprd,
                       accuracy=report.accuracy, f1=report.f1)
        extra["group_counts"] = report.group_counts
    payload = {
        "metrics": metrics,
        "provenance": {
            "seed": config.get("seed", 0),
            "stage_seed": seed,
            "config_hash": stage_config_hash("evaluate", config),
            "lm": lm.name,
            "embedding_backend": backend.name,
            "perplexity_pooling": "token-pooled",
            "scored_documents": len(rows),
            "transfer_documents": len(orig_labeled),
            **extra,
        },
    }
    atomic_write_text(out_dir / "report.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")


_IMPLS = {
    "discover": lambda cfg, out, seed, artifacts: _stage_discover(cfg, out, seed),
    "train-flow": _stage_train_flow,
    "build-dict": _stage_build_dict,
    "build-parallel": _stage_build_parallel,
    "train-generator": _stage_train_generator,
    "generate": _stage_generate,
    "evaluate": _stage_evaluate,
}

_OUTPUTS = {
    "discover": ("classifier.bin", "discovery.tsv", "sets.json"),
    "train-flow": ("flow.bin",),
    "build-dict": ("dictionary.tsv", "candidates.tsv"),
    "build-parallel": ("parallel.jsonl",),
    "train-generator": ("generator.bin",),
    "generate": ("generated.jsonl",),
    "evaluate": ("report.json",),
}


def run_stage(stage: str, config: dict, artifacts_dir, force: bool = False) -> str:
    """Run one pipeline stage; returns "ran" or "up-to-date"."""
    if stage not in STAGES:
        raise PreconditionError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    artifacts = Path(artifacts_dir)
    artifacts.mkdir(parents=True, exist_ok=True)
    with _Lock(artifacts):
        inputs = _input_files(stage, config, artifacts)
        for name, path in inputs.items():
            if not Path(path).exists():
                if "/" in name:
                    raise MissingArtifactError(name.split("/")[0], path)
                raise PreconditionError(f"missing input {name!r}: {path}")
        input_hashes = {name: file_sha(path) for name, path in sorted(inputs.items())}
        config_hash = stage_config_hash(stage, config)
        manifest = Manifest(artifacts / "manifest.json")
        entry = manifest.entry(stage)
        out_dir = artifacts / stage
        outputs_present = out_dir.exists() and all(
            (out_dir / name).exists() for name in _OUTPUTS[stage]
        )
        if entry and outputs_present:
            unchanged = (
                entry.get("config_hash") == config_hash
                and entry.get("inputs") == input_hashes
                and all(
                    entry.get("outputs", {}).get(name) == file_sha(out_dir / name)
                    for name in _OUTPUTS[stage]
                )
            )
            if unchanged:
                log.info("stage %s is up to date", stage)
                return "up-to-date"
            if not force:
                raise ConfigMismatchError(
                    f"stage {stage!r} artifact exists with different config/inputs; "
                    "rerun with --force to overwrite"
                )
        out_dir.mkdir(parents=True, exist_ok=True)
        seed = stage_seed(config, stage)
        n_threads = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            _IMPLS[stage](config, out_dir, seed, artifacts)
        finally:
            torch.set_num_threads(n_threads)
        output_hashes = {name: file_sha(out_dir / name) for name in _OUTPUTS[stage]}
        manifest.update(stage, config_hash, input_hashes, output_hashes)
        log.info("stage %s complete", stage)
        return "ran"
