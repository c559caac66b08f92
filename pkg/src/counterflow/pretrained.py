"""Adapters for pretrained checkpoints behind the same backend interfaces.

These require the optional ``transformers`` dependency plus downloaded
model weights, so nothing in the hermetic test suite depends on them.
Select them in the pipeline config as ``pretrained:<model-id>``.
"""

from __future__ import annotations

import numpy as np

from .backends import ContextualEmbedding, EmbeddingBackend
from .corpus import Occurrence
from .errors import BackendError
from .lm import LMBackend
from .rewrite import DiscriminatorBackend, InfillerBackend, MaskedText
from .tokenizer import MASK


def _require_transformers():
    try:
        import torch  # noqa: F401
        import transformers
    except ImportError as exc:
        raise BackendError(
            "pretrained backends need the optional 'transformers' dependency"
        ) from exc
    return transformers


class PretrainedEncoderBackend(EmbeddingBackend):
    """Last-layer hidden state of a masked-LM encoder at the occurrence
    position (first subtoken of the word)."""

    deterministic = True

    def __init__(self, model_id: str, max_context: int = 128):
        transformers = _require_transformers()
        import torch

        self._torch = torch
        self.name = f"pretrained:{model_id}"
        self.max_context = max_context
        self._tokenizer = transformers.AutoTokenizer.from_pretrained(model_id)
        self._model = transformers.AutoModel.from_pretrained(model_id)
        self._model.eval()
        self.dim = int(self._model.config.hidden_size)

    def embed(self, occ: Occurrence) -> ContextualEmbedding:
        torch = self._torch
        context = list(occ.context)
        truncated = False
        if len(context) > self.max_context:
            half = self.max_context // 2
            start = max(0, min(occ.center - half, len(context) - self.max_context))
            context = context[start:start + self.max_context]
            center = occ.center - start
            truncated = True
        else:
            center = occ.center
        encoded = self._tokenizer(
            context, is_split_into_words=True, return_tensors="pt",
            truncation=True,
        )
        word_ids = encoded.word_ids(0)
        try:
            position = word_ids.index(center)
        except ValueError as exc:
            raise BackendError(f"occurrence {occ.word!r} fell outside the encoder window") from exc
        with torch.no_grad():
            hidden = self._model(**encoded).last_hidden_state[0]
        vector = hidden[position].numpy().astype(np.float64)
        return ContextualEmbedding(occ, vector, truncated)


class PretrainedDiscriminator(DiscriminatorBackend):
    """Replaced-token-detection head: plausibility = P(token is real)."""

    deterministic = True

    def __init__(self, model_id: str):
        transformers = _require_transformers()
        import torch

        self._torch = torch
        self.name = f"pretrained:{model_id}"
        self._tokenizer = transformers.AutoTokenizer.from_pretrained(model_id)
        self._model = transformers.ElectraForPreTraining.from_pretrained(model_id)
        self._model.eval()

    def score_tokens(self, tokens) -> list[float]:
        torch = self._torch
        encoded = self._tokenizer(
            list(tokens), is_split_into_words=True, return_tensors="pt", truncation=True,
        )
        with torch.no_grad():
            logits = self._model(**encoded).logits[0]
        replaced = torch.sigmoid(logits)
        word_ids = encoded.word_ids(0)
        scores = [1.0] * len(tokens)
        for position, word_id in enumerate(word_ids):
            if word_id is None:
                continue
            plausibility = float(1.0 - replaced[position])
            scores[word_id] = min(scores[word_id], plausibility)
        return scores


class PretrainedInfiller(InfillerBackend):
    """Seq2seq denoiser that rewrites the masked text; each mask receives
    the tokens the model put in its place."""

    deterministic = True

    def __init__(self, model_id: str, max_new_tokens: int = 8):
        transformers = _require_transformers()
        import torch

        self._torch = torch
        self.name = f"pretrained:{model_id}"
        self.max_new_tokens = max_new_tokens
        self._tokenizer = transformers.AutoTokenizer.from_pretrained(model_id)
        self._model = transformers.AutoModelForSeq2SeqLM.from_pretrained(model_id)
        self._model.eval()

    def fill(self, masked: MaskedText) -> list[tuple[str, ...]]:
        torch = self._torch
        mask_token = self._tokenizer.mask_token or MASK
        masked_set = set(masked.masked_token_indices)
        template = [
            mask_token if i in masked_set else token
            for i, token in enumerate(masked.origin_tokens)
        ]
        encoded = self._tokenizer(" ".join(template), return_tensors="pt", truncation=True)
        n_masks = len(masked_set)
        with torch.no_grad():
            output = self._model.generate(
                **encoded, num_beams=1, do_sample=False,
                max_length=encoded["input_ids"].shape[1] + self.max_new_tokens * max(1, n_masks),
            )
        rewritten = self._tokenizer.decode(output[0], skip_special_tokens=True).split()
        return _align_fills(template, rewritten, mask_token, n_masks)


def _align_fills(template, rewritten, mask_token, n_masks) -> list[tuple[str, ...]]:
    """Greedy word-level alignment of the rewritten stream against the
    masked template: literal words anchor the walk, whatever sits between
    anchors belongs to the mask in between."""
    fills: list[tuple[str, ...]] = []
    j = 0
    for i, word in enumerate(template):
        if word == mask_token:
            next_literal = None
            for look in template[i + 1:]:
                if look != mask_token:
                    next_literal = look.lower()
                    break
            collected = []
            while j < len(rewritten):
                if next_literal is not None and rewritten[j].lower() == next_literal:
                    break
                collected.append(rewritten[j])
                j += 1
            fills.append(tuple(collected))
        elif j < len(rewritten) and rewritten[j].lower() == word.lower():
            j += 1
    while len(fills) < n_masks:
        fills.append(())
    return fills[:n_masks]


class PretrainedLM(LMBackend):
    """Causal-LM scorer for perplexity."""

    def __init__(self, model_id: str):
        transformers = _require_transformers()
        import torch

        self._torch = torch
        self.name = f"pretrained:{model_id}"
        self._tokenizer = transformers.AutoTokenizer.from_pretrained(model_id)
        self._model = transformers.AutoModelForCausalLM.from_pretrained(model_id)
        self._model.eval()

    def nll(self, tokens) -> tuple[float, int]:
        torch = self._torch
        text = " ".join(tokens)
        encoded = self._tokenizer(text, return_tensors="pt", truncation=True)
        ids = encoded["input_ids"]
        if ids.shape[1] < 2:
            return 0.0, 0
        with torch.no_grad():
            logits = self._model(**encoded).logits[0]
        log_probs = torch.log_softmax(logits[:-1], dim=-1)
        gold = ids[0, 1:]
        total = -float(log_probs[torch.arange(len(gold)), gold].sum())
        return total, int(len(gold))
