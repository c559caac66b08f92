"""Sequence-to-sequence counterfactual generator.

A compact GRU encoder-decoder with dot-product attention, trained from
scratch on the generated parallel pairs with teacher forcing and decoded
greedily. Designed to run on CPU in seconds on the fixture corpora.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import read_checkpoint, write_checkpoint
from .errors import PreconditionError, TrainingDivergenceError
from .tokenizer import WordpieceTokenizer

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

_tokenizer = WordpieceTokenizer()


def text_tokens(text) -> tuple[str, ...]:
    if isinstance(text, str):
        return tuple(_tokenizer.word_tokens(text))
    return tuple(text)


@dataclass(frozen=True)
class ParallelPair:
    source: tuple[str, ...]
    target: tuple[str, ...]

    def __post_init__(self):
        if not self.source or not self.target:
            raise PreconditionError("parallel pairs must be non-empty")

    @classmethod
    def from_texts(cls, source, target) -> "ParallelPair":
        return cls(text_tokens(source), text_tokens(target))


class Vocab:
    def __init__(self, tokens: list[str]):
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for i, special in enumerate(SPECIALS):
            if self.itos[i] != special:
                raise PreconditionError("vocabulary must start with the special tokens")

    @classmethod
    def build(cls, pairs, max_size: int | None = None) -> "Vocab":
        counts: dict[str, int] = {}
        for pair in pairs:
            for token in (*pair.source, *pair.target):
                counts[token] = counts.get(token, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(SPECIALS))]
        return cls(list(SPECIALS) + ranked)

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens) -> tuple[list[int], int]:
        """Token ids plus the count of out-of-vocabulary tokens."""
        unk = self.stoi[UNK]
        ids, oov = [], 0
        for token in tokens:
            idx = self.stoi.get(token)
            if idx is None:
                idx = unk
                oov += 1
            ids.append(idx)
        return ids, oov

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]


@dataclass
class GeneratorConfig:
    width: int = 128
    layers: int = 2
    epochs: int = 200
    lr: float = 2e-3
    batch: int = 32
    seed: int = 0
    max_len: int = 128
    vocab_size: int | None = None


class _Seq2Seq(nn.Module):
    def __init__(self, vocab_size: int, width: int, layers: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, width, padding_idx=0)
        self.encoder = nn.GRU(width, width, num_layers=layers, batch_first=True)
        self.decoder = nn.GRU(width, width, num_layers=layers, batch_first=True)
        self.combine = nn.Linear(2 * width, width)
        self.project = nn.Linear(width, vocab_size)

    def encode(self, src_ids: torch.Tensor):
        mask = src_ids.ne(0)
        embedded = self.embedding(src_ids)
        lengths = mask.sum(dim=1).clamp(min=1)
        packed = nn.utils.rnn.pack_padded_sequence(
            embedded, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        enc_packed, state = self.encoder(packed)
        enc_out, _ = nn.utils.rnn.pad_packed_sequence(
            enc_packed, batch_first=True, total_length=src_ids.shape[1]
        )
        return enc_out, state, mask

    def decode_step_logits(self, dec_out, enc_out, src_mask):
        scores = torch.bmm(dec_out, enc_out.transpose(1, 2))
        scores = scores.masked_fill(~src_mask.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=2)
        context = torch.bmm(attn, enc_out)
        feature = torch.tanh(self.combine(torch.cat([dec_out, context], dim=2)))
        return self.project(feature)

    def forward(self, src_ids: torch.Tensor, tgt_in: torch.Tensor):
        enc_out, state, mask = self.encode(src_ids)
        dec_out, _ = self.decoder(self.embedding(tgt_in), state)
        return self.decode_step_logits(dec_out, enc_out, mask)


class GeneratorModel:
    """Trained counterfactual generator with its vocabulary."""

    def __init__(self, module: _Seq2Seq, vocab: Vocab, config: GeneratorConfig,
                 meta: dict | None = None):
        self.module = module
        self.vocab = vocab
        self.config = config
        self.meta = meta or {}
        self.oov_tally = 0

    def _encode(self, tokens) -> list[int]:
        ids, oov = self.vocab.encode(tokens)
        if oov:
            if not self.oov_tally:
                log.warning("out-of-vocabulary tokens mapped to %s (tallied)", UNK)
            self.oov_tally += oov
        return ids

    def step_log_probs(self, pair: ParallelPair) -> torch.Tensor:
        """Log-probability rows, one per gold target position (teacher-forced).

        Scores exactly the target tokens: position t conditions on the
        source and the gold prefix, with no end-token term.
        """
        src = torch.tensor([self._encode(pair.source)], dtype=torch.long)
        bos = self.vocab.stoi[BOS]
        tgt = self._encode(pair.target)
        tgt_in = torch.tensor([[bos] + tgt[:-1]], dtype=torch.long)
        logits = self.module(src, tgt_in)[0]
        return torch.log_softmax(logits, dim=1), torch.tensor(tgt, dtype=torch.long)

    def save(self, path) -> None:
        arrays = {k: v.detach().numpy() for k, v in self.module.state_dict().items()}
        meta = dict(
            self.meta,
            vocab=self.vocab.itos,
            width=self.config.width,
            layers=self.config.layers,
            max_len=self.config.max_len,
            seed=self.config.seed,
        )
        write_checkpoint(path, "generator", meta, arrays)

    @classmethod
    def load(cls, path) -> "GeneratorModel":
        meta, arrays = read_checkpoint(path, "generator")
        vocab = Vocab(meta.pop("vocab"))
        config = GeneratorConfig(
            width=meta.pop("width"), layers=meta.pop("layers"),
            max_len=meta.pop("max_len"), seed=meta.pop("seed"),
        )
        module = _Seq2Seq(len(vocab), config.width, config.layers)
        module.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        module.eval()
        return cls(module, vocab, config, meta)


def loss_tensor(model: GeneratorModel, pair: ParallelPair) -> torch.Tensor:
    """Differentiable teacher-forcing loss (sum over target positions)."""
    log_probs, targets = model.step_log_probs(pair)
    return -log_probs[torch.arange(len(targets)), targets].sum()


def teacher_forcing_loss(model: GeneratorModel, pair: ParallelPair) -> float:
    """Sum over target positions of the negative log-probability of the
    gold token given the gold prefix and the source."""
    with torch.no_grad():
        loss = loss_tensor(model, pair)
    return float(loss)


def _batch_tensors(pairs, vocab: Vocab, device=None):
    bos, eos = vocab.stoi[BOS], vocab.stoi[EOS]
    encoded = []
    for pair in pairs:
        src, _ = vocab.encode(pair.source)
        tgt, _ = vocab.encode(pair.target)
        encoded.append((src, tgt + [eos]))
    max_src = max(len(s) for s, _ in encoded)
    max_tgt = max(len(t) for _, t in encoded)
    src_ids = torch.zeros(len(encoded), max_src, dtype=torch.long)
    tgt_in = torch.zeros(len(encoded), max_tgt, dtype=torch.long)
    tgt_out = torch.zeros(len(encoded), max_tgt, dtype=torch.long)
    for i, (src, tgt) in enumerate(encoded):
        src_ids[i, :len(src)] = torch.tensor(src)
        tgt_in[i, 0] = bos
        tgt_in[i, 1:len(tgt)] = torch.tensor(tgt[:-1])
        tgt_out[i, :len(tgt)] = torch.tensor(tgt)
    return src_ids, tgt_in, tgt_out


def finetune(pairs, config: GeneratorConfig | None = None,
             checkpoint_path=None) -> GeneratorModel:
    """Train the generator on parallel pairs with teacher forcing.

    When ``checkpoint_path`` is given the trained model is persisted
    there before returning.
    """
    config = config or GeneratorConfig()
    pairs = list(pairs)
    if not pairs:
        raise PreconditionError("at least one parallel pair is required")
    too_long = [p for p in pairs if len(p.source) > config.max_len or len(p.target) + 1 > config.max_len]
    if too_long:
        raise PreconditionError(
            f"{len(too_long)} pair(s) exceed max sequence length {config.max_len}"
        )
    vocab = Vocab.build(pairs, config.vocab_size)
    rng = np.random.default_rng(config.seed)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        module = _Seq2Seq(len(vocab), config.width, config.layers)
        optimizer = torch.optim.Adam(module.parameters(), lr=config.lr)
        loss_fn = nn.CrossEntropyLoss(ignore_index=0, reduction="mean")
        src_ids, tgt_in, tgt_out = _batch_tensors(pairs, vocab)
        history = []
        for epoch in range(config.epochs):
            order = rng.permutation(len(pairs))
            epoch_loss, n_batches = 0.0, 0
            module.train()
            for start in range(0, len(order), config.batch):
                idx = torch.from_numpy(order[start:start + config.batch])
                optimizer.zero_grad()
                logits = module(src_ids[idx], tgt_in[idx])
                loss = loss_fn(logits.reshape(-1, len(vocab)), tgt_out[idx].reshape(-1))
                if not torch.isfinite(loss):
                    raise TrainingDivergenceError(epoch)
                loss.backward()
                optimizer.step()
                epoch_loss += float(loss.detach())
                n_batches += 1
            history.append(epoch_loss / max(1, n_batches))
        module.eval()
    meta = {"loss_history": history, "seed": config.seed}
    model = GeneratorModel(module, vocab, config, meta)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return model


def generate(model: GeneratorModel, text) -> str:
    """Greedy decode; always terminates at the end token or the cap."""
    tokens = text_tokens(text)
    if not tokens:
        return ""
    module = model.module
    module.eval()
    bos, eos = model.vocab.stoi[BOS], model.vocab.stoi[EOS]
    with torch.no_grad():
        src = torch.tensor([model._encode(tokens)], dtype=torch.long)
        enc_out, state, mask = module.encode(src)
        step = torch.tensor([[bos]], dtype=torch.long)
        out_ids = []
        for _ in range(model.config.max_len):
            dec_out, state = module.decoder(module.embedding(step), state)
            logits = module.decode_step_logits(dec_out, enc_out, mask)[0, 0]
            next_id = int(logits.argmax())
            if next_id == eos:
                break
            out_ids.append(next_id)
            step = torch.tensor([[next_id]], dtype=torch.long)
    return _tokenizer.detokenize(model.vocab.decode(out_ids))


def exact_match(model: GeneratorModel, pairs) -> float:
    """Fraction of pairs whose greedy decode equals the target exactly."""
    pairs = list(pairs)
    if not pairs:
        return 0.0
    hits = sum(
        generate(model, pair.source) == _tokenizer.detokenize(pair.target)
        for pair in pairs
    )
    return hits / len(pairs)
