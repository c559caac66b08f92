"""Pretrained-backend adapters need downloaded model weights; everything
here is opt-in via COUNTERFLOW_PRETRAINED."""

import os

import pytest

pretrained_only = pytest.mark.skipif(
    not os.environ.get("COUNTERFLOW_PRETRAINED"),
    reason="set COUNTERFLOW_PRETRAINED=1 with downloaded checkpoints",
)


@pretrained_only
def test_encoder_backend_dim_matches_hidden_size():
    from counterflow.corpus import Occurrence
    from counterflow.pretrained import PretrainedEncoderBackend

    backend = PretrainedEncoderBackend(
        os.environ.get("COUNTERFLOW_BERT", "bert-base-uncased"))
    assert backend.dim == 768
    occ = Occurrence("she", "d", 0, ("she", "is", "a", "nurse"), 0)
    first = backend.embed(occ)
    second = backend.embed(occ)
    assert first.vector.shape == (768,)
    assert (first.vector == second.vector).all()


@pretrained_only
def test_discriminator_flags_out_of_context_token():
    from counterflow.pretrained import PretrainedDiscriminator

    disc = PretrainedDiscriminator(
        os.environ.get("COUNTERFLOW_ELECTRA", "google/electra-base-discriminator"))
    scores = disc.score_tokens("The men are duchesses".split())
    assert len(scores) == 4
    assert scores[3] == min(scores)


@pretrained_only
def test_infiller_fills_masks():
    from counterflow.pretrained import PretrainedInfiller
    from counterflow.rewrite import mask_subtoken_groups
    from counterflow.tokenizer import WordpieceTokenizer

    infiller = PretrainedInfiller(
        os.environ.get("COUNTERFLOW_BART", "facebook/bart-base"))
    tokenizer = WordpieceTokenizer()
    masked = mask_subtoken_groups("The men are duchesses".split(), [3], tokenizer)
    fills = infiller.fill(masked)
    assert len(fills) == 1


def test_align_fills_is_pure_and_correct():
    from counterflow.pretrained import _align_fills

    assert _align_fills(["The", "men", "are", "<mask>", "."],
                        "The men are dukes .".split(), "<mask>", 1) == [("dukes",)]
    assert _align_fills(["<mask>", "taught", "<mask>", "python", "."],
                        "Anthony taught himself python .".split(),
                        "<mask>", 2) == [("Anthony",), ("himself",)]
    # the model deleted the masked word
    assert _align_fills(["she", "liked", "<mask>", "the", "book", "."],
                        "she liked the book .".split(), "<mask>", 1) == [()]
    # the model expanded one mask to two words
    assert _align_fills(["the", "<mask>", "smiled", "."],
                        "the old duchess smiled .".split(),
                        "<mask>", 1) == [("old", "duchess")]
    # rewritten stream shorter than expected still yields one fill per mask
    assert _align_fills(["a", "<mask>", "b", "<mask>"],
                        ["a"], "<mask>", 2) == [(), ()]
