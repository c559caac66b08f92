"""Counterfactual text augmentation toolkit.

From a single word-pair prompt: discover attribute words with a trained
subspace classifier, generate counterfactual word pairs with an invertible
disentangling flow, build an error-corrected parallel corpus, fine-tune a
counterfactual text generator, and evaluate fluency, transfer, and
fairness.
"""

from .backends import ContextualEmbedding, EmbeddingBackend, ToyEmbeddingBackend
from .corpus import Occurrence, TokenizedCorpus, find_occurrences, load_corpus
from .dictionary import (
    PairCandidate,
    PairEntry,
    WordPairDictionary,
    assemble,
    load_dictionary,
    merge,
    names_intervention,
    save_dictionary,
)
from .errors import CounterflowError, PreconditionError
from .evaluation import (
    BiasSampleSpec,
    EvalScores,
    FairnessReport,
    TextAttributeClassifier,
    accuracy_f1,
    induce_bias_sample,
    perplexity,
    tprd_fprd,
    transfer_accuracy,
)
from .flow import (
    FlowModel,
    FlowTrainConfig,
    VocabTable,
    build_vocab_table,
    counterfactual_embedding,
    decode_word,
    estimate_k,
    generate_word_pairs,
    train_flow,
)
from .generator import (
    GeneratorConfig,
    GeneratorModel,
    ParallelPair,
    finetune,
    generate,
    teacher_forcing_loss,
)
from .rewrite import (
    CorrectionConfig,
    MaskedText,
    RewriteTrace,
    build_parallel_corpus,
    detect_erratic,
    infill,
    mask_subtoken_groups,
    substitute,
)
from .subspace import (
    ClassifierConfig,
    DiscoveryConfig,
    LabeledEmbeddingSet,
    PromptPair,
    SubspaceClassifier,
    collect_prompt_embeddings,
    discover_attribute_words,
    train_subspace_classifier,
)
from .tokenizer import MASK, WordpieceTokenizer

__version__ = "0.1.0"
