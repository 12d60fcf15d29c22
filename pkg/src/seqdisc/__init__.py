"""Sequence discriminative training for strictly monotonic phoneme transducers."""

from .beam import (
    NBestEntry,
    NBestList,
    beam_denominator,
    generate_nbest,
    load_nbest,
    run_beam,
    save_nbest,
)
from .core import (
    BOS,
    UNK_WORD,
    FormatError,
    Lexicon,
    PhonemeAlphabet,
    Utterance,
    collapse,
    load_corpus,
    load_lexicon,
    map_pronunciation,
    save_corpus,
    save_lexicon,
)
from .decode import (
    DecodeConfig,
    Recognizer,
    WerBreakdown,
    exhaustive_recognize,
    ilm_zero_encoder,
    recognize,
    score_wer,
)
from .lattice_free import (
    SeqScoreConfig,
    brute_force_denominator,
    lf_denominator_approx,
    lf_denominator_limited,
    lf_denominator_word,
    top_j_select,
)
from .lm import (
    MultiLevelLM,
    NGramLM,
    SuffixLM,
    WordLevelLabelLM,
    load_arpa,
    multilevel_step,
    perplexity,
    save_arpa,
    word_score_at_eow,
)
from .losses import (
    CostFunction,
    LossValue,
    edit_distance,
    grad_check,
    mbr_nbest_loss,
    mmi_lf_loss,
    mmi_nbest_loss,
)
from .scorer import (
    ContextKScorer,
    PrecomputedScores,
    ScoreFileScorer,
    load_checkpoint,
    load_score_tensor,
    numerator_forward,
    save_checkpoint,
    save_score_tensor,
)
from .training import DivergenceError, SequenceTrainer

__version__ = "0.1.0"

__all__ = [
    "BOS",
    "UNK_WORD",
    "ContextKScorer",
    "CostFunction",
    "DecodeConfig",
    "DivergenceError",
    "FormatError",
    "Lexicon",
    "LossValue",
    "MultiLevelLM",
    "NBestEntry",
    "NBestList",
    "NGramLM",
    "PhonemeAlphabet",
    "PrecomputedScores",
    "Recognizer",
    "ScoreFileScorer",
    "SeqScoreConfig",
    "SequenceTrainer",
    "SuffixLM",
    "Utterance",
    "WerBreakdown",
    "WordLevelLabelLM",
    "beam_denominator",
    "brute_force_denominator",
    "collapse",
    "edit_distance",
    "exhaustive_recognize",
    "generate_nbest",
    "grad_check",
    "ilm_zero_encoder",
    "lf_denominator_approx",
    "lf_denominator_limited",
    "lf_denominator_word",
    "load_arpa",
    "load_checkpoint",
    "load_corpus",
    "load_lexicon",
    "load_nbest",
    "load_score_tensor",
    "map_pronunciation",
    "mbr_nbest_loss",
    "mmi_lf_loss",
    "mmi_nbest_loss",
    "multilevel_step",
    "numerator_forward",
    "perplexity",
    "recognize",
    "run_beam",
    "save_arpa",
    "save_checkpoint",
    "save_corpus",
    "save_lexicon",
    "save_nbest",
    "save_score_tensor",
    "score_wer",
    "top_j_select",
    "word_score_at_eow",
]
