"""Entity alignment from a budget of noisy annotations.

Active selection picks which source entities to annotate, probabilistic
reasoning over relation functionality refines the noisy labels, and an
embedding matcher trained on them feeds confident pairs back to selection.
"""
from .annotator import (
    Annotation,
    Budget,
    CandidateList,
    LabelCache,
    LlmBackend,
    NoisyOracleBackend,
    OracleBackend,
    annotate,
    annotate_batch,
    build_prompt,
    filter_candidates,
)
from .errors import BackendError, BudgetExhausted, ConfigError, DataError, KgAlignError
from .kg import KgPair, KnowledgeGraph, load_openea, save_openea
from .matcher import EmbeddingMatcher, EvalReport, MatcherConfig, confident_pairs, evaluate, evaluate_confident
from .pipeline import RunConfig, RunReport, ablate, run
from .reasoning import AlignmentState, ReasoningConfig, dense_reference, propagate, reasoning_round, seed
from .refiner import PseudoLabel, RefinerConfig, RefineResult, incompatibility, refine
from .selection import (
    UncertaintyScores,
    aggregate,
    neighbor_uncertainty,
    relational_uncertainty,
    select,
    select_entities,
)
from .synth import SynthSpec, synth_noisy_labels, synth_pair

__version__ = "0.1.0"
