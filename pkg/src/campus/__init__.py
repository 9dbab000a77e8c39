"""Competence-aware multi-schedule curriculum engine for instruction tuning."""

from .corpus import (
    Dataset,
    EncodedCorpus,
    InstructionSample,
    Template,
    TokenSequence,
    Turn,
    Vocab,
    encode,
    load_dataset,
    load_many,
    render_text,
    tokenize,
)
from .lexical import mtld, ttr
from .metrics import (
    DifficultyVector,
    Schedule,
    build_schedules,
    length_difficulty,
    loss_difficulty,
    mtld_difficulty,
    score_difficulty,
)
from .probe import NGramProbe, Probe, ProbeError, ProbeReport
from .remote import RemoteProbe, external_probe
from .runner import (
    Convergence,
    CurriculumTrace,
    RunConfig,
    composition_report,
    convergence_report,
    run,
)
from .scheduler import ScopeConfig, batch_ppl, resort_tail, scope, segment, select_next
from .scorer import Mlp, ScorerConfig, TrainedScorer, build_training_pairs, train_scorer

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EncodedCorpus",
    "InstructionSample",
    "Template",
    "TokenSequence",
    "Turn",
    "Vocab",
    "encode",
    "load_dataset",
    "load_many",
    "render_text",
    "tokenize",
    "mtld",
    "ttr",
    "DifficultyVector",
    "Schedule",
    "build_schedules",
    "length_difficulty",
    "loss_difficulty",
    "mtld_difficulty",
    "score_difficulty",
    "NGramProbe",
    "Probe",
    "ProbeError",
    "ProbeReport",
    "RemoteProbe",
    "external_probe",
    "Convergence",
    "CurriculumTrace",
    "RunConfig",
    "composition_report",
    "convergence_report",
    "run",
    "ScopeConfig",
    "batch_ppl",
    "resort_tail",
    "scope",
    "segment",
    "select_next",
    "Mlp",
    "ScorerConfig",
    "TrainedScorer",
    "build_training_pairs",
    "train_scorer",
    "__version__",
]
