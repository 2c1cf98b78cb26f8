"""Hierarchical decoding language model, from tensors to CLI."""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .costs import CostParams, CostReport, savings_report
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    IntegrityError,
    ProtocolError,
    ShapeError,
    UsageError,
)
from .inference import GenerationConfig, HierOutput, generate
from .metrics import MetricReport, evaluate_levels
from .model import (
    LayerScheduleReport,
    ModelConfig,
    Parameters,
    init_model,
    replicate_heads,
    validate_schedule,
)
from .tasks import (
    SyntheticSpec,
    Tokenizer,
    encode_record,
    gen_hierarchy,
    gen_htc_samples,
    gen_htg_samples,
    read_jsonl,
    write_jsonl,
)
from .training import HierSample, TrainConfig, train_loop

__all__ = [
    "__version__",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "RunConfig", "load_run_config",
    "CostParams", "CostReport", "savings_report",
    "ConfigError", "DataError", "DivergenceError", "IntegrityError",
    "ProtocolError", "ShapeError", "UsageError",
    "GenerationConfig", "HierOutput", "generate",
    "MetricReport", "evaluate_levels",
    "LayerScheduleReport", "ModelConfig", "Parameters",
    "init_model", "replicate_heads", "validate_schedule",
    "SyntheticSpec", "Tokenizer", "encode_record", "gen_hierarchy",
    "gen_htc_samples", "gen_htg_samples", "read_jsonl", "write_jsonl",
    "HierSample", "TrainConfig", "train_loop",
]
