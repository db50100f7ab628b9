"""peft-forge: parameter-efficient tuning methods on a small from-scratch encoder-decoder,
with a data-to-text pipeline, n-gram metrics and experiment protocols."""

__version__ = "0.1.0"

from .audit import CountBreakdown, audit_report, count_trainable
from .autodiff import Tensor, backward, grad_check, no_grad, precision
from .data import Dataset, Instance, SlotValue, Triple, Vocab, linearize, sample_few_shot
from .errors import PeftForgeError
from .estimator import PeftGenerator, StructuredLinearizer
from .harness import ExperimentSpec, GridReport, RunResult, load_checkpoint, run_grid, save_checkpoint, train_run
from .metrics import MetricReport, evaluate_all
from .model import ArchitectureDims, Seq2SeqModel
from .peft import (
    IA3,
    BottleneckAdapter,
    Compacter,
    FineTune,
    LoRA,
    PrefixTuning,
    PromptTuning,
    ScaledPromptTuning,
    UniPELT,
    attach,
    config_from_dict,
)

__all__ = [
    "ArchitectureDims", "BottleneckAdapter", "Compacter", "CountBreakdown", "Dataset", "ExperimentSpec", "FineTune",
    "GridReport", "IA3", "Instance", "LoRA", "MetricReport", "PeftForgeError", "PeftGenerator", "PrefixTuning",
    "PromptTuning", "RunResult", "ScaledPromptTuning", "Seq2SeqModel", "SlotValue", "StructuredLinearizer", "Tensor",
    "Triple", "UniPELT", "Vocab", "attach", "audit_report", "backward", "config_from_dict", "count_trainable",
    "evaluate_all", "grad_check", "linearize", "load_checkpoint", "no_grad", "precision", "run_grid",
    "sample_few_shot", "save_checkpoint", "train_run",
]
