"""Forward-only zeroth-order test-time adaptation of input prompts."""

from .core_math import InvalidArgumentError, SeedStream, gaussian
from .engine import AdaptSession, BatchMetrics, adapt_batch, run_stream, select_predictions
from .estimator import FOZOAdapter
from .losses import LossBreakdown, SourceStats, entropy_loss, estimate_source_stats, stats_alignment_loss, total_loss
from .model import (ForwardOutput, FrozenModel, ModelSpec, PromptSet, QuantizedModel, forward_with_prompts,
                    load_checkpoint, predict, quantize, save_checkpoint)
from .optim import (EpsilonState, OptimizerConfig, PerturbRecord, ProbeFailure, apply_updates, epsilon_step,
                    nspsa_gradient_mc_check, spsa_probe)
from .streams import DomainSpec, StreamSchedule, TaskSpec, build_stream, corrupt, generate_source

__version__ = "0.1.0"
