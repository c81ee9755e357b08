"""Training protocol, ablations, sweeps and reports."""

from vtar.pipeline.config import RunConfig, TrainConfig, dump_config, load_config, parse_config
from vtar.pipeline.optim import AdamW, AdamWConfig, AdamWState, adamw_step
from vtar.pipeline.report import RunReport
from vtar.pipeline.runner import (
    VARIANTS,
    AblationResult,
    AblationVariant,
    PromptPhaseResult,
    SweepCell,
    VariantRun,
    ablation_suite,
    check_variant_state,
    pretrained_reasoner,
    run_prompt_phase,
    run_variant,
    run_vtem_phase,
    sweep,
    sweep_table,
    vtem_config_for,
)

__all__ = [
    "VARIANTS",
    "AblationResult",
    "AblationVariant",
    "AdamW",
    "AdamWConfig",
    "AdamWState",
    "PromptPhaseResult",
    "RunConfig",
    "RunReport",
    "SweepCell",
    "TrainConfig",
    "VariantRun",
    "ablation_suite",
    "adamw_step",
    "check_variant_state",
    "dump_config",
    "load_config",
    "parse_config",
    "pretrained_reasoner",
    "run_prompt_phase",
    "run_variant",
    "run_vtem_phase",
    "sweep",
    "sweep_table",
    "vtem_config_for",
]
