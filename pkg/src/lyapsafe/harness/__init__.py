"""Experiment configuration, runs, evaluation and plot/attention emission."""
from .attention import (
    Trajectory,
    attention_weights,
    dominant_keys,
    dump_checkpoint_attention,
    legal_actions,
    load_scenario,
    record_trajectory,
)
from .config import (
    ExperimentConfig,
    from_dict,
    load_config,
    parse_override,
    reference_config_names,
    reference_config_path,
    sweep_points,
    write_manifest,
)
from .evaluate import EvalReport, ci_halfwidth, evaluate, evaluate_agent, evaluate_policy, make_report
from .plotdata import emit_plot_data, moving_average, plot_columns
from .runner import run_experiment, run_one

__all__ = [
    "EvalReport", "ExperimentConfig", "Trajectory", "attention_weights", "ci_halfwidth", "dominant_keys",
    "dump_checkpoint_attention", "emit_plot_data", "evaluate", "evaluate_agent", "evaluate_policy", "from_dict",
    "legal_actions", "load_config", "load_scenario", "make_report", "moving_average", "parse_override",
    "plot_columns", "record_trajectory", "reference_config_names", "reference_config_path", "run_experiment",
    "run_one", "sweep_points", "write_manifest",
]
