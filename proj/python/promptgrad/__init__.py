"""Textual-gradient prompt optimization over dataflow graphs."""

from ._core import (
    Gradient,
    ParamId,
    Parameter,
    ParameterGraph,
    ParameterKind,
    PromptgradError,
    exact_match,
    f1_score,
    no_error_batch_probability,
    normalize_answer,
    render_template,
    run_training,
    template_asset,
    template_ids,
)

__all__ = [
    "Gradient",
    "ParamId",
    "Parameter",
    "ParameterGraph",
    "ParameterKind",
    "PromptgradError",
    "exact_match",
    "f1_score",
    "no_error_batch_probability",
    "normalize_answer",
    "render_template",
    "run_training",
    "template_asset",
    "template_ids",
]
