"""Closed-loop learning engine: cognitive diagnosis, adaptive item selection
and structured feedback."""

from ._eduloop import (
    Data,
    EduloopError,
    Model,
    ResponseRecord,
    SessionService,
    bce_loss,
    build_prompt,
    evaluate,
    expected_model_change,
    fallback_feedback,
    filter_candidates,
    fit,
    grad_check,
    info_score,
    load_data,
    load_model,
    metrics,
    parse_feedback,
    recommend,
    run_cli,
    sign_test,
    simulate,
    split,
    weight_matrix,
)

__all__ = [
    "Data",
    "EduloopError",
    "Model",
    "ResponseRecord",
    "SessionService",
    "bce_loss",
    "build_prompt",
    "evaluate",
    "expected_model_change",
    "fallback_feedback",
    "filter_candidates",
    "fit",
    "grad_check",
    "info_score",
    "load_data",
    "load_model",
    "metrics",
    "parse_feedback",
    "recommend",
    "run_cli",
    "sign_test",
    "simulate",
    "split",
    "weight_matrix",
]
