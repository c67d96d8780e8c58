"""Trend experiments comparing distillation methods on generated data."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .buffer import BufferConfig, build_buffer
from .datagen import GeneratorConfig, generate_splits
from .distill import DistillConfig, distill
from .evaluation import EvalConfig, evaluate_protocol, random_coreset_eval

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2)


@dataclass
class MethodResult:
    """Per-seed average R@1 of one method, plus optional own-objective numbers."""

    method: str
    eval_objective: str
    per_seed: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))


def default_data(n_test: int = 500):
    return generate_splits(GeneratorConfig(), n_test)


def method_trend(
    method: str,
    ds_train,
    ds_test,
    seeds=SEEDS,
    *,
    buffer_cfg: BufferConfig = BufferConfig(),
    distill_cfg: DistillConfig = DistillConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    own_objective: bool = False,
) -> MethodResult:
    """Buffer, distill and evaluate one method; seed ``s`` drives both distillation and evaluation.

    The expert buffer is trained with the method's own objective and shared
    across seeds. Students are evaluated with ``eval_cfg.objective`` so that
    every method's synthetic set is judged by the same training recipe.
    """
    objective = replace(distill_cfg, method=method).objective
    buf = build_buffer(ds_train, replace(buffer_cfg, objective=objective))
    per_seed, own = [], []
    for s in seeds:
        syn, _ = distill(ds_train, buf, replace(distill_cfg, method=method, seed=s))
        per_seed.append(evaluate_protocol(syn, ds_test, eval_cfg, [s]).avg_mean[1])
        if own_objective and objective != eval_cfg.objective:
            own.append(evaluate_protocol(syn, ds_test, replace(eval_cfg, objective=objective), [s]).avg_mean[1])
        log.info("%s seed %d: avg R@1 %.2f", method, s, per_seed[-1])
    diagnostics = {f"own_objective_{objective}": own} if own else {}
    return MethodResult(method, eval_cfg.objective, per_seed, diagnostics)


def random_trend(ds_train, ds_test, n: int = 50, seeds=SEEDS, eval_cfg: EvalConfig = EvalConfig()) -> MethodResult:
    """Random coreset of size ``n``; seed ``s`` picks the subset and the student init."""
    per_seed = [random_coreset_eval(ds_train, ds_test, n, eval_cfg, [s], subset_seed=s).avg_mean[1] for s in seeds]
    return MethodResult(f"random{n}", eval_cfg.objective, per_seed)


def margin_line(a: MethodResult, b: MethodResult) -> str:
    return (
        f"{a.method} {a.mean:.2f} vs {b.method} {b.mean:.2f} (margin {a.mean - b.mean:+.2f}); "
        f"per-seed {np.round(a.per_seed, 2).tolist()} vs {np.round(b.per_seed, 2).tolist()}"
    )
