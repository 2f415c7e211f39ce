"""Perplexity / accuracy / KL evaluation and budget sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .allocation import RankAllocation
from .autodiff import kl_divergence, softmax
from .corpus import chunks
from .model import ModelConfig, TransformerWeights, forward_baseline, forward_projected
from .search import Calibration, InfeasibleBudget, SearchConfig, budget, search_with_trace, uniform_allocation

SWEEP_BUDGETS = (1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25)


@dataclass(frozen=True)
class EvalResult:
    perplexity: float
    accuracy: float
    kd: float
    cross_entropy: float
    tokens: int


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def evaluate(
    weights: TransformerWeights,
    config: ModelConfig,
    bank,
    alloc: RankAllocation | None,
    data: np.ndarray,
    max_chunks: int | None = 64,
    batch_size: int = 32,
) -> EvalResult:
    """Score the projected model on non-overlapping windows of ``data``.

    ``bank=None`` evaluates the unprojected teacher itself.
    """
    windows = chunks(data, config.context + 1, max_chunks)
    ce_sum = kd_sum = 0.0
    correct = count = 0
    for start in range(0, len(windows), batch_size):
        batch = windows[start : start + batch_size]
        inputs, targets = batch[:, :-1], batch[:, 1:]
        teacher = forward_baseline(weights, config, inputs)
        student = teacher if bank is None else forward_projected(weights, config, bank, alloc, inputs)
        logp = _log_softmax(student)
        ce_sum -= float(np.take_along_axis(logp, targets[..., None], axis=-1).sum())
        correct += int((student.argmax(axis=-1) == targets).sum())
        kd_sum += float(kl_divergence(softmax(teacher), np.exp(logp)).sum())
        count += targets.size
    ce = ce_sum / count
    return EvalResult(math.exp(ce), correct / count, kd_sum / count, ce, count)


@dataclass(frozen=True)
class SweepRow:
    budget: float
    mode: str  # "uniform" | "searched"
    perplexity: float
    accuracy: float
    kd: float

    def csv_row(self) -> str:
        return f"{self.budget:.9g},{self.mode},{self.perplexity:.9g},{self.accuracy:.9g},{self.kd:.9g}"


SWEEP_HEADER = "budget,mode,perplexity,accuracy,kd"


def sweep(
    weights: TransformerWeights,
    config: ModelConfig,
    bank,
    data: np.ndarray,
    budgets=SWEEP_BUDGETS,
    calib_prompts=None,
    max_chunks: int | None = 64,
) -> list[SweepRow]:
    """Uniform rows for every budget, plus searched rows when calibration prompts are given."""
    rows = []
    calib = Calibration.build(weights, config, calib_prompts) if calib_prompts is not None else None
    for frac in budgets:
        alloc = uniform_allocation(frac, config)
        r = evaluate(weights, config, bank, alloc, data, max_chunks)
        rows.append(SweepRow(frac, "uniform", r.perplexity, r.accuracy, r.kd))
        if calib is not None and frac < 1.0:
            try:
                found = search_with_trace(weights, config, bank, SearchConfig.for_model(config, frac), calib)
            except InfeasibleBudget:
                continue
            r = evaluate(weights, config, bank, found.allocation, data, max_chunks)
            rows.append(SweepRow(budget(found.allocation, config), "searched", r.perplexity, r.accuracy, r.kd))
    return rows
