"""Greedy per-slot compression-rate search under a cache budget."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .allocation import RankAllocation
from .autodiff import kl_divergence, softmax
from .model import ModelConfig, TransformerWeights, forward_baseline, forward_projected

__all__ = [
    "InfeasibleBudget",
    "NotRepresentable",
    "RankAllocation",
    "SearchConfig",
    "SearchResult",
    "budget",
    "calib_kl",
    "greedy_search",
    "run_greedy_search",
    "uniform_allocation",
]


class InfeasibleBudget(ValueError):
    pass


class NotRepresentable(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    delta_r: int
    gamma: float
    floor: int
    parallel_accept: int | None = None  # accept the k cheapest decrements per round

    @classmethod
    def for_model(cls, config: ModelConfig, gamma: float, **overrides) -> "SearchConfig":
        d = config.head_dim
        return cls(**{"delta_r": max(d // 8, 1), "gamma": gamma, "floor": max(d // 4, 1), **overrides})

    def validate(self, config: ModelConfig) -> None:
        d = config.head_dim
        if self.delta_r < 1 or d % self.delta_r:
            raise ValueError(f"delta_r {self.delta_r} must divide head_dim {d}")
        if self.floor < self.delta_r or self.floor > d:
            raise ValueError(f"floor {self.floor} must lie in [delta_r, {d}]")
        if (d - self.floor) % self.delta_r:
            raise ValueError("floor must sit a whole number of delta_r steps below head_dim")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.parallel_accept is not None and self.parallel_accept < 1:
            raise ValueError("parallel_accept must be >= 1")


def budget(alloc: RankAllocation, config: ModelConfig) -> float:
    """Retained fraction of the full KV cache."""
    total = 2 * config.n_layers * config.n_kv_heads * config.head_dim
    return float(alloc.r_k.sum() + alloc.r_v.sum()) / total


def _by_length(prompts: Sequence) -> list[np.ndarray]:
    groups: dict[int, list[np.ndarray]] = {}
    for p in prompts:
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        groups.setdefault(p.size, []).append(p)
    return [np.stack(groups[n]) for n in sorted(groups)]


@dataclass
class Calibration:
    """Calibration prompts with their teacher next-token distributions cached."""

    batches: list[np.ndarray]
    teacher: list[np.ndarray]

    @classmethod
    def build(cls, weights: TransformerWeights, config: ModelConfig, prompts: Sequence) -> "Calibration":
        if len(prompts) == 0:
            raise ValueError("no calibration prompts")
        batches = _by_length(prompts)
        return cls(batches, [softmax(forward_baseline(weights, config, b)) for b in batches])


def calib_kl(
    weights: TransformerWeights,
    config: ModelConfig,
    bank,
    alloc: RankAllocation,
    prompts: Sequence | Calibration,
) -> float:
    """Mean KL(teacher || student) over every position of every prompt."""
    calib = prompts if isinstance(prompts, Calibration) else Calibration.build(weights, config, prompts)
    total, count = 0.0, 0
    for batch, p in zip(calib.batches, calib.teacher):
        q = softmax(forward_projected(weights, config, bank, alloc, batch))
        kl = kl_divergence(p, q)
        total += float(kl.sum())
        count += kl.size
    return total / count


@dataclass
class SearchResult:
    allocation: RankAllocation
    budget: float
    evaluations: int
    rounds: int
    history: list[tuple[str, int, int, float]] = field(default_factory=list)  # accepted (kind, layer, head, kl)


def run_greedy_search(
    config: ModelConfig,
    search_config: SearchConfig,
    evaluate: Callable[[RankAllocation], float],
) -> SearchResult:
    """Repeat-until loop: try every single-slot decrement, keep the cheapest.

    Candidates are ordered keys first, then layer, then head, so ``argmin``
    resolves ties in that order. Slots at the floor score +inf.
    """
    search_config.validate(config)
    d = config.head_dim
    if search_config.floor / d >= search_config.gamma:
        raise InfeasibleBudget(
            f"floor {search_config.floor}/{d} cannot get the budget strictly below {search_config.gamma}"
        )
    L, H = config.n_layers, config.n_kv_heads
    dr = search_config.delta_r
    alloc = RankAllocation.full(config)
    candidates = [(kind, l, h) for kind in ("K", "V") for l in range(L) for h in range(H)]
    result = SearchResult(alloc, budget(alloc, config), 0, 0)
    while True:
        errors = np.full(len(candidates), np.inf)
        for i, (kind, l, h) in enumerate(candidates):
            if alloc.of(kind)[l, h] - dr < search_config.floor:
                continue
            trial = alloc.copy()
            trial.of(kind)[l, h] -= dr
            errors[i] = evaluate(trial)
            result.evaluations += 1
        result.rounds += 1
        if search_config.parallel_accept is None:
            picks = [int(np.argmin(errors))]
        else:
            order = np.argsort(errors, kind="stable")
            picks = [int(i) for i in order[: search_config.parallel_accept] if np.isfinite(errors[i])]
        for i in picks:
            kind, l, h = candidates[i]
            alloc.of(kind)[l, h] -= dr
            result.history.append((kind, l, h, float(errors[i])))
            if budget(alloc, config) < search_config.gamma:
                break
        if budget(alloc, config) < search_config.gamma:
            break
    result.allocation = alloc
    result.budget = budget(alloc, config)
    return result


def greedy_search(
    weights: TransformerWeights,
    config: ModelConfig,
    bank,
    search_config: SearchConfig,
    prompts: Sequence | Calibration,
) -> RankAllocation:
    return search_with_trace(weights, config, bank, search_config, prompts).allocation


def search_with_trace(
    weights: TransformerWeights,
    config: ModelConfig,
    bank,
    search_config: SearchConfig,
    prompts: Sequence | Calibration,
) -> SearchResult:
    calib = prompts if isinstance(prompts, Calibration) else Calibration.build(weights, config, prompts)
    return run_greedy_search(config, search_config, lambda a: calib_kl(weights, config, bank, a, calib))


def uniform_allocation(
    fraction: float,
    config: ModelConfig,
    delta_r: int | None = None,
    floor: int | None = None,
) -> RankAllocation:
    d = config.head_dim
    delta_r = max(d // 8, 1) if delta_r is None else delta_r
    floor = max(d // 4, 1) if floor is None else floor
    steps = fraction * d / delta_r
    n = round(steps)
    if abs(steps - n) > 1e-9 or not 0.0 < fraction <= 1.0:
        raise NotRepresentable(f"{fraction} * {d} is not a multiple of delta_r={delta_r}")
    rank = n * delta_r
    if rank < floor:
        raise NotRepresentable(f"rank {rank} is below the floor {floor}")
    return RankAllocation.uniform(config, rank)
