"""Projection bank: state collection, PCA initialisation, Cayley residual form."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from . import checkpoint
from .linalg import EighResult, cayley, jacobi_eigh, n_skew_params, skew_from_params
from .model import ModelConfig, RankOutOfRange, TransformerWeights, forward_baseline

Slot = tuple[int, int, str]  # (layer, kv_head, "K" | "V")
StateSample = dict[Slot, np.ndarray]


class InsufficientTokens(ValueError):
    pass


def iter_slots(config: ModelConfig) -> Iterator[Slot]:
    for l in range(config.n_layers):
        for g in range(config.n_kv_heads):
            for kind in ("K", "V"):
                yield l, g, kind


@dataclass
class SlotState:
    generator: np.ndarray  # strict lower triangle of S, length d(d-1)/2
    u_init: np.ndarray
    u_cached: np.ndarray
    free: np.ndarray | None = None  # unconstrained replacement (no-orthogonality ablation)


class ProjectionBank:
    """One d x d projection per slot, U = cayley(S) @ U_init."""

    def __init__(self, config: ModelConfig, slots: dict[Slot, SlotState]):
        self.config = config
        self.slots = slots

    @classmethod
    def from_inits(cls, config: ModelConfig, inits: dict[Slot, np.ndarray]) -> "ProjectionBank":
        m = n_skew_params(config.head_dim)
        slots = {}
        for slot in iter_slots(config):
            u0 = np.array(inits[slot], dtype=np.float64)
            slots[slot] = SlotState(np.zeros(m), u0, u0.copy())
        return cls(config, slots)

    @property
    def orthogonal(self) -> bool:
        return all(s.free is None for s in self.slots.values())

    def matrix(self, slot: Slot) -> np.ndarray:
        st = self.slots[slot]
        return st.free if st.free is not None else st.u_cached

    def truncated(self, slot: Slot, r: int) -> np.ndarray:
        if not 1 <= r <= self.config.head_dim:
            raise RankOutOfRange(f"rank {r} outside [1, {self.config.head_dim}]")
        return self.matrix(slot)[:, :r]

    def set_generator(self, slot: Slot, params: np.ndarray) -> None:
        st = self.slots[slot]
        st.generator = np.array(params, dtype=np.float64).reshape(-1)
        if np.any(st.generator):
            st.u_cached = cayley(skew_from_params(st.generator, self.config.head_dim)) @ st.u_init
        else:
            st.u_cached = st.u_init.copy()

    def set_free(self, slot: Slot, m: np.ndarray) -> None:
        self.slots[slot].free = np.array(m, dtype=np.float64)

    def copy(self) -> "ProjectionBank":
        return ProjectionBank(
            self.config,
            {
                k: SlotState(s.generator.copy(), s.u_init.copy(), s.u_cached.copy(), None if s.free is None else s.free.copy())
                for k, s in self.slots.items()
            },
        )

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for (l, g, kind), st in self.slots.items():
            base = f"l{l}.h{g}.{kind}"
            out[f"{base}.gen"] = st.generator.reshape(1, -1)
            out[f"{base}.init"] = st.u_init
            if st.free is not None:
                out[f"{base}.free"] = st.free
        return out


def collect_states(weights: TransformerWeights, config: ModelConfig, prompts: Iterable) -> StateSample:
    """Post-RoPE keys and raw values of every KV head, stacked over all prompt tokens."""
    chunks: dict[Slot, list[np.ndarray]] = {slot: [] for slot in iter_slots(config)}
    for prompt in prompts:
        record: dict = {}
        forward_baseline(weights, config, prompt, record=record)
        for slot in chunks:
            chunks[slot].append(record[slot].reshape(-1, config.head_dim))
    if not chunks[next(iter(chunks))]:
        raise InsufficientTokens("no prompts supplied")
    sample = {slot: np.concatenate(parts, axis=0) for slot, parts in chunks.items()}
    n = next(iter(sample.values())).shape[0]
    if n < config.head_dim:
        raise InsufficientTokens(f"{n} tokens per slot, need at least {config.head_dim}")
    return sample


def second_moment_spectrum(states: np.ndarray) -> EighResult:
    """Eigendecomposition of the uncentred second moment X^T X / n."""
    x = np.asarray(states, dtype=np.float64)
    return jacobi_eigh(x.T @ x / x.shape[0])


def pca_init(states: np.ndarray) -> np.ndarray:
    return second_moment_spectrum(states).eigenvectors


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    return cayley(skew_from_params(rng.normal(size=n_skew_params(d)), d))


def init_bank(
    weights: TransformerWeights,
    config: ModelConfig,
    corpus: Iterable,
    random_init: bool = False,
    seed: int = 0,
) -> ProjectionBank:
    prompts = list(corpus)
    if not prompts:
        raise InsufficientTokens("empty corpus")
    if random_init:
        rng = np.random.default_rng(seed)
        inits = {slot: random_orthogonal(config.head_dim, rng) for slot in iter_slots(config)}
    else:
        sample = collect_states(weights, config, prompts)
        inits = {slot: pca_init(x) for slot, x in sample.items()}
    return ProjectionBank.from_inits(config, inits)


def truncated(bank: ProjectionBank, slot: Slot, r: int) -> np.ndarray:
    return bank.truncated(slot, r)


def save_bank(bank: ProjectionBank, path: str | os.PathLike) -> None:
    checkpoint.write(path, checkpoint.KIND_BANK, bank.config, bank.tensors())


def load_bank(path: str | os.PathLike) -> ProjectionBank:
    config, tensors = checkpoint.read(path, checkpoint.KIND_BANK)
    m = n_skew_params(config.head_dim)
    slots = {}
    for l, g, kind in iter_slots(config):
        base = f"l{l}.h{g}.{kind}"
        try:
            gen = tensors[f"{base}.gen"].reshape(-1)
            u0 = tensors[f"{base}.init"]
        except KeyError as exc:
            raise checkpoint.FormatVersionMismatch(f"bank is missing tensor {exc}") from None
        if gen.size != m:
            raise checkpoint.FormatVersionMismatch(f"{base}.gen has {gen.size} params, expected {m}")
        slots[l, g, kind] = SlotState(gen, u0, u0.copy(), tensors.get(f"{base}.free"))
    bank = ProjectionBank(config, slots)
    for slot, st in slots.items():
        bank.set_generator(slot, st.generator)
    return bank
