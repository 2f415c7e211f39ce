"""Nested-rank distillation of the projection bank, plus base-model pretraining."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .allocation import RankAllocation
from .autodiff import Tape, Var
from .corpus import sample_batch
from .model import ModelConfig, TransformerWeights, check_ranks, forward, param_vars
from .projections import ProjectionBank, Slot, iter_slots, random_orthogonal


class ConflictingFlags(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    ranks: tuple[int, ...]

    def __post_init__(self):
        r = tuple(int(x) for x in self.ranks)
        if not r or any(b <= a for a, b in zip(r, r[1:])) or r[0] < 1:
            raise ValueError(f"schedule must be strictly increasing positive ranks, got {r}")
        object.__setattr__(self, "ranks", r)

    @property
    def dim(self) -> int:
        return self.ranks[-1]

    @classmethod
    def eighths(cls, d: int) -> "Schedule":
        if d % 8:
            raise ValueError("head_dim must be divisible by 8")
        return cls(tuple(d // 8 * i for i in range(1, 9)))

    @classmethod
    def quarters(cls, d: int) -> "Schedule":
        if d % 4:
            raise ValueError("head_dim must be divisible by 4")
        return cls(tuple(d // 4 * i for i in range(1, 5)))

    @classmethod
    def named(cls, name: str, d: int) -> "Schedule":
        builders = {"eighths": cls.eighths, "quarters": cls.quarters}
        if name not in builders:
            raise ValueError(f"unknown schedule {name!r}; choose from {sorted(builders)}")
        return builders[name](d)

    def validate(self, d: int) -> None:
        # the top rank must be d, otherwise trailing columns never get gradient
        if self.ranks[-1] != d:
            raise ValueError(f"schedule {self.ranks} must end at head_dim {d}")


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    kd_weight: float = 1.0
    lm_weight: float = 3.0
    learning_rate: float = 1e-3
    steps: int = 2000
    batch_size: int = 8
    seed: int = 42
    schedule: str = "eighths"
    adam: AdamConfig = field(default_factory=AdamConfig)
    fixed_rank: int | None = None
    no_orthogonality: bool = False
    random_init: bool = False

    def __post_init__(self):
        if self.kd_weight < 0 or self.lm_weight < 0 or (self.kd_weight == 0 and self.lm_weight == 0):
            raise ValueError("loss weights must be non-negative and not both zero")
        flags = [self.fixed_rank is not None, self.no_orthogonality, self.random_init]
        if sum(flags) > 1:
            raise ConflictingFlags("fixed_rank, no_orthogonality and random_init are mutually exclusive")


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 3e-3
    steps: int = 2000
    batch_size: int = 16
    seed: int = 42
    adam: AdamConfig = field(default_factory=AdamConfig)


class Adam:
    def __init__(self, lr: float, cfg: AdamConfig = AdamConfig()):
        self.lr = lr
        self.cfg = cfg
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def update(self, params: dict, grads: dict) -> dict:
        """Returns new parameter arrays; keys are iterated in the order of ``grads``."""
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        out = {}
        for key, g in grads.items():
            m = self.m.get(key, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(key, 0.0) * b2 + (1 - b2) * g * g
            self.m[key], self.v[key] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            out[key] = params[key] - self.lr * mhat / (np.sqrt(vhat) + eps)
        return out


def sample_ranks(schedule: Schedule, config: ModelConfig, rng: np.random.Generator) -> RankAllocation:
    """An independent uniform draw from the schedule for every slot."""
    draws = rng.choice(np.asarray(schedule.ranks), size=(2, config.n_layers, config.n_kv_heads))
    return RankAllocation(draws[0], draws[1])


# -- student on the tape -------------------------------------------------------


@dataclass
class StudentLeaves:
    """Trainable leaves for one tape, keyed by slot."""

    leaves: dict[Slot, Var]
    full: dict[Slot, Var]


def student_projector(
    tape: Tape, bank: ProjectionBank, ranks: RankAllocation, free: bool, leaves: dict[Slot, Var] | None = None
):
    """Build every slot's full projection on ``tape`` from trainable leaves.

    Orthogonal mode: leaf = skew params (1 x m), U = (I + S)(I - S)^-1 U_init.
    Free mode: leaf = the raw d x d matrix itself. Pass ``leaves`` to reuse
    leaves that already live on ``tape``.
    """
    given = leaves
    d = bank.config.head_dim
    eye = np.eye(d)
    leaves, full = {}, {}
    for slot in iter_slots(bank.config):
        st = bank.slots[slot]
        if free:
            leaf = given[slot] if given else tape.leaf(st.free if st.free is not None else st.u_cached, trainable=True)
            u = leaf
        else:
            leaf = given[slot] if given else tape.leaf(st.generator.reshape(1, -1), trainable=True)
            s = ad.skew(leaf, d)
            u = (ad.add(s, eye) @ ad.mat_inverse_node(ad.scalar_mul(s, -1.0) + eye)) @ st.u_init
        leaves[slot], full[slot] = leaf, u

    cache: dict = {}

    def project(l: int, g: int):
        if (l, g) not in cache:
            rk, rv = int(ranks.r_k[l, g]), int(ranks.r_v[l, g])
            cache[l, g] = (ad.slice_cols(full[l, g, "K"], 0, rk), ad.slice_cols(full[l, g, "V"], 0, rv))
        return cache[l, g]

    return project, StudentLeaves(leaves, full)


@dataclass
class DistillLoss:
    tape: Tape
    total: Var
    kd: Var
    lm: Var
    student: StudentLeaves

    def values(self) -> tuple[float, float, float]:
        return float(self.total.value[0, 0]), float(self.kd.value[0, 0]), float(self.lm.value[0, 0])


def teacher_probs(weights: TransformerWeights, config: ModelConfig, inputs: np.ndarray) -> np.ndarray:
    tape = Tape(grad=False)
    return ad.softmax(forward(tape, param_vars(tape, weights), config, inputs).value)


def distill_loss(
    weights: TransformerWeights,
    config: ModelConfig,
    bank: ProjectionBank,
    ranks: RankAllocation,
    batch: np.ndarray,
    kd_weight: float = 1.0,
    lm_weight: float = 3.0,
    free: bool | None = None,
    teacher: np.ndarray | None = None,
    tape: Tape | None = None,
    leaves: dict[Slot, Var] | None = None,
) -> DistillLoss:
    """kd_weight * KL(teacher || student) + lm_weight * next-token CE of the student.

    ``batch`` holds windows of T + 1 tokens; the first T are the input and
    the last T the LM targets. Both terms average over batch and positions.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.int64))
    inputs, targets = batch[:, :-1], batch[:, 1:]
    check_ranks(config, ranks)
    if free is None:
        free = not bank.orthogonal
    if teacher is None:
        teacher = teacher_probs(weights, config, inputs)
    if tape is None:
        tape = Tape()
    params = param_vars(tape, weights)
    project, student = student_projector(tape, bank, ranks, free, leaves)
    logits = forward(tape, params, config, inputs, projector=project)
    kd = ad.kl_div_rows(teacher, logits)
    lm = ad.cross_entropy_rows(logits, targets)
    total = ad.scalar_mul(kd, kd_weight) + ad.scalar_mul(lm, lm_weight)
    return DistillLoss(tape, total, kd, lm, student)


# -- trainer ------------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    kd: float
    lm: float
    total: float
    wallclock_ms: float
    ranks: RankAllocation

    def csv_row(self) -> str:
        return f"{self.step},{self.kd:.9g},{self.lm:.9g},{self.total:.9g},{self.wallclock_ms:.9g}"


METRICS_HEADER = "step,kd,lm,total,wallclock_ms"


class NestedRankTrainer:
    """Trainer state: the bank being tuned, optimiser moments and the RNG.

    Only skew generators (or, under the no-orthogonality ablation, the raw
    matrices) ever change; the base weights are checked after every step.
    """

    def __init__(self, weights: TransformerWeights, bank: ProjectionBank, cfg: TrainConfig):
        self.weights = weights
        self.config = weights.config
        self.cfg = cfg
        self.schedule = Schedule.named(cfg.schedule, self.config.head_dim)
        self.schedule.validate(self.config.head_dim)
        if cfg.fixed_rank is not None and not 1 <= cfg.fixed_rank <= self.config.head_dim:
            raise ValueError(f"fixed rank {cfg.fixed_rank} outside [1, {self.config.head_dim}]")
        self.rng = np.random.default_rng(cfg.seed)
        bank = bank.copy()
        if cfg.random_init:
            init_rng = np.random.default_rng(cfg.seed + 1)
            for slot in iter_slots(self.config):
                bank.slots[slot].u_init = random_orthogonal(self.config.head_dim, init_rng)
                bank.set_generator(slot, np.zeros_like(bank.slots[slot].generator))
        if cfg.no_orthogonality:
            for slot in iter_slots(self.config):
                if bank.slots[slot].free is None:
                    bank.set_free(slot, bank.slots[slot].u_cached)
        self.bank = bank
        self.free = cfg.no_orthogonality or not bank.orthogonal
        self.opt = Adam(cfg.learning_rate, cfg.adam)
        self.step_count = 0
        self._checksum = weights.checksum()

    def next_ranks(self) -> RankAllocation:
        if self.cfg.fixed_rank is not None:
            return RankAllocation.uniform(self.config, self.cfg.fixed_rank)
        return sample_ranks(self.schedule, self.config, self.rng)

    def next_batch(self, data: np.ndarray) -> np.ndarray:
        return sample_batch(self.rng, data, self.cfg.batch_size, self.config.context + 1)

    def step(self, batch: np.ndarray) -> StepMetrics:
        t0 = time.perf_counter()
        ranks = self.next_ranks()
        loss = distill_loss(
            self.weights, self.config, self.bank, ranks, batch, self.cfg.kd_weight, self.cfg.lm_weight, free=self.free
        )
        grads = ad.backward(loss.tape, loss.total)
        leaves = loss.student.leaves
        current = {slot: loss.tape.values[leaf.node] for slot, leaf in leaves.items()}
        updated = self.opt.update(current, {slot: grads[leaf.node] for slot, leaf in leaves.items()})
        for slot, value in updated.items():
            if self.free:
                self.bank.set_free(slot, value)
            else:
                self.bank.set_generator(slot, value)
        if self.weights.checksum() != self._checksum:
            raise RuntimeError("base weights changed during distillation")
        self.step_count += 1
        total, kd, lm = loss.values()
        return StepMetrics(self.step_count, kd, lm, total, 1e3 * (time.perf_counter() - t0), ranks)


def nested_rank_step(state: NestedRankTrainer, batch: np.ndarray) -> tuple[NestedRankTrainer, StepMetrics]:
    metrics = state.step(batch)
    return state, metrics


def distill(
    weights: TransformerWeights,
    bank: ProjectionBank,
    data: np.ndarray,
    cfg: TrainConfig,
    on_step: Callable[[StepMetrics], None] | None = None,
) -> tuple[ProjectionBank, list[StepMetrics]]:
    trainer = NestedRankTrainer(weights, bank, cfg)
    history = []
    for _ in range(cfg.steps):
        m = trainer.step(trainer.next_batch(data))
        history.append(m)
        if on_step is not None:
            on_step(m)
    return trainer.bank, history


# -- pretraining ---------------------------------------------------------------


class Pretrainer:
    def __init__(self, weights: TransformerWeights, cfg: PretrainConfig):
        self.weights = weights.copy()
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = Adam(cfg.learning_rate, cfg.adam)

    def next_batch(self, data: np.ndarray) -> np.ndarray:
        return sample_batch(self.rng, data, self.cfg.batch_size, self.weights.config.context + 1)

    def step(self, batch: np.ndarray) -> float:
        self.weights, loss = pretrain_step(self.weights, batch, self.opt)
        return loss


def lm_loss(weights: TransformerWeights, batch: np.ndarray, trainable: bool = False) -> tuple[Tape, dict[str, Var], Var]:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.int64))
    tape = Tape(grad=trainable)
    params = param_vars(tape, weights, trainable=trainable)
    logits = forward(tape, params, weights.config, batch[:, :-1])
    return tape, params, ad.cross_entropy_rows(logits, batch[:, 1:])


def pretrain_step(weights: TransformerWeights, batch: np.ndarray, opt: Adam) -> tuple[TransformerWeights, float]:
    tape, params, loss = lm_loss(weights, batch, trainable=True)
    grads = ad.backward(tape, loss)
    named = {name: grads[var.node] for name, var in params.items()}
    new = opt.update(weights.tensors, named)
    return TransformerWeights(weights.config, new), float(loss.value[0, 0])


def pretrain(
    weights: TransformerWeights,
    data: np.ndarray,
    cfg: PretrainConfig,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[TransformerWeights, list[float]]:
    trainer = Pretrainer(weights, cfg)
    losses = []
    for i in range(cfg.steps):
        loss = trainer.step(trainer.next_batch(data))
        losses.append(loss)
        if on_step is not None:
            on_step(i + 1, loss)
    return trainer.weights, losses
