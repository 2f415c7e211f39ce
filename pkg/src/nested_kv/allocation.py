"""Per-(layer, kv-head) retained ranks for keys and values."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig


@dataclass
class RankAllocation:
    r_k: np.ndarray  # (n_layers, n_kv_heads) ints
    r_v: np.ndarray

    def __post_init__(self):
        self.r_k = np.array(self.r_k, dtype=np.int64)
        self.r_v = np.array(self.r_v, dtype=np.int64)
        if self.r_k.shape != self.r_v.shape or self.r_k.ndim != 2:
            raise ValueError("r_k and r_v must be 2-D arrays of equal shape")

    @classmethod
    def uniform(cls, config: ModelConfig, rank: int) -> "RankAllocation":
        shape = (config.n_layers, config.n_kv_heads)
        return cls(np.full(shape, rank), np.full(shape, rank))

    @classmethod
    def full(cls, config: ModelConfig) -> "RankAllocation":
        return cls.uniform(config, config.head_dim)

    def copy(self) -> "RankAllocation":
        return RankAllocation(self.r_k.copy(), self.r_v.copy())

    def of(self, kind: str) -> np.ndarray:
        return self.r_k if kind == "K" else self.r_v

    def __eq__(self, other):
        return (
            isinstance(other, RankAllocation)
            and np.array_equal(self.r_k, other.r_k)
            and np.array_equal(self.r_v, other.r_v)
        )

    def rows(self):
        """(layer, head, kind, rank) tuples, keys first."""
        for kind in ("K", "V"):
            arr = self.of(kind)
            for l in range(arr.shape[0]):
                for h in range(arr.shape[1]):
                    yield l, h, kind, int(arr[l, h])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "kind", "rank"])
        w.writerows(self.rows())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, config: ModelConfig) -> "RankAllocation":
        shape = (config.n_layers, config.n_kv_heads)
        r_k, r_v = np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64)
        seen = set()
        for row in csv.DictReader(io.StringIO(text)):
            l, h, kind = int(row["layer"]), int(row["head"]), row["kind"].strip()
            if kind not in ("K", "V") or not (0 <= l < shape[0] and 0 <= h < shape[1]):
                raise ValueError(f"bad allocation row {row}")
            (r_k if kind == "K" else r_v)[l, h] = int(row["rank"])
            seen.add((l, h, kind))
        if len(seen) != 2 * shape[0] * shape[1]:
            raise ValueError(f"allocation has {len(seen)} slots, expected {2 * shape[0] * shape[1]}")
        return cls(r_k, r_v)
