"""Multi-resolution hybrid hash grid encoding.

Coarse levels whose vertex lattice fits under ``dense_threshold`` are stored
densely (row-major over ``(N+1)^3`` vertices); finer levels go through a
spatial hash into a table of ``T`` entries. Each level trilinearly
interpolates the 8 corners of the cell that contains the point, and the
levels are concatenated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import DTYPE, ConfigError, Graph, ParamStore, Tensor, _record

log = logging.getLogger(__name__)

PRIME_Y = 2654435761
PRIME_Z = 805459861


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    base_resolution: int = 4
    growth: float = 1.5
    features_per_level: int = 2
    table_size: int = 2**14
    dense_threshold: int = 16

    def __post_init__(self) -> None:
        if self.levels < 1 or self.features_per_level < 1:
            raise ConfigError("hash grid needs at least one level and one feature")
        if self.growth <= 1.0 and self.levels > 1:
            raise ConfigError("growth factor must exceed 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigError("table size must be a power of two")

    def resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.growth**level))

    def is_dense(self, level: int) -> bool:
        return self.resolution(level) <= self.dense_threshold

    def entries(self, level: int) -> int:
        n = self.resolution(level)
        return (n + 1) ** 3 if self.is_dense(level) else self.table_size

    @property
    def output_width(self) -> int:
        return self.levels * self.features_per_level


def hash_index(cell: np.ndarray, table_size: int) -> np.ndarray:
    """``(x XOR y*p2 XOR z*p3) mod T`` on integer cells of shape ``(..., 3)``.

    Arithmetic wraps at 64 bits; since ``T`` is a power of two the result equals
    the exact integer formula.
    """
    c = np.asarray(cell, dtype=np.uint64)
    h = c[..., 0] ^ (c[..., 1] * np.uint64(PRIME_Y)) ^ (c[..., 2] * np.uint64(PRIME_Z))
    return (h % np.uint64(table_size)).astype(np.int64)


def dense_index(cell: np.ndarray, resolution: int) -> np.ndarray:
    c = np.asarray(cell, dtype=np.int64)
    n1 = resolution + 1
    return (c[..., 0] * n1 + c[..., 1]) * n1 + c[..., 2]


class HashGrid:
    """One hybrid hash encoding whose tables live in a :class:`ParamStore`."""

    def __init__(
        self,
        name: str,
        config: HashGridConfig,
        force_hash: bool = False,
        hash_fn: Callable[[np.ndarray, int], np.ndarray] | None = None,
    ) -> None:
        self.name = name
        self.config = config
        # force_hash routes every level through a T-entry table; hash_fn swaps the index function
        self.force_hash = force_hash
        self.hash_fn = hash_fn

    def table_name(self, level: int) -> str:
        return f"{self.name}.l{level}"

    def level_dense(self, level: int) -> bool:
        return self.config.is_dense(level) and not self.force_hash

    def level_entries(self, level: int) -> int:
        if self.level_dense(level):
            return (self.config.resolution(level) + 1) ** 3
        return self.config.table_size

    def init(self, store: ParamStore, rng: np.random.Generator, scale: float = 1e-4) -> None:
        F = self.config.features_per_level
        for level in range(self.config.levels):
            store.add(
                self.table_name(level),
                rng.uniform(-scale, scale, size=(self.level_entries(level), F)),
                group="hash",
            )

    def corners(self, x: np.ndarray, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Table indices ``(P, 8)`` and trilinear weights ``(P, 8)`` for one level.

        Corner order is ``(i, j, k)`` over ``{0,1}^3`` with ``k`` fastest.
        """
        n = self.config.resolution(level)
        pos = x * n
        cell = np.clip(np.floor(pos).astype(np.int64), 0, max(n - 1, 0))
        frac = pos - cell
        # per-axis weights (P, 3, 2) for offsets 0 and 1
        wa = np.stack([1.0 - frac, frac], axis=2)
        w = (wa[:, 0, :, None, None] * wa[:, 1, None, :, None] * wa[:, 2, None, None, :]).reshape(-1, 8)
        v = cell[:, :, None] + np.arange(2)[None, None, :]
        if self.level_dense(level):
            n1 = n + 1
            idx = (v[:, 0, :, None, None] * n1 + v[:, 1, None, :, None]) * n1 + v[:, 2, None, None, :]
        elif self.hash_fn is not None:
            verts = np.stack(
                np.broadcast_arrays(v[:, 0, :, None, None], v[:, 1, None, :, None], v[:, 2, None, None, :]), axis=-1
            )
            idx = self.hash_fn(verts, self.config.table_size)
        else:
            # int64 products wrap like uint64; only the low bits survive the mask
            with np.errstate(over="ignore"):
                hy = v[:, 1] * PRIME_Y
                hz = v[:, 2] * PRIME_Z
            idx = v[:, 0, :, None, None] ^ hy[:, None, :, None] ^ hz[:, None, None, :]
            idx &= self.config.table_size - 1
        return idx.reshape(-1, 8), w

    def encode(self, store: ParamStore, x: np.ndarray, graph: Graph | None) -> Tensor:
        """Encode points ``(P, 3)`` in the unit cube to ``(P, L*F)``."""
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != 3:
            raise ConfigError(f"encode expects (P, 3) points, got {x.shape}")
        outside = (x < 0.0) | (x > 1.0)
        if outside.any():
            log.warning("%s: clamping %d points outside the unit cube", self.name, int(outside.any(axis=1).sum()))
            x = np.clip(x, 0.0, 1.0)
        cfg = self.config
        F = cfg.features_per_level
        out = np.empty((x.shape[0], cfg.output_width), dtype=DTYPE)
        cache = []
        for level in range(cfg.levels):
            idx, w = self.corners(x, level)
            table = store[self.table_name(level)]
            out[:, level * F : (level + 1) * F] = np.einsum("pc,pcf->pf", w, table[idx])
            cache.append((idx, w))

        if graph is None:
            return Tensor(out)
        tables = [graph.param(store, self.table_name(level)) for level in range(cfg.levels)]

        def back(g: np.ndarray):
            grads = []
            for level, (idx, w) in enumerate(cache):
                grads.append(_scatter(idx, w, g[:, level * F : (level + 1) * F], self.level_entries(level)))
            return grads

        return _record(out, tables, back, "hash_encode")

    def encode_backward(self, store: ParamStore, x: np.ndarray, upstream: np.ndarray) -> None:
        """Accumulate ``upstream`` (``(P, L*F)``) into the table gradients directly."""
        x = np.clip(np.asarray(x, dtype=DTYPE), 0.0, 1.0)
        F = self.config.features_per_level
        for level in range(self.config.levels):
            idx, w = self.corners(x, level)
            store.grads[self.table_name(level)] += _scatter(
                idx, w, upstream[:, level * F : (level + 1) * F], self.level_entries(level)
            )


def _scatter(idx: np.ndarray, w: np.ndarray, g: np.ndarray, entries: int) -> np.ndarray:
    flat = idx.reshape(-1)
    out = np.empty((entries, g.shape[1]), dtype=DTYPE)
    for f in range(g.shape[1]):
        out[:, f] = np.bincount(flat, weights=(w * g[:, f : f + 1]).reshape(-1), minlength=entries)
    return out
