"""Categorical language-model oracles and seeded sampling.

The models here stand in for the draft and target LLMs: a context-free
table model and an n-gram model with a uniform fallback on unseen context.
Vocabulary is the dense range ``[0, V)``.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

GREEDY_T = 1e-6
DIST_ATOL = 1e-12


def _as_dist(probs: Sequence[float]) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("distribution must be a nonempty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("distribution has negative or non-finite entries")
    total = p.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"distribution sums to {total}, expected 1")
    return p / total


def apply_temperature(base: Sequence[float], temperature: float) -> np.ndarray:
    """Return ``base ** (1/T)`` renormalized; below ``GREEDY_T`` this is argmax one-hot."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    p = np.asarray(base, dtype=np.float64)
    if temperature < GREEDY_T:
        out = np.zeros_like(p)
        out[int(np.argmax(p))] = 1.0  # argmax picks the lowest id on ties
        return out
    if temperature == 1.0:
        return p / p.sum()
    # work in log space so small T does not underflow every entry
    with np.errstate(divide="ignore"):
        logp = np.log(p) / temperature
    logp -= logp.max()
    out = np.exp(logp)
    return out / out.sum()


class ModelOracle:
    """Immutable next-token distribution source."""

    kind: str
    vocab_size: int
    temperature: float

    def next_dist(self, context: Sequence[int]) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class TableModel(ModelOracle):
    """Context-free model: the same distribution at every position."""

    probs: np.ndarray
    temperature: float = 1.0
    kind: str = field(default="table", init=False)

    def __post_init__(self) -> None:
        base = _as_dist(self.probs)
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        dist = apply_temperature(base, self.temperature)
        dist.setflags(write=False)
        object.__setattr__(self, "probs", base)
        object.__setattr__(self, "_dist", dist)

    @property
    def vocab_size(self) -> int:
        return self.probs.size

    def next_dist(self, context: Sequence[int]) -> np.ndarray:
        return self._dist


@dataclass(frozen=True, eq=False)
class NGramModel(ModelOracle):
    """Conditions on the last ``order`` tokens; unseen contexts fall back to uniform.

    ``rows`` maps a tuple of exactly ``order`` previous tokens to a base
    distribution. Contexts shorter than ``order`` never match a row.
    """

    vocab_size: int
    order: int
    rows: Mapping[tuple[int, ...], Sequence[float]]
    temperature: float = 1.0
    kind: str = field(default="ngram", init=False)

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ValueError("n-gram order must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        table = {}
        for key, row in self.rows.items():
            key = tuple(int(t) for t in key)
            if len(key) != self.order:
                raise ValueError(f"row key {key} does not have length {self.order}")
            base = _as_dist(row)
            if base.size != self.vocab_size:
                raise ValueError(f"row {key} has {base.size} entries, expected {self.vocab_size}")
            dist = apply_temperature(base, self.temperature)
            dist.setflags(write=False)
            table[key] = dist
        uniform = apply_temperature(np.full(self.vocab_size, 1.0 / self.vocab_size), self.temperature)
        uniform.setflags(write=False)
        object.__setattr__(self, "_table", table)
        object.__setattr__(self, "_uniform", uniform)

    def next_dist(self, context: Sequence[int]) -> np.ndarray:
        if len(context) < self.order:
            return self._uniform
        # numpy integer tokens hash like ints, so no conversion is needed
        return self._table.get(tuple(context[len(context) - self.order:]), self._uniform)


def next_dist(model: ModelOracle, context: Sequence[int]) -> np.ndarray:
    for tok in context:
        if not 0 <= tok < model.vocab_size:
            raise ValueError(f"context token {tok} outside vocabulary [0, {model.vocab_size})")
    return model.next_dist(context)


def random_ngram(vocab_size: int, order: int, rng: np.random.Generator,
                 temperature: float = 1.0, concentration: float = 1.0,
                 fill: float = 1.0) -> NGramModel:
    """Dirichlet-random n-gram model over a fraction ``fill`` of all contexts."""
    rows = {}
    for idx in range(vocab_size ** order):
        if rng.random() >= fill:
            continue
        key = tuple(int(d) for d in np.unravel_index(idx, (vocab_size,) * order))
        rows[key] = rng.dirichlet(np.full(vocab_size, concentration))
    return NGramModel(vocab_size, order, rows, temperature)


def blend(model: ModelOracle, other: ModelOracle, weight: float) -> ModelOracle:
    """Mixture ``(1-w)*model + w*other`` over the same context keys.

    Used to build draft models that agree with a target only partially.
    Both models must be table models, or n-gram models of the same order.
    """
    if isinstance(model, TableModel) and isinstance(other, TableModel):
        return TableModel((1 - weight) * model._dist + weight * other._dist)
    if isinstance(model, NGramModel) and isinstance(other, NGramModel) and model.order == other.order:
        keys = set(model._table) | set(other._table)
        rows = {k: (1 - weight) * model.next_dist(k) + weight * other.next_dist(k) for k in keys}
        return NGramModel(model.vocab_size, model.order, rows)
    raise TypeError("blend needs two table models or two n-gram models of equal order")


# -- random streams -------------------------------------------------------

_INT = struct.Struct(">BQ")


def _encode(part: int | str) -> bytes:
    if isinstance(part, str):
        b = part.encode()
        return struct.pack(">BI", 1, len(b)) + b
    return _INT.pack(0, part & 0xFFFFFFFFFFFFFFFF)


def _hash_u64(*parts: int | str) -> int:
    return _digest(b"".join(_encode(p) for p in parts))


def _digest(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "big")


class Rng:
    """Counter-based uniform stream, splittable by key.

    ``Rng(seed).split(session, "verify")`` yields an independent stream whose
    ``at(i)`` value depends only on the seed, the key path and ``i``, so any
    party holding the same key reproduces the same draws in any order.
    """

    __slots__ = ("seed", "key", "_counter", "_prefix")

    def __init__(self, seed: int, key: tuple = (), _prefix: bytes | None = None) -> None:
        self.seed = int(seed)
        self.key = tuple(key)
        self._counter = 0
        if _prefix is None:
            _prefix = b"".join(_encode(p) for p in (self.seed, *self.key))
        self._prefix = _prefix

    def split(self, *subkey: int | str) -> "Rng":
        return Rng(self.seed, self.key + subkey, self._prefix + b"".join(_encode(p) for p in subkey))

    def at(self, index: int) -> float:
        return (_digest(self._prefix + _INT.pack(0, index & 0xFFFFFFFFFFFFFFFF)) >> 11) * (1.0 / (1 << 53))

    def random(self) -> float:
        u = self.at(self._counter)
        self._counter += 1
        return u

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key}, counter={self._counter})"


def verify_stream(seed: int, session: int) -> Rng:
    """Per-session stream whose ``at(position)`` drives verification at that position."""
    return Rng(seed).split(session, "verify")


def session_prompt(seed: int, session: int, length: int, vocab: int) -> tuple[int, ...]:
    rng = Rng(seed).split(session, "prompt")
    return tuple(min(int(rng.at(i) * vocab), vocab - 1) for i in range(length))


def sample_at(d: np.ndarray, u: float) -> int:
    """Inverse-CDF lookup scanning token ids in ascending order."""
    acc = 0.0
    last = 0
    for tok, p in enumerate(d):
        if p <= 0.0:
            continue
        acc += p
        last = tok
        if u < acc:
            return tok
    return last  # u landed in the float round-off gap above the final cumsum


def sample(d: np.ndarray, rng: Rng) -> int:
    return sample_at(d, rng.random())


def logprob(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf
