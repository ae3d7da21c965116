"""Gauss-Newton estimate of the Hessian diagonal and its running accumulator."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import nncore
from .errors import DimensionError

EPS_NORM = 1e-12
DEFAULT_SAMPLE_BUDGET = 512
# per-sample gradient rows are only ever held for this many samples at once
_CHUNK = 128


@dataclass(frozen=True)
class RawHessianDiag:
    """One round's diagonal estimate, before normalisation."""

    values: np.ndarray
    empty: bool = False

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(np.asarray(self.values, dtype=np.float64)))

    @property
    def is_degenerate(self) -> bool:
        return self.norm <= EPS_NORM


@dataclass(frozen=True)
class HessianState:
    accumulated: np.ndarray
    beta: float = 1.0
    rounds_absorbed: int = 0
    no_accumulation: bool = False

    @classmethod
    def zeros(cls, m: int, beta: float = 1.0, no_accumulation: bool = False) -> "HessianState":
        return cls(np.zeros(m, dtype=nncore.DTYPE), beta, 0, no_accumulation)


def estimate_gn_diag(params: np.ndarray, spec: nncore.ModelSpec, features: np.ndarray, labels: np.ndarray,
                     sample_budget: int = DEFAULT_SAMPLE_BUDGET,
                     rng: Optional[np.random.Generator] = None) -> RawHessianDiag:
    """Mean over samples of the squared per-sample gradient, i.e. diag(J^T J) / S.

    At most ``sample_budget`` samples are used; when the local set is larger a
    subset is drawn without replacement from ``rng``.
    """
    if sample_budget < 1:
        raise ValueError("sample_budget must be >= 1")
    n = len(labels)
    if n == 0:
        return RawHessianDiag(np.zeros(spec.num_params), empty=True)
    if n > sample_budget:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(n, size=sample_budget, replace=False))
        features, labels = features[idx], labels[idx]
        n = sample_budget
    total = np.zeros(spec.num_params)
    for start in range(0, n, _CHUNK):
        sl = slice(start, start + _CHUNK)
        total += nncore.squared_sample_grad_sum(params, spec, features[sl], labels[sl])
    return RawHessianDiag(total / n)


def gn_diag_from_rows(rows: Iterable[np.ndarray]) -> RawHessianDiag:
    """diag(J^T J) / S from per-sample gradient rows, consumed one at a time."""
    total, count = None, 0
    for row in rows:
        row = np.asarray(row, dtype=np.float64)
        total = row * row if total is None else total + row * row
        count += 1
    if count == 0:
        raise ValueError("no gradient rows given")
    return RawHessianDiag(total / count)


def normalize(raw: RawHessianDiag) -> np.ndarray:
    """Scale to unit L2 norm; degenerate (near-zero) diagonals map to zeros."""
    values = np.asarray(raw.values, dtype=np.float64)
    norm = raw.norm
    if norm <= EPS_NORM:
        return np.zeros_like(values)
    return values / norm


def accumulate(state: HessianState, raw: RawHessianDiag) -> HessianState:
    """Ĥ <- Ĥ + beta * H / ||H||, or Ĥ <- H / ||H|| when accumulation is disabled."""
    if len(raw.values) != len(state.accumulated):
        raise DimensionError(f"hessian length {len(raw.values)} != state length {len(state.accumulated)}")
    unit = normalize(raw)
    dtype = state.accumulated.dtype
    if state.no_accumulation:
        new = unit.astype(dtype)
    else:
        new = state.accumulated + (state.beta * unit).astype(dtype)
    return replace(state, accumulated=new, rounds_absorbed=state.rounds_absorbed + 1)


def diag_norm_series(history: Sequence[RawHessianDiag]) -> list:
    return [raw.norm for raw in history]
