"""Neighbourhood aggregation rules.

Both rules reduce to one kernel, :func:`_combine`, which sums
``weight[j] * params[j]`` over participants in ascending sender order in
float64.  Because the two strategies share that kernel, every column that
DecHW sends to the size-weighted fallback is computed with exactly the same
arithmetic as DecHetero would use.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, ProtocolError

log = logging.getLogger(__name__)

EPS_FALLBACK = 1e-12
STRATEGIES = ("dechetero", "dechw")


@dataclass(frozen=True)
class NeighborBundle:
    """What one node sends its neighbours at the end of a round."""

    sender: int
    params: np.ndarray
    size: int
    hessian: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AggregationOutcome:
    params: np.ndarray
    fallback_count: int
    participants: int
    weights: Optional[np.ndarray] = None  # (participants, m) weights actually applied, if requested


def _ordered(bundles: Sequence[NeighborBundle]) -> list:
    if not bundles:
        raise ValueError("aggregation needs at least one participant")
    ordered = sorted(bundles, key=lambda b: b.sender)
    m = len(ordered[0].params)
    for b in ordered:
        if b.params.ndim != 1 or len(b.params) != m:
            raise DimensionError(f"sender {b.sender} params length {len(b.params)} != {m}")
    return ordered


def size_weights(bundles: Sequence[NeighborBundle]) -> np.ndarray:
    """tau_j = |D_j| / sum_k |D_k| over participants sorted by sender id."""
    sizes = np.array([b.size for b in sorted(bundles, key=lambda b: b.sender)], dtype=np.float64)
    if len(sizes) == 0:
        raise ValueError("aggregation needs at least one participant")
    total = sizes.sum()
    if total <= 0:
        log.warning("all %d participants report zero samples; using uniform weights", len(sizes))
        return np.full(len(sizes), 1.0 / len(sizes))
    return sizes / total


def _combine(params: list, weights: np.ndarray, dtype) -> np.ndarray:
    out = np.zeros(len(params[0]), dtype=np.float64)
    for w_j, p_j in zip(weights, params):
        out += w_j * p_j.astype(np.float64)
    return out.astype(dtype)


def dechetero_aggregate(bundles: Sequence[NeighborBundle], keep_weights: bool = False) -> AggregationOutcome:
    """Data-size weighted parameter averaging."""
    ordered = _ordered(bundles)
    tau = size_weights(ordered)
    m = len(ordered[0].params)
    weights = np.repeat(tau[:, None], m, axis=1)
    new = _combine([b.params for b in ordered], weights, ordered[0].params.dtype)
    return AggregationOutcome(new, m, len(ordered), weights if keep_weights else None)


def _hessian_matrix(ordered: list) -> np.ndarray:
    m = len(ordered[0].params)
    rows = []
    for b in ordered:
        if b.hessian is None:
            raise ProtocolError(f"sender {b.sender} sent no hessian diagonal")
        if len(b.hessian) != m:
            raise DimensionError(f"sender {b.sender} hessian length {len(b.hessian)} != {m}")
        rows.append(np.asarray(b.hessian, dtype=np.float64))
    return np.stack(rows)


def hessian_weights(bundles: Sequence[NeighborBundle], n: int) -> Optional[np.ndarray]:
    """Per-participant weights for parameter ``n``, or None when the column is insensitive."""
    column = _hessian_matrix(_ordered(bundles))[:, n]
    total = column.sum()
    if total <= EPS_FALLBACK:
        return None
    return column / total


def dechw_aggregate(bundles: Sequence[NeighborBundle], keep_weights: bool = False) -> AggregationOutcome:
    """Per-parameter Hessian-weighted averaging with a size-weighted fallback.

    Parameter ``n`` is averaged with weights ``H[j, n] / sum_k H[k, n]``; when
    that denominator is (numerically) zero the column uses the data-size
    weights instead.
    """
    ordered = _ordered(bundles)
    hess = _hessian_matrix(ordered)
    if np.any(hess < 0):
        raise ProtocolError("hessian diagonals must be non-negative")
    totals = hess.sum(axis=0)
    fallback = totals <= EPS_FALLBACK
    weights = np.divide(hess, totals, out=np.zeros_like(hess), where=~fallback)
    if fallback.any():
        weights[:, fallback] = size_weights(ordered)[:, None]
    new = _combine([b.params for b in ordered], weights, ordered[0].params.dtype)
    return AggregationOutcome(new, int(fallback.sum()), len(ordered), weights if keep_weights else None)


def aggregate(strategy: str, bundles: Sequence[NeighborBundle], keep_weights: bool = False) -> AggregationOutcome:
    if strategy == "dechw":
        return dechw_aggregate(bundles, keep_weights)
    if strategy == "dechetero":
        return dechetero_aggregate(bundles, keep_weights)
    raise ValueError(f"unknown strategy {strategy!r}")
