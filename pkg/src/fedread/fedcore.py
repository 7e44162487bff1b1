"""Aggregation algebra: update validation, weighted FedAvg, incremental merge.

At round t the combiner computes A_t = fedavg(valid updates) and then, under
the incremental policy, W_t = W_{t-1} + (A_t - W_{t-1}) / t, i.e. a running
mean of the per-round aggregates. Plain policy keeps W_t = A_t.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AggregationError, ConfigError, ShapeError
from .model import ParamVector


class AggregationPolicy(enum.Enum):
    PLAIN = "plain"
    INCREMENTAL = "incremental"

    @classmethod
    def parse(cls, name: str) -> "AggregationPolicy":
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(
                f"unknown aggregation policy {name!r}; expected 'plain' or 'incremental'"
            ) from None


@dataclass(frozen=True)
class ModelUpdate:
    """One client's trained parameters plus its dataset-size weight n_k."""

    client_id: str
    round_id: int
    n_examples: int
    params: ParamVector


@dataclass(frozen=True)
class Rejection:
    reason: str
    detail: str


def validate_update(
    update: ModelUpdate,
    expected_manifest: tuple,
    current_round: int,
) -> Optional[Rejection]:
    """Check one incoming update. None means accepted.

    Must never raise on malformed input; a combiner drops rejected updates
    and keeps the round alive.
    """
    if update.round_id != current_round:
        return Rejection(
            "stale",
            f"update for round {update.round_id}, expected {current_round}",
        )
    if update.n_examples < 1:
        return Rejection("empty", f"n_examples = {update.n_examples}")
    if update.params.manifest != tuple(expected_manifest):
        return Rejection("manifest", "parameter manifest does not match the model")
    if not update.params.is_finite():
        return Rejection("non-finite", "parameters contain NaN or infinity")
    return None


def fedavg(updates: Sequence[ModelUpdate]) -> ParamVector:
    """Weighted mean sum_k (n_k / n) params_k.

    Summed in ascending client_id order, accumulated in float64, so the
    result is independent of arrival order and bit-reproducible.
    """
    if not updates:
        raise AggregationError("fedavg needs at least one update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    manifest = ordered[0].params.manifest
    for u in ordered[1:]:
        if u.params.manifest != manifest:
            raise ShapeError(
                f"update from {u.client_id!r} has a mismatched parameter manifest"
            )
    n = sum(u.n_examples for u in ordered)
    if n <= 0:
        raise AggregationError("total example count must be positive")
    acc = np.zeros(ordered[0].params.values.shape, dtype=np.float64)
    for u in ordered:
        acc += np.float64(u.n_examples) * u.params.values.astype(np.float64)
    return ParamVector((acc / n).astype(np.float32), manifest)


def incremental_merge(prev: ParamVector, agg: ParamVector, t: int) -> ParamVector:
    """prev + (agg - prev) / t, the running mean of aggregates at round t."""
    if t < 1:
        raise ConfigError(f"round index must be >= 1, got {t}")
    if prev.manifest != agg.manifest:
        raise ShapeError("previous and aggregate manifests differ")
    if t == 1:
        # running mean of one element; return agg untouched rather than
        # round-tripping through arithmetic
        return agg
    prev64 = prev.values.astype(np.float64)
    agg64 = agg.values.astype(np.float64)
    return ParamVector((prev64 + (agg64 - prev64) / t).astype(np.float32), prev.manifest)
