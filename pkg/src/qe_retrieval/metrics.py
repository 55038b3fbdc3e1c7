"""Multi-recall@K, Recall@K and report aggregation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Optional, Sequence

from .manifest import GRANULARITY_ORDER, MODE_ORDER, Granularity, Mode

log = logging.getLogger(__name__)

METRICS = ("multi_recall_at_k", "recall_at_k")


def multi_recall_at_k(predicted: Sequence[str], true_ids: Iterable[str], k: int) -> float:
    """Hits in ``predicted`` divided by max(k, len(predicted)).

    With a single true image and k predictions a hit scores 1/k, so this is
    stricter than Recall@K for one-to-one ground truth.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    truth = set(true_ids)
    c = 0
    for image_id in predicted:
        if image_id in truth:
            c += 1
    return c / max(k, len(predicted))


def recall_at_k(predicted: Sequence[str], true_ids: Iterable[str], k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    truth = set(true_ids)
    return int(any(p in truth for p in predicted[:k]))


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    mode: Mode
    granularity: Granularity
    k: int
    multi_recall_at_k: float
    recall_at_k: int
    predicted_ids: tuple[str, ...]
    true_ids: tuple[str, ...]
    encoder: str = ""
    fallback: bool = False

    @classmethod
    def score(cls, query_id: str, mode: Mode, granularity: Granularity, predicted: Sequence[str],
              true_ids: Iterable[str], k: int, encoder: str = "", fallback: bool = False) -> "EvalRecord":
        predicted = tuple(predicted[:k])
        true_ids = tuple(sorted(true_ids))
        return cls(query_id, Mode(mode), Granularity(granularity), k,
                   multi_recall_at_k(predicted, true_ids, k), recall_at_k(predicted, true_ids, k),
                   predicted, true_ids, encoder, fallback)

    def to_json(self) -> dict:
        return {
            "encoder": self.encoder,
            "mode": self.mode.value,
            "granularity": self.granularity.value,
            "query_id": self.query_id,
            "k": self.k,
            "multi_recall_at_k": self.multi_recall_at_k,
            "recall_at_k": self.recall_at_k,
            "predicted_ids": list(self.predicted_ids),
            "true_ids": list(self.true_ids),
            "fallback": self.fallback,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalRecord":
        return cls(obj["query_id"], Mode(obj["mode"]), Granularity(obj["granularity"]), int(obj["k"]),
                   float(obj["multi_recall_at_k"]), int(obj["recall_at_k"]),
                   tuple(obj["predicted_ids"]), tuple(obj["true_ids"]), obj.get("encoder", ""),
                   bool(obj.get("fallback", False)))


def mean_percent(values: Sequence[float]) -> float:
    """Mean of fractions as a percent, rounded half-up to 2 decimals.

    Works in decimal on the shortest repr of each value so 0.125 -> 12.50
    and 0.12345 -> 12.35 rather than float-rounding artefacts.
    """
    if not values:
        raise ValueError("mean of empty group")
    total = sum((Decimal(repr(float(v))) for v in values), Decimal(0))
    return float((total * 100 / len(values)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class AggregateRow:
    group: tuple[tuple[str, str], ...]
    count: int
    values: dict = field(hash=False)  # metric name -> percent

    def get(self, name: str) -> str:
        return dict(self.group)[name]


@dataclass
class AggregateTable:
    rows: list[AggregateRow]
    warnings: list[str] = field(default_factory=list)


_GROUP_FIELDS = {"mode": "mode", "granularity": "granularity", "model": "encoder", "encoder": "encoder"}


def _sort_key(field_name: str, value: str):
    if field_name == "granularity":
        return GRANULARITY_ORDER.index(Granularity(value)), value
    if field_name == "mode":
        return MODE_ORDER.index(Mode(value)), value
    return 0, value


def aggregate(records: Sequence[EvalRecord], group_by: Sequence[str] = ("encoder", "granularity", "mode"),
              expected: Optional[Iterable[tuple[str, ...]]] = None) -> AggregateTable:
    """Unweighted mean of each metric per group, as percent with 2 decimals.

    Rows are ordered by granularity (coarse to fine), then by mode, then by
    any remaining ``group_by`` fields alphabetically.
    Groups listed in ``expected`` but without records are omitted and noted
    in ``warnings``.
    """
    for g in group_by:
        if g not in _GROUP_FIELDS:
            raise ValueError(f"cannot group by {g!r}")
    buckets: dict[tuple[str, ...], list[EvalRecord]] = {}
    for r in records:
        key = tuple(_value(r, g) for g in group_by)
        buckets.setdefault(key, []).append(r)

    warnings = []
    for key in expected or ():
        if tuple(key) not in buckets:
            msg = "empty group omitted: " + ", ".join(f"{g}={v}" for g, v in zip(group_by, key))
            log.warning(msg)
            warnings.append(msg)

    def order(key):
        # granularity first, then mode, then the rest in group_by order
        prio = sorted(range(len(group_by)), key=lambda i: {"granularity": 0, "mode": 1}.get(group_by[i], 2 + i))
        return tuple(_sort_key(group_by[i], key[i]) for i in prio)

    rows = []
    for key in sorted(buckets, key=order):
        group = buckets[key]
        values = {m: mean_percent([getattr(r, m) for r in group]) for m in METRICS}
        rows.append(AggregateRow(tuple(zip(group_by, key)), len(group), values))
    return AggregateTable(rows, warnings)


def _value(record: EvalRecord, name: str) -> str:
    value = getattr(record, _GROUP_FIELDS[name])
    return value.value if hasattr(value, "value") else str(value)
