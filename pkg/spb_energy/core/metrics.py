"""Metrics reports and protocol comparison."""

import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from pydantic import BaseModel

from spb_energy.core.constants import (
    DELAY_REDUCTION_TARGET,
    DELAY_REDUCTION_TOLERANCE,
    SIZE_RATIO_TARGET,
    SIZE_RATIO_TOLERANCE,
    THROUGHPUT_RATIO_TARGET,
    THROUGHPUT_RATIO_TOLERANCE,
)
from spb_energy.core.exceptions import ReportMismatch
from spb_energy.core.trade_protocol import TradeOutcome, TradeResult

MS_PER_MINUTE = 60_000


class OutcomeRow(BaseModel):
    id: str
    protocol: str
    result: str
    delay_ms: Optional[int] = None
    fees: int
    tx_count: int
    producer_received: int = 0
    started_at: int = 0
    completed_at: Optional[int] = None
    reliable: bool = True

    @classmethod
    def from_outcome(cls, outcome: TradeOutcome) -> "OutcomeRow":
        return cls(**outcome.as_row())


def mean_delay_ms(rows: Sequence[OutcomeRow]) -> Optional[float]:
    """Mean end-to-end delay over settled trades."""
    delays = [
        r.delay_ms
        for r in rows
        if r.result == TradeResult.SETTLED_PAID.value and r.delay_ms is not None
    ]
    return sum(delays) / len(delays) if delays else None


def per_trade_cost(rows: Sequence[OutcomeRow]) -> float:
    return sum(r.fees for r in rows) / len(rows) if rows else 0.0


def completion_time_min(rows: Sequence[OutcomeRow]) -> Optional[float]:
    """Minutes from the first trade start to the last completion."""
    finished = [r.completed_at for r in rows if r.completed_at is not None]
    if not rows or len(finished) != len(rows):
        return None
    return (max(finished) - min(r.started_at for r in rows)) / MS_PER_MINUTE


class MetricsReport(BaseModel):
    protocol: str
    scenario: str
    seed: int
    trade_count: int
    replicates: int
    mean_e2e_delay_ms: Optional[float] = None
    per_trade_consumer_cost: float
    completion_time_min: Optional[float] = None
    chain_size_bytes: int
    onchain_tx_count: int
    counts: Dict[str, int]
    trace_digest: str
    outcomes: List[OutcomeRow]
    delay_outcomes: List[OutcomeRow] = []

    @classmethod
    def from_outcomes(
        cls,
        protocol: str,
        scenario: str,
        seed: int,
        replicates: int,
        outcomes: Sequence[OutcomeRow],
        chain_size_bytes: int,
        trace_digest: str,
        delay_outcomes: Sequence[OutcomeRow] = (),
        throughput: bool = False,
    ) -> "MetricsReport":
        """Aggregate raw outcomes into a report.

        The delay comes from ``delay_outcomes`` when given (uncongested
        reliable runs), otherwise from ``outcomes``.
        """
        outcomes = list(outcomes)
        delay_source = list(delay_outcomes) or outcomes
        return cls(
            protocol=protocol,
            scenario=scenario,
            seed=seed,
            trade_count=len(outcomes),
            replicates=replicates,
            mean_e2e_delay_ms=mean_delay_ms(delay_source),
            per_trade_consumer_cost=per_trade_cost(outcomes),
            completion_time_min=completion_time_min(outcomes) if throughput else None,
            chain_size_bytes=chain_size_bytes,
            onchain_tx_count=sum(r.tx_count for r in outcomes),
            counts=count_results(outcomes),
            trace_digest=trace_digest,
            outcomes=outcomes,
            delay_outcomes=list(delay_outcomes),
        )

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def trades_frame(self) -> pd.DataFrame:
        columns = ["id", "protocol", "result", "delay_ms", "fees", "tx_count"]
        return pd.DataFrame([r.model_dump() for r in self.outcomes], columns=columns)


def count_results(rows: Sequence[OutcomeRow]) -> Dict[str, int]:
    counts = {result.value: 0 for result in TradeResult}
    for row in rows:
        counts[row.result] = counts.get(row.result, 0) + 1
    return counts


def _ratio(a: Optional[float], b: Optional[float]) -> float:
    if a is None or b is None or b == 0:
        return math.nan
    return a / b


def compare(a: MetricsReport, b: MetricsReport) -> pd.DataFrame:
    """Compare report ``a`` (usually SPB) against ``b`` (usually the baseline).

    Returns
    -------
        DataFrame with one row per metric: name, value of a, value of b, result
    """
    if a.trade_count != b.trade_count:
        raise ReportMismatch(
            f"Reports cover {a.trade_count} and {b.trade_count} trades"
        )
    delay_ratio = _ratio(a.mean_e2e_delay_ms, b.mean_e2e_delay_ms)
    rows = [
        ("delay_reduction_pct", a.mean_e2e_delay_ms, b.mean_e2e_delay_ms, (1 - delay_ratio) * 100),
        ("cost_ratio", a.per_trade_consumer_cost, b.per_trade_consumer_cost,
         _ratio(a.per_trade_consumer_cost, b.per_trade_consumer_cost)),
        ("tx_count_ratio", a.onchain_tx_count, b.onchain_tx_count,
         _ratio(a.onchain_tx_count, b.onchain_tx_count)),
        ("throughput_ratio", a.completion_time_min, b.completion_time_min,
         _ratio(a.completion_time_min, b.completion_time_min)),
        ("size_ratio", a.chain_size_bytes, b.chain_size_bytes,
         _ratio(a.chain_size_bytes, b.chain_size_bytes)),
    ]
    table = pd.DataFrame(rows, columns=["metric", "a", "b", "value"])
    return table.astype({"a": "float64", "b": "float64", "value": "float64"})


ACCEPTANCE_BANDS = {
    "delay_reduction_pct": (DELAY_REDUCTION_TARGET, DELAY_REDUCTION_TOLERANCE),
    "cost_ratio": (1 / 3, 1e-9),
    "tx_count_ratio": (1 / 3, 1e-9),
    "throughput_ratio": (THROUGHPUT_RATIO_TARGET, THROUGHPUT_RATIO_TOLERANCE),
    "size_ratio": (SIZE_RATIO_TARGET, SIZE_RATIO_TOLERANCE),
}


def check_acceptance(table: pd.DataFrame) -> List[str]:
    """Metrics outside their calibration band.

    A banded metric that is NaN or absent from the table counts as a failure.
    """
    failures = []
    present = set(table["metric"])
    for metric in ACCEPTANCE_BANDS:
        if metric not in present:
            failures.append(f"{metric} missing from the comparison")
    for metric, value in zip(table["metric"], table["value"]):
        if metric not in ACCEPTANCE_BANDS:
            continue
        if pd.isna(value):
            failures.append(f"{metric} could not be computed")
            continue
        target, tolerance = ACCEPTANCE_BANDS[metric]
        if abs(value - target) > tolerance:
            failures.append(f"{metric}={value:.4f} outside {target:.4f} ± {tolerance:g}")
    return failures
