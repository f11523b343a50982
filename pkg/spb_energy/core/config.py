"""Experiment configuration.

The on-disk format is a flat ``key=value`` file (comments and blank lines
allowed) read with python-dotenv; keys are the field names below.
"""

import io
from pathlib import Path
from typing import Dict, Literal

from dotenv import dotenv_values
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from spb_energy.core.constants import (
    DEFAULT_BLOCK_CAPACITY,
    DEFAULT_BURN_AMOUNT,
    DEFAULT_INITIAL_BALANCE,
    DEFAULT_INITIAL_ENERGY,
    DEFAULT_LATENCY_BASE_MS,
    DEFAULT_LATENCY_JITTER_MS,
    DEFAULT_MERKLE_LEAVES,
    DEFAULT_MINING_PERIOD_MS,
    DEFAULT_PREFIX_BITS,
    DEFAULT_PRICE_PER_KWH,
    DEFAULT_TRADE_AMOUNT,
    DEFAULT_TRADE_ENERGY,
    DEFAULT_TRADE_INTERVAL_MS,
    DEFAULT_TRANSFER_LATENCY_MS,
    DEFAULT_TTL_MS,
    DEFAULT_TX_FEE,
    DEFAULT_TX_SIZES,
)
from spb_energy.core.exceptions import ConfigError

ProtocolName = Literal["spb", "baseline"]


class ExperimentConfig(BaseModel):
    """Parameters of one simulated experiment.

    ``producer_waits_for_commit`` makes a producer start the transfer only
    once the CTP is in a mined block, instead of on the miner's notice when
    the CTP enters the pending database. A producer that delivers on the
    notice trusts a hold only the miner has seen so far. Set it to false for
    the notice-driven flow; the calibrated delays assume the default.

    Negotiation is off unless ``consumer_ceiling_per_kwh`` is positive. The
    consumer then bids ``opening_bid_pct`` of its ceiling, and producers
    opened with ``negotiable_producers`` concede down to
    ``floor_price_per_kwh``. Others only sell at ``price_per_kwh``.
    """

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=7, ge=0)
    protocol: ProtocolName = "spb"

    consumers: int = Field(default=10, gt=0)
    producers: int = Field(default=4, gt=0)

    mining_period_ms: int = Field(default=DEFAULT_MINING_PERIOD_MS, gt=0)
    block_capacity: int = Field(default=DEFAULT_BLOCK_CAPACITY, gt=0)
    tx_fee: int = Field(default=DEFAULT_TX_FEE, gt=0)

    size_contract_deploy: int = Field(default=DEFAULT_TX_SIZES["contract_deploy"], gt=0)
    size_energy_add: int = Field(default=DEFAULT_TX_SIZES["energy_add"], gt=0)
    size_settled_ctp: int = Field(default=DEFAULT_TX_SIZES["settled_ctp"], gt=0)
    size_baseline_deploy: int = Field(default=DEFAULT_TX_SIZES["baseline_deploy"], gt=0)
    size_baseline_pay_in: int = Field(default=DEFAULT_TX_SIZES["baseline_pay_in"], gt=0)
    size_baseline_confirm_payout: int = Field(
        default=DEFAULT_TX_SIZES["baseline_confirm_payout"], gt=0
    )

    latency_base_ms: int = Field(default=DEFAULT_LATENCY_BASE_MS, ge=0)
    latency_jitter_ms: int = Field(default=DEFAULT_LATENCY_JITTER_MS, ge=0)
    transfer_latency_ms: int = Field(default=DEFAULT_TRANSFER_LATENCY_MS, ge=0)

    ttl_ms: int = Field(default=DEFAULT_TTL_MS, gt=0)
    trade_count: int = Field(default=100, gt=0)
    trade_interval_ms: int = Field(default=DEFAULT_TRADE_INTERVAL_MS, gt=0)
    trade_amount: int = Field(default=DEFAULT_TRADE_AMOUNT, gt=0)
    trade_energy: int = Field(default=DEFAULT_TRADE_ENERGY, gt=0)
    price_per_kwh: int = Field(default=DEFAULT_PRICE_PER_KWH, gt=0)

    initial_balance: int = Field(default=DEFAULT_INITIAL_BALANCE, gt=0)
    initial_energy: int = Field(default=DEFAULT_INITIAL_ENERGY, gt=0)
    burn_amount: int = Field(default=DEFAULT_BURN_AMOUNT, gt=0)

    merkle_leaves: int = Field(default=DEFAULT_MERKLE_LEAVES, gt=0)
    prefix_bits: int = Field(default=DEFAULT_PREFIX_BITS, gt=0, le=16)
    replicates: int = Field(default=100, gt=0)
    producer_waits_for_commit: bool = True

    negotiable_producers: bool = False
    floor_price_per_kwh: int = Field(default=1, gt=0)
    consumer_ceiling_per_kwh: int = Field(default=0, ge=0)
    opening_bid_pct: int = Field(default=50, gt=0, le=100)
    negotiation_rounds: int = Field(default=4, gt=0)

    @field_validator("merkle_leaves")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value & (value - 1):
            raise ValueError("merkle_leaves must be a power of two")
        return value

    @model_validator(mode="after")
    def _floor_below_list_price(self) -> "ExperimentConfig":
        if self.floor_price_per_kwh > self.price_per_kwh:
            raise ValueError("floor_price_per_kwh must not exceed price_per_kwh")
        return self

    @property
    def tx_sizes(self) -> Dict[str, int]:
        return {kind: getattr(self, f"size_{kind}") for kind in DEFAULT_TX_SIZES}

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        values = dotenv_values(stream=io.StringIO(text))
        return cls._validated(values, source)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        """Load and validate a config file.

        Raises
        ------
            ConfigError: if the file is missing or a value is invalid
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        return cls._validated(dotenv_values(path), str(path))

    @classmethod
    def _validated(cls, values: Dict, source: str) -> "ExperimentConfig":
        missing = [key for key, value in values.items() if value is None]
        if missing:
            raise ConfigError(f"{source}: keys without a value: {', '.join(missing)}")
        try:
            return cls(**{key.strip().lower(): value for key, value in values.items()})
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
            )
            raise ConfigError(f"{source}: {problems}") from None

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        return self._validated({**self.model_dump(), **overrides}, "<overrides>")

    def to_text(self) -> str:
        lines = ["# spb-energy experiment configuration"]
        for key, value in self.model_dump().items():
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path
