"""Constants used throughout the energy trading simulator."""

from pathlib import Path

# Cryptographic widths (bytes)
SEED_LENGTH = 32
PUBLIC_KEY_LENGTH = 32
SECRET_KEY_LENGTH = 32
SIGNATURE_LENGTH = 64
HASH_LENGTH = 32
ADDRESS_LENGTH = 20
NONCE_LENGTH = 8

ZERO_HASH = bytes(HASH_LENGTH)
BURN_ADDRESS = bytes(ADDRESS_LENGTH)  # Unspendable sink for account-creation burns

# Certificate of Existence
DEFAULT_MERKLE_LEAVES = 16

# Simulated network (milliseconds)
DEFAULT_LATENCY_BASE_MS = 50
DEFAULT_LATENCY_JITTER_MS = 20
DEFAULT_TRANSFER_LATENCY_MS = 5000

# Chain
DEFAULT_MINING_PERIOD_MS = 15000
DEFAULT_BLOCK_CAPACITY = 8
DEFAULT_TX_FEE = 20

# Canonical transaction sizes (bytes); calibrated in paper.cfg
DEFAULT_TX_SIZES = {
    "contract_deploy": 5600,
    "energy_add": 600,
    "settled_ctp": 5000,
    "baseline_deploy": 5400,
    "baseline_pay_in": 1500,
    "baseline_confirm_payout": 1500,
}

# Trading
DEFAULT_TTL_MS = 60000
DEFAULT_TRADE_AMOUNT = 40
DEFAULT_TRADE_ENERGY = 50
DEFAULT_PRICE_PER_KWH = 2
DEFAULT_BURN_AMOUNT = 10
DEFAULT_INITIAL_BALANCE = 10000
DEFAULT_INITIAL_ENERGY = 2000
DEFAULT_TRADE_INTERVAL_MS = 12000

# Overlay
DEFAULT_PREFIX_BITS = 2
MAX_OVERLAY_HOPS = 3

# Node identifiers
MINER_NODE = "miner"
CONSUMER_PREFIX = "consumer"
PRODUCER_PREFIX = "producer"
METER_PREFIX = "meter"
BACKBONE_PREFIX = "backbone"

# File system
DATA_DIR_NAME = "SpbEnergy"
MACOS_DATA_DIR = Path.home() / "Library/Application Support" / DATA_DIR_NAME
LINUX_DATA_DIR = Path.home() / ".local/share/spb-energy"
RUNS_DIR_NAME = "runs"
SESSION_HISTORY_FILE = "session_history.txt"

# Output files
METRICS_FILE = "metrics.json"
TRADES_FILE = "trades.csv"
TRACE_FILE = "trace.log"
EVENTS_FILE = "events.log"
CHAIN_FILE = "chain.jsonl"
COMPARISON_FILE = "comparison.csv"

# Exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_CHECK_FAILED = 3

# Acceptance tolerances for the calibration config
SIZE_RATIO_TARGET = 0.60
SIZE_RATIO_TOLERANCE = 0.06
THROUGHPUT_RATIO_TARGET = 0.52
THROUGHPUT_RATIO_TOLERANCE = 0.10
DELAY_REDUCTION_TARGET = 35.0
DELAY_REDUCTION_TOLERANCE = 10.0

# Session commands (REPL / script mode)
SESSION_COMMANDS = {
    "ctp <addr> <amount> <energy>": "commit to pay a producer",
    "negotiate <addr> <energy> <max_price>": "agree on a price per kWh, then commit to pay",
    "erc <ctp_id> <energy>": "confirm energy receipt from the meter",
    "offers [min_energy] [max_price]": "list producer offers",
    "balance [addr]": "show account balances",
    "advance <ms>": "advance simulated time",
    "mine": "advance to the next mining tick",
    "help": "show help",
    "quit": "leave the session",
}
