"""Error hierarchy shared by the protocol modules.

Every error carries a stable ``code`` so the command line can print it and
scripted sessions can match on it.
"""


class SpbError(Exception):
    code = "SPB_ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


# Crypto
class MalformedKey(SpbError):
    code = "CRYPTO_MALFORMED_KEY"


# Certificates of Existence
class EmptyTree(SpbError):
    code = "COE_EMPTY_TREE"


class LeafIndexOutOfRange(SpbError):
    code = "COE_LEAF_INDEX"


class UncertifiedSigner(SpbError):
    code = "COE_UNCERTIFIED_SIGNER"


class ExhaustedKeys(SpbError):
    code = "COE_EXHAUSTED_KEYS"


# Simulated network
class PastEvent(SpbError):
    code = "SIM_PAST_EVENT"


class UnknownNode(SpbError):
    code = "SIM_UNKNOWN_NODE"


# Chain and ledger
class DuplicateTx(SpbError):
    code = "CHAIN_DUPLICATE_TX"


class UnknownAccount(SpbError):
    code = "LEDGER_UNKNOWN_ACCOUNT"


class InsufficientFunds(SpbError):
    code = "LEDGER_INSUFFICIENT_FUNDS"


class InsufficientHold(SpbError):
    code = "LEDGER_INSUFFICIENT_HOLD"


# CTP database
class InvalidCtp(SpbError):
    code = "CTP_INVALID"


class BadSignature(SpbError):
    code = "CTP_BAD_SIGNATURE"


class DuplicateCtp(SpbError):
    code = "CTP_DUPLICATE"


class CtpNotFound(SpbError):
    code = "CTP_NOT_FOUND"


class AlreadySettled(SpbError):
    code = "CTP_ALREADY_SETTLED"


class CtpExpired(SpbError):
    code = "CTP_EXPIRED"


class CtpNotExpired(SpbError):
    code = "CTP_NOT_EXPIRED"


# Energy market
class InsufficientEnergy(SpbError):
    code = "MARKET_INSUFFICIENT_ENERGY"


class NoAccount(SpbError):
    code = "MARKET_NO_ACCOUNT"


class AccountExists(SpbError):
    code = "MARKET_ACCOUNT_EXISTS"


class NonPositiveAmount(SpbError):
    code = "MARKET_NON_POSITIVE_AMOUNT"


class BadAuthoritySignature(SpbError):
    code = "MARKET_BAD_AUTHORITY_SIGNATURE"


class BadCoE(SpbError):
    code = "ERC_BAD_COE"


class BadMeterSignature(SpbError):
    code = "ERC_BAD_METER_SIGNATURE"


class EnergyMismatch(SpbError):
    code = "ERC_ENERGY_MISMATCH"


# Trade state machines
class IllegalTransition(SpbError):
    code = "TRADE_ILLEGAL_TRANSITION"


# Overlay
class ConflictingRegistration(SpbError):
    code = "OVERLAY_CONFLICTING_REGISTRATION"


class NoRoute(SpbError):
    code = "OVERLAY_NO_ROUTE"


class InvalidPartition(SpbError):
    code = "OVERLAY_INVALID_PARTITION"


class BadMessageSignature(SpbError):
    code = "OVERLAY_BAD_SIGNATURE"


# Harness
class ConfigError(SpbError):
    code = "CONFIG_ERROR"


class ReportMismatch(SpbError):
    code = "REPORT_MISMATCH"


class SessionError(SpbError):
    code = "SESSION_ERROR"


class RunIntegrityError(SpbError):
    code = "RUN_INTEGRITY"
