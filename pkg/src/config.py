"""
Workload Configuration

What: Typed configuration for simulations, the buffer-pool simulator, log
      devices and live testbed runs, loaded from TOML files
How: Dataclass defaults overlaid with the parsed TOML tables; unknown keys and
     out-of-range values raise ConfigError naming the offending key

Example config:
    seed = 7
    rate_tps = 500.0
    n_records = 100
    zipf_s = 1.0
    scheduler = "vats"

    [vats]
    theta = 0.0

    [bufpool]
    enabled = true
    mode = "llu"

    [log]
    devices = 2
    policy = "eager"

Environment:
    VARLAT_TRACE_DIR   trace output directory (default ./traces)
    VARLAT_LOG_DIR     log file directory (default ./logs)
    VARLAT_LOG_LEVEL   root log level (default INFO)
"""

import copy
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Union

from dotenv import find_dotenv, load_dotenv

from src.errors import ConfigError

logger = logging.getLogger(__name__)

SCHEDULERS = ("fcfs", "vats", "etf", "random")
BUFPOOL_MODES = ("baseline", "llu")
LOG_POLICIES = ("eager", "lazy_flush", "lazy_write")
ARRIVALS = ("fixed", "poisson")
DISTRIBUTIONS = ("exponential", "lognormal", "constant")


@dataclass
class TxnConfig:
    """Transaction mix: access count range, read share and service times."""

    min_accesses: int = 1
    max_accesses: int = 8
    write_ratio: float = 0.5
    service_mean_ns: int = 100_000
    service_sigma: float = 0.5
    log_bytes_per_write: int = 512


@dataclass
class VatsConfig:
    theta: float = 0.0


@dataclass
class BufPoolConfig:
    """
    Buffer pool shape, LRU update mode and list-lock timing

    Also drives the standalone pool simulator (threads, accesses, think_ns).
    """

    enabled: bool = False
    capacity: int = 1024
    n_pages: int = 4096
    old_fraction: float = 3 / 8
    mode: str = "baseline"
    spin_timeout_ns: int = 10_000
    critical_section_ns: int = 2_000
    critical_section_sigma: float = 0.5
    miss_ns: int = 20_000
    zipf_s: float = 0.8
    threads: int = 32
    accesses_per_thread: int = 2_000
    think_ns: int = 20_000


@dataclass
class LogConfig:
    devices: int = 1
    policy: str = "eager"
    write_ns: int = 5_000
    write_sigma: float = 0.5
    flush_ns: int = 50_000
    flush_sigma: float = 0.5
    block_size: int = 4096


@dataclass
class LiveConfig:
    """Live testbed: worker threads and wall-clock scale of simulated work."""

    threads: int = 16
    n_txns: int = 2_000
    time_scale: float = 1.0
    buffer_capacity: int = 1 << 20


@dataclass
class SimConfig:
    seed: int = 42
    duration_s: float = 10.0
    rate_tps: float = 500.0
    arrival: str = "fixed"
    jitter: float = 0.10
    n_records: int = 1_000_000
    zipf_s: float = 0.0
    scheduler: str = "fcfs"
    max_waiters: int = 100_000
    max_inflight: int = 100_000
    txn: TxnConfig = field(default_factory=TxnConfig)
    vats: VatsConfig = field(default_factory=VatsConfig)
    bufpool: BufPoolConfig = field(default_factory=BufPoolConfig)
    log: LogConfig = field(default_factory=LogConfig)
    live: LiveConfig = field(default_factory=LiveConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _overlay(target: Any, values: Dict[str, Any], prefix: str = "") -> None:
    known = {f.name: f for f in fields(target)}
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(target, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be a table")
            _overlay(current, value, prefix=f"{dotted}.")
        else:
            setattr(target, key, _coerce(dotted, current, value))


def _coerce(dotted: str, current: Any, value: Any) -> Any:
    """Convert value to the type of the default, refusing lossy conversions."""
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"config key {dotted!r} expects a boolean, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool):
            raise ConfigError(f"config key {dotted!r} expects an integer, got {value!r}")
        if isinstance(value, float) and value.is_integer():
            return int(value)
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {dotted!r} expects an integer, got {value!r}") from None
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {dotted!r} expects a number, got {value!r}") from None
    if isinstance(current, str):
        return str(value)
    return value


def validate(config: SimConfig) -> SimConfig:
    """
    Range and choice checks

    Raises:
        ConfigError: first violation found
    """
    def require(condition: bool, message: str) -> None:
        if not condition:
            raise ConfigError(message)

    require(config.rate_tps > 0, "rate_tps must be > 0")
    require(config.duration_s > 0, "duration_s must be > 0")
    require(0 <= config.jitter < 1, "jitter must be within [0, 1)")
    require(config.n_records >= 1, "n_records must be >= 1")
    require(config.zipf_s >= 0, "zipf_s must be >= 0")
    require(config.arrival in ARRIVALS, f"arrival must be one of {ARRIVALS}")
    require(config.scheduler in SCHEDULERS, f"scheduler must be one of {SCHEDULERS}")
    require(0.0 <= config.vats.theta <= 1.0, "vats.theta must be within [0, 1]")
    require(config.max_waiters >= 1 and config.max_inflight >= 1, "saturation bounds must be >= 1")

    txn = config.txn
    require(1 <= txn.min_accesses <= txn.max_accesses, "txn access range must satisfy 1 <= min <= max")
    require(txn.max_accesses <= config.n_records, "txn.max_accesses cannot exceed n_records")
    require(0.0 <= txn.write_ratio <= 1.0, "txn.write_ratio must be within [0, 1]")
    require(txn.service_mean_ns > 0 and txn.service_sigma >= 0, "txn service model must be positive")

    pool = config.bufpool
    require(pool.mode in BUFPOOL_MODES, f"bufpool.mode must be one of {BUFPOOL_MODES}")
    require(pool.capacity >= 1 and pool.n_pages >= 1, "bufpool sizes must be >= 1")
    require(0.0 < pool.old_fraction < 1.0, "bufpool.old_fraction must be within (0, 1)")
    require(pool.spin_timeout_ns >= 0, "bufpool.spin_timeout_ns must be >= 0")
    require(pool.threads >= 1, "bufpool.threads must be >= 1")

    log_cfg = config.log
    require(log_cfg.devices in (1, 2), "log.devices must be 1 or 2")
    require(log_cfg.policy in LOG_POLICIES, f"log.policy must be one of {LOG_POLICIES}")
    require(log_cfg.block_size >= 1, "log.block_size must be >= 1")

    require(config.live.threads >= 1 and config.live.n_txns >= 1, "live threads and n_txns must be >= 1")
    require(config.live.time_scale > 0, "live.time_scale must be > 0")
    return config


def config_from_dict(values: Dict[str, Any]) -> SimConfig:
    config = SimConfig()
    _overlay(config, values)
    return validate(config)


def load_config(path: Union[str, Path, None] = None) -> SimConfig:
    """
    Load a TOML workload config over the defaults

    Args:
        path: TOML file; None returns validated defaults

    Raises:
        ConfigError: missing file, TOML syntax error, unknown key, bad value
    """
    if path is None:
        return validate(SimConfig())
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as handle:
            values = tomllib.load(handle)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    config = config_from_dict(values)
    logger.info(f"Loaded config {path} (scheduler={config.scheduler}, rate={config.rate_tps} tps)")
    return config


def apply_override(config: SimConfig, dotted_key: str, value: Any) -> SimConfig:
    """
    Copy of config with one dotted key replaced (e.g. "bufpool.mode")

    Raises:
        ConfigError: unknown key or invalid value
    """
    updated = copy.deepcopy(config)
    *parents, leaf = dotted_key.split(".")
    nested: Dict[str, Any] = {leaf: value}
    for parent in reversed(parents):
        nested = {parent: nested}
    _overlay(updated, nested)
    return validate(updated)


@dataclass(frozen=True)
class Environment:
    trace_dir: Path
    log_dir: Path
    log_level: str


def load_environment() -> Environment:
    """Read VARLAT_* variables, honouring a .env file in the working directory."""
    load_dotenv(find_dotenv(usecwd=True))
    level = os.environ.get("VARLAT_LOG_LEVEL", "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigError(f"VARLAT_LOG_LEVEL has an unknown level {level!r}")
    return Environment(
        trace_dir=Path(os.environ.get("VARLAT_TRACE_DIR", "traces")),
        log_dir=Path(os.environ.get("VARLAT_LOG_DIR", "logs")),
        log_level=level,
    )
