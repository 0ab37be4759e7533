import os
import hashlib
import logging
from functools import lru_cache
from pathlib import Path

# Directory holding the shipped code tables (polynomials, QPP, TBS)
DATA_DIR = Path(os.environ.get("OWL_DATA_DIR", str(Path(__file__).resolve().parent / "data")))

# Thread-pool width for tuner, simulator and pipeline fan-out
WORKERS = int(os.environ.get("OWL_WORKERS", "4"))

LOG_LEVEL = os.environ.get("OWL_LOG_LEVEL", "WARNING")

CHECKSUM_FILE = "SHA256SUMS"


class ConfigError(ValueError):
    """Invalid configuration value, config file, or data table."""


def parse_kv_lines(lines) -> dict[str, str]:
    """
    Parse plain-text key=value lines.

    Blank lines and lines starting with '#' are ignored. Whitespace around
    keys and values is stripped.

    Args:
        lines: Iterable of text lines

    Returns:
        Mapping of key to raw string value

    Raises:
        ConfigError: On a line without '=' or a repeated key
    """
    values: dict[str, str] = {}
    for number, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"Line {number}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in values:
            raise ConfigError(f"Line {number}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def read_kv_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_kv_lines(f)


def take(values: dict[str, str], key: str, convert, default=None):
    """Pop `key` from a parsed config and convert it, or return the default."""
    if key not in values:
        return default
    raw = values.pop(key)
    try:
        return convert(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Bad value for {key}: {raw!r} ({e})")


def parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw}")


def parse_int_list(raw: str) -> list[int]:
    return [int(tok, 0) for tok in raw.replace(",", " ").split()]


def reject_unknown(values: dict[str, str], what: str) -> None:
    if values:
        raise ConfigError(f"Unknown {what} keys: {', '.join(sorted(values))}")


@lru_cache(maxsize=None)
def _expected_digests() -> dict[str, str]:
    digests = {}
    path = DATA_DIR / CHECKSUM_FILE
    if not path.exists():
        logging.warning(f"No {CHECKSUM_FILE} in {DATA_DIR}; data tables are not integrity-checked")
        return digests
    for line in path.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if len(parts) == 2:
            digests[parts[1].lstrip("*")] = parts[0]
    return digests


@lru_cache(maxsize=None)
def data_table(name: str) -> tuple[tuple[str, ...], ...]:
    """
    Load a shipped data table as whitespace-split token rows.

    The file digest is checked against SHA256SUMS before parsing. Comment
    lines ('#') and blank lines are dropped.

    Args:
        name: File name inside DATA_DIR

    Returns:
        Tuple of token tuples, one per content line
    """
    path = DATA_DIR / name
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"Cannot read data table {path}: {e}")

    expected = _expected_digests().get(name)
    if expected is not None:
        actual = hashlib.sha256(blob).hexdigest()
        if actual != expected:
            raise ConfigError(f"Integrity check failed for {name}: {actual} != {expected}")

    rows = []
    for line in blob.decode("utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rows.append(tuple(line.split()))
    return tuple(rows)
