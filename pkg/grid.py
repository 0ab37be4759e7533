"""LTE FDD downlink lattice: cell configuration, trace files and OFDM (de)modulation."""
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from coding import gold_sequence
from config import ConfigError, read_kv_file, take, reject_unknown

SUBCARRIERS_PER_RB = 12
SYMBOLS_PER_SLOT = 7
SYMBOLS_PER_SUBFRAME = 14
SUBFRAMES_PER_FRAME = 10
SUBCARRIER_SPACING = 15000
SFN_PERIOD = 1024
ABS_SF_PERIOD = SFN_PERIOD * SUBFRAMES_PER_FRAME
MAX_RB = 110

# Transform size at the standard sample rate for each supported bandwidth
STANDARD_FFT = {6: 128, 15: 256, 25: 512, 50: 1024, 75: 1536, 100: 2048}
PHICH_NG = (Fraction(1, 6), Fraction(1, 2), Fraction(1), Fraction(2))

# Port-0 reference-bearing symbols within a subframe
CRS_SYMBOLS = (0, 4, 7, 11)


class TraceError(ValueError):
    """Trace file or sample-index problem."""


@dataclass(frozen=True)
class CellConfig:
    n_rb_dl: int
    pci: int = 0
    n_ports: int = 1
    fft_size: int = 0
    phich_ng: Fraction = Fraction(1)

    def __post_init__(self):
        if self.n_rb_dl not in STANDARD_FFT:
            raise ConfigError(f"n_rb_dl must be one of {sorted(STANDARD_FFT)}, got {self.n_rb_dl}")
        if not 0 <= self.pci <= 503:
            raise ConfigError(f"pci must be in [0, 503], got {self.pci}")
        if self.n_ports not in (1, 2):
            raise ConfigError(f"n_ports must be 1 or 2, got {self.n_ports}")
        if self.fft_size == 0:
            object.__setattr__(self, "fft_size", STANDARD_FFT[self.n_rb_dl])
        if self.fft_size % 128:
            raise ConfigError(f"fft_size {self.fft_size} does not give integral cyclic prefixes")
        if self.fft_size < SUBCARRIERS_PER_RB * self.n_rb_dl + 1:
            raise ConfigError(f"fft_size {self.fft_size} too small for {self.n_rb_dl} RBs")
        ng = Fraction(self.phich_ng).limit_denominator(6)
        if ng not in PHICH_NG:
            raise ConfigError(f"phich_ng must be one of 1/6, 1/2, 1, 2, got {self.phich_ng}")
        object.__setattr__(self, "phich_ng", ng)

    @classmethod
    def for_bandwidth(cls, n_rb_dl: int, pci: int = 0, n_ports: int = 1, phich_ng=Fraction(1)) -> "CellConfig":
        return cls(n_rb_dl=n_rb_dl, pci=pci, n_ports=n_ports, phich_ng=phich_ng)

    @classmethod
    def from_sample_rate(cls, n_rb_dl: int, sample_rate: float, pci: int = 0, n_ports: int = 1,
                         phich_ng=Fraction(1)) -> "CellConfig":
        """
        Build a config for a capture at an arbitrary rate.

        The transform size is sample_rate / 15 kHz and must be integral; 3/4-rate
        captures (11.52 Msps for 50 RB, 23.04 Msps for 100 RB) are accepted and
        reported through `fractional_rate`.
        """
        fft = sample_rate / SUBCARRIER_SPACING
        if abs(fft - round(fft)) > 1e-6:
            raise ConfigError(f"Sample rate {sample_rate} is not a multiple of 15 kHz")
        return cls(n_rb_dl=n_rb_dl, pci=pci, n_ports=n_ports, fft_size=int(round(fft)), phich_ng=phich_ng)

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "CellConfig":
        values = dict(values)
        cp = take(values, "cp", str, "normal")
        duplex = take(values, "duplex", str, "fdd")
        if cp != "normal" or duplex != "fdd":
            raise ConfigError(f"Only normal cyclic prefix FDD cells are supported (cp={cp}, duplex={duplex})")
        n_rb = take(values, "n_rb_dl", int)
        if n_rb is None:
            raise ConfigError("n_rb_dl is required")
        pci = take(values, "pci", int, 0)
        n_ports = take(values, "n_ports", int, 1)
        ng = take(values, "phich_ng", Fraction, Fraction(1))
        rate = take(values, "sample_rate_hz", float)
        reject_unknown(values, "cell")
        if rate is None:
            return cls.for_bandwidth(n_rb, pci, n_ports, ng)
        return cls.from_sample_rate(n_rb, rate, pci, n_ports, ng)

    @property
    def sample_rate(self) -> float:
        return float(self.fft_size * SUBCARRIER_SPACING)

    @property
    def fractional_rate(self) -> bool:
        return self.fft_size < STANDARD_FFT[self.n_rb_dl]

    @property
    def n_subcarriers(self) -> int:
        return SUBCARRIERS_PER_RB * self.n_rb_dl

    @property
    def n_id_1(self) -> int:
        return self.pci // 3

    @property
    def n_id_2(self) -> int:
        return self.pci % 3


@dataclass
class IqTrace:
    samples: np.ndarray
    sample_rate: float
    start_offset: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise TraceError(f"sample_rate must be positive, got {self.sample_rate}")
        if np.ndim(self.samples) != 1:
            raise TraceError("samples must be one-dimensional")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


class GridIndex(NamedTuple):
    sfn: int
    subframe: int
    slot: int
    symbol: int
    subcarrier: int


@dataclass
class ResourceGrid:
    cells: np.ndarray
    sfn: int = 0
    subframe: int = 0

    @classmethod
    def empty(cls, cfg: CellConfig, sfn: int = 0, subframe: int = 0) -> "ResourceGrid":
        return cls(np.zeros((cfg.n_subcarriers, SYMBOLS_PER_SUBFRAME), dtype=np.complex128), sfn, subframe)

    @property
    def abs_sf(self) -> int:
        return abs_subframe(self.sfn, self.subframe)

    def copy(self) -> "ResourceGrid":
        return ResourceGrid(self.cells.copy(), self.sfn, self.subframe)


def abs_subframe(sfn: int, subframe: int) -> int:
    return (SUBFRAMES_PER_FRAME * sfn + subframe) % ABS_SF_PERIOD


def split_abs_subframe(abs_sf: int) -> tuple[int, int]:
    abs_sf %= ABS_SF_PERIOD
    return abs_sf // SUBFRAMES_PER_FRAME, abs_sf % SUBFRAMES_PER_FRAME


@lru_cache(maxsize=None)
def cp_lengths(cfg: CellConfig) -> tuple[int, ...]:
    """Normal-CP lengths of the 14 symbols of a subframe, scaled from the 2048-point values."""
    first = 160 * cfg.fft_size // 2048
    other = 144 * cfg.fft_size // 2048
    return ((first,) + (other,) * (SYMBOLS_PER_SLOT - 1)) * 2


@lru_cache(maxsize=None)
def symbol_starts(cfg: CellConfig) -> tuple[int, ...]:
    """Offsets of each symbol's cyclic prefix from the subframe start."""
    starts, pos = [], 0
    for cp in cp_lengths(cfg):
        starts.append(pos)
        pos += cp + cfg.fft_size
    return tuple(starts)


def samples_per_subframe(cfg: CellConfig) -> int:
    return 15 * cfg.fft_size


def samples_per_frame(cfg: CellConfig) -> int:
    return SUBFRAMES_PER_FRAME * samples_per_subframe(cfg)


@lru_cache(maxsize=None)
def subcarrier_bins(cfg: CellConfig) -> np.ndarray:
    # DC is left unused; lower half wraps to the top of the transform
    k = np.arange(cfg.n_subcarriers)
    half = cfg.n_subcarriers // 2
    bins = np.where(k < half, cfg.fft_size - half + k, k - half + 1)
    bins.setflags(write=False)
    return bins


def ofdm_modulate(grid: ResourceGrid, cfg: CellConfig) -> np.ndarray:
    """
    Turn one subframe grid into time-domain samples with cyclic prefixes.

    Args:
        grid: Resource grid (or raw cell matrix) of shape (12*n_rb_dl, 14)
        cfg: Cell configuration

    Returns:
        complex128 array of 15 * fft_size samples
    """
    cells = grid.cells if isinstance(grid, ResourceGrid) else np.asarray(grid)
    if cells.shape != (cfg.n_subcarriers, SYMBOLS_PER_SUBFRAME):
        raise ConfigError(f"Grid shape {cells.shape} does not match {cfg.n_subcarriers}x{SYMBOLS_PER_SUBFRAME}")

    n = cfg.fft_size
    freq = np.zeros((SYMBOLS_PER_SUBFRAME, n), dtype=np.complex128)
    freq[:, subcarrier_bins(cfg)] = cells.T
    body = np.fft.ifft(freq, axis=1) * np.sqrt(n)

    pieces = []
    for l, cp in enumerate(cp_lengths(cfg)):
        pieces.append(body[l, n - cp:])
        pieces.append(body[l])
    return np.concatenate(pieces)


def ofdm_demodulate(trace: IqTrace, cfg: CellConfig, subframe_start: int, cfo_hz: float = 0.0,
                    symbol_shifts=None, sfn: int = 0, subframe: int = 0) -> ResourceGrid:
    """
    Demodulate one subframe starting at `subframe_start`.

    Args:
        trace: Input trace
        cfg: Cell configuration
        subframe_start: Sample index of the subframe's first cyclic prefix
        cfo_hz: Frequency offset to remove, referenced to absolute sample index
        symbol_shifts: Optional 14-entry sequence displacing each symbol's FFT
            window by that many samples (positive = later)
        sfn: Frame number recorded on the grid
        subframe: Subframe number recorded on the grid

    Returns:
        ResourceGrid with cyclic prefixes removed

    Raises:
        TraceError: Sample rate mismatch or window outside the trace
    """
    cells = demodulate_symbols(trace, cfg, subframe_start, range(SYMBOLS_PER_SUBFRAME), symbol_shifts, cfo_hz)
    return ResourceGrid(cells, sfn, subframe)


def demodulate_symbols(trace: IqTrace, cfg: CellConfig, subframe_start: int, symbols, symbol_shifts=None,
                       cfo_hz: float = 0.0) -> np.ndarray:
    """Cells of the selected subframe symbols only, shape (n_subcarriers, len(symbols))."""
    if abs(trace.sample_rate - cfg.sample_rate) > 1e-3:
        raise TraceError(f"Trace rate {trace.sample_rate} does not match cell rate {cfg.sample_rate}")

    n = cfg.fft_size
    symbols = np.asarray(list(symbols), dtype=np.int64)
    offsets = (np.asarray(symbol_starts(cfg)) + np.asarray(cp_lengths(cfg)))[symbols]
    if symbol_shifts is not None:
        offsets = offsets + np.asarray(symbol_shifts, dtype=np.int64)[symbols]
    first = subframe_start + int(offsets.min())
    last = subframe_start + int(offsets.max()) + n
    if subframe_start < 0 or first < 0 or last > len(trace.samples) or subframe_start + samples_per_subframe(cfg) > len(trace.samples):
        raise TraceError(f"Subframe at {subframe_start} is outside the trace ({len(trace.samples)} samples)")

    index = (subframe_start + offsets)[:, None] + np.arange(n)[None, :]
    block = np.asarray(trace.samples[first:last], dtype=np.complex128)[index - first]
    if cfo_hz:
        absolute = index + (trace.start_offset or 0)
        block = block * np.exp(-2j * np.pi * cfo_hz * absolute / trace.sample_rate)

    freq = np.fft.fft(block, axis=1) / np.sqrt(n)
    return freq[:, subcarrier_bins(cfg)].T.copy()


def crs_subcarriers(cfg: CellConfig, symbol: int, port: int = 0) -> np.ndarray:
    """Reference-signal subcarriers of `port` in subframe symbol `symbol` (empty if none)."""
    l = symbol % SYMBOLS_PER_SLOT
    if l == 0:
        v = 0 if port == 0 else 3
    elif l == 4:
        v = 3 if port == 0 else 0
    else:
        return np.zeros(0, dtype=np.int64)
    return 6 * np.arange(2 * cfg.n_rb_dl) + (v + cfg.pci) % 6


@lru_cache(maxsize=None)
def crs_mask(cfg: CellConfig, ports: tuple[int, ...] = (0,)) -> np.ndarray:
    mask = np.zeros((cfg.n_subcarriers, SYMBOLS_PER_SUBFRAME), dtype=bool)
    for port in ports:
        for l in CRS_SYMBOLS:
            mask[crs_subcarriers(cfg, l, port), l] = True
    mask.setflags(write=False)
    return mask


def crs_positions(cfg: CellConfig, subframe: int, sfn: int = 0) -> frozenset:
    """Port-0 reference-signal positions of one subframe as GridIndex values."""
    if not 0 <= subframe < SUBFRAMES_PER_FRAME:
        raise ValueError(f"subframe must be in [0, 9], got {subframe}")
    positions = set()
    for l in CRS_SYMBOLS:
        for k in crs_subcarriers(cfg, l):
            positions.add(GridIndex(sfn, subframe, l // SYMBOLS_PER_SLOT, l % SYMBOLS_PER_SLOT, int(k)))
    return frozenset(positions)


@lru_cache(maxsize=4096)
def crs_values(cfg: CellConfig, subframe: int, symbol: int) -> np.ndarray:
    """Pilot symbols at crs_subcarriers(cfg, symbol) for the given subframe."""
    ns = 2 * subframe + symbol // SYMBOLS_PER_SLOT
    l = symbol % SYMBOLS_PER_SLOT
    c_init = (1 << 10) * (7 * (ns + 1) + l + 1) * (2 * cfg.pci + 1) + 2 * cfg.pci + 1
    c = gold_sequence(c_init, 4 * MAX_RB).astype(np.float64)
    m = np.arange(2 * cfg.n_rb_dl) + MAX_RB - cfg.n_rb_dl
    values = ((1 - 2 * c[2 * m]) + 1j * (1 - 2 * c[2 * m + 1])) / np.sqrt(2)
    values.setflags(write=False)
    return values


def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def read_trace(path) -> IqTrace:
    """
    Open a raw float32 I/Q trace and its `.meta` sidecar.

    Samples are memory-mapped as little-endian complex64; callers widen the
    windows they touch.
    """
    path = Path(path)
    try:
        meta = read_kv_file(meta_path(path))
        size = path.stat().st_size
    except OSError as e:
        raise TraceError(f"Cannot open trace {path}: {e}")
    if "sample_rate_hz" not in meta:
        raise TraceError(f"{meta_path(path)} has no sample_rate_hz")
    if size % 8:
        raise TraceError(f"{path} size {size} is not a whole number of float32 I/Q pairs")
    if size == 0:
        samples = np.zeros(0, dtype=np.complex64)
    else:
        samples = np.memmap(path, dtype="<c8", mode="r")
    return IqTrace(samples, float(meta["sample_rate_hz"]), meta=meta)


def write_trace(path, samples, sample_rate: float, n_rb_dl: Optional[int] = None, pci: Optional[int] = None,
                append: bool = False) -> None:
    path = Path(path)
    with open(path, "ab" if append else "wb") as f:
        np.asarray(samples, dtype="<c8").tofile(f)
    if append and meta_path(path).exists():
        return
    lines = [f"sample_rate_hz={sample_rate:.0f}"]
    if n_rb_dl is not None:
        lines.append(f"n_rb_dl={n_rb_dl}")
    if pci is not None:
        lines.append(f"pci={pci}")
    meta_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logging.info(f"Wrote trace metadata {meta_path(path)}")


def cell_config_for_trace(trace: IqTrace, n_rb_dl: Optional[int] = None, pci: Optional[int] = None) -> CellConfig:
    """Cell configuration implied by a trace's metadata, with optional overrides."""
    n_rb = n_rb_dl if n_rb_dl is not None else int(trace.meta.get("n_rb_dl", 6))
    cell_id = pci if pci is not None else int(trace.meta.get("pci", 0))
    return CellConfig.from_sample_rate(n_rb, trace.sample_rate, pci=cell_id)


SYNC_SUBFRAMES = (0, 5)
SYNC_SYMBOLS = (5, 6)
PBCH_SYMBOLS = (7, 8, 9, 10)


def central_rows(cfg: CellConfig, width: int = 72) -> np.ndarray:
    """The `width` grid rows centred on DC."""
    return np.arange(width) + 6 * cfg.n_rb_dl - width // 2


@lru_cache(maxsize=None)
def reserved_mask(cfg: CellConfig, subframe: int) -> np.ndarray:
    """REs that never carry shared-channel data: CRS of the configured ports, PSS/SSS and PBCH."""
    mask = crs_mask(cfg, tuple(range(cfg.n_ports))).copy()
    rows = central_rows(cfg)
    if subframe in SYNC_SUBFRAMES:
        mask[np.ix_(rows, SYNC_SYMBOLS)] = True
    if subframe == 0:
        mask[np.ix_(rows, PBCH_SYMBOLS)] = True
    mask.setflags(write=False)
    return mask


def pdsch_positions(cfg: CellConfig, subframe: int, first_symbol: int, rbs) -> tuple[np.ndarray, np.ndarray]:
    """
    Data REs of the given resource blocks, frequency-first within each symbol.

    Args:
        cfg: Cell configuration
        subframe: Subframe number (selects sync/PBCH exclusions)
        first_symbol: First data symbol (the CFI)
        rbs: Resource block indices

    Returns:
        (rows, symbols) index arrays in mapping order
    """
    rbs = sorted(set(int(r) for r in rbs))
    if any(r < 0 or r >= cfg.n_rb_dl for r in rbs):
        raise TraceError(f"Resource blocks {rbs} outside 0..{cfg.n_rb_dl - 1}")
    rows = (SUBCARRIERS_PER_RB * np.asarray(rbs, dtype=np.int64)[:, None] + np.arange(SUBCARRIERS_PER_RB)).reshape(-1)
    free = ~reserved_mask(cfg, subframe)[rows, first_symbol:]
    sym_idx, row_idx = np.nonzero(free.T)
    return rows[row_idx], sym_idx + first_symbol
