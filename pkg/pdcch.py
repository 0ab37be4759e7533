"""Control region decoding: equalization, PCFICH, CCE layout, energy gating, blind DCI search and DCI parsing."""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import NamedTuple, Optional, Protocol

import numpy as np

import coding
from config import ConfigError, data_table
from grid import (
    CRS_SYMBOLS, MAX_RB, SYMBOLS_PER_SUBFRAME, CellConfig, ResourceGrid, abs_subframe,
    crs_subcarriers, crs_values,
)

# Energy gate: candidate power must exceed this fraction of the CRS power
ENERGY_RHO = 0.5
# Re-encode mismatch allowed for CRC-admitted candidates
CONSISTENCY_MAX = 0.1
# Smaller same-start aggregation wins when its mismatch is lower by more than this
REFINE_MARGIN = 0.05
CFI_MIN_AGREEMENT = 0.6
CFI_MIN_MARGIN = 0.3
# Noise variance floor relative to CRS power
NOISE_FLOOR_MIN = 1e-6

AGGREGATIONS = (8, 4, 2, 1)
REG_PER_CCE = 9
RE_PER_CCE = 36
BITS_PER_CCE = 72

# Size assignment order; format 0 shares format 1A's size and is told apart by the flag bit
FORMAT_ORDER = ("1A", "1C", "1", "1B", "1D", "2A", "2")
AMBIGUOUS_SIZES = frozenset({12, 14, 16, 20, 24, 26, 32, 40, 44, 56})

RA_RNTI_MIN, RA_RNTI_MAX = 1, 10
P_RNTI = 0xFFFE
SI_RNTI = 0xFFFF
C_RNTI_MIN, C_RNTI_MAX = 0x003D, 0xFFF3

CFI_CODEWORDS = {
    1: np.array([int(b) for b in ("011" * 11)[:32]], dtype=np.uint8),
    2: np.array([int(b) for b in ("101" * 11)[:32]], dtype=np.uint8),
    3: np.array([int(b) for b in ("110" * 11)[:32]], dtype=np.uint8),
}


class CfiUncertain(Exception):
    """PCFICH codeword not clearly identified."""

    def __init__(self, message: str, agreement: float = 0.0, margin: float = 0.0):
        super().__init__(message)
        self.agreement = agreement
        self.margin = margin


class ParseReject(Exception):
    """Decoded payload is not a well-formed DCI."""


class Admission(Enum):
    LIST = "list-match"
    RA = "ra-rnti"
    RESERVED = "reserved"
    DEFER = "reencode"
    REJECT = "reject"


ADMISSION_PRIORITY = {Admission.LIST: 0, Admission.RA: 1, Admission.RESERVED: 2, Admission.DEFER: 3}


class RntiOracle(Protocol):
    def __call__(self, rnti: int) -> Admission: ...

    def verify(self, soft: np.ndarray, payload: np.ndarray, rnti: int) -> bool: ...


def is_common_rnti(rnti: int) -> bool:
    return RA_RNTI_MIN <= rnti <= RA_RNTI_MAX or rnti in (P_RNTI, SI_RNTI)


class Cfi(NamedTuple):
    """Decoded control format indicator with its codeword agreement."""
    value: int
    agreement: float = 1.0
    margin: float = 1.0

    def __int__(self) -> int:
        return self.value


@dataclass(frozen=True)
class CandidateLocation:
    cce_start: int
    aggregation: int
    re_rows: np.ndarray = field(compare=False, repr=False)
    re_cols: np.ndarray = field(compare=False, repr=False)

    @property
    def key(self) -> tuple[int, int]:
        return self.cce_start, self.aggregation

    @property
    def cces(self) -> range:
        return range(self.cce_start, self.cce_start + self.aggregation)

    @property
    def re_set(self) -> frozenset:
        return frozenset(zip(self.re_rows.tolist(), self.re_cols.tolist()))

    @property
    def n_bits(self) -> int:
        return BITS_PER_CCE * self.aggregation


@dataclass
class Dci:
    format: str
    direction: str
    rnti: int
    mcs: int
    n_rb: int
    tbs: Optional[int]
    location: Optional[CandidateLocation] = None
    payload: np.ndarray = field(default=None, repr=False)
    decode_path: str = ""
    rbs: tuple = field(default=(), repr=False)
    fields: dict = field(default_factory=dict, repr=False)
    ra_type1: bool = False
    mismatch: float = 0.0

    @property
    def retransmission(self) -> bool:
        return self.tbs is None

    @property
    def cce_start(self) -> int:
        return self.location.cce_start if self.location is not None else -1

    @property
    def aggregation(self) -> int:
        return self.location.aggregation if self.location is not None else 0


@dataclass
class SubframeReport:
    sfn: int
    subframe: int
    cfi: Cfi
    dcis: list
    uncertain: list
    noise_floor: float
    crs_power: float = 0.0
    cfi_uncertain: bool = False
    gated: int = 0
    parse_rejects: int = 0
    collisions: int = 0

    @property
    def abs_sf(self) -> int:
        return abs_subframe(self.sfn, self.subframe)


# --- Equalization -----------------------------------------------------------

@dataclass
class Equalized:
    grid: ResourceGrid
    cells: np.ndarray
    channel: np.ndarray
    noise_var: np.ndarray
    noise_floor: float
    crs_power: float


def _nearest_crs_symbol(symbol: int) -> int:
    return min(CRS_SYMBOLS, key=lambda c: (abs(c - symbol), c))


def equalize(grid: ResourceGrid, cfg: CellConfig, subframe: Optional[int] = None) -> Equalized:
    """
    Least-squares channel estimate at port-0 CRS and zero-forcing equalization.

    Pilots are interpolated linearly in frequency and held from the nearest
    CRS symbol in time. The noise variance comes from differences between
    neighbouring pilot estimates and is floored relative to the CRS power.

    Args:
        grid: Received subframe
        cfg: Cell configuration
        subframe: Subframe number for the pilot sequence (defaults to grid.subframe)

    Returns:
        Equalized cells plus channel, per-RE noise variance after
        equalization, the raw noise floor and the mean CRS power
    """
    subframe = grid.subframe if subframe is None else subframe
    cells = grid.cells
    all_k = np.arange(cfg.n_subcarriers)
    estimates, diffs, powers = {}, [], []
    for l in CRS_SYMBOLS:
        k = crs_subcarriers(cfg, l)
        y = cells[k, l]
        h = y / crs_values(cfg, subframe, l)
        powers.append(np.abs(y) ** 2)
        diffs.append(np.diff(h))
        estimates[l] = np.interp(all_k, k, h.real) + 1j * np.interp(all_k, k, h.imag)

    crs_power = float(np.mean(np.concatenate(powers)))
    floor = NOISE_FLOOR_MIN * crs_power if crs_power > 0 else np.finfo(np.float64).tiny
    noise = max(float(np.mean(np.abs(np.concatenate(diffs)) ** 2) / 2), floor)

    channel = np.stack([estimates[_nearest_crs_symbol(l)] for l in range(SYMBOLS_PER_SUBFRAME)], axis=1)
    gain = np.abs(channel) ** 2
    usable = gain > floor
    safe_channel = np.where(usable, channel, 1.0)
    eq_cells = np.where(usable, cells / safe_channel, 0.0)
    noise_var = np.where(usable, noise / np.where(usable, gain, 1.0), np.inf)
    return Equalized(grid, eq_cells, channel, noise_var, noise, crs_power)


# --- Control region layout --------------------------------------------------

@dataclass(eq=False)
class ControlLayout:
    cfi: int
    n_reg: int
    n_cce: int
    cce_rows: np.ndarray
    cce_cols: np.ndarray
    pcfich_rows: np.ndarray
    pcfich_cols: np.ndarray
    phich_rows: np.ndarray
    phich_cols: np.ndarray


def _regs_in_symbol(cfg: CellConfig, symbol: int) -> list[tuple[int, np.ndarray]]:
    """(first subcarrier, 4 data subcarriers) for each REG of a control symbol."""
    if symbol == 0:
        # ports 0 and 1 reference positions are always skipped
        v = cfg.pci % 3
        regs = []
        for start in range(0, cfg.n_subcarriers, 6):
            k = np.arange(start, start + 6)
            regs.append((start, k[(k - v) % 3 != 0]))
        return regs
    return [(start, np.arange(start, start + 4)) for start in range(0, cfg.n_subcarriers, 4)]


def phich_groups(cfg: CellConfig) -> int:
    return math.ceil(cfg.phich_ng * cfg.n_rb_dl / 8)


@lru_cache(maxsize=None)
def control_layout(cfg: CellConfig, cfi: int) -> ControlLayout:
    """
    Resource mapping of the control region for a given CFI.

    PCFICH takes four symbol-0 REGs at PCI-dependent positions, PHICH takes
    three REGs per group among the rest of symbol 0, and the remaining REGs
    of symbols 0..cfi-1 are numbered time-first. PDCCH quadruplets are
    sub-block interleaved and cyclically shifted by the PCI before landing
    on that numbering.
    """
    cfi = int(cfi)
    if cfi not in (1, 2, 3):
        raise ConfigError(f"CFI must be 1, 2 or 3, got {cfi}")
    per_symbol = [_regs_in_symbol(cfg, l) for l in range(cfi)]
    sym0 = per_symbol[0]
    n0 = len(sym0)

    pcfich = [(cfg.pci % n0 + (i * cfg.n_rb_dl) // 2) % n0 for i in range(4)]
    remaining = [j for j in range(n0) if j not in pcfich]
    n_left = len(remaining)
    phich = []
    for m in range(phich_groups(cfg)):
        for i in range(3):
            j = remaining[(cfg.pci + m + (i * n_left) // 3) % n_left]
            if j not in phich:
                phich.append(j)
    taken = set(pcfich) | set(phich)

    numbered = []
    for l, regs in enumerate(per_symbol):
        for j, (start, ks) in enumerate(regs):
            if l == 0 and j in taken:
                continue
            numbered.append((start, l, ks))
    numbered.sort(key=lambda reg: (reg[0], reg[1]))

    n_quad = len(numbered)
    pattern = coding.subblock_pattern(n_quad)
    perm = pattern[pattern >= 0]
    quad_to_reg = np.empty(n_quad, dtype=np.int64)
    quad_to_reg[perm[(np.arange(n_quad) + cfg.pci) % n_quad]] = np.arange(n_quad)

    n_cce = n_quad // REG_PER_CCE
    rows = np.empty((n_cce, RE_PER_CCE), dtype=np.int64)
    cols = np.empty((n_cce, RE_PER_CCE), dtype=np.int64)
    for q in range(n_cce * REG_PER_CCE):
        _, l, ks = numbered[quad_to_reg[q]]
        c, slot = divmod(q, REG_PER_CCE)
        rows[c, 4 * slot:4 * slot + 4] = ks
        cols[c, 4 * slot:4 * slot + 4] = l

    def positions(indices):
        r = np.concatenate([sym0[j][1] for j in indices]) if indices else np.zeros(0, dtype=np.int64)
        return r, np.zeros(len(r), dtype=np.int64)

    pcfich_rows, pcfich_cols = positions(pcfich)
    phich_rows, phich_cols = positions(phich)
    for arr in (rows, cols, pcfich_rows, pcfich_cols, phich_rows, phich_cols):
        arr.setflags(write=False)
    return ControlLayout(cfi, n_quad, n_cce, rows, cols, pcfich_rows, pcfich_cols, phich_rows, phich_cols)


@lru_cache(maxsize=None)
def _locations(cfg: CellConfig, cfi: int) -> tuple[CandidateLocation, ...]:
    layout = control_layout(cfg, cfi)
    locations = []
    for agg in AGGREGATIONS:
        for start in range(0, layout.n_cce - agg + 1, agg):
            rows = layout.cce_rows[start:start + agg].reshape(-1)
            cols = layout.cce_cols[start:start + agg].reshape(-1)
            locations.append(CandidateLocation(start, agg, rows, cols))
    return tuple(locations)


def enumerate_locations(cfi, cfg: CellConfig) -> list[CandidateLocation]:
    """Every aggregation-aligned candidate, aggregation descending then cce_start ascending."""
    return list(_locations(cfg, int(cfi)))


# --- PCFICH -----------------------------------------------------------------

def pcfich_c_init(cfg: CellConfig, subframe: int) -> int:
    return (subframe + 1) * (2 * cfg.pci + 1) * 512 + cfg.pci


def pdcch_c_init(cfg: CellConfig, subframe: int) -> int:
    return subframe * 512 + cfg.pci


def encode_pcfich(cfg: CellConfig, subframe: int, cfi: int) -> np.ndarray:
    """16 PCFICH symbols in mapping order."""
    return coding.qpsk_map(coding.scramble_bits(CFI_CODEWORDS[int(cfi)], pcfich_c_init(cfg, subframe)))


def cfi_decode(eq: Equalized, cfg: CellConfig, subframe: Optional[int] = None) -> Cfi:
    """
    Despread the PCFICH and pick the nearest CFI codeword by hard-bit agreement.

    Raises:
        CfiUncertain: best agreement below CFI_MIN_AGREEMENT or runner-up within CFI_MIN_MARGIN
    """
    subframe = eq.grid.subframe if subframe is None else subframe
    layout = control_layout(cfg, 1)
    rows, cols = layout.pcfich_rows, layout.pcfich_cols
    llr = coding.qpsk_soft_demap(eq.cells[rows, cols], eq.noise_var[rows, cols])
    bits = coding.hard_decision(coding.descramble_soft(llr, pcfich_c_init(cfg, subframe)))
    agreement = {value: float(np.mean(bits == codeword)) for value, codeword in CFI_CODEWORDS.items()}
    ranked = sorted(agreement, key=lambda value: (-agreement[value], value))
    best, second = agreement[ranked[0]], agreement[ranked[1]]
    if best < CFI_MIN_AGREEMENT or best - second < CFI_MIN_MARGIN:
        raise CfiUncertain(f"PCFICH agreement {best:.2f}, runner-up {second:.2f}", best, best - second)
    return Cfi(ranked[0], best, best - second)


# --- Energy gate ------------------------------------------------------------

def energy_gate(grid: ResourceGrid, location: CandidateLocation, reference_power: float, rho: float = ENERGY_RHO) -> bool:
    """True when the candidate and each of its CCEs carry more than rho x reference power."""
    if reference_power <= 0:
        return False
    power = np.abs(grid.cells[location.re_rows, location.re_cols]) ** 2
    per_cce = power.reshape(location.aggregation, RE_PER_CCE).mean(axis=1)
    threshold = rho * reference_power
    return bool(power.mean() > threshold and np.all(per_cce > threshold))


# --- DCI formats ------------------------------------------------------------

def riv_bits(n: int) -> int:
    return (n * (n + 1) // 2 - 1).bit_length()


def rbg_size(n_rb_dl: int) -> int:
    if n_rb_dl <= 10:
        return 1
    if n_rb_dl <= 26:
        return 2
    if n_rb_dl <= 63:
        return 3
    return 4


def rbg_count(n_rb_dl: int) -> int:
    return math.ceil(n_rb_dl / rbg_size(n_rb_dl))


def gap_1c(n_rb_dl: int) -> int:
    if n_rb_dl <= 10:
        return math.ceil(n_rb_dl / 2)
    for upper, gap in ((11, 4), (19, 8), (26, 12), (44, 18), (63, 27), (79, 32), (110, 48)):
        if n_rb_dl <= upper:
            return gap
    raise ConfigError(f"No compact-assignment gap for {n_rb_dl} RBs")


def vrb_1c(n_rb_dl: int) -> tuple[int, int]:
    """(number of addressable VRBs, allocation step) for format 1C."""
    gap = gap_1c(n_rb_dl)
    step = 2 if n_rb_dl < 50 else 4
    return 2 * min(gap, n_rb_dl - gap), step


@dataclass(frozen=True)
class DciFormat:
    name: str
    fields: tuple
    size: int

    @property
    def direction(self) -> str:
        return "uplink" if self.name == "0" else "downlink"


@lru_cache(maxsize=None)
def dci_formats(cfg: CellConfig) -> dict[str, DciFormat]:
    """Field layouts and payload sizes of every implemented format for this bandwidth."""
    n = cfg.n_rb_dl
    riv = riv_bits(n)
    header = 1 if n > 10 else 0
    bitmap = rbg_count(n)
    n_vrb, step = vrb_1c(n)
    riv_1c = riv_bits(n_vrb // step)
    transport = (("mcs", 5), ("harq", 3), ("ndi", 1), ("rv", 2), ("tpc", 2))
    layouts = {
        "0": (("flag", 1), ("hopping", 1), ("riv", riv), ("mcs", 5), ("ndi", 1), ("tpc", 2),
              ("cyclic_shift", 3), ("cqi_request", 1)),
        "1A": (("flag", 1), ("distributed", 1), ("riv", riv)) + transport,
        "1C": (("gap", 1 if n >= 50 else 0), ("riv", riv_1c), ("tbs_index", 5)),
        "1": (("ra_type", header), ("bitmap", bitmap)) + transport,
        "1B": (("distributed", 1), ("riv", riv)) + transport + (("tpmi", 2), ("pmi_confirm", 1)),
        "1D": (("distributed", 1), ("riv", riv)) + transport + (("tpmi", 2), ("power_offset", 1)),
        "2A": (("ra_type", header), ("bitmap", bitmap), ("tpc", 2), ("harq", 3), ("swap", 1),
               ("mcs", 5), ("ndi", 1), ("rv", 2), ("mcs2", 5), ("ndi2", 1), ("rv2", 2)),
    }
    layouts["2"] = layouts["2A"] + (("precoding", 3),)
    layouts = {name: tuple(f for f in fields if f[1] > 0) for name, fields in layouts.items()}
    base = {name: sum(w for _, w in fields) for name, fields in layouts.items()}

    sizes, used = {}, set()
    for name in FORMAT_ORDER:
        size = max(base["0"], base["1A"]) if name == "1A" else base[name]
        while size in used or (name != "1C" and size in AMBIGUOUS_SIZES):
            size += 1
        sizes[name] = size
        used.add(size)
    sizes["0"] = sizes["1A"]
    return {name: DciFormat(name, layouts[name], sizes[name]) for name in layouts}


def dci_sizes(cfg: CellConfig) -> list[int]:
    """Distinct payload sizes in search order."""
    formats = dci_formats(cfg)
    return [formats[name].size for name in FORMAT_ORDER]


def pack_dci(format_name: str, cfg: CellConfig, values: dict) -> np.ndarray:
    """Serialize DCI fields, MSB first, zero-padded to the format's size. Inverse of parse_dci."""
    formats = dci_formats(cfg)
    if format_name not in formats:
        raise ConfigError(f"Unknown DCI format {format_name!r}")
    fmt = formats[format_name]
    values = dict(values)
    if format_name in ("0", "1A"):
        values["flag"] = 0 if format_name == "0" else 1
    pieces = []
    for name, width in fmt.fields:
        value = int(values.get(name, 0))
        if not 0 <= value < (1 << width):
            raise ConfigError(f"Field {name}={value} does not fit in {width} bits of format {format_name}")
        pieces.append(coding.int_to_bits(value, width))
    bits = np.concatenate(pieces)
    return np.concatenate([bits, np.zeros(fmt.size - len(bits), dtype=np.uint8)])


def riv_encode(start: int, length: int, n: int) -> int:
    if length < 1 or start < 0 or start + length > n:
        raise ConfigError(f"Allocation start={start} length={length} outside {n} blocks")
    if length - 1 <= n // 2:
        return n * (length - 1) + start
    return n * (n - length + 1) + (n - 1 - start)


def riv_decode(riv: int, n: int) -> tuple[int, int]:
    """(start, length) of a contiguous allocation; ParseReject when out of range."""
    if riv >= n * (n + 1) // 2:
        raise ParseReject(f"RIV {riv} out of range for {n} blocks")
    a, b = divmod(riv, n)
    if a + b < n:
        length, start = a + 1, b
    else:
        length, start = n - a + 1, n - 1 - b
    if length < 1 or start < 0 or start + length > n:
        raise ParseReject(f"RIV {riv} gives invalid allocation ({start}, {length})")
    return start, length


def _type0_rbs(bitmap: np.ndarray, n_rb_dl: int) -> tuple[int, ...]:
    p = rbg_size(n_rb_dl)
    rbs = []
    for i, bit in enumerate(bitmap):
        if bit:
            rbs.extend(range(i * p, min((i + 1) * p, n_rb_dl)))
    return tuple(rbs)


def _type1_rbs(bitmap: np.ndarray, n_rb_dl: int) -> tuple[int, ...]:
    p = rbg_size(n_rb_dl)
    subset_bits = (p - 1).bit_length()
    subset = coding.bits_to_int(bitmap[:subset_bits]) if subset_bits else 0
    if subset >= p:
        raise ParseReject(f"Type-1 subset {subset} >= {p}")
    shifted = int(bitmap[subset_bits])
    rest = bitmap[subset_bits + 1:]
    members = [r for r in range(n_rb_dl) if (r // p) % p == subset]
    offset = max(len(members) - len(rest), 0) if shifted else 0
    rbs = []
    for i, bit in enumerate(rest):
        if bit:
            if i + offset >= len(members):
                raise ParseReject(f"Type-1 bit {i} beyond subset {subset}")
            rbs.append(members[i + offset])
    return tuple(rbs)


@lru_cache(maxsize=None)
def _tbs_tables() -> tuple[dict[str, tuple[int, ...]], np.ndarray]:
    mcs_map, rows = {}, {}
    for row in data_table("tbs_table.dat"):
        if row[0] == "mcs":
            mcs_map[row[1]] = tuple(int(v) for v in row[2:])
        elif row[0] == "itbs":
            rows[int(row[1])] = [int(v) for v in row[2:]]
    if set(mcs_map) != {"dl", "ul"} or any(len(v) != 32 for v in mcs_map.values()):
        raise ConfigError("tbs_table.dat needs 32-entry 'mcs dl' and 'mcs ul' rows")
    table = np.array([rows[i] for i in range(len(rows))], dtype=np.int64)
    if table.shape != (27, MAX_RB):
        raise ConfigError(f"tbs_table.dat has shape {table.shape}, expected (27, {MAX_RB})")
    table.setflags(write=False)
    return mcs_map, table


@lru_cache(maxsize=None)
def tbs_1c_table() -> tuple[int, ...]:
    values = tuple(int(tok) for row in data_table("tbs_1c.dat") for tok in row)
    if len(values) != 32:
        raise ConfigError(f"tbs_1c.dat has {len(values)} entries, expected 32")
    return values


def tbs_for_index(itbs: int, n_rb: int) -> int:
    _, table = _tbs_tables()
    if not 0 <= itbs < table.shape[0]:
        raise ValueError(f"TBS index {itbs} outside 0..{table.shape[0] - 1}")
    if not 1 <= n_rb <= MAX_RB:
        raise ValueError(f"n_rb must be in [1, {MAX_RB}], got {n_rb}")
    return int(table[itbs, n_rb - 1])


def tbs_lookup(mcs: int, n_rb: int, direction: str = "downlink") -> Optional[int]:
    """
    Transport block size for an MCS and allocation size.

    Returns:
        TBS in bits, or None for a retransmission MCS (29-31)
    """
    mcs_map, _ = _tbs_tables()
    if not 0 <= mcs <= 31:
        raise ValueError(f"mcs must be in [0, 31], got {mcs}")
    itbs = mcs_map["ul" if direction == "uplink" else "dl"][mcs]
    if itbs < 0:
        return None
    return tbs_for_index(itbs, n_rb)


def _read_fields(payload: np.ndarray, fmt: DciFormat) -> dict[str, int]:
    values, pos = {}, 0
    for name, width in fmt.fields:
        values[name] = coding.bits_to_int(payload[pos:pos + width])
        pos += width
    if payload[pos:].any():
        raise ParseReject(f"Non-zero padding in format {fmt.name}")
    return values


def _field_bits(payload: np.ndarray, fmt: DciFormat, name: str) -> np.ndarray:
    pos = 0
    for field_name, width in fmt.fields:
        if field_name == name:
            return payload[pos:pos + width]
        pos += width
    raise KeyError(name)


def _dual_tbs(values: dict, n_rb: int) -> tuple[int, Optional[int]]:
    total, mcs, retx = 0, None, False
    for suffix in ("", "2"):
        block_mcs, block_rv = values["mcs" + suffix], values["rv" + suffix]
        if block_mcs == 0 and block_rv == 1:
            continue
        tbs = tbs_lookup(block_mcs, n_rb)
        mcs = block_mcs if mcs is None else mcs
        if tbs is None:
            retx = True
        else:
            total += tbs
    if mcs is None:
        raise ParseReject("Both transport blocks disabled")
    return mcs, None if retx and total == 0 else total


def parse_dci(payload, cfg: CellConfig, rnti: int = 0, format_hint: Optional[str] = None,
              location: Optional[CandidateLocation] = None, decode_path: str = "", mismatch: float = 0.0) -> Dci:
    """
    Interpret a decoded DCI payload.

    The format follows from the payload length; formats 0 and 1A are told
    apart by the leading flag bit. RA/SI/P-RNTI addressing selects the
    common-control TBS rules of formats 1A and 1C.

    Args:
        payload: Decoded payload bits without CRC
        cfg: Cell configuration
        rnti: RNTI recovered from the CRC
        format_hint: Expected format; a different decoded format is rejected
        location: Candidate the payload came from
        decode_path: Acceptance tag to record
        mismatch: Re-encode mismatch to record

    Returns:
        Dci with allocation and transport block size resolved

    Raises:
        ParseReject: Unknown size, non-zero padding, bad allocation or reserved values
    """
    payload = coding.as_bits(payload)
    formats = dci_formats(cfg)
    names = [name for name in FORMAT_ORDER if formats[name].size == len(payload)]
    if not names:
        raise ParseReject(f"No format has size {len(payload)}")
    name = names[0]
    if name == "1A" and payload[0] == 0:
        name = "0"
    if format_hint is not None and format_hint != name:
        raise ParseReject(f"Decoded format {name} where {format_hint} was expected")
    fmt = formats[name]
    values = _read_fields(payload, fmt)
    n = cfg.n_rb_dl
    common = is_common_rnti(rnti)
    ra_type1 = False

    if name in ("0", "1A", "1B", "1D"):
        riv_width = dict(fmt.fields)["riv"]
        if name == "1A" and not common and values["riv"] == (1 << riv_width) - 1:
            # PDCCH order: no shared-channel allocation
            return Dci(name, fmt.direction, rnti, values["mcs"], 0, 0, location, payload, decode_path,
                       (), values, False, mismatch)
        start, length = riv_decode(values["riv"], n)
        rbs = tuple(range(start, start + length))
    elif name == "1C":
        n_vrb, step = vrb_1c(n)
        start, length = riv_decode(values["riv"], n_vrb // step)
        rbs = tuple(range(start * step, (start + length) * step))
    else:
        bitmap = _field_bits(payload, fmt, "bitmap")
        if values.get("ra_type", 0):
            ra_type1 = True
            rbs = _type1_rbs(bitmap, n)
        else:
            rbs = _type0_rbs(bitmap, n)
    if not rbs:
        raise ParseReject(f"Empty allocation in format {name}")
    n_rb = len(rbs)

    if name == "0":
        mcs = values["mcs"]
        tbs = tbs_lookup(mcs, n_rb, "uplink")
    elif name == "1C":
        if not common:
            raise ParseReject(f"Format 1C addressed to non-common RNTI {rnti:#06x}")
        mcs = values["tbs_index"]
        tbs = tbs_1c_table()[mcs]
    elif name == "1A" and common:
        mcs = values["mcs"]
        if mcs >= 27:
            raise ParseReject(f"Common-control 1A with MCS {mcs}")
        tbs = tbs_for_index(mcs, 3 if values["tpc"] & 1 else 2)
    elif name in ("2", "2A"):
        mcs, tbs = _dual_tbs(values, n_rb)
    else:
        mcs = values["mcs"]
        tbs = tbs_lookup(mcs, n_rb)
    return Dci(name, fmt.direction, rnti, mcs, n_rb, tbs, location, payload, decode_path,
               rbs, values, ra_type1, mismatch)


# --- Candidate coding -------------------------------------------------------

def encode_dci(payload, rnti: int, location: CandidateLocation, cfg: CellConfig, subframe: int) -> np.ndarray:
    """QPSK symbols carrying a DCI on `location`, in the candidate's RE order."""
    block = coding.attach_crc(payload, "crc16", rnti)
    coded = coding.rate_match_conv(coding.conv_encode(block), location.n_bits)
    scrambled = coding.scramble_bits(coded, pdcch_c_init(cfg, subframe), BITS_PER_CCE * location.cce_start)
    return coding.qpsk_map(scrambled)


def candidate_llr(eq: Equalized, location: CandidateLocation, cfg: CellConfig, subframe: Optional[int] = None) -> np.ndarray:
    """Descrambled soft bits of a candidate."""
    subframe = eq.grid.subframe if subframe is None else subframe
    rows, cols = location.re_rows, location.re_cols
    llr = coding.qpsk_soft_demap(eq.cells[rows, cols], eq.noise_var[rows, cols])
    return coding.descramble_soft(llr, pdcch_c_init(cfg, subframe), BITS_PER_CCE * location.cce_start)


@dataclass
class BlindHit:
    location: CandidateLocation
    size: int
    rnti: int
    payload: np.ndarray = field(repr=False)
    admission: Admission = Admission.DEFER
    mismatch: float = 1.0
    soft: np.ndarray = field(default=None, repr=False)


def reencode_mismatch(soft: np.ndarray, codeword_bits: np.ndarray) -> np.ndarray:
    """
    Fraction of informative received bits disagreeing with the re-encoded candidates.

    Args:
        soft: (B, E) received soft bits
        codeword_bits: (B, D) payload+CRC bits to re-encode

    Returns:
        (B,) mismatch fractions; 1.0 where no soft bit carries information
    """
    soft = np.atleast_2d(soft)
    recoded = coding.rate_match_conv_batch(coding.conv_encode_batch(codeword_bits), soft.shape[1])
    informative = soft != 0
    wrong = np.sum(((recoded == 1) != (soft < 0)) & informative, axis=1)
    counts = informative.sum(axis=1)
    return np.where(counts > 0, wrong / np.maximum(counts, 1), 1.0)


def _crc_field_value(bits: np.ndarray) -> np.ndarray:
    return bits.astype(np.int64) @ (1 << np.arange(bits.shape[1] - 1, -1, -1, dtype=np.int64))


def search_locations(eq: Equalized, locations, cfg: CellConfig, oracle: RntiOracle,
                     sizes: Optional[list[int]] = None) -> dict[tuple[int, int], list[BlindHit]]:
    """
    Batched blind decoding of many locations at every DCI size.

    One Viterbi pass per size covers all locations; candidates whose RNTI the
    oracle rejects, or whose re-encode mismatch is beyond CONSISTENCY_MAX,
    are dropped.

    Returns:
        Location key -> surviving hits in size order
    """
    locations = list(locations)
    hits: dict[tuple[int, int], list[BlindHit]] = {loc.key: [] for loc in locations}
    if not locations:
        return hits
    sizes = dci_sizes(cfg) if sizes is None else sizes
    groups: dict[int, list[CandidateLocation]] = {}
    for loc in locations:
        groups.setdefault(loc.aggregation, []).append(loc)
    soft = {agg: np.stack([candidate_llr(eq, loc, cfg) for loc in locs]) for agg, locs in groups.items()}
    order = list(groups)

    for size in sizes:
        d = size + 16
        mother = np.concatenate([coding.derate_match_conv(soft[agg], d) for agg in order])
        decoded = coding.conv_decode_batch(mother, d)
        rntis = coding.crc_batch(decoded[:, :size]) ^ _crc_field_value(decoded[:, size:])
        row = 0
        for agg in order:
            locs = groups[agg]
            block = decoded[row:row + len(locs)]
            block_rntis = rntis[row:row + len(locs)]
            row += len(locs)
            mismatch = reencode_mismatch(soft[agg], block)
            for i, loc in enumerate(locs):
                if mismatch[i] >= CONSISTENCY_MAX:
                    continue
                rnti = int(block_rntis[i]) & 0xFFFF
                admission = oracle(rnti)
                if admission is Admission.REJECT:
                    continue
                hits[loc.key].append(BlindHit(loc, size, rnti, block[i, :size].copy(), admission,
                                              float(mismatch[i]), soft[agg][i]))
    return hits


def _acceptable(hits: list[BlindHit], oracle: RntiOracle) -> list[BlindHit]:
    accepted = []
    for hit in hits:
        if hit.admission is Admission.DEFER:
            if oracle.verify(hit.soft, hit.payload, hit.rnti):
                accepted.append(hit)
        elif hit.mismatch < CONSISTENCY_MAX:
            accepted.append(hit)
    return sorted(accepted, key=lambda h: (ADMISSION_PRIORITY[h.admission], h.mismatch))


def blind_decode(eq: Equalized, location: CandidateLocation, size_set, rnti_oracle: RntiOracle,
                 cfg: CellConfig) -> Optional[BlindHit]:
    """
    Decode one location at every size and return the best admitted hit.

    Hits rank by admission (list > RA > reserved > re-encode), then by
    re-encode mismatch; equal ranks keep size order.
    """
    hits = search_locations(eq, [location], cfg, rnti_oracle, list(size_set))[location.key]
    accepted = _acceptable(hits, rnti_oracle)
    return accepted[0] if accepted else None


def _refine(hit: BlindHit, hits: dict, used: set) -> BlindHit:
    best = hit
    agg = hit.location.aggregation // 2
    while agg >= 1:
        for other in hits.get((hit.location.cce_start, agg), []):
            if (other.rnti == hit.rnti and np.array_equal(other.payload, hit.payload)
                    and other.mismatch < best.mismatch - REFINE_MARGIN and not used.intersection(other.location.cces)):
                best = other
        agg //= 2
    return best


def select_dcis(locations, hits: dict, cfg: CellConfig, oracle: RntiOracle, used_cces=(), log=None,
                abs_sf: int = 0, decode_path: Optional[str] = None) -> tuple[list[Dci], int, int]:
    """
    Sequential acceptance in candidate order, skipping locations overlapping accepted CCEs.

    Returns:
        (dcis, parse_rejects, collisions)
    """
    used = set(used_cces)
    dcis, rejects, collisions = [], 0, 0
    for loc in locations:
        if used.intersection(loc.cces):
            continue
        candidates = _acceptable(hits.get(loc.key, []), oracle)
        if not candidates:
            continue
        if len({h.rnti for h in candidates}) > 1:
            collisions += 1
            logging.info(f"CRC collision at CCE {loc.cce_start} L{loc.aggregation}: "
                         f"{', '.join(f'{h.rnti:#06x}' for h in candidates)}")
            if log is not None:
                log.append(abs_sf, "crc-collision", f"cce {loc.cce_start} L{loc.aggregation}")
        for hit in candidates:
            hit = _refine(hit, hits, used)
            try:
                dci = parse_dci(hit.payload, cfg, hit.rnti, location=hit.location,
                                decode_path=decode_path or hit.admission.value, mismatch=hit.mismatch)
            except ParseReject as e:
                rejects += 1
                if log is not None:
                    log.append(abs_sf, "parse-reject", f"rnti {hit.rnti:#06x} cce {loc.cce_start}: {e}")
                continue
            used.update(hit.location.cces)
            dcis.append(dci)
            break
    return dcis, rejects, collisions


def decode_subframe(grid: ResourceGrid, cfg: CellConfig, oracle: RntiOracle, eq: Optional[Equalized] = None,
                    cfi: Optional[int] = None, log=None) -> SubframeReport:
    """
    Decode the whole control region of one subframe.

    Equalize, read the CFI (falling back to 3 when uncertain), gate every
    candidate on energy, blind-decode the survivors in batches, then accept
    in candidate order. Gated locations left without a DCI are reported as
    uncertain.

    Args:
        grid: Demodulated subframe
        cfg: Cell configuration
        oracle: RNTI admission policy for this subframe
        eq: Precomputed equalization of `grid`
        cfi: Known CFI, skipping PCFICH decoding
        log: Optional ErrorLog for cfi-uncertain, parse-reject and crc-collision events

    Returns:
        SubframeReport
    """
    eq = equalize(grid, cfg) if eq is None else eq
    abs_sf = grid.abs_sf
    cfi_uncertain = False
    if cfi is not None:
        cfi_value = Cfi(int(cfi))
    else:
        try:
            cfi_value = cfi_decode(eq, cfg)
        except CfiUncertain as e:
            cfi_value = Cfi(3, e.agreement, e.margin)
            cfi_uncertain = True
            logging.info(f"CFI uncertain in subframe {abs_sf}: {e}")
            if log is not None:
                log.append(abs_sf, "cfi-uncertain", str(e))

    gated = [loc for loc in enumerate_locations(cfi_value, cfg) if energy_gate(grid, loc, eq.crs_power)]
    hits = search_locations(eq, gated, cfg, oracle)
    dcis, rejects, collisions = select_dcis(gated, hits, cfg, oracle, log=log, abs_sf=abs_sf)
    used = {c for dci in dcis for c in dci.location.cces}
    uncertain = [loc for loc in gated if not used.intersection(loc.cces)]
    return SubframeReport(grid.sfn, grid.subframe, cfi_value, dcis, uncertain, eq.noise_floor, eq.crs_power,
                          cfi_uncertain, len(gated), rejects, collisions)
