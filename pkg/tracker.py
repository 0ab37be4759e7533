"""Active RNTI list: random-access driven admission, re-encode bootstrap, expiry and the acceptance oracle."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

import coding
from grid import ABS_SF_PERIOD, CellConfig, pdsch_positions
from pdcch import (
    C_RNTI_MAX, C_RNTI_MIN, P_RNTI, RA_RNTI_MAX, RA_RNTI_MIN, SI_RNTI,
    Admission, Dci, Equalized, SubframeReport, reencode_mismatch,
)

# Inactivity limit: one SFN cycle
EXPIRY_SUBFRAMES = 10240
# Activity counter period; gaps are taken modulo this
COUNTER_PERIOD = 2 * ABS_SF_PERIOD

REENCODE_MAX_MISMATCH = 0.02

RAR_PDU_BYTES = 7
RAR_TBS = 56
TB_CRC_BITS = 24

ORIGIN_RAR = "rar"
ORIGIN_REENCODE = "reencode"


class RntiRangeError(ValueError):
    """RNTI outside the C-RNTI range."""


class RarCrcError(Exception):
    """Random-access response transport block failed its CRC."""


class RarUnsupported(Exception):
    """Random-access response grant outside what the decoder handles."""


@dataclass
class RntiEntry:
    rnti: int
    last_active: int
    origin: str


@dataclass(frozen=True)
class RarMessage:
    raw: bytes
    rapid: int
    timing_advance: int
    ul_grant: int
    temp_crnti: int


def activity_gap(last_active: int, now: int) -> int:
    return (now - last_active) % COUNTER_PERIOD


class RntiList:
    """
    C-RNTIs seen recently, with when and how each was learned.

    Times are values of the caller's activity counter, which must advance
    by one per subframe and wrap at COUNTER_PERIOD.
    """

    def __init__(self):
        self._entries: dict[int, RntiEntry] = {}

    def __contains__(self, rnti: int) -> bool:
        return rnti in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def admit(self, rnti: int, origin: str, abs_sf: int) -> RntiEntry:
        if not C_RNTI_MIN <= rnti <= C_RNTI_MAX:
            raise RntiRangeError(f"RNTI {rnti:#06x} outside C-RNTI range [{C_RNTI_MIN:#06x}, {C_RNTI_MAX:#06x}]")
        entry = self._entries.get(rnti)
        if entry is None:
            entry = RntiEntry(rnti, abs_sf, origin)
            self._entries[rnti] = entry
            logging.info(f"Admitted RNTI {rnti:#06x} via {origin} at {abs_sf}")
        else:
            entry.last_active = abs_sf
        return entry

    def touch(self, rnti: int, abs_sf: int) -> bool:
        entry = self._entries.get(rnti)
        if entry is None:
            return False
        entry.last_active = abs_sf
        return True

    def expire(self, now: int) -> list[int]:
        """Drop entries idle for more than EXPIRY_SUBFRAMES; returns the evicted RNTIs."""
        evicted = [r for r, e in self._entries.items() if activity_gap(e.last_active, now) > EXPIRY_SUBFRAMES]
        for rnti in evicted:
            del self._entries[rnti]
        if evicted:
            logging.info(f"Expired {len(evicted)} RNTIs at {now}")
        return evicted

    def snapshot(self) -> frozenset:
        return frozenset(self._entries)

    def entries(self) -> list[RntiEntry]:
        return sorted(self._entries.values(), key=lambda e: e.rnti)

    def load_warmstart(self, path, abs_sf: int = 0) -> int:
        """Admit one hex RNTI per line (blank and '#' lines skipped) with origin reencode."""
        count = 0
        for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                self.admit(int(text, 16), ORIGIN_REENCODE, abs_sf)
                count += 1
            except ValueError as e:
                logging.warning(f"Skipping warm-start line {number} of {path}: {e}")
        return count


def ra_rnti_for(preamble_subframe: int) -> int:
    if not 0 <= preamble_subframe <= 9:
        raise ValueError(f"Preamble subframe must be in [0, 9], got {preamble_subframe}")
    return preamble_subframe + 1


def reencode_verify(soft, payload, rnti: int) -> bool:
    """
    Accept a decode whose RNTI is unknown when its re-encoding matches the received bits.

    Args:
        soft: Received, descrambled soft bits of the candidate
        payload: Decoded DCI payload (without CRC)
        rnti: RNTI read from the CRC field

    Returns:
        True iff fewer than REENCODE_MAX_MISMATCH of the hard bits differ
    """
    soft = np.asarray(soft, dtype=np.float64)
    codeword = coding.attach_crc(payload, "crc16", rnti)
    return float(reencode_mismatch(soft[None, :], codeword[None, :])[0]) < REENCODE_MAX_MISMATCH


@dataclass(frozen=True)
class AcceptanceOracle:
    """RNTI admission policy for one subframe, built from a list snapshot."""
    active: frozenset = frozenset()
    mode: str = "owl"

    def __call__(self, rnti: int) -> Admission:
        if rnti == 0:
            return Admission.REJECT
        if self.mode == "lteye":
            return Admission.DEFER
        if rnti in self.active:
            return Admission.LIST
        if RA_RNTI_MIN <= rnti <= RA_RNTI_MAX:
            return Admission.RA
        if rnti in (P_RNTI, SI_RNTI):
            return Admission.RESERVED
        if C_RNTI_MIN <= rnti <= C_RNTI_MAX:
            return Admission.DEFER
        return Admission.REJECT

    def verify(self, soft: np.ndarray, payload: np.ndarray, rnti: int) -> bool:
        return reencode_verify(soft, payload, rnti)


def rnti_oracle(rntis: RntiList, mode: str = "owl") -> AcceptanceOracle:
    return AcceptanceOracle(rntis.snapshot() if mode == "owl" else frozenset(), mode)


# --- RAR transport ----------------------------------------------------------

def pdsch_c_init(rnti: int, subframe: int, cfg: CellConfig) -> int:
    return rnti * (1 << 14) + subframe * 512 + cfg.pci


def build_rar_pdu(rapid: int, temp_crnti: int, timing_advance: int = 0, ul_grant: int = 0) -> bytes:
    """MAC PDU with one RAPID subheader and one 6-byte random-access response."""
    body = (timing_advance & 0x7FF) << 36 | (ul_grant & 0xFFFFF) << 16 | (temp_crnti & 0xFFFF)
    return bytes([0x40 | (rapid & 0x3F)]) + body.to_bytes(6, "big")


def parse_rar_pdu(pdu: bytes) -> RarMessage:
    if len(pdu) < RAR_PDU_BYTES:
        raise RarUnsupported(f"RAR PDU of {len(pdu)} bytes is too short")
    header = pdu[0]
    if not header & 0x40:
        raise RarUnsupported("Backoff-indicator subheader without a response")
    if header & 0x80:
        raise RarUnsupported("Multiple responses in one PDU")
    raw = bytes(pdu[1:RAR_PDU_BYTES])
    body = int.from_bytes(raw, "big")
    return RarMessage(raw=raw, rapid=header & 0x3F, timing_advance=(body >> 36) & 0x7FF,
                      ul_grant=(body >> 16) & 0xFFFFF, temp_crnti=int.from_bytes(raw[-2:], "big"))


def _tb_crc_ok(bits: np.ndarray) -> bool:
    return coding.crc24a(bits[:-TB_CRC_BITS]) == coding.bits_to_int(bits[-TB_CRC_BITS:])


def encode_transport_block(data: bytes, rnti: int, subframe: int, cfg: CellConfig, n_symbols: int, rv: int = 0) -> np.ndarray:
    """CRC24A, turbo code, rate match, scramble and QPSK-map a transport block onto n_symbols REs."""
    block = coding.attach_crc(coding.bytes_to_bits(data), "crc24a")
    coded = coding.rate_match_turbo(coding.turbo_encode(block), 2 * n_symbols, rv)
    return coding.qpsk_map(coding.scramble_bits(coded, pdsch_c_init(rnti, subframe, cfg)))


def decode_rar(eq: Equalized, dci: Dci, cfg: CellConfig, cfi: int, subframe: Optional[int] = None) -> RarMessage:
    """
    Demodulate and decode the random-access response granted by `dci`.

    Raises:
        RarUnsupported: Not a downlink RA-RNTI grant, or a block size the turbo decoder lacks
        RarCrcError: Transport block CRC failed
    """
    subframe = eq.grid.subframe if subframe is None else subframe
    if dci.direction != "downlink" or not RA_RNTI_MIN <= dci.rnti <= RA_RNTI_MAX:
        raise RarUnsupported(f"{dci.format} to {dci.rnti:#06x} is not a random-access grant")
    if dci.format not in ("1A", "1C") or dci.tbs is None:
        raise RarUnsupported(f"Format {dci.format} grant with tbs {dci.tbs}")
    k = dci.tbs + TB_CRC_BITS
    if k not in coding.qpp_parameters():
        raise RarUnsupported(f"Block size {k} has no turbo interleaver")

    rows, cols = pdsch_positions(cfg, subframe, int(cfi), dci.rbs)
    llr = coding.qpsk_soft_demap(eq.cells[rows, cols], eq.noise_var[rows, cols])
    soft = coding.descramble_soft(llr, pdsch_c_init(dci.rnti, subframe, cfg))
    rv = dci.fields.get("rv", 0)
    bits = coding.turbo_decode(coding.derate_match_turbo(soft, k, rv), k, crc_check=_tb_crc_ok)
    if not _tb_crc_ok(bits):
        raise RarCrcError(f"RAR CRC failed for RA-RNTI {dci.rnti}")
    return parse_rar_pdu(coding.bits_to_bytes(bits[:-TB_CRC_BITS]))


def process_subframe(report: SubframeReport, eq: Equalized, cfg: CellConfig, rntis: RntiList, now: int,
                     mode: str = "owl", log=None) -> list[tuple[int, str, int]]:
    """
    Sequential admission pass after one subframe.

    RAR grants admit their temporary C-RNTI, accepted re-encode decodes admit
    their RNTI, any other decoded DCI refreshes its RNTI, then idle entries
    expire. Nothing changes in lteye mode.

    Returns:
        Admissions made, as (rnti, origin, abs_sf)
    """
    if mode != "owl":
        return []
    admissions = []
    abs_sf = report.abs_sf
    for dci in report.dcis:
        if RA_RNTI_MIN <= dci.rnti <= RA_RNTI_MAX and dci.direction == "downlink":
            try:
                rar = decode_rar(eq, dci, cfg, int(report.cfi), report.subframe)
            except RarCrcError as e:
                logging.warning(f"Subframe {abs_sf}: {e}")
                if log is not None:
                    log.append(abs_sf, "rar-crc-error", str(e))
                continue
            except RarUnsupported as e:
                logging.warning(f"Subframe {abs_sf}: {e}")
                if log is not None:
                    log.append(abs_sf, "rar-unsupported", str(e))
                continue
            try:
                if rar.temp_crnti not in rntis:
                    admissions.append((rar.temp_crnti, ORIGIN_RAR, abs_sf))
                rntis.admit(rar.temp_crnti, ORIGIN_RAR, now)
            except RntiRangeError as e:
                logging.warning(f"Subframe {abs_sf}: RAR carried {e}")
        elif dci.decode_path == Admission.DEFER.value and dci.rnti not in rntis:
            rntis.admit(dci.rnti, ORIGIN_REENCODE, now)
            admissions.append((dci.rnti, ORIGIN_REENCODE, abs_sf))
        else:
            rntis.touch(dci.rnti, now)
    rntis.expire(now)
    return admissions
