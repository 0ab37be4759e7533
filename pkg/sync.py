"""Cell acquisition and timing: PSS/SSS search, PCI, frame alignment, MIB and per-frame resync."""
import os
import logging
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.signal import fftconvolve
from tenacity import retry, stop_after_attempt, retry_if_exception

import coding
from grid import (
    PBCH_SYMBOLS, SFN_PERIOD, SUBCARRIER_SPACING, CellConfig, IqTrace, ResourceGrid,
    central_rows, cp_lengths, ofdm_demodulate, samples_per_frame, samples_per_subframe,
    subcarrier_bins, symbol_starts,
)
from pdcch import equalize

PSS_ROOTS = {0: 25, 1: 29, 2: 34}
PSS_SYMBOL = 6
SSS_SYMBOL = 5

# Peak-to-average of the PSS matched filter over a 10 ms search
PSS_QUALITY_MIN = 20.0
# Same metric inside the narrow per-frame resync window
RESYNC_QUALITY_MIN = 10.0
SSS_MARGIN = 0.1

# Slew limit at 30.72 Msps; scaled to the trace rate
DRIFT_LIMIT_FULL_RATE = 16

MIB_RETRY_FRAMES = int(os.environ.get("OWL_MIB_RETRY_FRAMES", "4"))

BANDWIDTH_CODES = (6, 15, 25, 50, 75, 100)
PHICH_NG_CODES = (Fraction(1, 6), Fraction(1, 2), Fraction(1), Fraction(2))
PBCH_CRC_MASKS = {1: 0x0000, 2: 0xFFFF}
PBCH_BITS = 1920
PBCH_QUARTER = 480
MIB_BITS = 24


class NoCellError(Exception):
    """No synchronization signal above threshold."""


class MibDecodeError(Exception):
    """PBCH CRC failed on every scrambling phase."""


class ResyncRequest(Exception):
    """Timing could not be confirmed; full re-acquisition needed."""


@dataclass
class SyncState:
    pci: int
    frame_start: int
    sfn: int
    cfo_hz: float = 0.0
    quality: float = 0.0
    n_ports: int = 1
    n_rb_dl: Optional[int] = None


@dataclass(frozen=True)
class Mib:
    sfn_msb: int
    bandwidth_code: int
    phich_cfg: int
    spare: int = 0
    sfn_phase: int = 0
    n_ports: int = 1

    @classmethod
    def for_cell(cls, cfg: CellConfig, sfn: int, phich_duration: int = 0) -> "Mib":
        ng_code = PHICH_NG_CODES.index(cfg.phich_ng)
        return cls(sfn_msb=(sfn % SFN_PERIOD) >> 2, bandwidth_code=BANDWIDTH_CODES.index(cfg.n_rb_dl),
                   phich_cfg=(phich_duration << 2) | ng_code, sfn_phase=sfn % 4, n_ports=cfg.n_ports)

    @property
    def n_rb_dl(self) -> int:
        if self.bandwidth_code >= len(BANDWIDTH_CODES):
            raise MibDecodeError(f"Reserved bandwidth code {self.bandwidth_code}")
        return BANDWIDTH_CODES[self.bandwidth_code]

    @property
    def phich_ng(self) -> Fraction:
        return PHICH_NG_CODES[self.phich_cfg & 3]

    @property
    def sfn(self) -> int:
        return self.sfn_msb * 4 + self.sfn_phase

    def to_bits(self) -> np.ndarray:
        return np.concatenate([
            coding.int_to_bits(self.bandwidth_code, 3),
            coding.int_to_bits(self.phich_cfg, 3),
            coding.int_to_bits(self.sfn_msb, 8),
            coding.int_to_bits(self.spare, 10),
        ])

    @classmethod
    def from_bits(cls, bits, sfn_phase: int, n_ports: int) -> "Mib":
        bits = coding.as_bits(bits)
        return cls(bandwidth_code=coding.bits_to_int(bits[0:3]), phich_cfg=coding.bits_to_int(bits[3:6]),
                   sfn_msb=coding.bits_to_int(bits[6:14]), spare=coding.bits_to_int(bits[14:24]),
                   sfn_phase=sfn_phase, n_ports=n_ports)


def is_mib_failure(exception: BaseException) -> bool:
    return isinstance(exception, MibDecodeError)


def probe_config(sample_rate: float, pci: int = 0) -> CellConfig:
    """Six-RB view of a capture: the central 72 subcarriers at the capture's transform size."""
    return CellConfig.from_sample_rate(6, sample_rate, pci=pci)


def drift_limit(cfg: CellConfig) -> int:
    return max(1, round(DRIFT_LIMIT_FULL_RATE * cfg.fft_size / 2048))


def sync_rows(cfg: CellConfig) -> np.ndarray:
    """Grid rows of the 62 synchronization subcarriers around DC."""
    return np.arange(62) + 6 * cfg.n_rb_dl - 31


@lru_cache(maxsize=None)
def pss_sequence(n_id_2: int) -> np.ndarray:
    u = PSS_ROOTS[n_id_2]
    n = np.arange(62)
    m = np.where(n < 31, n * (n + 1), (n + 1) * (n + 2))
    d = np.exp(-1j * np.pi * u * m / 63)
    d.setflags(write=False)
    return d


@lru_cache(maxsize=None)
def _sss_base() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    def m_sequence(taps):
        x = np.zeros(31, dtype=np.int64)
        x[4] = 1
        for i in range(26):
            x[i + 5] = sum(x[i + t] for t in taps) & 1
        return 1 - 2 * x

    return m_sequence((2, 0)), m_sequence((3, 0)), m_sequence((4, 2, 1, 0))


def sss_sequence(n_id_1: int, n_id_2: int, subframe: int) -> np.ndarray:
    """62-element SSS for subframe 0 or 5."""
    s_t, c_t, z_t = _sss_base()
    q_prime = n_id_1 // 30
    q = (n_id_1 + q_prime * (q_prime + 1) // 2) // 30
    m_prime = n_id_1 + q * (q + 1) // 2
    m0 = m_prime % 31
    m1 = (m0 + m_prime // 31 + 1) % 31

    n = np.arange(31)
    s0, s1 = s_t[(n + m0) % 31], s_t[(n + m1) % 31]
    c0, c1 = c_t[(n + n_id_2) % 31], c_t[(n + n_id_2 + 3) % 31]
    z0, z1 = z_t[(n + m0 % 8) % 31], z_t[(n + m1 % 8) % 31]

    d = np.empty(62)
    if subframe == 0:
        d[0::2], d[1::2] = s0 * c0, s1 * c1 * z0
    else:
        d[0::2], d[1::2] = s1 * c0, s0 * c1 * z1
    return d


@lru_cache(maxsize=None)
def _sss_table(n_id_2: int) -> np.ndarray:
    # rows: n_id_1 * 2 + parity
    table = np.empty((168 * 2, 62))
    for n_id_1 in range(168):
        table[2 * n_id_1] = sss_sequence(n_id_1, n_id_2, 0)
        table[2 * n_id_1 + 1] = sss_sequence(n_id_1, n_id_2, 5)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=None)
def pss_waveform(cfg: CellConfig, n_id_2: int) -> np.ndarray:
    """Time-domain PSS symbol, cyclic prefix included, alone on the carrier."""
    n = cfg.fft_size
    freq = np.zeros(n, dtype=np.complex128)
    freq[subcarrier_bins(cfg)[sync_rows(cfg)]] = pss_sequence(n_id_2)
    body = np.fft.ifft(freq) * np.sqrt(n)
    cp = cp_lengths(cfg)[PSS_SYMBOL]
    wave = np.concatenate([body[n - cp:], body])
    wave.setflags(write=False)
    return wave


def _correlate(samples: np.ndarray, reference: np.ndarray) -> np.ndarray:
    power = np.abs(fftconvolve(samples, np.conj(reference[::-1]), mode="valid")) ** 2
    return power


@dataclass
class PssResult:
    n_id_2: int
    offset: int
    quality: float


def pss_detect(trace: IqTrace, start: int = 0, length: Optional[int] = None) -> PssResult:
    """
    Find the strongest PSS in a 10 ms search window.

    Args:
        trace: Input trace
        start: First sample of the search window
        length: Window length; one frame when omitted

    Returns:
        PssResult with the winning n_id_2, the sample index of that PSS
        symbol's cyclic prefix, and the peak-to-average quality

    Raises:
        NoCellError: Trace too short or quality below PSS_QUALITY_MIN
    """
    probe = probe_config(trace.sample_rate)
    span = samples_per_frame(probe) if length is None else length
    ref_len = len(pss_waveform(probe, 0))
    end = start + span + ref_len - 1
    if start < 0 or end > len(trace.samples):
        raise NoCellError(f"Need {span + ref_len - 1} samples from {start} for a PSS search, trace has {len(trace.samples)}")
    window = np.asarray(trace.samples[start:end], dtype=np.complex128)

    best = PssResult(0, start, 0.0)
    for n_id_2 in PSS_ROOTS:
        power = _correlate(window, pss_waveform(probe, n_id_2))
        mean = power.mean()
        if mean <= 0:
            continue
        peak = int(power.argmax())
        quality = float(power[peak] / mean)
        if quality > best.quality:
            best = PssResult(n_id_2, start + peak, quality)

    if best.quality < PSS_QUALITY_MIN:
        raise NoCellError(f"No PSS above threshold (best quality {best.quality:.1f} < {PSS_QUALITY_MIN})")
    return best


def coarse_cfo_estimate(trace: IqTrace, cfg: CellConfig, start: int, n_subframes: int = 10) -> float:
    """Fractional CFO in Hz from cyclic-prefix autocorrelation over whole subframes from `start`."""
    n = cfg.fft_size
    acc = 0j
    sf_len = samples_per_subframe(cfg)
    for sf in range(n_subframes):
        base = start + sf * sf_len
        if base < 0 or base + sf_len > len(trace.samples):
            break
        block = np.asarray(trace.samples[base:base + sf_len], dtype=np.complex128)
        for pos, cp in zip(symbol_starts(cfg), cp_lengths(cfg)):
            head = block[pos:pos + cp]
            tail = block[pos + n:pos + n + cp]
            acc += np.vdot(head, tail)
    if acc == 0:
        return 0.0
    return float(np.angle(acc) * SUBCARRIER_SPACING / (2 * np.pi))


def sss_decode(trace: IqTrace, half_frame_start: int, n_id_2: int, cfo_hz: float = 0.0) -> tuple[int, int, float]:
    """
    Identify n_id_1 and which half of the frame a PSS-aligned window starts.

    The SSS of the given half-frame is combined with the one 5 ms later when
    the trace holds it. The adjacent PSS symbol serves as channel reference.

    Returns:
        (n_id_1, subframe_parity, margin) where parity 0 means the window
        starts at subframe 0 and 1 means subframe 5

    Raises:
        ResyncRequest: Decision metric ambiguous
    """
    probe = probe_config(trace.sample_rate)
    rows = sync_rows(probe)
    sf_len = samples_per_subframe(probe)
    table = _sss_table(n_id_2)
    scores = np.zeros(table.shape[0])
    used = 0
    for half in range(2):
        start = half_frame_start + 5 * sf_len * half
        if start < 0 or start + sf_len > len(trace.samples):
            continue
        cells = ofdm_demodulate(trace, probe, start, cfo_hz=cfo_hz).cells
        h = cells[rows, PSS_SYMBOL] / pss_sequence(n_id_2)
        z = np.real(cells[rows, SSS_SYMBOL] * np.conj(h))
        half_scores = table @ z
        if half:
            # 5 ms later the roles of subframe 0 and 5 swap
            half_scores = half_scores.reshape(168, 2)[:, ::-1].reshape(-1)
        scores += half_scores
        used += 1
    if not used:
        raise ResyncRequest("No complete half-frame for SSS detection")

    order = np.argsort(scores)[::-1]
    best, second = scores[order[0]], scores[order[1]]
    if best <= 0 or (best - second) < SSS_MARGIN * best:
        raise ResyncRequest(f"Ambiguous SSS decision ({best:.2f} vs {second:.2f})")
    return int(order[0] // 2), int(order[0] % 2), float((best - second) / best)


@lru_cache(maxsize=None)
def pbch_positions(cfg: CellConfig) -> tuple[np.ndarray, np.ndarray]:
    """(rows, symbols) of the 240 PBCH resource elements, in mapping order."""
    central = central_rows(cfg)
    v_shift = cfg.pci % 3
    rows, cols = [], []
    for l in PBCH_SYMBOLS:
        for k in central:
            # reference positions of ports 0-3 are always reserved
            if l in (7, 8) and (k - v_shift) % 3 == 0:
                continue
            rows.append(k)
            cols.append(l)
    return np.array(rows), np.array(cols)


def pbch_bits(cfg: CellConfig, mib: Mib) -> np.ndarray:
    """Scrambled 1920-bit PBCH sequence spanning four frames."""
    block = coding.attach_crc(mib.to_bits(), "crc16", PBCH_CRC_MASKS[cfg.n_ports])
    coded = coding.rate_match_conv(coding.conv_encode(block), PBCH_BITS)
    return coding.scramble_bits(coded, cfg.pci)


def pbch_symbols(cfg: CellConfig, sfn: int, phich_duration: int = 0) -> np.ndarray:
    """The 240 QPSK symbols carried in frame `sfn`."""
    quarter = sfn % 4
    bits = pbch_bits(cfg, Mib.for_cell(cfg, sfn, phich_duration))
    return coding.qpsk_map(bits[quarter * PBCH_QUARTER:(quarter + 1) * PBCH_QUARTER])


def mib_decode(grid: ResourceGrid, cfg: CellConfig) -> Mib:
    """
    Decode the MIB from a subframe-0 grid of any bandwidth.

    Each received quarter is tried at all four scrambling phases and both
    antenna-port CRC masks.

    Raises:
        MibDecodeError: No phase passes the CRC
    """
    eq = equalize(grid, cfg, 0)
    rows, cols = pbch_positions(cfg)
    llr = coding.qpsk_soft_demap(eq.cells[rows, cols], eq.noise_var[rows, cols])

    scramble = 1.0 - 2.0 * coding.gold_sequence(cfg.pci, PBCH_BITS)
    soft = np.zeros((4, PBCH_BITS))
    for phase in range(4):
        soft[phase, phase * PBCH_QUARTER:(phase + 1) * PBCH_QUARTER] = llr
    soft *= scramble
    payload_len = MIB_BITS + 16
    decoded = coding.conv_decode_batch(coding.derate_match_conv(soft, payload_len), payload_len)

    for phase in range(4):
        bits = decoded[phase]
        received = coding.bits_to_int(bits[MIB_BITS:])
        parity = coding.crc16(bits[:MIB_BITS])
        for n_ports, mask in PBCH_CRC_MASKS.items():
            if parity ^ mask == received:
                mib = Mib.from_bits(bits[:MIB_BITS], phase, n_ports)
                if mib.bandwidth_code < len(BANDWIDTH_CODES):
                    return mib
    raise MibDecodeError("PBCH CRC failed on all scrambling phases")


def _frame_start_from_half(half_start: int, parity: int, cfg: CellConfig) -> int:
    if parity == 0:
        return half_start
    start = half_start - 5 * samples_per_subframe(cfg)
    if start < 0:
        start += samples_per_frame(cfg)
    return start


def acquire_cell(trace: IqTrace, search_start: int = 0, log=None, abs_sf: int = 0) -> tuple[SyncState, Mib]:
    """
    Full acquisition: PSS, CFO, SSS, frame alignment, then the MIB.

    The MIB is retried on up to MIB_RETRY_FRAMES consecutive frames.

    Args:
        trace: Input trace
        search_start: Where the 10 ms PSS search begins
        log: Optional ErrorLog receiving mib-failure events
        abs_sf: Subframe stamp for log events

    Returns:
        (SyncState positioned on the frame whose MIB decoded, Mib)

    Raises:
        NoCellError: No PSS/SSS or every MIB attempt failed
    """
    probe = probe_config(trace.sample_rate)
    pss = pss_detect(trace, start=search_start)
    half_start = pss.offset - symbol_starts(probe)[PSS_SYMBOL]
    if half_start < 0:
        half_start += 5 * samples_per_subframe(probe)
    cfo = coarse_cfo_estimate(trace, probe, half_start)
    try:
        n_id_1, parity, _ = sss_decode(trace, half_start, pss.n_id_2, cfo)
    except ResyncRequest as e:
        raise NoCellError(f"SSS undecidable: {e}")
    pci = 3 * n_id_1 + pss.n_id_2
    frame_start = _frame_start_from_half(half_start, parity, probe)
    cell_probe = probe_config(trace.sample_rate, pci)
    frame_len = samples_per_frame(probe)
    logging.info(f"PSS n_id_2={pss.n_id_2} quality={pss.quality:.1f}, pci={pci}, frame start {frame_start}, cfo {cfo:.1f} Hz")

    attempts = iter(range(MIB_RETRY_FRAMES))

    @retry(stop=stop_after_attempt(MIB_RETRY_FRAMES), retry=retry_if_exception(is_mib_failure), reraise=True)
    def decode_next_frame():
        start = frame_start + next(attempts) * frame_len
        if start + frame_len > len(trace.samples):
            raise MibDecodeError(f"Trace ends before frame at {start}")
        try:
            grid = ofdm_demodulate(trace, cell_probe, start, cfo_hz=cfo)
            return mib_decode(grid, cell_probe), start
        except MibDecodeError as e:
            logging.warning(f"MIB decode failed at sample {start}: {e}")
            if log is not None:
                log.append(abs_sf, "mib-failure", f"sample {start}")
            raise

    try:
        mib, start = decode_next_frame()
    except MibDecodeError as e:
        raise NoCellError(f"MIB not decodable after {MIB_RETRY_FRAMES} frames: {e}")
    state = SyncState(pci=pci, frame_start=start, sfn=mib.sfn, cfo_hz=cfo, quality=pss.quality,
                      n_ports=mib.n_ports, n_rb_dl=mib.n_rb_dl)
    return state, mib


def resync_check(state: SyncState, trace: IqTrace, cfg: CellConfig, expected_start: int, log=None,
                 abs_sf: int = 0) -> SyncState:
    """
    Confirm frame timing at `expected_start` by re-correlating the subframe-0 PSS.

    Drift up to drift_limit(cfg) samples is slewed; a larger displacement with
    a clean peak is a jump and re-aligns immediately. Events go to `log`.

    Returns:
        Updated copy of the state positioned on this frame

    Raises:
        ResyncRequest: No PSS peak near the expected position
    """
    window = cfg.fft_size // 2
    reference = pss_waveform(cfg, cfg.n_id_2)
    centre = expected_start + symbol_starts(cfg)[PSS_SYMBOL]
    lo = centre - window
    hi = centre + window + len(reference)
    if lo < 0 or hi > len(trace.samples):
        raise ResyncRequest(f"Resync window [{lo}, {hi}) outside trace")

    samples = np.asarray(trace.samples[lo:hi], dtype=np.complex128)
    if state.cfo_hz:
        samples = samples * np.exp(-2j * np.pi * state.cfo_hz * np.arange(lo, hi) / trace.sample_rate)
    power = _correlate(samples, reference)
    mean = power.mean()
    peak = int(power.argmax())
    quality = float(power[peak] / mean) if mean > 0 else 0.0
    if quality < RESYNC_QUALITY_MIN:
        logging.warning(f"Sync lost at sample {expected_start} (quality {quality:.1f})")
        if log is not None:
            log.append(abs_sf, "sync-loss", f"quality {quality:.1f} at sample {expected_start}")
        raise ResyncRequest(f"PSS not found near sample {expected_start}")

    drift = peak - window
    if drift == 0:
        return replace(state, frame_start=expected_start, quality=quality)
    if abs(drift) <= drift_limit(cfg):
        if log is not None:
            log.append(abs_sf, "slew", f"{drift:+d} samples")
        return replace(state, frame_start=expected_start + drift, quality=quality)

    logging.warning(f"Timing jump of {drift:+d} samples at sample {expected_start}")
    if log is not None:
        log.append(abs_sf, "resync", f"jump {drift:+d} samples")
    return replace(state, frame_start=expected_start + drift, quality=quality)
