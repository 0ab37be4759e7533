"""Fine-tuner: re-decodes uncertain control-channel locations at shifted symbol timing under a deadline."""
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from config import WORKERS, ConfigError
from grid import CellConfig, IqTrace, ResourceGrid, cp_lengths, demodulate_symbols, ofdm_demodulate
from pdcch import Equalized, RntiOracle, SubframeReport, equalize, search_locations, select_dcis

FINETUNER_PATH = "finetuner"
MAX_OFFSET = 32


@dataclass(frozen=True)
class TunerConfig:
    offsets: tuple
    deadline_s: Optional[float] = None
    refine: bool = True
    workers: int = WORKERS

    def __post_init__(self):
        if 0 not in self.offsets:
            raise ConfigError("Tuner offsets must include 0")
        if self.deadline_s is not None and self.deadline_s < 0:
            raise ConfigError(f"Tuner deadline must be >= 0, got {self.deadline_s}")

    @classmethod
    def for_cell(cls, cfg: CellConfig, deadline_s: Optional[float] = None, step: int = 2, refine: bool = True) -> "TunerConfig":
        """Offsets within half a normal cyclic prefix (even-rounded, at most 32), nearest first."""
        bound = min(MAX_OFFSET, cp_lengths(cfg)[1] // 2)
        bound -= bound % 2
        offsets = sorted(range(-bound, bound + 1, step), key=lambda o: (abs(o), o))
        return cls(tuple(offsets), deadline_s, refine)


@dataclass
class TunerResult:
    dcis: list = field(default_factory=list)
    timed_out: bool = False
    attempts: int = 0


def control_symbols(cfi: int) -> tuple[int, ...]:
    """Symbols the tuner re-demodulates: 1..cfi-1, or symbol 0 for a one-symbol region."""
    return tuple(range(1, cfi)) if cfi > 1 else (0,)


def _qpsk_evm(eq: Equalized, locations) -> float:
    if not locations:
        return float("inf")
    rows = np.concatenate([loc.re_rows for loc in locations])
    cols = np.concatenate([loc.re_cols for loc in locations])
    s = eq.cells[rows, cols]
    ideal = (np.sign(s.real) + 1j * np.sign(s.imag)) / np.sqrt(2)
    return float(np.mean(np.abs(s - ideal) ** 2))


def finetune(trace: IqTrace, report: SubframeReport, cfg: CellConfig, oracle: RntiOracle, tuner_cfg: TunerConfig,
             subframe_start: int, cfo_hz: float = 0.0, grid: Optional[ResourceGrid] = None) -> TunerResult:
    """
    Sweep symbol-timing offsets over a subframe's uncertain locations.

    For offset o the control symbols are re-demodulated with their windows
    moved by -o samples and re-equalized; the uncertain locations are then
    blind-decoded again. Recovered DCIs are tagged finetuner and never
    overlap DCIs already in the report. When the coarse sweep recovers
    nothing, the offset with the lowest QPSK error-vector magnitude is
    refined by +-1.

    Args:
        trace: Input trace
        report: Main-pass report of the subframe
        cfg: Cell configuration
        oracle: RNTI admission policy snapshot
        tuner_cfg: Offsets, deadline and worker count
        subframe_start: Sample index of the subframe
        cfo_hz: Frequency offset used by the main pass
        grid: Main-pass grid, re-demodulated when omitted

    Returns:
        TunerResult with the recovered DCIs, a timeout flag and the number
        of (location, offset) decode attempts
    """
    if not report.uncertain:
        return TunerResult()
    started = time.monotonic()
    deadline = None if tuner_cfg.deadline_s is None else started + tuner_cfg.deadline_s
    if tuner_cfg.deadline_s == 0:
        return TunerResult(timed_out=True)

    if grid is None:
        grid = ofdm_demodulate(trace, cfg, subframe_start, cfo_hz, sfn=report.sfn, subframe=report.subframe)
    cfi = int(report.cfi)
    symbols = list(control_symbols(cfi))
    pending = list(report.uncertain)
    used = {c for dci in report.dcis for c in dci.location.cces}

    def expired() -> bool:
        return deadline is not None and time.monotonic() >= deadline

    def attempt(offset: int):
        if expired():
            return None
        shifted = grid.copy()
        shifts = np.zeros(len(grid.cells[0]), dtype=np.int64)
        shifts[symbols] = -offset
        shifted.cells[:, symbols] = demodulate_symbols(trace, cfg, subframe_start, symbols, shifts, cfo_hz)
        eq = equalize(shifted, cfg)
        return search_locations(eq, pending, cfg, oracle), _qpsk_evm(eq, pending)

    result = TunerResult()

    def sweep(offsets) -> dict:
        outcomes = {}
        with ThreadPoolExecutor(max_workers=max(1, tuner_cfg.workers)) as executor:
            futures = {executor.submit(attempt, o): o for o in offsets}
            for future in as_completed(futures):
                outcomes[futures[future]] = future.result()
        for offset in offsets:
            outcome = outcomes[offset]
            if outcome is None:
                result.timed_out = True
                continue
            hits, _ = outcome
            result.attempts += len(pending)
            dcis, _, _ = select_dcis(pending, hits, cfg, oracle, used_cces=used, decode_path=FINETUNER_PATH)
            for dci in dcis:
                used.update(dci.location.cces)
                result.dcis.append(dci)
        return {o: out[1] for o, out in outcomes.items() if out is not None}

    evm = sweep(list(tuner_cfg.offsets))
    if tuner_cfg.refine and not result.dcis and evm and not result.timed_out:
        best = min(evm, key=lambda o: (evm[o], abs(o)))
        extra = [o for o in (best - 1, best + 1) if o not in evm]
        if extra:
            sweep(extra)

    if result.timed_out:
        logging.info(f"Fine-tuner timed out on subframe {report.abs_sf} after {result.attempts} attempts")
    return result
