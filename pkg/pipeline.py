"""Decode orchestration: segmented decoder, k-buffer record/decode/fine-tune stages, analytics and the CLI."""
import argparse
import logging
import queue
import sys
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Protocol

import numpy as np
import pandas as pd

from config import LOG_LEVEL, WORKERS, ConfigError, parse_bool, read_kv_file, reject_unknown, take
from export_utils import LogFormatError, dci_row, export_dci_log, frame_to_csv, parse_dci_log
from grid import (
    ABS_SF_PERIOD, SFN_PERIOD, SUBFRAMES_PER_FRAME, CellConfig, IqTrace, ResourceGrid, TraceError, ofdm_demodulate,
    read_trace, samples_per_frame, samples_per_subframe,
)
from pdcch import C_RNTI_MAX, C_RNTI_MIN, SubframeReport, decode_subframe, equalize
from sync import MIB_RETRY_FRAMES, NoCellError, ResyncRequest, SyncState, acquire_cell, probe_config, resync_check
from tracker import COUNTER_PERIOD, AcceptanceOracle, RntiList, process_subframe, rnti_oracle
from tuner import TunerConfig, TunerResult, finetune
from verifier import NO_TRAFFIC, DetectionStats, detection_stats, power_map, stats_frame, stats_to_csv

MODES = ("owl", "lteye")

# Frames buffered before acquisition so every MIB retry sees the same samples
ACQUIRE_FRAMES = MIB_RETRY_FRAMES + 2
HISTORY_FRAMES = 2

DEFAULT_K = 4
DEFAULT_SEGMENT_S = 0.1
MCS_BIN_S = 2.0

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NO_CELL = 2
EXIT_IO = 3

RATIO_LABELS = ("<1.0", "1.0", "(1.0,1.1]", "(1.1,1.5]", ">1.5")


class ErrorLog:
    """Run events as (abs_sf, event, detail); shared by the decoder and tuner stages."""

    def __init__(self):
        self._lock = threading.Lock()
        self.records: list[tuple[int, str, str]] = []

    def append(self, abs_sf: int, event: str, detail: str = "") -> None:
        with self._lock:
            self.records.append((int(abs_sf), event, str(detail)))

    def events(self, name: str) -> list[tuple[int, str, str]]:
        return [r for r in self.records if r[1] == name]

    def counts(self) -> Counter:
        return Counter(r[1] for r in self.records)

    def to_text(self) -> str:
        return "".join(f"{sf}\t{event}\t{detail}\n" for sf, event, detail in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


@dataclass(frozen=True)
class PipelineConfig:
    k: int = DEFAULT_K
    segment_s: float = DEFAULT_SEGMENT_S
    # Per-segment tuning budget in seconds; None is unlimited offline and (k - 2) * segment_s live
    finetune_deadline: Optional[float] = None
    mode: str = "owl"
    finetune: bool = True
    live: bool = False
    # Offline only: ignore finetune_deadline and tune to completion
    unbounded: bool = False
    workers: int = WORKERS

    def __post_init__(self):
        if self.k < 3:
            raise ConfigError(f"k must be at least 3 (reader, decoder, tuner), got {self.k}")
        if self.segment_s <= 0:
            raise ConfigError(f"segment_s must be positive, got {self.segment_s}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode}")
        if self.finetune_deadline is not None:
            if self.finetune_deadline < 0:
                raise ConfigError(f"finetune_deadline must be >= 0, got {self.finetune_deadline}")
            if self.finetune_deadline > self.deadline_bound + 1e-9:
                raise ConfigError(f"finetune_deadline {self.finetune_deadline} exceeds (k-2) x segment_s "
                                  f"= {self.deadline_bound}")
        if self.unbounded and self.live:
            raise ConfigError("An unbounded fine-tuner cannot keep up with a live source")

    @property
    def deadline_bound(self) -> float:
        return (self.k - 2) * self.segment_s

    @property
    def deadline_s(self) -> Optional[float]:
        if self.unbounded:
            return None
        if self.finetune_deadline is not None:
            return self.finetune_deadline
        return self.deadline_bound if self.live else None

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "PipelineConfig":
        values = dict(values)
        cfg = cls(
            k=take(values, "k", int, DEFAULT_K),
            segment_s=take(values, "segment_s", float, DEFAULT_SEGMENT_S),
            finetune_deadline=take(values, "finetune_deadline", float),
            mode=take(values, "mode", str, "owl"),
            finetune=take(values, "finetune", parse_bool, True),
            live=take(values, "live", parse_bool, False),
            unbounded=take(values, "unbounded", parse_bool, False),
            workers=take(values, "workers", int, WORKERS),
        )
        reject_unknown(values, "pipeline")
        return cfg

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_kv(read_kv_file(path))


@dataclass(eq=False)
class TunerWork:
    """What the fine-tuner needs to revisit one subframe."""
    trace: IqTrace
    grid: ResourceGrid
    oracle: AcceptanceOracle
    subframe_start: int
    cfo_hz: float
    cfg: CellConfig


@dataclass(eq=False)
class SubframeResult:
    sf_index: int
    sample_start: int
    report: SubframeReport
    dcis: list
    tuner: Optional[TunerResult] = None
    work: Optional[TunerWork] = field(default=None, repr=False)

    @property
    def abs_sf(self) -> int:
        return self.sf_index % ABS_SF_PERIOD


@dataclass
class DecodeResult:
    subframes: list[SubframeResult]
    log: ErrorLog
    admissions: list = field(default_factory=list)
    sync: Optional[SyncState] = None
    cfg: Optional[CellConfig] = None

    def records(self) -> list[dict]:
        return [dci_row(dci, r.sf_index, int(r.report.cfi)) for r in self.subframes for dci in r.dcis]

    def dci_log(self) -> str:
        return export_dci_log(self.records())

    def dcis_by_sf(self) -> dict[int, list]:
        return {r.sf_index: list(r.dcis) for r in self.subframes}

    def subframe_starts(self) -> dict[int, int]:
        return {r.sf_index: r.sample_start for r in self.subframes}

    def path_counts(self) -> Counter:
        return Counter(dci.decode_path for r in self.subframes for dci in r.dcis)

    @property
    def uncertain(self) -> int:
        return sum(len(r.report.uncertain) for r in self.subframes)

    @property
    def tuner_timeouts(self) -> int:
        return sum(1 for r in self.subframes if r.tuner is not None and r.tuner.timed_out)

    def summary(self) -> dict:
        counts = self.path_counts()
        return {
            "subframes": len(self.subframes),
            "dcis": sum(counts.values()),
            **{f"path_{path}": n for path, n in sorted(counts.items())},
            "uncertain": self.uncertain,
            "tuner_timeouts": self.tuner_timeouts,
            "admissions": len(self.admissions),
            **{f"event_{name}": n for name, n in sorted(self.log.counts().items())},
        }


class Decoder:
    """
    Frame-by-frame decoder over a growing sample stream.

    Samples arrive through feed(); a frame is decoded once the buffer
    reaches past its end by the resync search window, so feeding a trace
    in segments gives the same result as feeding it whole. Buffer positions
    are absolute sample indices; the rolling buffer carries its own offset.
    """

    def __init__(self, sample_rate: float, mode: str = "owl", rntis: Optional[RntiList] = None,
                 log: Optional[ErrorLog] = None, finetune: bool = True, meta: Optional[dict] = None):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {mode}")
        self.sample_rate = float(sample_rate)
        self.mode = mode
        self.rntis = rntis if rntis is not None else RntiList()
        self.log = log if log is not None else ErrorLog()
        self.finetune = finetune
        self.meta = dict(meta or {})
        self.state: Optional[SyncState] = None
        self.cfg: Optional[CellConfig] = None
        self.admissions: list[tuple[int, str, int]] = []
        self._samples = np.zeros(0, dtype=np.complex64)
        self._base = 0
        self._search_from = 0
        self._next_start = 0
        self._frame = None
        self._check_timing = False
        self._frame_len = samples_per_frame(probe_config(self.sample_rate))

    @property
    def end(self) -> int:
        return self._base + len(self._samples)

    def _stamp(self) -> int:
        return 0 if self._frame is None else (SUBFRAMES_PER_FRAME * self._frame) % ABS_SF_PERIOD

    def feed(self, samples) -> list[SubframeResult]:
        samples = np.asarray(samples)
        if len(self._samples) == 0:
            self._samples = samples
        elif len(samples):
            self._samples = np.concatenate([self._samples, samples.astype(np.complex64, copy=False)])
        return self._run(final=False)

    def finish(self) -> list[SubframeResult]:
        results = self._run(final=True)
        self._samples = np.zeros(0, dtype=np.complex64)
        return results

    def skip(self, n_samples: int) -> None:
        """Account for samples that never arrived; timing is re-acquired after the gap."""
        gap_start = self.end
        self._base = gap_start + int(n_samples)
        self._samples = np.zeros(0, dtype=np.complex64)
        if self.state is not None:
            self.log.append(self._stamp(), "sync-loss", f"{n_samples} samples dropped at sample {gap_start}")
        self.state = None
        self._search_from = self._base

    def _trace(self) -> IqTrace:
        return IqTrace(self._samples, self.sample_rate, start_offset=self._base, meta=self.meta)

    def _acquire(self, trace: IqTrace, final: bool) -> bool:
        if not final and self.end < self._search_from + ACQUIRE_FRAMES * self._frame_len:
            return False
        if self._search_from + self._frame_len > self.end:
            if final and self.cfg is None:
                raise NoCellError(f"No cell found in {self.end} samples")
            return False
        try:
            state, mib = acquire_cell(trace, search_start=self._search_from - self._base, log=self.log,
                                      abs_sf=self._stamp())
        except NoCellError as e:
            if final:
                if self.cfg is None:
                    raise
                logging.warning(f"No re-acquisition before end of trace: {e}")
                return False
            logging.warning(f"No cell from sample {self._search_from}: {e}")
            self._search_from += self._frame_len
            return True

        cfg = CellConfig.from_sample_rate(mib.n_rb_dl, self.sample_rate, pci=state.pci, n_ports=state.n_ports,
                                          phich_ng=mib.phich_ng)
        declared = self.meta.get("n_rb_dl")
        if declared is not None and int(declared) != cfg.n_rb_dl:
            logging.warning(f"Trace metadata says {declared} RBs, MIB says {cfg.n_rb_dl}")
            self.log.append(self._stamp(), "bandwidth-mismatch", f"meta {declared} mib {cfg.n_rb_dl}")
        if self._frame is None:
            self._frame = state.sfn
        else:
            self._frame += (state.sfn - self._frame) % SFN_PERIOD
        self.cfg = cfg
        self.state = state
        self._next_start = self._base + state.frame_start
        self._check_timing = False
        logging.info(f"Acquired pci={state.pci} n_rb={cfg.n_rb_dl} sfn={state.sfn} at sample {self._next_start}")
        return True

    def _run(self, final: bool) -> list[SubframeResult]:
        results: list[SubframeResult] = []
        trace = self._trace()
        while True:
            if self.state is None:
                if not self._acquire(trace, final):
                    break
                continue
            start = self._next_start
            if not final and self.end < start + self._frame_len + self.cfg.fft_size:
                break
            # No whole frame left: keep the last good timing instead of checking past the end
            if start + self._frame_len > self.end:
                break
            if self._check_timing:
                try:
                    self.state = resync_check(self.state, trace, self.cfg, start - self._base, self.log, self._stamp())
                except ResyncRequest as e:
                    logging.warning(f"Re-acquiring from sample {start}: {e}")
                    self.state = None
                    self._search_from = start
                    self._frame += 1
                    continue
                start = self._base + self.state.frame_start
            if start + self._frame_len > self.end:
                break
            results.extend(self._decode_frame(trace, start))
            self._next_start = start + self._frame_len
            self._frame += 1
            self._check_timing = True
        self._trim()
        return results

    def _trim(self) -> None:
        # Two frames of history cover the resync window and a half-frame-early acquisition
        keep_from = self._next_start if self.state is not None else self._search_from
        keep_from -= HISTORY_FRAMES * self._frame_len
        drop = min(max(0, keep_from - self._base), len(self._samples))
        if drop:
            self._samples = self._samples[drop:]
            self._base += drop

    def _decode_frame(self, trace: IqTrace, start: int) -> list[SubframeResult]:
        cfg, state = self.cfg, self.state
        step = samples_per_subframe(cfg)
        results = []
        for subframe in range(SUBFRAMES_PER_FRAME):
            sf_index = SUBFRAMES_PER_FRAME * self._frame + subframe
            sf_start = start + subframe * step
            rel = sf_start - self._base
            grid = ofdm_demodulate(trace, cfg, rel, state.cfo_hz, sfn=self._frame % SFN_PERIOD, subframe=subframe)
            eq = equalize(grid, cfg)
            oracle = rnti_oracle(self.rntis, self.mode)
            report = decode_subframe(grid, cfg, oracle, eq=eq, log=self.log)
            admitted = process_subframe(report, eq, cfg, self.rntis, sf_index % COUNTER_PERIOD, self.mode, self.log)
            self.admissions.extend((rnti, origin, sf_index) for rnti, origin, _ in admitted)
            work = None
            if self.finetune and report.uncertain:
                work = TunerWork(trace, grid, oracle, rel, state.cfo_hz, cfg)
            results.append(SubframeResult(sf_index, sf_start, report, list(report.dcis), work=work))
        return results


def tune_subframes(results: list[SubframeResult], deadline_s: Optional[float], log: ErrorLog,
                   workers: int = WORKERS) -> None:
    """
    Fine-tune every subframe with uncertain locations, sharing one deadline.

    Recovered DCIs are merged into each result in CCE order. A subframe the
    tuner could not finish logs finetune-timeout and its unrecovered
    locations as lost-uncertain.
    """
    started = time.monotonic()
    for result in results:
        work = result.work
        if work is None:
            continue
        remaining = None if deadline_s is None else max(0.0, deadline_s - (time.monotonic() - started))
        tuner_cfg = replace(TunerConfig.for_cell(work.cfg, remaining), workers=workers)
        outcome = finetune(work.trace, result.report, work.cfg, work.oracle, tuner_cfg, work.subframe_start,
                           work.cfo_hz, grid=work.grid)
        result.tuner = outcome
        result.work = None
        if outcome.dcis:
            result.dcis = sorted(result.dcis + outcome.dcis, key=lambda d: d.cce_start)
        if outcome.timed_out:
            recovered = {c for dci in outcome.dcis for c in dci.location.cces}
            lost = sum(1 for loc in result.report.uncertain if not recovered.intersection(loc.cces))
            log.append(result.abs_sf, "finetune-timeout", f"{outcome.attempts} attempts")
            log.append(result.abs_sf, "lost-uncertain", f"{lost} locations")


def decode_trace(trace: IqTrace, mode: str = "owl", finetune: bool = True, deadline_s: Optional[float] = None,
                 rntis: Optional[RntiList] = None, log: Optional[ErrorLog] = None,
                 workers: int = WORKERS) -> DecodeResult:
    """
    Decode a whole trace in one pass.

    Args:
        trace: Input trace (timing is taken from the MIB, not the metadata)
        mode: owl (RNTI list) or lteye (re-encode acceptance only)
        finetune: Run the fine-tuner over uncertain locations
        deadline_s: Total fine-tuning budget; None is unlimited
        rntis: RNTI list to start from, e.g. a warm start
        log: ErrorLog to append to

    Returns:
        DecodeResult

    Raises:
        NoCellError: No cell acquired anywhere in the trace
    """
    decoder = Decoder(trace.sample_rate, mode, rntis, log, finetune, trace.meta)
    results = decoder.feed(trace.samples) + decoder.finish()
    if finetune:
        tune_subframes(results, deadline_s, decoder.log, workers)
    logging.info(f"Decoded {len(results)} subframes in {mode} mode")
    return DecodeResult(results, decoder.log, decoder.admissions, decoder.state, decoder.cfg)


# --- Segmented pipeline -----------------------------------------------------

class TraceSource(Protocol):
    sample_rate: float
    meta: dict
    live: bool

    def segments(self, segment_s: float) -> Iterator[np.ndarray]:
        ...


class ArrayTraceSource:
    """Segments of an in-memory trace; with live set, segments arrive at real-time pace."""

    def __init__(self, trace: IqTrace, live: bool = False):
        self.trace = trace
        self.sample_rate = trace.sample_rate
        self.meta = dict(trace.meta)
        self.live = live

    def segments(self, segment_s: float) -> Iterator[np.ndarray]:
        length = max(1, int(round(segment_s * self.sample_rate)))
        samples = self.trace.samples
        started = time.monotonic()
        for i, pos in enumerate(range(0, len(samples), length)):
            if self.live:
                delay = started + i * segment_s - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            yield np.asarray(samples[pos:pos + length], dtype=np.complex64)


class FileTraceSource(ArrayTraceSource):
    """Segments of a trace file, memory-mapped."""

    def __init__(self, path, live: bool = False):
        super().__init__(read_trace(path), live)
        self.path = Path(path)


def run_pipeline(source: TraceSource, pcfg: PipelineConfig, rntis: Optional[RntiList] = None,
                 log: Optional[ErrorLog] = None) -> DecodeResult:
    """
    Reader, decoder and tuner stages over k segment buffers.

    A buffer moves reader -> decoder -> tuner -> free and has one owner at a
    time. Offline, the reader waits for a free buffer; live, a segment
    without a free buffer is dropped and logged as overrun. The tuner gets
    pcfg.deadline_s per segment and results come out in time order.

    Raises:
        NoCellError: No cell acquired anywhere in the stream
    """
    log = log if log is not None else ErrorLog()
    decoder = Decoder(source.sample_rate, pcfg.mode, rntis, log, pcfg.finetune, source.meta)
    free: queue.Queue = queue.Queue()
    for slot in range(pcfg.k):
        free.put(slot)
    to_decoder: queue.Queue = queue.Queue()
    to_tuner: queue.Queue = queue.Queue()
    outputs: list[SubframeResult] = []

    def read():
        position = 0
        try:
            for index, samples in enumerate(source.segments(pcfg.segment_s)):
                if source.live:
                    try:
                        slot = free.get_nowait()
                    except queue.Empty:
                        logging.warning(f"Overrun: segment {index} dropped")
                        log.append(-1, "overrun", f"segment {index} at sample {position}")
                        to_decoder.put((None, len(samples)))
                        position += len(samples)
                        continue
                else:
                    slot = free.get()
                to_decoder.put((slot, samples))
                position += len(samples)
        finally:
            to_decoder.put(None)

    def decode():
        failure = None
        while (item := to_decoder.get()) is not None:
            slot, payload = item
            if failure is not None:
                if slot is not None:
                    free.put(slot)
                continue
            try:
                if slot is None:
                    decoder.skip(payload)
                    continue
                to_tuner.put((slot, decoder.feed(payload)))
            except Exception as e:
                failure = e
                free.put(slot)
        try:
            if failure is None:
                to_tuner.put((None, decoder.finish()))
        finally:
            to_tuner.put(None)
        if failure is not None:
            raise failure

    def tune():
        failure = None
        while (item := to_tuner.get()) is not None:
            slot, results = item
            try:
                if failure is None:
                    if pcfg.finetune:
                        tune_subframes(results, pcfg.deadline_s, log, pcfg.workers)
                    outputs.extend(results)
            except Exception as e:
                failure = e
            finally:
                if slot is not None:
                    free.put(slot)
        if failure is not None:
            raise failure

    with ThreadPoolExecutor(max_workers=3) as executor:
        futures = [executor.submit(stage) for stage in (read, decode, tune)]
        for future in futures:
            future.result()

    return DecodeResult(outputs, log, decoder.admissions, decoder.state, decoder.cfg)


# --- Analytics --------------------------------------------------------------

@dataclass
class LogStats:
    rates: pd.DataFrame
    mcs: pd.DataFrame


def _bin_sums(df: pd.DataFrame, bins: pd.Index, bin_s: float) -> np.ndarray:
    return (df.groupby("bin")["bits"].sum().reindex(bins, fill_value=0) / bin_s).to_numpy()


def stats(log: pd.DataFrame, bin_s: float = 1.0, top_n: int = 3, mcs_bin_s: float = MCS_BIN_S) -> LogStats:
    """
    Rate and MCS time series of a parsed DCI log.

    Time is measured from the first logged subframe at 1 ms per subframe.
    Rates are summed transport-block bits per bin over the bin length;
    retransmissions carry no new bits. The top_n C-RNTIs by total downlink
    bits get their own column, everyone else is in dl_rest.

    Args:
        log: DataFrame from parse_dci_log
        bin_s: Rate bin length in seconds
        top_n: Users broken out individually
        mcs_bin_s: MCS bin length in seconds

    Returns:
        LogStats with the rates and per-user MCS tables
    """
    if bin_s <= 0 or mcs_bin_s <= 0:
        raise ConfigError("Bin lengths must be positive")
    if top_n < 0:
        raise ConfigError(f"top_n must be >= 0, got {top_n}")
    if log.empty:
        return LogStats(pd.DataFrame(columns=["bin_start_s", "dl_bps", "ul_bps", "dl_rest"]),
                        pd.DataFrame(columns=["bin_start_s", "rnti", "mcs_mean", "mcs_std", "n"]))

    df = log.copy()
    seconds = (df["sf_index"] - df["sf_index"].min()) / 1000.0
    df["bits"] = df["tbs"].fillna(0).astype(np.int64)
    df["bin"] = np.floor(seconds / bin_s + 1e-9).astype(int)
    bins = pd.RangeIndex(int(df["bin"].max()) + 1)
    dl = df[df["direction"] == "downlink"]
    ul = df[df["direction"] == "uplink"]

    rates = pd.DataFrame({"bin_start_s": bins.to_numpy() * bin_s, "dl_bps": _bin_sums(dl, bins, bin_s),
                          "ul_bps": _bin_sums(ul, bins, bin_s)})
    users = dl[dl["rnti"].between(C_RNTI_MIN, C_RNTI_MAX)].groupby("rnti")["bits"].sum().reset_index()
    users = users.sort_values(["bits", "rnti"], ascending=[False, True])
    top = users["rnti"].head(top_n).tolist()
    for rnti in top:
        rates[f"dl_{rnti:04x}"] = _bin_sums(dl[dl["rnti"] == rnti], bins, bin_s)
    rates["dl_rest"] = _bin_sums(dl[~dl["rnti"].isin(top)], bins, bin_s)

    users_mcs = dl[dl["rnti"].between(C_RNTI_MIN, C_RNTI_MAX)].copy()
    users_mcs["mcs_bin"] = np.floor(
        (users_mcs["sf_index"] - df["sf_index"].min()) / 1000.0 / mcs_bin_s + 1e-9).astype(int)
    grouped = users_mcs.groupby(["mcs_bin", "rnti"])["mcs"]
    mcs = grouped.agg(mcs_mean="mean", mcs_std=lambda s: float(np.std(s)), n="count").reset_index()
    mcs.insert(0, "bin_start_s", mcs.pop("mcs_bin") * mcs_bin_s)
    mcs["rnti"] = mcs["rnti"].map(lambda r: f"{int(r):04x}")
    return LogStats(rates, mcs)


@dataclass
class ModeComparison:
    frames: pd.DataFrame
    owl: DetectionStats
    lteye: DetectionStats
    ratio_histogram: dict

    @property
    def experiment(self) -> dict:
        return {"owl": self.owl.ratio, "lteye": self.lteye.ratio}

    def to_csv(self) -> str:
        return frame_to_csv(self.frames)


def _ratio_label(owl: int, lteye: int, occupied: int) -> str:
    if occupied == 0:
        return NO_TRAFFIC
    if owl == lteye:
        return "1.0"
    if lteye == 0:
        return RATIO_LABELS[-1]
    ratio = owl / lteye
    if ratio < 1.0:
        return RATIO_LABELS[0]
    if ratio <= 1.1:
        return RATIO_LABELS[2]
    if ratio <= 1.5:
        return RATIO_LABELS[3]
    return RATIO_LABELS[4]


def compare_modes(trace: IqTrace, finetune: bool = False) -> ModeComparison:
    """
    Decode a trace in owl and lteye modes and compare both against measured occupancy.

    Occupancy is measured once, at the owl run's subframe timing. Besides the
    per-mode detection statistics, every frame gets the owl/lteye ratio of
    decoded downlink RBs.

    Raises:
        NoCellError: No cell in the trace
    """
    owl = decode_trace(trace, "owl", finetune)
    lteye = decode_trace(trace, "lteye", finetune)
    power = power_map(trace, owl.cfg, owl.sync, subframe_starts=owl.subframe_starts())
    owl_stats = detection_stats(power, owl.dcis_by_sf())
    lteye_stats = detection_stats(power, lteye.dcis_by_sf())

    frames = owl_stats.frames[["frame", "occupied_rbs", "decoded_rbs", "ratio"]].merge(
        lteye_stats.frames[["frame", "decoded_rbs", "ratio"]], on="frame", suffixes=("_owl", "_lteye"))
    frames = frames.rename(columns={"decoded_rbs_owl": "owl_decoded_rbs", "decoded_rbs_lteye": "lteye_decoded_rbs",
                                    "ratio_owl": "owl_ratio", "ratio_lteye": "lteye_ratio"})
    frames["owl_over_lteye"] = [
        float("nan") if occ == 0 or lte == 0 else o / lte
        for o, lte, occ in zip(frames["owl_decoded_rbs"], frames["lteye_decoded_rbs"], frames["occupied_rbs"])
    ]
    histogram = {label: 0 for label in RATIO_LABELS + (NO_TRAFFIC,)}
    for o, lte, occ in zip(frames["owl_decoded_rbs"], frames["lteye_decoded_rbs"], frames["occupied_rbs"]):
        histogram[_ratio_label(int(o), int(lte), int(occ))] += 1
    return ModeComparison(frames, owl_stats, lteye_stats, histogram)


# --- CLI --------------------------------------------------------------------

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_or_print(text: str, path: Optional[str]) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_rntis(path: Optional[str]) -> RntiList:
    rntis = RntiList()
    if path:
        count = rntis.load_warmstart(path)
        logging.info(f"Warm start with {count} RNTIs from {path}")
    return rntis


def _cmd_simulate(args) -> int:
    from cellsim import ScenarioConfig, simulate_to_file, truth_path
    scenario = ScenarioConfig.from_file(args.config)
    simulate_to_file(scenario, args.out, args.workers)
    logging.info(f"Wrote {args.out} and {truth_path(args.out)}")
    return EXIT_OK


def _finish_decode(result: DecodeResult, args) -> int:
    _write_or_print(result.dci_log(), args.out)
    if args.errors:
        result.log.write(args.errors)
    for key, value in result.summary().items():
        logging.info(f"{key}: {value}")
    return EXIT_OK


def _cmd_decode(args) -> int:
    trace = read_trace(args.trace)
    result = decode_trace(trace, args.mode, not args.no_finetune, args.deadline, _load_rntis(args.rnti_warmstart),
                          workers=args.workers)
    return _finish_decode(result, args)


def _cmd_pipeline(args) -> int:
    values = read_kv_file(args.config) if args.config else {}
    overrides = {"k": args.k, "segment_s": args.segment, "finetune_deadline": args.deadline, "mode": args.mode}
    for key, value in overrides.items():
        if value is not None:
            values[key] = str(value)
    if args.no_finetune:
        values["finetune"] = "false"
    if args.live:
        values["live"] = "true"
    if args.no_deadline:
        values["unbounded"] = "true"
    pcfg = PipelineConfig.from_kv(values)
    source = FileTraceSource(args.trace, live=pcfg.live)
    result = run_pipeline(source, pcfg, _load_rntis(args.rnti_warmstart))
    return _finish_decode(result, args)


def _cmd_verify(args) -> int:
    trace = read_trace(args.trace)
    log = parse_dci_log(Path(args.log))
    timing = decode_trace(trace, "owl", finetune=False)
    power = power_map(trace, timing.cfg, timing.sync, subframe_starts=timing.subframe_starts())
    logged = {sf: [d for d in rows.itertuples()] for sf, rows in log.groupby("sf_index")}
    result = detection_stats(power, logged)
    _write_or_print(stats_to_csv(result, Path(args.log).stem), args.out)
    return EXIT_OK


def _cmd_stats(args) -> int:
    log = parse_dci_log(Path(args.log))
    result = stats(log, args.bin, args.top, args.mcs_bin)
    if args.out:
        Path(f"{args.out}.rates.csv").write_text(frame_to_csv(result.rates), encoding="utf-8")
        Path(f"{args.out}.mcs.csv").write_text(frame_to_csv(result.mcs), encoding="utf-8")
    else:
        sys.stdout.write(frame_to_csv(result.rates))
        sys.stdout.write("\n")
        sys.stdout.write(frame_to_csv(result.mcs))
    return EXIT_OK


def _cmd_compare(args) -> int:
    comparison = compare_modes(read_trace(args.trace), finetune=args.finetune)
    experiments = pd.concat([stats_frame(comparison.owl, "owl").tail(1), stats_frame(comparison.lteye, "lteye").tail(1)])
    histogram = pd.DataFrame(sorted(comparison.ratio_histogram.items()), columns=["owl_over_lteye", "frames"])
    text = "\n".join([frame_to_csv(experiments), comparison.to_csv(), frame_to_csv(histogram)])
    _write_or_print(text, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="owl", description="LTE control-channel watcher")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    simulate = commands.add_parser("simulate", help="Synthesize a trace and its ground truth")
    simulate.add_argument("config", help="Scenario key=value file")
    simulate.add_argument("--out", required=True, help="Trace path (.meta and .truth.tsv are written alongside)")
    simulate.add_argument("--workers", type=int, default=WORKERS)
    simulate.set_defaults(handler=_cmd_simulate)

    def decoding_flags(sub):
        sub.add_argument("trace")
        sub.add_argument("--out", help="DCI log path (default: stdout)")
        sub.add_argument("--errors", help="Error log path")
        sub.add_argument("--mode", choices=MODES, default=None)
        sub.add_argument("--no-finetune", action="store_true")
        sub.add_argument("--rnti-warmstart", help="File with one hex RNTI per line")
        sub.add_argument("--deadline", type=float, default=None, help="Fine-tuning budget in seconds")
        sub.add_argument("--workers", type=int, default=WORKERS)

    decode = commands.add_parser("decode", help="Decode a trace into a DCI log")
    decoding_flags(decode)
    decode.set_defaults(handler=_cmd_decode, mode="owl")

    pipeline = commands.add_parser("pipeline", help="Decode through the k-buffer pipeline")
    decoding_flags(pipeline)
    pipeline.add_argument("--k", type=int, default=None)
    pipeline.add_argument("--segment", type=float, default=None, help="Segment length in seconds")
    pipeline.add_argument("--config", help="Pipeline key=value file")
    pipeline.add_argument("--live", action="store_true", help="Pace the reader at real time")
    pipeline.add_argument("--no-deadline", action="store_true", help="Offline: ignore --deadline and tune to completion")
    pipeline.set_defaults(handler=_cmd_pipeline)

    verify = commands.add_parser("verify", help="Check a DCI log against measured PDSCH occupancy")
    verify.add_argument("trace")
    verify.add_argument("log")
    verify.add_argument("--out")
    verify.set_defaults(handler=_cmd_verify)

    stats_cmd = commands.add_parser("stats", help="Rate and MCS time series of a DCI log")
    stats_cmd.add_argument("log")
    stats_cmd.add_argument("--bin", type=float, default=1.0, help="Rate bin in seconds")
    stats_cmd.add_argument("--top", type=int, default=3, help="Users broken out individually")
    stats_cmd.add_argument("--mcs-bin", type=float, default=MCS_BIN_S, help="MCS bin in seconds")
    stats_cmd.add_argument("--out", help="Output prefix (default: stdout)")
    stats_cmd.set_defaults(handler=_cmd_stats)

    compare = commands.add_parser("compare", help="Compare owl and lteye decoding of a trace")
    compare.add_argument("trace")
    compare.add_argument("--finetune", action="store_true")
    compare.add_argument("--out")
    compare.set_defaults(handler=_cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except (UsageError, ConfigError) as e:
        logging.error(f"Usage: {e}")
        return EXIT_USAGE
    except NoCellError as e:
        logging.error(f"No cell: {e}")
        return EXIT_NO_CELL
    except (OSError, TraceError, LogFormatError) as e:
        logging.error(f"I/O: {e}")
        return EXIT_IO
