"""Cross-check decoded downlink schedules against measured PDSCH power."""
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np
import pandas as pd

from grid import (
    CRS_SYMBOLS, SUBCARRIERS_PER_RB, CellConfig, IqTrace, TraceError, crs_subcarriers,
    ofdm_demodulate, reserved_mask, samples_per_subframe,
)
from export_utils import frame_to_csv
from sync import SyncState

# Occupied when the mean data power exceeds this fraction of the nearby reference power
OCCUPANCY_RHO = 0.5
# First symbol measured; the largest control region ends before it
PDSCH_FIRST_SYMBOL = 3

NO_TRAFFIC = "no-traffic"
FALSE_POSITIVE = ">1.0"
HISTOGRAM_EDGES = (0.0, 0.5, 0.8, 0.9, 0.95, 0.99, 1.0)
HISTOGRAM_LABELS = ("[0,0.5)", "[0.5,0.8)", "[0.8,0.9)", "[0.9,0.95)", "[0.95,0.99)", "[0.99,1.0)", "1.0",
                    FALSE_POSITIVE)

STATS_COLUMNS = ["scope", "frame_or_exp_id", "occupied_rbs", "decoded_rbs", "ratio", "false_positive_rbs"]


@dataclass
class PowerMap:
    """Per-subframe, per-RB PDSCH power against the reference power of the same RB."""
    sf_index: np.ndarray
    power: np.ndarray
    reference: np.ndarray
    rho: float = OCCUPANCY_RHO

    @property
    def occupied(self) -> np.ndarray:
        return self.power > self.rho * self.reference

    @property
    def n_rb(self) -> int:
        return self.power.shape[1]

    def row(self, sf_index: int) -> Optional[int]:
        hits = np.flatnonzero(self.sf_index == sf_index)
        return int(hits[0]) if len(hits) else None

    def occupied_rbs(self, sf_index: int) -> frozenset:
        i = self.row(sf_index)
        return frozenset() if i is None else frozenset(np.flatnonzero(self.occupied[i]).tolist())


@dataclass
class DetectionStats:
    frames: pd.DataFrame
    occupied_rbs: int
    decoded_rbs: int
    false_positive_rbs: int
    histogram: dict = field(default_factory=dict)
    undecoded_occupied_rbs: int = 0

    @property
    def ratio(self) -> float:
        return self.decoded_rbs / self.occupied_rbs if self.occupied_rbs else float("nan")

    @property
    def no_traffic_frames(self) -> int:
        return self.histogram.get(NO_TRAFFIC, 0)

    @property
    def complete_frames(self) -> float:
        """Fraction of frames with traffic whose every occupied RB was decoded."""
        traffic = self.frames[self.frames["occupied_rbs"] > 0]
        if traffic.empty:
            return float("nan")
        return float((traffic["ratio"] >= 1.0).mean())


def _data_mask(cfg: CellConfig, subframe: int) -> np.ndarray:
    """Measured data REs as an (RB, 12, symbol) mask."""
    free = ~reserved_mask(cfg, subframe)
    free[:, :PDSCH_FIRST_SYMBOL] = False
    return free.reshape(cfg.n_rb_dl, SUBCARRIERS_PER_RB, -1)


def subframe_rb_power(cells: np.ndarray, cfg: CellConfig, subframe: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Mean data power and mean reference power of each RB of one subframe grid.

    The reference of an RB is the mean power of the port-0 reference
    signals inside that RB over the four reference-bearing symbols.
    """
    power = np.abs(cells) ** 2
    free = _data_mask(cfg, subframe)
    per_rb = power.reshape(cfg.n_rb_dl, SUBCARRIERS_PER_RB, -1)
    counts = free.sum(axis=(1, 2))
    data = np.where(counts > 0, (per_rb * free).sum(axis=(1, 2)) / np.maximum(counts, 1), 0.0)

    ref_sum = np.zeros(cfg.n_rb_dl)
    ref_count = np.zeros(cfg.n_rb_dl)
    for l in CRS_SYMBOLS:
        k = crs_subcarriers(cfg, l)
        rb = k // SUBCARRIERS_PER_RB
        np.add.at(ref_sum, rb, power[k, l])
        np.add.at(ref_count, rb, 1)
    return data, ref_sum / np.maximum(ref_count, 1)


def power_map(trace: IqTrace, cfg: CellConfig, sync: SyncState, n_subframes: Optional[int] = None,
              subframe_starts: Optional[Mapping[int, int]] = None) -> PowerMap:
    """
    Measure PDSCH occupancy of every RB in every subframe.

    Args:
        trace: Input trace
        cfg: Cell configuration
        sync: Acquired state; frame_start and sfn anchor the first subframe
        n_subframes: Limit on subframes measured (default: all whole subframes)
        subframe_starts: sf_index to sample-start mapping from a decode run, used
            instead of a fixed cadence so resyncs are followed

    Returns:
        PowerMap with one row per measured subframe
    """
    step = samples_per_subframe(cfg)
    if subframe_starts is None:
        available = max(0, (len(trace.samples) - sync.frame_start) // step)
        count = available if n_subframes is None else min(n_subframes, available)
        base = 10 * sync.sfn
        subframe_starts = {base + i: sync.frame_start + i * step for i in range(count)}
    elif n_subframes is not None:
        subframe_starts = dict(list(subframe_starts.items())[:n_subframes])

    rows, powers, refs = [], [], []
    for sf_index, start in subframe_starts.items():
        frame, subframe = divmod(sf_index, 10)
        try:
            grid = ofdm_demodulate(trace, cfg, start, sync.cfo_hz, sfn=frame % 1024, subframe=subframe)
        except TraceError as e:
            logging.warning(f"Power map stops at subframe {sf_index}: {e}")
            break
        data, ref = subframe_rb_power(grid.cells, cfg, subframe)
        rows.append(sf_index)
        powers.append(data)
        refs.append(ref)

    shape = (len(rows), cfg.n_rb_dl)
    return PowerMap(np.asarray(rows, dtype=np.int64), np.asarray(powers).reshape(shape),
                    np.asarray(refs).reshape(shape))


def decoded_rb_count(dcis, subframe: Optional[int] = None) -> int:
    """
    Sum of n_rb over downlink DCIs.

    `dcis` is either one subframe's list or a mapping keyed by sf_index, in
    which case `subframe` selects the entry.
    """
    if isinstance(dcis, Mapping):
        dcis = dcis.get(subframe, []) if subframe is not None else [d for v in dcis.values() for d in v]
    return sum(dci.n_rb for dci in dcis if dci.direction == "downlink")


def _histogram_label(ratio: float) -> str:
    if np.isnan(ratio):
        return NO_TRAFFIC
    if ratio > 1.0:
        return FALSE_POSITIVE
    if ratio == 1.0:
        return "1.0"
    index = int(np.searchsorted(HISTOGRAM_EDGES, ratio, side="right")) - 1
    return HISTOGRAM_LABELS[index]


def detection_stats(power: PowerMap, dcis_by_sf: Mapping[int, list]) -> DetectionStats:
    """
    Per-frame and whole-run detection ratios: decoded downlink RBs over occupied RBs.

    A subframe decoding more RBs than it shows occupied contributes the excess
    as false-positive RBs; frames without occupied RBs count as no-traffic.

    Args:
        power: Measured occupancy
        dcis_by_sf: Decoded (or ground-truth) DCIs keyed by sf_index

    Returns:
        DetectionStats with a per-frame table and histogram
    """
    frames: dict[int, list[int]] = {}
    undecoded = 0
    for i, sf_index in enumerate(power.sf_index.tolist()):
        dcis = dcis_by_sf.get(sf_index, [])
        occupied = int(power.occupied[i].sum())
        decoded = decoded_rb_count(dcis)
        covered = {rb for d in dcis if d.direction == "downlink" for rb in getattr(d, "rbs", ())}
        undecoded += len(set(np.flatnonzero(power.occupied[i]).tolist()) - covered)
        acc = frames.setdefault(sf_index // 10, [0, 0, 0])
        acc[0] += occupied
        acc[1] += decoded
        acc[2] += max(0, decoded - occupied)

    table = pd.DataFrame(
        [(frame, occ, dec, dec / occ if occ else float("nan"), fp) for frame, (occ, dec, fp) in frames.items()],
        columns=["frame", "occupied_rbs", "decoded_rbs", "ratio", "false_positive_rbs"],
    )
    histogram = {label: 0 for label in HISTOGRAM_LABELS + (NO_TRAFFIC,)}
    for ratio in table["ratio"]:
        histogram[_histogram_label(ratio)] += 1

    return DetectionStats(table, int(table["occupied_rbs"].sum()), int(table["decoded_rbs"].sum()),
                          int(table["false_positive_rbs"].sum()), histogram, undecoded)


def truth_occupancy_agreement(power: PowerMap, occupancy: Mapping[int, Iterable[int]]) -> float:
    """Fraction of measured (subframe, RB) cells whose occupancy matches the ground-truth RB sets."""
    if len(power.sf_index) == 0:
        return float("nan")
    truth = np.zeros_like(power.occupied)
    for i, sf_index in enumerate(power.sf_index.tolist()):
        rbs = list(occupancy.get(sf_index, ()))
        truth[i, rbs] = True
    return float((truth == power.occupied).mean())


def stats_frame(stats: DetectionStats, experiment_id: str = "run") -> pd.DataFrame:
    frame_rows = stats.frames.rename(columns={"frame": "frame_or_exp_id"}).assign(scope="frame")
    summary = pd.DataFrame([{
        "scope": "experiment",
        "frame_or_exp_id": experiment_id,
        "occupied_rbs": stats.occupied_rbs,
        "decoded_rbs": stats.decoded_rbs,
        "ratio": stats.ratio,
        "false_positive_rbs": stats.false_positive_rbs,
    }])
    return pd.concat([frame_rows[STATS_COLUMNS], summary[STATS_COLUMNS]], ignore_index=True)


def stats_to_csv(stats: DetectionStats, experiment_id: str = "run") -> str:
    return frame_to_csv(stats_frame(stats, experiment_id))
