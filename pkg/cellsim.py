"""Synthetic eNodeB: downlink traces with ground truth, plus channel and timing impairments."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

import coding
from config import WORKERS, ConfigError, parse_bool, parse_int_list, read_kv_file, reject_unknown, take
from export_utils import dci_row, export_dci_log
from grid import (
    CRS_SYMBOLS, SFN_PERIOD, SUBFRAMES_PER_FRAME, SYMBOLS_PER_SUBFRAME, CellConfig, IqTrace,
    crs_subcarriers, crs_values, cp_lengths, ofdm_modulate, pdsch_positions, samples_per_frame,
    samples_per_subframe, symbol_starts, write_trace,
)
from pdcch import (
    C_RNTI_MAX, C_RNTI_MIN, SI_RNTI, CandidateLocation, Dci, ParseReject, control_layout, encode_dci,
    encode_pcfich, enumerate_locations, pack_dci, parse_dci, rbg_count, rbg_size, riv_encode, vrb_1c,
)
from sync import PSS_SYMBOL, SSS_SYMBOL, pbch_positions, pbch_symbols, pss_sequence, sss_sequence, sync_rows
from tracker import build_rar_pdu, encode_transport_block, ra_rnti_for
from tuner import control_symbols

TRUTH_PATH = "truth"
RAR_AGGREGATION = 4
SI_AGGREGATION = 4
RAR_DELAY = (3, 5)
# UE-specific DCIs start this many subframes after the UE's RAR
UE_SETTLE_SUBFRAMES = 8
FIRST_MEASURED_SYMBOL = 3

DEFAULT_FORMAT_MIX = {"1A": 3.0, "0": 3.0, "1": 2.0, "2A": 1.0, "2": 1.0, "1B": 0.5, "1D": 0.5}
DEFAULT_AGGREGATION_MIX = {1: 4.0, 2: 3.0, 4: 2.0, 8: 1.0}

_CELL_KEYS = ("n_rb_dl", "pci", "n_ports", "phich_ng", "sample_rate_hz", "cp", "duplex")


class SchedulingError(Exception):
    """A mandatory transmission does not fit its subframe."""

    def __init__(self, message: str, sf_index: int):
        super().__init__(f"Subframe {sf_index}: {message}")
        self.sf_index = sf_index


@dataclass(frozen=True)
class ExplicitDci:
    """A DCI placed at trace subframe `t` regardless of the traffic model."""
    t: int
    rnti: int
    format: str
    values: dict
    aggregation: int = 4
    cce_start: Optional[int] = None


@dataclass
class Impairments:
    snr_db: Optional[float] = None
    cfo_hz: float = 0.0
    # trace frame -> samples inserted (positive) or removed (negative) at its start
    jumps: dict = field(default_factory=dict)
    # trace subframe -> (shift, symbols) applied to control symbols
    control_offsets: dict = field(default_factory=dict)
    interference_rbs: tuple = ()
    interference_power: float = 1.0

    @property
    def is_identity(self) -> bool:
        return (self.snr_db is None and not self.cfo_hz and not any(self.jumps.values())
                and not self.control_offsets and not self.interference_rbs)


def _parse_weights(raw: str, key_type=str) -> dict:
    weights = {}
    for item in raw.replace(" ", "").split(","):
        if not item:
            continue
        name, _, weight = item.partition(":")
        weights[key_type(name)] = float(weight) if weight else 1.0
    return weights


def _parse_shifts(raw: str) -> dict[int, int]:
    return {int(k): int(v) for k, v in (item.split(":") for item in raw.replace(" ", "").split(",") if item)}


@dataclass
class ScenarioConfig:
    cfg: CellConfig
    frames: int = 10
    start_sfn: int = 0
    seed: int = 0
    ue_arrival_rate: float = 2.0
    ue_dci_rate: float = 100.0
    max_ues: int = 16
    warm_rntis: tuple = ()
    format_mix: dict = field(default_factory=lambda: dict(DEFAULT_FORMAT_MIX))
    aggregation_mix: dict = field(default_factory=lambda: dict(DEFAULT_AGGREGATION_MIX))
    mcs_max: int = 28
    n_rb_max: Optional[int] = None
    min_cfi: int = 1
    si: bool = True
    filler_power: float = 1.0
    control_offset_rate: float = 0.0
    control_offset: int = 8
    impairments: Impairments = field(default_factory=Impairments)
    explicit: tuple = ()

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if not 1 <= self.min_cfi <= 3:
            raise ConfigError(f"min_cfi must be 1..3, got {self.min_cfi}")
        if not 0 <= self.mcs_max <= 28:
            raise ConfigError(f"mcs_max must be 0..28, got {self.mcs_max}")
        unknown = set(self.format_mix) - set(DEFAULT_FORMAT_MIX)
        if unknown:
            raise ConfigError(f"Unsupported traffic formats: {', '.join(sorted(unknown))}")
        if set(self.aggregation_mix) - {1, 2, 4, 8}:
            raise ConfigError(f"Aggregation levels must be 1, 2, 4 or 8, got {sorted(self.aggregation_mix)}")
        if any(not C_RNTI_MIN <= r <= C_RNTI_MAX for r in self.warm_rntis):
            raise ConfigError("warm_rntis must lie in the C-RNTI range")
        if any(not 0 <= rb < self.cfg.n_rb_dl for rb in self.impairments.interference_rbs):
            raise ConfigError(f"interference_rbs outside 0..{self.cfg.n_rb_dl - 1}")

    @property
    def n_subframes(self) -> int:
        return SUBFRAMES_PER_FRAME * self.frames

    @property
    def base_sf_index(self) -> int:
        return SUBFRAMES_PER_FRAME * self.start_sfn

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "ScenarioConfig":
        values = dict(values)
        cfg = CellConfig.from_kv({k: values.pop(k) for k in _CELL_KEYS if k in values})
        impairments = Impairments(
            snr_db=take(values, "snr_db", float),
            cfo_hz=take(values, "cfo_hz", float, 0.0),
            jumps=take(values, "jumps", _parse_shifts, {}),
            interference_rbs=tuple(take(values, "interference_rbs", parse_int_list, [])),
            interference_power=take(values, "interference_power", float, 1.0),
        )
        scenario = cls(
            cfg=cfg,
            frames=take(values, "frames", int, 10),
            start_sfn=take(values, "start_sfn", int, 0),
            seed=take(values, "seed", int, 0),
            ue_arrival_rate=take(values, "ue_arrival_rate", float, 2.0),
            ue_dci_rate=take(values, "ue_dci_rate", float, 100.0),
            max_ues=take(values, "max_ues", int, 16),
            warm_rntis=tuple(take(values, "warm_rntis", parse_int_list, [])),
            format_mix=take(values, "format_mix", _parse_weights, dict(DEFAULT_FORMAT_MIX)),
            aggregation_mix=take(values, "aggregation_mix", lambda raw: _parse_weights(raw, int),
                                 dict(DEFAULT_AGGREGATION_MIX)),
            mcs_max=take(values, "mcs_max", int, 28),
            n_rb_max=take(values, "n_rb_max", int),
            min_cfi=take(values, "min_cfi", int, 1),
            si=take(values, "si", parse_bool, True),
            filler_power=take(values, "filler_power", float, 1.0),
            control_offset_rate=take(values, "control_offset_rate", float, 0.0),
            control_offset=take(values, "control_offset", int, 8),
            impairments=impairments,
        )
        reject_unknown(values, "scenario")
        return scenario

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        return cls.from_kv(read_kv_file(path))


@dataclass(frozen=True)
class RarTruth:
    ra_rnti: int
    temp_crnti: int
    pdu: bytes
    rbs: tuple


@dataclass
class SubframeTruth:
    sf_index: int
    cfi: int
    dcis: list = field(default_factory=list)
    rars: list = field(default_factory=list)
    occupancy: frozenset = frozenset()
    interference: frozenset = frozenset()
    impairments: list = field(default_factory=list)

    @property
    def sfn(self) -> int:
        return (self.sf_index // SUBFRAMES_PER_FRAME) % SFN_PERIOD

    @property
    def subframe(self) -> int:
        return self.sf_index % SUBFRAMES_PER_FRAME


@dataclass
class GroundTruth:
    cfg: CellConfig
    subframes: dict = field(default_factory=dict)
    jumps: dict = field(default_factory=dict)

    def dcis_by_sf(self) -> dict[int, list]:
        return {k: list(v.dcis) for k, v in self.subframes.items()}

    def occupancy(self) -> dict[int, frozenset]:
        return {k: v.occupancy for k, v in self.subframes.items()}

    def all_dcis(self) -> list[tuple[int, Dci]]:
        return [(k, d) for k, v in sorted(self.subframes.items()) for d in v.dcis]

    def first_dci_sf(self) -> dict[int, int]:
        """First subframe each C-RNTI is addressed by a DCI."""
        first = {}
        for k, dci in self.all_dcis():
            if C_RNTI_MIN <= dci.rnti <= C_RNTI_MAX:
                first.setdefault(dci.rnti, k)
        return first


# --- Scheduling -------------------------------------------------------------

@dataclass
class _Request:
    rnti: int
    format: str
    aggregation: int
    mandatory: bool
    values: Optional[dict] = None
    cce_start: Optional[int] = None
    rar: Optional[tuple] = None


@dataclass
class SubframePlan:
    t: int
    truth: SubframeTruth
    fillers: list = field(default_factory=list)
    control_offset: Optional[tuple] = None


def _weighted_choice(rng: np.random.Generator, weights: dict):
    keys = list(weights)
    p = np.asarray([weights[k] for k in keys], dtype=np.float64)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


class Scheduler:
    """Sequential per-subframe scheduling: random access, system information and UE traffic."""

    def __init__(self, scenario: ScenarioConfig, rng: np.random.Generator):
        self.scenario = scenario
        self.cfg = scenario.cfg
        self.rng = rng
        self.ues: dict[int, int] = {rnti: 0 for rnti in scenario.warm_rntis}
        self.pending_rars: list[dict] = []
        self.used_rntis = set(scenario.warm_rntis)
        self.last_rar_due = -1
        self.explicit: dict[int, list[ExplicitDci]] = {}
        for item in scenario.explicit:
            self.explicit.setdefault(item.t, []).append(item)
        self.max_cces = control_layout(self.cfg, 3).n_cce

    def _sf_index(self, t: int) -> int:
        return self.scenario.base_sf_index + t

    def _carries_si(self, t: int) -> bool:
        sf_index = self._sf_index(t)
        return self.scenario.si and sf_index % 10 == 5 and (sf_index // 10) % 2 == 0

    def _new_rnti(self) -> int:
        while True:
            rnti = int(self.rng.integers(C_RNTI_MIN, C_RNTI_MAX + 1))
            if rnti not in self.used_rntis:
                self.used_rntis.add(rnti)
                return rnti

    def _arrivals(self, t: int) -> None:
        s = self.scenario
        if len(self.ues) + len(self.pending_rars) >= s.max_ues:
            return
        if s.ue_arrival_rate <= 0 or self.rng.poisson(s.ue_arrival_rate / 1000.0) == 0:
            return
        due = max(t + int(self.rng.integers(RAR_DELAY[0], RAR_DELAY[1] + 1)), self.last_rar_due + 1)
        while self._carries_si(due):
            due += 1
        if due >= s.n_subframes:
            return
        self.last_rar_due = due
        rnti = self._new_rnti()
        self.pending_rars.append({
            "due": due,
            "ra_rnti": ra_rnti_for(self._sf_index(t) % 10),
            "rnti": rnti,
            "rapid": int(self.rng.integers(0, 64)),
            "ta": int(self.rng.integers(0, 64)),
            "grant": int(self.rng.integers(0, 1 << 20)),
        })

    def _requests(self, t: int) -> list[_Request]:
        s = self.scenario
        requests = []
        for rar in [r for r in self.pending_rars if r["due"] == t]:
            self.pending_rars.remove(rar)
            requests.append(_Request(rar["ra_rnti"], "1A", RAR_AGGREGATION, True, rar=rar))
            self.ues[rar["rnti"]] = t + UE_SETTLE_SUBFRAMES
        if self._carries_si(t):
            requests.append(_Request(SI_RNTI, "1A" if self.rng.random() < 0.5 else "1C", SI_AGGREGATION, True))
        for item in self.explicit.get(t, []):
            requests.append(_Request(item.rnti, item.format, item.aggregation, True, dict(item.values), item.cce_start))
        for rnti, ready in self.ues.items():
            if ready > t or self.rng.random() >= s.ue_dci_rate / 1000.0:
                continue
            aggregation = _weighted_choice(self.rng, s.aggregation_mix)
            while aggregation > self.max_cces:
                aggregation //= 2
            requests.append(_Request(rnti, _weighted_choice(self.rng, s.format_mix), aggregation, False))
        return requests

    def _place(self, requests: list[_Request], cfi: int) -> Optional[dict[int, CandidateLocation]]:
        """CCE placement at a CFI; None when a mandatory request does not fit."""
        locations = {loc.key: loc for loc in enumerate_locations(cfi, self.cfg)}
        n_cce = control_layout(self.cfg, cfi).n_cce
        used: set[int] = set()
        placed = {}
        for i, req in enumerate(requests):
            if req.cce_start is not None:
                starts = [req.cce_start] if (req.cce_start, req.aggregation) in locations else []
            else:
                starts = list(range(0, n_cce - req.aggregation + 1, req.aggregation))
            free = [st for st in starts if not used.intersection(range(st, st + req.aggregation))]
            if not free:
                if req.mandatory:
                    return None
                continue
            start = free[0] if req.cce_start is not None else free[int(self.rng.integers(len(free)))]
            used.update(range(start, start + req.aggregation))
            placed[i] = locations[(start, req.aggregation)]
        return placed

    def _contiguous(self, free: np.ndarray, length: int) -> Optional[int]:
        n = len(free)
        starts = [st for st in range(n - length + 1) if free[st:st + length].all()]
        return None if not starts else starts[int(self.rng.integers(len(starts)))]

    def _length(self) -> int:
        n = self.cfg.n_rb_dl
        upper = self.scenario.n_rb_max or max(1, n // 2)
        return int(self.rng.integers(1, min(upper, n) + 1))

    def _transport(self) -> dict:
        return {"mcs": int(self.rng.integers(0, self.scenario.mcs_max + 1)), "harq": int(self.rng.integers(0, 8)),
                "ndi": int(self.rng.integers(0, 2)), "rv": 0, "tpc": int(self.rng.integers(0, 4))}

    def _values(self, req: _Request, dl_free: np.ndarray, ul_free: np.ndarray) -> Optional[dict]:
        """Field values with an allocation taken from the free pools; None when nothing fits."""
        n = self.cfg.n_rb_dl
        rng = self.rng
        if req.rar is not None:
            start = self._contiguous(dl_free, 2)
            if start is None:
                return None
            return {"distributed": 0, "riv": riv_encode(start, 2, n), "mcs": 1, "harq": 0, "ndi": 0, "rv": 0, "tpc": 0}
        if req.rnti == SI_RNTI and req.format == "1C":
            n_vrb, step = vrb_1c(n)
            units = n_vrb // step
            length = int(rng.integers(1, units + 1))
            free_units = np.array([dl_free[u * step:(u + 1) * step].all() for u in range(units)])
            start = self._contiguous(free_units, length)
            if start is None:
                return None
            return {"riv": riv_encode(start, length, units), "tbs_index": int(rng.integers(0, 11))}
        if req.rnti == SI_RNTI:
            length = min(4, n)
            start = self._contiguous(dl_free, length)
            if start is None:
                return None
            return {"distributed": 0, "riv": riv_encode(start, length, n), "mcs": int(rng.integers(0, 9)),
                    "harq": 0, "ndi": 0, "rv": 0, "tpc": int(rng.integers(0, 4))}

        if req.format == "0":
            length = self._length()
            start = self._contiguous(ul_free, length)
            if start is None:
                return None
            return {"hopping": 0, "riv": riv_encode(start, length, n),
                    "mcs": int(rng.integers(0, self.scenario.mcs_max + 1)), "ndi": int(rng.integers(0, 2)),
                    "tpc": int(rng.integers(0, 4)), "cyclic_shift": int(rng.integers(0, 8)), "cqi_request": 0}
        if req.format in ("1A", "1B", "1D"):
            length = self._length()
            start = self._contiguous(dl_free, length)
            if start is None:
                return None
            values = {"distributed": 0, "riv": riv_encode(start, length, n), **self._transport()}
            if req.format == "1B":
                values.update(tpmi=int(rng.integers(0, 4)), pmi_confirm=int(rng.integers(0, 2)))
            elif req.format == "1D":
                values.update(tpmi=int(rng.integers(0, 4)), power_offset=int(rng.integers(0, 2)))
            return values

        # bitmap formats: whole free resource block groups
        p = rbg_size(n)
        groups = rbg_count(n)
        free_groups = [g for g in range(groups) if dl_free[g * p:min((g + 1) * p, n)].all()]
        if not free_groups:
            return None
        wanted = max(1, min(len(free_groups), -(-self._length() // p)))
        chosen = sorted(rng.choice(free_groups, size=wanted, replace=False).tolist())
        bitmap = sum(1 << (groups - 1 - g) for g in chosen)
        values = {"ra_type": 0, "bitmap": bitmap, **self._transport()}
        if req.format in ("2", "2A"):
            values.update(swap=int(rng.integers(0, 2)))
            if rng.random() < 0.5:
                values.update(mcs2=0, rv2=1, ndi2=0)
            else:
                values.update(mcs2=int(rng.integers(0, self.scenario.mcs_max + 1)), rv2=0,
                              ndi2=int(rng.integers(0, 2)))
            if req.format == "2":
                values.update(precoding=int(rng.integers(0, 8)))
        return values

    def plan(self, t: int) -> SubframePlan:
        """
        Schedule trace subframe `t`.

        The CFI is the larger of a drawn minimum and the smallest CFI whose
        CCEs hold every request; with CFI 3 still too small, UE requests
        that do not fit are deferred. Mandatory requests (random-access
        responses, system information, explicit DCIs) that cannot be
        placed raise SchedulingError.
        """
        s = self.scenario
        sf_index = self._sf_index(t)
        self._arrivals(t)
        requests = self._requests(t)
        drawn = int(self.rng.integers(s.min_cfi, 4))

        placement, cfi = None, 3
        for candidate in range(drawn, 4):
            placed = self._place(requests, candidate)
            if placed is not None and (len(placed) == len(requests) or candidate == 3):
                placement, cfi = placed, candidate
                break
        if placement is None:
            raise SchedulingError(f"{sum(r.mandatory for r in requests)} mandatory DCIs exceed the control region",
                                  sf_index)

        n = self.cfg.n_rb_dl
        dl_free = np.ones(n, dtype=bool)
        dl_free[list(s.impairments.interference_rbs)] = False
        ul_free = np.ones(n, dtype=bool)
        truth = SubframeTruth(sf_index, cfi, interference=frozenset(s.impairments.interference_rbs))
        plan = SubframePlan(t, truth)
        occupancy = set(truth.interference)
        for i, req in enumerate(requests):
            if i not in placement:
                continue
            values = req.values if req.values is not None else self._values(req, dl_free, ul_free)
            if values is None:
                if req.mandatory:
                    raise SchedulingError(f"No resource blocks for {req.format} to {req.rnti:#06x}", sf_index)
                continue
            try:
                payload = pack_dci(req.format, self.cfg, values)
                dci = parse_dci(payload, self.cfg, req.rnti, location=placement[i], decode_path=TRUTH_PATH)
            except (ConfigError, ParseReject) as e:
                raise SchedulingError(f"Invalid {req.format} to {req.rnti:#06x}: {e}", sf_index)
            pool = ul_free if dci.direction == "uplink" else dl_free
            if not pool[list(dci.rbs)].all():
                if req.mandatory:
                    raise SchedulingError(f"Resource blocks {dci.rbs} of {req.rnti:#06x} already taken", sf_index)
                continue
            pool[list(dci.rbs)] = False
            truth.dcis.append(dci)
            if dci.direction == "uplink":
                continue
            occupancy.update(dci.rbs)
            if req.rar is not None:
                rar = req.rar
                pdu = build_rar_pdu(rar["rapid"], rar["rnti"], rar["ta"], rar["grant"])
                truth.rars.append(RarTruth(req.rnti, rar["rnti"], pdu, dci.rbs))
            elif dci.rbs:
                plan.fillers.append(dci.rbs)
        truth.occupancy = frozenset(occupancy)

        if cfi > 1 and s.control_offset_rate > 0 and self.rng.random() < s.control_offset_rate:
            plan.control_offset = (s.control_offset, control_symbols(cfi))
            truth.impairments.append(f"control-offset {s.control_offset:+d}")
        return plan


# --- Waveform ---------------------------------------------------------------

def subframe_cells(cfg: CellConfig, plan: SubframePlan, rng: np.random.Generator,
                   filler_power: float = 1.0) -> np.ndarray:
    """Resource grid of one planned subframe."""
    truth = plan.truth
    sf = truth.subframe
    cells = np.zeros((cfg.n_subcarriers, SYMBOLS_PER_SUBFRAME), dtype=np.complex128)
    for port in range(cfg.n_ports):
        for l in CRS_SYMBOLS:
            cells[crs_subcarriers(cfg, l, port), l] = crs_values(cfg, sf, l)
    if sf in (0, 5):
        rows = sync_rows(cfg)
        cells[rows, PSS_SYMBOL] = pss_sequence(cfg.n_id_2)
        cells[rows, SSS_SYMBOL] = sss_sequence(cfg.n_id_1, cfg.n_id_2, sf)
    if sf == 0:
        rows, cols = pbch_positions(cfg)
        cells[rows, cols] = pbch_symbols(cfg, truth.sfn)

    layout = control_layout(cfg, truth.cfi)
    cells[layout.pcfich_rows, layout.pcfich_cols] = encode_pcfich(cfg, sf, truth.cfi)
    for dci in truth.dcis:
        loc = dci.location
        cells[loc.re_rows, loc.re_cols] = encode_dci(dci.payload, dci.rnti, loc, cfg, sf)

    for rar in truth.rars:
        rows, cols = pdsch_positions(cfg, sf, truth.cfi, rar.rbs)
        cells[rows, cols] = encode_transport_block(rar.pdu, rar.ra_rnti, sf, cfg, len(rows))
    amplitude = np.sqrt(filler_power)
    for rbs in plan.fillers:
        rows, cols = pdsch_positions(cfg, sf, truth.cfi, rbs)
        bits = rng.integers(0, 2, 2 * len(rows), dtype=np.uint8)
        cells[rows, cols] = amplitude * coding.qpsk_map(bits)
    return cells


def synthesize_frame(cfg: CellConfig, plans: list[SubframePlan], seed, filler_power: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.concatenate([ofdm_modulate(subframe_cells(cfg, plan, rng, filler_power), cfg) for plan in plans])


def _interference_samples(cfg: CellConfig, subframe: int, rbs, power: float, rng: np.random.Generator) -> np.ndarray:
    cells = np.zeros((cfg.n_subcarriers, SYMBOLS_PER_SUBFRAME), dtype=np.complex128)
    rows, cols = pdsch_positions(cfg, subframe, FIRST_MEASURED_SYMBOL, rbs)
    cells[rows, cols] = np.sqrt(power) * coding.qpsk_map(rng.integers(0, 2, 2 * len(rows), dtype=np.uint8))
    return ofdm_modulate(cells, cfg)


def inject_impairments(samples: np.ndarray, cfg: CellConfig, schedule: Impairments, rng: np.random.Generator,
                       first_frame: int = 0, sample_offset: int = 0) -> np.ndarray:
    """
    Apply impairments to whole frames of clean samples.

    Interference RBs and control-symbol offsets are applied per subframe,
    then timing jumps at frame starts (positive inserts zeros, negative
    drops samples), then a constant CFO referenced to the absolute sample
    index, then AWGN at snr_db relative to unit reference-signal power.

    Args:
        samples: Clean samples of consecutive whole frames
        cfg: Cell configuration
        schedule: What to apply
        rng: Noise and interference source
        first_frame: Trace frame index of the first sample
        sample_offset: Absolute index of the first output sample (after earlier jumps)

    Returns:
        Impaired samples; the length changes by the jumps in range
    """
    if schedule.is_identity:
        return np.asarray(samples)
    out = np.array(samples, dtype=np.complex128)
    sps = samples_per_subframe(cfg)
    n_frames = len(out) // samples_per_frame(cfg)

    if schedule.interference_rbs:
        for i in range(n_frames * SUBFRAMES_PER_FRAME):
            out[i * sps:(i + 1) * sps] += _interference_samples(
                cfg, i % SUBFRAMES_PER_FRAME, schedule.interference_rbs, schedule.interference_power, rng)

    first_t = first_frame * SUBFRAMES_PER_FRAME
    starts = symbol_starts(cfg)
    cps = cp_lengths(cfg)
    for t, (shift, symbols) in sorted(schedule.control_offsets.items()):
        if not first_t <= t < first_t + n_frames * SUBFRAMES_PER_FRAME:
            continue
        base = (t - first_t) * sps
        clean = out[base:base + sps].copy()
        for l in sorted(symbols):
            lo = starts[l]
            hi = lo + cps[l] + cfg.fft_size
            dst_lo, dst_hi = max(0, lo + shift), min(sps, hi + shift)
            out[base + dst_lo:base + dst_hi] = clean[dst_lo - shift:dst_hi - shift]

    frame_len = samples_per_frame(cfg)
    for frame in sorted(schedule.jumps, reverse=True):
        shift = schedule.jumps[frame]
        if not first_frame <= frame < first_frame + n_frames or shift == 0:
            continue
        pos = (frame - first_frame) * frame_len
        if shift > 0:
            out = np.concatenate([out[:pos], np.zeros(shift, dtype=out.dtype), out[pos:]])
        else:
            out = np.concatenate([out[:pos], out[pos - shift:]])

    if schedule.cfo_hz:
        n = np.arange(sample_offset, sample_offset + len(out))
        out *= np.exp(2j * np.pi * schedule.cfo_hz * n / cfg.sample_rate)
    if schedule.snr_db is not None:
        out = coding.awgn(out, schedule.snr_db, rng)
    return out


@dataclass
class FrameChunk:
    frame: int
    samples: np.ndarray
    subframes: list


def generate_frames(scenario: ScenarioConfig, workers: int = WORKERS, batch: Optional[int] = None) -> Iterator[FrameChunk]:
    """
    Stream impaired frames in order.

    Scheduling is sequential; waveform synthesis of a batch of frames runs
    on a thread pool with one derived seed per frame, so output depends on
    the seed only.
    """
    cfg = scenario.cfg
    scheduler_seed, synth_seed, impair_seed = np.random.SeedSequence(scenario.seed).spawn(3)
    scheduler = Scheduler(scenario, np.random.default_rng(scheduler_seed))
    synth_seeds = synth_seed.spawn(scenario.frames)
    impair_seeds = impair_seed.spawn(scenario.frames)
    schedule = replace(scenario.impairments, control_offsets=dict(scenario.impairments.control_offsets))
    batch = batch or max(1, 2 * workers)
    offset = 0

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        for first in range(0, scenario.frames, batch):
            frames = range(first, min(first + batch, scenario.frames))
            plans = {f: [scheduler.plan(SUBFRAMES_PER_FRAME * f + sf) for sf in range(SUBFRAMES_PER_FRAME)]
                     for f in frames}
            for f in frames:
                for plan in plans[f]:
                    if plan.control_offset is not None:
                        schedule.control_offsets[plan.t] = plan.control_offset
            clean = list(executor.map(
                lambda f: synthesize_frame(cfg, plans[f], synth_seeds[f], scenario.filler_power), frames))
            for f, samples in zip(frames, clean):
                impaired = inject_impairments(samples, cfg, schedule, np.random.default_rng(impair_seeds[f]),
                                              first_frame=f, sample_offset=offset)
                offset += len(impaired)
                truths = [plan.truth for plan in plans[f]]
                if schedule.jumps.get(f):
                    truths[0].impairments.append(f"jump {schedule.jumps[f]:+d}")
                yield FrameChunk(f, impaired, truths)


def generate(scenario: ScenarioConfig, workers: int = WORKERS) -> tuple[IqTrace, GroundTruth]:
    """
    Generate a complete trace and its ground truth.

    Raises:
        SchedulingError: A mandatory DCI does not fit its subframe
    """
    truth = GroundTruth(scenario.cfg, jumps=dict(scenario.impairments.jumps))
    pieces = []
    for chunk in generate_frames(scenario, workers):
        pieces.append(chunk.samples.astype(np.complex64))
        for sf_truth in chunk.subframes:
            truth.subframes[sf_truth.sf_index] = sf_truth
    samples = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.complex64)
    meta = {"n_rb_dl": str(scenario.cfg.n_rb_dl), "pci": str(scenario.cfg.pci)}
    logging.info(f"Generated {scenario.frames} frames, {sum(len(s.dcis) for s in truth.subframes.values())} DCIs")
    return IqTrace(samples, scenario.cfg.sample_rate, start_offset=0, meta=meta), truth


def simulate_to_file(scenario: ScenarioConfig, path, workers: int = WORKERS) -> GroundTruth:
    """Write the trace frame by frame to `path` and the ground truth next to it."""
    cfg = scenario.cfg
    truth = GroundTruth(cfg, jumps=dict(scenario.impairments.jumps))
    for i, chunk in enumerate(generate_frames(scenario, workers)):
        write_trace(path, chunk.samples, cfg.sample_rate, cfg.n_rb_dl, cfg.pci, append=i > 0)
        for sf_truth in chunk.subframes:
            truth.subframes[sf_truth.sf_index] = sf_truth
    write_ground_truth(truth, truth_path(path))
    return truth


# --- Ground-truth file ------------------------------------------------------

def truth_path(trace_path) -> Path:
    return Path(trace_path).with_suffix(".truth.tsv")


def _rb_text(rbs) -> str:
    return ",".join(str(rb) for rb in sorted(rbs)) or "-"


def _rb_set(text: str) -> frozenset:
    return frozenset() if text == "-" else frozenset(int(tok) for tok in text.split(","))


def write_ground_truth(truth: GroundTruth, path) -> None:
    """
    DCI-log rows (decode_path truth) followed by '#'-prefixed annotation records.

    Annotation records keep the DCI payloads, random-access responses,
    occupancy and impairments so the file reads back exactly.
    """
    cfg = truth.cfg
    rows = [dci_row(dci, k, truth.subframes[k].cfi) for k, dci in truth.all_dcis()]
    lines = [f"#cell\tn_rb_dl={cfg.n_rb_dl}\tpci={cfg.pci}\tn_ports={cfg.n_ports}\tphich_ng={cfg.phich_ng}"
             f"\tsample_rate_hz={cfg.sample_rate:.0f}"]
    lines += [f"#jump\t{frame}\t{shift}" for frame, shift in sorted(truth.jumps.items())]
    for k, st in sorted(truth.subframes.items()):
        lines.append(f"#subframe\t{k}\t{st.cfi}\t{_rb_text(st.occupancy)}\t{_rb_text(st.interference)}")
        for dci in st.dcis:
            bits = "".join(str(int(b)) for b in dci.payload)
            lines.append(f"#dci\t{k}\t{dci.rnti:04x}\t{dci.cce_start}\t{dci.aggregation}\t{bits}")
        for rar in st.rars:
            lines.append(f"#rar\t{k}\t{rar.ra_rnti}\t{rar.temp_crnti:04x}\t{rar.pdu.hex()}\t{_rb_text(rar.rbs)}")
        for note in st.impairments:
            lines.append(f"#impairment\t{k}\t{note}")
    Path(path).write_text(export_dci_log(rows) + "\n".join(lines) + "\n", encoding="utf-8")


def read_ground_truth(path) -> GroundTruth:
    """
    Read a file written by write_ground_truth; DCIs are re-parsed from their payloads.

    Raises:
        ConfigError: Missing cell record or malformed annotation
    """
    truth = None
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.startswith("#"):
            continue
        kind, *parts = line[1:].split("\t")
        try:
            if kind == "cell":
                values = dict(p.split("=", 1) for p in parts)
                truth = GroundTruth(CellConfig.from_kv(values))
                continue
            if truth is None:
                raise ConfigError("annotation before the #cell record")
            if kind == "jump":
                truth.jumps[int(parts[0])] = int(parts[1])
            elif kind == "subframe":
                k = int(parts[0])
                truth.subframes[k] = SubframeTruth(k, int(parts[1]), occupancy=_rb_set(parts[2]),
                                                   interference=_rb_set(parts[3]))
            elif kind == "dci":
                k = int(parts[0])
                st = truth.subframes[k]
                locations = {loc.key: loc for loc in enumerate_locations(st.cfi, truth.cfg)}
                location = locations[(int(parts[2]), int(parts[3]))]
                payload = np.array([int(c) for c in parts[4]], dtype=np.uint8)
                st.dcis.append(parse_dci(payload, truth.cfg, int(parts[1], 16), location=location,
                                         decode_path=TRUTH_PATH))
            elif kind == "rar":
                st = truth.subframes[int(parts[0])]
                st.rars.append(RarTruth(int(parts[1]), int(parts[2], 16), bytes.fromhex(parts[3]),
                                        tuple(sorted(_rb_set(parts[4])))))
            elif kind == "impairment":
                truth.subframes[int(parts[0])].impairments.append(parts[1])
        except (IndexError, KeyError, ValueError, ParseReject) as e:
            raise ConfigError(f"{path} line {number}: bad {kind} record ({e})")
    if truth is None:
        raise ConfigError(f"{path} has no #cell record")
    return truth
