"""
Test script for cell acquisition and per-frame timing checks.
"""
import numpy as np
import pytest

from cellsim import Impairments, ScenarioConfig, generate
from conftest import acceptance_trials, monte_carlo
from grid import CellConfig, IqTrace, ofdm_demodulate, samples_per_frame, samples_per_subframe, symbol_starts
from pipeline import ErrorLog
from sync import (
    PSS_SYMBOL, Mib, MibDecodeError, NoCellError, ResyncRequest, acquire_cell, drift_limit, mib_decode, pss_detect,
    resync_check, sss_decode, sss_sequence,
)


def test_drift_limit_scales_with_rate(cell15):
    assert drift_limit(cell15) == 2
    assert drift_limit(CellConfig.for_bandwidth(100)) == 16
    assert drift_limit(CellConfig.for_bandwidth(6)) == 1


def test_mib_bits_round_trip(cell15):
    mib = Mib.for_cell(cell15, sfn=613)
    back = Mib.from_bits(mib.to_bits(), sfn_phase=613 % 4, n_ports=1)
    assert back.sfn == 613
    assert back.n_rb_dl == 15
    assert back.phich_ng == cell15.phich_ng


def test_sss_sequences_differ_by_half():
    assert not np.array_equal(sss_sequence(33, 2, 0), sss_sequence(33, 2, 5))
    assert set(np.unique(sss_sequence(33, 2, 0))) == {-1.0, 1.0}


def test_acquire_clean_trace(clean_run):
    """The simulated cell is found at sample 0, frame 0, with its PCI and bandwidth."""
    trace, _ = clean_run
    state, mib = acquire_cell(trace)
    assert state.pci == 101
    assert state.frame_start == 0
    assert state.sfn == 0
    assert mib.n_rb_dl == 15
    assert abs(state.cfo_hz) < 1.0


def test_acquire_estimates_cfo(noisy_run):
    trace, _ = noisy_run
    state, mib = acquire_cell(trace)
    assert state.pci == 101
    assert abs(state.cfo_hz - 300.0) < 50.0


def test_mib_decode_from_grid(clean_run, cell15):
    trace, _ = clean_run
    frame_len = samples_per_frame(cell15)
    mib = mib_decode(ofdm_demodulate(trace, cell15, 2 * frame_len), cell15)
    assert mib.sfn == 2
    assert mib.n_ports == 1


def test_mib_retry_on_next_frame(clean_run, cell15):
    """A corrupted PBCH in the first frame is retried on the next one and logged."""
    trace, _ = clean_run
    samples = np.array(trace.samples)
    starts = symbol_starts(cell15)
    lo, hi = starts[7], starts[11]
    noise = np.random.default_rng(5).standard_normal((2, hi - lo))
    samples[lo:hi] = (noise[0] + 1j * noise[1]).astype(np.complex64)
    log = ErrorLog()
    state, mib = acquire_cell(IqTrace(samples, trace.sample_rate, start_offset=0), log=log)
    assert state.frame_start == samples_per_frame(cell15)
    assert state.sfn == 1
    assert len(log.events("mib-failure")) == 1


def test_no_cell_in_noise(rng, cell15):
    noise = rng.standard_normal((2, 3 * samples_per_frame(cell15)))
    trace = IqTrace((noise[0] + 1j * noise[1]).astype(np.complex64), cell15.sample_rate)
    with pytest.raises(NoCellError):
        acquire_cell(trace)


def test_pss_search_needs_a_frame(cell15):
    trace = IqTrace(np.zeros(1000, dtype=np.complex64), cell15.sample_rate)
    with pytest.raises(NoCellError):
        pss_detect(trace)


def test_resync_on_time(clean_run, cell15):
    trace, _ = clean_run
    state, _ = acquire_cell(trace)
    frame_len = samples_per_frame(cell15)
    log = ErrorLog()
    updated = resync_check(state, trace, cell15, frame_len, log)
    assert updated.frame_start == frame_len
    assert not log.records


def test_small_drift_is_slewed(clean_run, cell15):
    trace, _ = clean_run
    state, _ = acquire_cell(trace)
    frame_len = samples_per_frame(cell15)
    log = ErrorLog()
    updated = resync_check(state, trace, cell15, frame_len - 1, log)
    assert updated.frame_start == frame_len
    assert [r[1] for r in log.records] == ["slew"]


def test_large_displacement_is_a_jump(clean_run, cell15):
    trace, _ = clean_run
    state, _ = acquire_cell(trace)
    frame_len = samples_per_frame(cell15)
    log = ErrorLog()
    updated = resync_check(state, trace, cell15, frame_len - 40, log)
    assert updated.frame_start == frame_len
    assert [r[1] for r in log.records] == ["resync"]
    assert log.records[0][2] == "jump +40 samples"


def test_missing_pss_requests_reacquisition(clean_run, cell15):
    trace, _ = clean_run
    state, _ = acquire_cell(trace)
    silent = IqTrace(np.zeros(3 * samples_per_frame(cell15), dtype=np.complex64), cell15.sample_rate)
    log = ErrorLog()
    with pytest.raises(ResyncRequest):
        resync_check(state, silent, cell15, samples_per_frame(cell15), log)
    assert [r[1] for r in log.records] == ["sync-loss"]


def test_resync_window_outside_trace(clean_run, cell15):
    trace, _ = clean_run
    state, _ = acquire_cell(trace)
    with pytest.raises(ResyncRequest):
        resync_check(state, trace, cell15, len(trace.samples))


def quiet_cell(pci: int, **overrides) -> ScenarioConfig:
    """A 6-RB cell carrying only its broadcast channels."""
    settings = dict(cfg=CellConfig.for_bandwidth(6, pci=pci), frames=2, ue_arrival_rate=0.0, ue_dci_rate=0.0,
                    max_ues=1, si=False)
    settings.update(overrides)
    return ScenarioConfig(**settings)


def circular_error(estimate: int, actual: int, period: int) -> int:
    error = (estimate - actual) % period
    return min(error, period - error)


@monte_carlo
def test_pci_and_timing_at_0db():
    """At 0 dB the PSS root, SSS identity and frame timing come out right in 99% of captures."""
    n = acceptance_trials(1000)
    rng = np.random.default_rng(2024)
    hits = 0
    for trial in range(n):
        pci = int(rng.integers(0, 504))
        cfg = CellConfig.for_bandwidth(6, pci=pci)
        frame_len = samples_per_frame(cfg)
        offset = int(rng.integers(0, frame_len))
        scenario = quiet_cell(pci, seed=trial, impairments=Impairments(snr_db=0.0, jumps={0: offset}))
        trace, _ = generate(scenario, workers=1)
        try:
            pss = pss_detect(trace)
            half_start = pss.offset - symbol_starts(cfg)[PSS_SYMBOL]
            n_id_1, parity, _ = sss_decode(trace, half_start, pss.n_id_2)
        except (NoCellError, ResyncRequest):
            continue
        frame_start = half_start - 5 * samples_per_subframe(cfg) * parity
        hits += (3 * n_id_1 + pss.n_id_2 == pci and circular_error(frame_start, offset, frame_len) <= 2)
    assert hits >= 0.99 * n


@monte_carlo
def test_mib_at_10db():
    """The MIB decodes from a single frame at 10 dB in 99% of frames."""
    n = acceptance_trials(500)
    cfg = CellConfig.for_bandwidth(6, pci=77)
    frame_len = samples_per_frame(cfg)
    chunk = 50
    hits = 0
    for first in range(0, n, chunk):
        frames = min(chunk, n - first)
        scenario = quiet_cell(77, frames=frames, start_sfn=first % 1024, seed=first,
                              impairments=Impairments(snr_db=10.0))
        trace, _ = generate(scenario, workers=2)
        for i in range(frames):
            try:
                mib = mib_decode(ofdm_demodulate(trace, cfg, i * frame_len), cfg)
            except MibDecodeError:
                continue
            hits += mib.sfn == (first + i) % 1024
    assert hits >= 0.99 * n
