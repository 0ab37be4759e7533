"""
Test script for the resource grid and OFDM layer.
"""
from fractions import Fraction

import numpy as np
import pytest

from config import ConfigError
from grid import (
    ABS_SF_PERIOD, CRS_SYMBOLS, SYMBOLS_PER_SUBFRAME, CellConfig, IqTrace, ResourceGrid, TraceError, abs_subframe,
    cell_config_for_trace, cp_lengths, crs_positions, crs_subcarriers, ofdm_demodulate, ofdm_modulate,
    pdsch_positions, read_trace, reserved_mask, samples_per_frame, samples_per_subframe, split_abs_subframe,
    symbol_starts, write_trace,
)


def random_grid(cfg: CellConfig, rng) -> ResourceGrid:
    cells = (rng.standard_normal((cfg.n_subcarriers, SYMBOLS_PER_SUBFRAME))
             + 1j * rng.standard_normal((cfg.n_subcarriers, SYMBOLS_PER_SUBFRAME)))
    return ResourceGrid(cells)


def test_cell_config_validation():
    with pytest.raises(ConfigError):
        CellConfig.for_bandwidth(7)
    with pytest.raises(ConfigError):
        CellConfig.for_bandwidth(6, pci=504)
    with pytest.raises(ConfigError):
        CellConfig.for_bandwidth(6, n_ports=4)
    with pytest.raises(ConfigError):
        CellConfig.for_bandwidth(6, phich_ng=Fraction(1, 3))


def test_fractional_rate_accepted():
    cfg = CellConfig.from_sample_rate(50, 11.52e6)
    assert cfg.fft_size == 768
    assert cfg.fractional_rate
    with pytest.raises(ConfigError):
        CellConfig.from_sample_rate(6, 1.0e6)


def test_from_kv_requires_normal_cp_fdd():
    assert CellConfig.from_kv({"n_rb_dl": "25", "pci": "3"}).fft_size == 512
    with pytest.raises(ConfigError):
        CellConfig.from_kv({"n_rb_dl": "25", "cp": "extended"})
    with pytest.raises(ConfigError):
        CellConfig.from_kv({"n_rb_dl": "25", "colour": "blue"})


def test_subframe_timing(cell6):
    """Normal cyclic prefix: 160/144 samples at 2048 scale, 15 x N per subframe."""
    assert cp_lengths(cell6)[:2] == (10, 9)
    assert samples_per_subframe(cell6) == 1920
    assert samples_per_frame(cell6) == 19200
    starts = symbol_starts(cell6)
    assert starts[7] == samples_per_subframe(cell6) // 2
    assert starts[-1] + cp_lengths(cell6)[-1] + cell6.fft_size == samples_per_subframe(cell6)


def test_ofdm_round_trip(cell15, rng):
    """Demodulating a modulated grid returns the grid; unitary scaling keeps power."""
    grid = random_grid(cell15, rng)
    samples = ofdm_modulate(grid, cell15)
    assert len(samples) == samples_per_subframe(cell15)
    trace = IqTrace(samples, cell15.sample_rate)
    back = ofdm_demodulate(trace, cell15, 0)
    assert np.allclose(back.cells, grid.cells, atol=1e-9)


def test_ofdm_rejects_wrong_shape(cell6):
    with pytest.raises(ConfigError):
        ofdm_modulate(np.zeros((10, 14)), cell6)


def test_demodulate_outside_trace(cell6):
    trace = IqTrace(np.zeros(1000, dtype=np.complex64), cell6.sample_rate)
    with pytest.raises(TraceError):
        ofdm_demodulate(trace, cell6, 0)


def test_demodulate_rate_mismatch(cell6):
    trace = IqTrace(np.zeros(4000, dtype=np.complex64), 2 * cell6.sample_rate)
    with pytest.raises(TraceError):
        ofdm_demodulate(trace, cell6, 0)


def test_cfo_removed(cell15, rng):
    grid = random_grid(cell15, rng)
    samples = ofdm_modulate(grid, cell15)
    n = np.arange(len(samples))
    shifted = samples * np.exp(2j * np.pi * 500.0 * n / cell15.sample_rate)
    back = ofdm_demodulate(IqTrace(shifted, cell15.sample_rate), cell15, 0, cfo_hz=500.0)
    assert np.allclose(back.cells, grid.cells, atol=1e-9)


def test_cfo_phase_follows_start_offset(cell15, rng):
    """A slice of a trace carrying its start offset demodulates like the whole trace."""
    samples = np.concatenate([ofdm_modulate(random_grid(cell15, rng), cell15) for _ in range(3)])
    n = np.arange(len(samples))
    samples = samples * np.exp(2j * np.pi * 700.0 * n / cell15.sample_rate)
    step = samples_per_subframe(cell15)
    whole = ofdm_demodulate(IqTrace(samples, cell15.sample_rate), cell15, 2 * step, cfo_hz=700.0)
    part = IqTrace(samples[step:], cell15.sample_rate, start_offset=step)
    sliced = ofdm_demodulate(part, cell15, step, cfo_hz=700.0)
    assert np.allclose(whole.cells, sliced.cells, atol=1e-9)


def test_symbol_shift_moves_window(cell15, rng):
    """Shifting a window inside the cyclic prefix only rotates each subcarrier's phase."""
    grid = random_grid(cell15, rng)
    trace = IqTrace(ofdm_modulate(grid, cell15), cell15.sample_rate)
    shifts = np.zeros(SYMBOLS_PER_SUBFRAME, dtype=np.int64)
    shifts[1] = -4
    back = ofdm_demodulate(trace, cell15, 0, symbol_shifts=shifts)
    assert np.allclose(np.abs(back.cells[:, 1]), np.abs(grid.cells[:, 1]), atol=1e-9)
    assert np.allclose(back.cells[:, 2], grid.cells[:, 2], atol=1e-9)


def test_crs_layout(cell15):
    """Port-0 pilots every sixth subcarrier at symbols 0, 4, 7, 11 with the PCI shift."""
    for l in range(SYMBOLS_PER_SUBFRAME):
        k = crs_subcarriers(cell15, l)
        if l in CRS_SYMBOLS:
            assert len(k) == 2 * cell15.n_rb_dl
            assert np.all(np.diff(k) == 6)
        else:
            assert len(k) == 0
    assert crs_subcarriers(cell15, 0)[0] == 101 % 6
    assert crs_subcarriers(cell15, 4)[0] == (3 + 101) % 6
    assert len(crs_positions(cell15, 3)) == 4 * 2 * cell15.n_rb_dl


def test_reserved_mask_and_pdsch(cell15):
    mask = reserved_mask(cell15, 0)
    assert mask[crs_subcarriers(cell15, 0), 0].all()
    rows, cols = pdsch_positions(cell15, 0, 3, [0])
    assert not mask[rows, cols].any()
    assert cols.min() == 3
    with pytest.raises(TraceError):
        pdsch_positions(cell15, 0, 1, [cell15.n_rb_dl])


def test_abs_subframe_wraps():
    assert abs_subframe(1023, 9) == ABS_SF_PERIOD - 1
    assert abs_subframe(1024, 0) == 0
    assert split_abs_subframe(10 * 77 + 3) == (77, 3)


def test_trace_file_round_trip(tmp_path, cell6, rng):
    path = tmp_path / "capture.dat"
    samples = (rng.standard_normal(600) + 1j * rng.standard_normal(600)).astype(np.complex64)
    write_trace(path, samples[:400], cell6.sample_rate, n_rb_dl=6, pci=17)
    write_trace(path, samples[400:], cell6.sample_rate, append=True)
    trace = read_trace(path)
    assert np.array_equal(np.asarray(trace.samples), samples)
    assert trace.sample_rate == cell6.sample_rate
    cfg = cell_config_for_trace(trace)
    assert (cfg.n_rb_dl, cfg.pci) == (6, 17)


def test_trace_missing_meta(tmp_path):
    path = tmp_path / "bare.dat"
    path.write_bytes(b"\x00" * 16)
    with pytest.raises(TraceError):
        read_trace(path)


def test_trace_odd_size(tmp_path):
    path = tmp_path / "odd.dat"
    write_trace(path, np.zeros(4, dtype=np.complex64), 1.92e6)
    with open(path, "ab") as f:
        f.write(b"\x00\x00\x00")
    with pytest.raises(TraceError):
        read_trace(path)
