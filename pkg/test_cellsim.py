"""
Test script for the synthetic cell: scheduling rules, determinism, impairments and the ground-truth file.
"""
import numpy as np
import pytest

from cellsim import (
    TRUTH_PATH, UE_SETTLE_SUBFRAMES, ExplicitDci, Impairments, ScenarioConfig, SchedulingError, generate,
    read_ground_truth, simulate_to_file, truth_path,
)
from config import ConfigError
from conftest import small_scenario
from export_utils import parse_dci_log
from grid import CellConfig, read_trace, samples_per_frame
from pdcch import SI_RNTI, riv_encode


def test_same_seed_same_trace():
    """Output depends on the seed only, not on how synthesis is spread over threads."""
    first, truth_a = generate(small_scenario(frames=2, seed=9), workers=1)
    second, truth_b = generate(small_scenario(frames=2, seed=9), workers=3)
    assert np.array_equal(first.samples, second.samples)
    assert [len(st.dcis) for st in truth_a.subframes.values()] == [len(st.dcis) for st in truth_b.subframes.values()]
    other, _ = generate(small_scenario(frames=2, seed=10), workers=1)
    assert not np.array_equal(first.samples, other.samples)


def test_trace_length_and_meta(clean_run, cell15):
    trace, truth = clean_run
    assert len(trace.samples) == 6 * samples_per_frame(cell15)
    assert trace.meta == {"n_rb_dl": "15", "pci": "101"}
    assert sorted(truth.subframes) == list(range(60))


def test_system_information_schedule(clean_run):
    """SI-RNTI grants go out in subframe 5 of even frames and nowhere else."""
    _, truth = clean_run
    for sf_index, st in truth.subframes.items():
        has_si = any(d.rnti == SI_RNTI for d in st.dcis)
        assert has_si == (sf_index % 10 == 5 and (sf_index // 10) % 2 == 0)


def test_ues_wait_for_their_rar(clean_run):
    """A C-RNTI is never addressed before its random-access response plus the settle time."""
    _, truth = clean_run
    rar_at = {rar.temp_crnti: k for k, st in truth.subframes.items() for rar in st.rars}
    first = truth.first_dci_sf()
    assert first
    for rnti, k in first.items():
        assert rnti in rar_at
        assert k >= rar_at[rnti] + UE_SETTLE_SUBFRAMES


def test_dl_allocations_disjoint(clean_run):
    _, truth = clean_run
    for st in truth.subframes.values():
        dl = [rb for d in st.dcis if d.direction == "downlink" for rb in d.rbs]
        ul = [rb for d in st.dcis if d.direction == "uplink" for rb in d.rbs]
        assert len(dl) == len(set(dl))
        assert len(ul) == len(set(ul))
        assert st.occupancy == frozenset(dl)
        cces = [c for d in st.dcis for c in d.location.cces]
        assert len(cces) == len(set(cces))


def test_warm_rntis_are_addressed_immediately():
    scenario = small_scenario(frames=1, seed=4, ue_arrival_rate=0.0, warm_rntis=(0x1234,), ue_dci_rate=1000.0)
    _, truth = generate(scenario, workers=1)
    assert truth.first_dci_sf()[0x1234] == 0


def test_explicit_dci_is_placed():
    values = {"distributed": 0, "riv": riv_encode(3, 2, 15), "mcs": 4}
    explicit = (ExplicitDci(12, 0x2222, "1A", values, aggregation=2, cce_start=4),)
    _, truth = generate(small_scenario(frames=2, seed=6, ue_arrival_rate=0.0, explicit=explicit), workers=1)
    placed = [d for d in truth.subframes[12].dcis if d.rnti == 0x2222]
    assert len(placed) == 1
    assert (placed[0].cce_start, placed[0].aggregation, placed[0].rbs) == (4, 2, (3, 4))


def test_overfull_subframe_raises():
    values = {"riv": riv_encode(0, 1, 15)}
    explicit = (ExplicitDci(3, 0x2222, "1A", values, aggregation=8), ExplicitDci(3, 0x3333, "0", values, aggregation=8))
    with pytest.raises(SchedulingError) as excinfo:
        generate(small_scenario(frames=1, ue_arrival_rate=0.0, explicit=explicit), workers=1)
    assert excinfo.value.sf_index == 3


def test_jumps_change_length():
    impairments = Impairments(jumps={2: 100, 4: -50})
    trace, truth = generate(small_scenario(frames=6, seed=2, impairments=impairments), workers=2)
    cfg = truth.cfg
    assert len(trace.samples) == 6 * samples_per_frame(cfg) + 50
    assert "jump +100" in truth.subframes[20].impairments
    assert "jump -50" in truth.subframes[40].impairments
    assert truth.jumps == {2: 100, 4: -50}


def test_scenario_validation(cell15):
    with pytest.raises(ConfigError):
        ScenarioConfig(cfg=cell15, frames=0)
    with pytest.raises(ConfigError):
        ScenarioConfig(cfg=cell15, format_mix={"3": 1.0})
    with pytest.raises(ConfigError):
        ScenarioConfig(cfg=cell15, aggregation_mix={3: 1.0})
    with pytest.raises(ConfigError):
        ScenarioConfig(cfg=cell15, warm_rntis=(SI_RNTI,))
    with pytest.raises(ConfigError):
        ScenarioConfig(cfg=cell15, impairments=Impairments(interference_rbs=(15,)))


def test_scenario_from_kv():
    scenario = ScenarioConfig.from_kv({"n_rb_dl": "6", "pci": "17", "frames": "3", "snr_db": "10", "jumps": "1:40",
                                       "format_mix": "1A:2,0", "warm_rntis": "0x100, 0x200"})
    assert scenario.cfg == CellConfig.for_bandwidth(6, pci=17)
    assert scenario.frames == 3
    assert scenario.impairments.snr_db == 10.0
    assert scenario.impairments.jumps == {1: 40}
    assert scenario.format_mix == {"1A": 2.0, "0": 1.0}
    assert scenario.warm_rntis == (0x100, 0x200)
    with pytest.raises(ConfigError):
        ScenarioConfig.from_kv({"n_rb_dl": "6", "speed": "fast"})


def test_ground_truth_file_round_trip(tmp_path):
    """The truth file reads back exactly and doubles as a DCI log."""
    path = tmp_path / "cell.dat"
    truth = simulate_to_file(small_scenario(frames=2, seed=8), path, workers=2)
    trace = read_trace(path)
    assert len(trace.samples) == 2 * samples_per_frame(truth.cfg)
    assert trace.meta["n_rb_dl"] == "15"

    back = read_ground_truth(truth_path(path))
    assert back.cfg == truth.cfg
    assert sorted(back.subframes) == sorted(truth.subframes)
    for k, st in truth.subframes.items():
        other = back.subframes[k]
        assert other.cfi == st.cfi
        assert other.occupancy == st.occupancy
        assert [(d.rnti, d.format, d.cce_start, d.aggregation, d.rbs, d.tbs) for d in other.dcis] == \
            [(d.rnti, d.format, d.cce_start, d.aggregation, d.rbs, d.tbs) for d in st.dcis]
        assert other.rars == st.rars

    log = parse_dci_log(truth_path(path))
    assert len(log) == len(truth.all_dcis())
    assert set(log["decode_path"]) <= {TRUTH_PATH}
    assert (log["rnti"] >= 1).all()


def test_truth_without_cell_record(tmp_path):
    path = tmp_path / "bad.truth.tsv"
    path.write_text("#subframe\t0\t1\t-\t-\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_ground_truth(path)


def test_noise_level(cell15):
    """At 0 dB the added noise has the reference-signal power."""
    clean, _ = generate(small_scenario(frames=1, seed=1), workers=1)
    noisy, _ = generate(small_scenario(frames=1, seed=1, impairments=Impairments(snr_db=0.0)), workers=1)
    noise = np.asarray(noisy.samples, dtype=np.complex128) - np.asarray(clean.samples, dtype=np.complex128)
    assert abs(np.mean(np.abs(noise) ** 2) - 1.0) < 0.05
