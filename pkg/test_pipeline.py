"""
Test script for the decoder, the k-buffer pipeline, log analytics and the command line.
"""
import numpy as np
import pandas as pd
import pytest

from cellsim import Impairments, ScenarioConfig, generate, truth_path
from config import ConfigError
from conftest import monte_carlo, small_scenario
from export_utils import export_dci_log, parse_dci_log
from grid import CellConfig, write_trace
from pipeline import (
    EXIT_IO, EXIT_NO_CELL, EXIT_OK, EXIT_USAGE, ArrayTraceSource, Decoder, ErrorLog, PipelineConfig, _ratio_label,
    compare_modes, decode_trace, main, run_pipeline, stats,
)
from tracker import ORIGIN_RAR, ORIGIN_REENCODE
from tuner import FINETUNER_PATH
from verifier import NO_TRAFFIC


def keys(dcis):
    return sorted((d.rnti, d.format, d.cce_start, d.aggregation) for d in dcis)


def by_sf(dcis_by_sf):
    return {k: keys(v) for k, v in dcis_by_sf.items()}


@pytest.fixture(scope="module")
def clean_decode(clean_run):
    trace, _ = clean_run
    return decode_trace(trace)


@pytest.fixture(scope="module")
def offset_run():
    return generate(small_scenario(frames=3, seed=3, min_cfi=2, control_offset_rate=1.0), workers=2)


def test_decode_matches_truth(clean_run, clean_decode):
    _, truth = clean_run
    assert by_sf(clean_decode.dcis_by_sf()) == by_sf(truth.dcis_by_sf())
    assert clean_decode.uncertain == 0
    assert clean_decode.cfg == truth.cfg
    assert "list-match" in clean_decode.path_counts()


def test_rntis_admitted_before_first_dci(clean_run, clean_decode):
    """Every UE is on the list by the time it is first scheduled."""
    _, truth = clean_run
    admitted = {}
    for rnti, _, sf_index in clean_decode.admissions:
        admitted.setdefault(rnti, sf_index)
    for rnti, first in truth.first_dci_sf().items():
        assert admitted[rnti] <= first


def test_decode_keeps_timing_to_the_end(clean_decode, noisy_run):
    """The last frame of a trace leaves the decoder synchronised."""
    assert clean_decode.sync is not None
    assert clean_decode.sync.pci == 101
    assert not clean_decode.log.events("sync-loss")
    noisy = decode_trace(noisy_run[0])
    assert noisy.sync is not None
    assert not noisy.log.events("sync-loss")
    for frames in (7, 20):
        longer, _ = generate(small_scenario(frames=frames, seed=frames, impairments=Impairments(snr_db=10.0)),
                             workers=2)
        assert decode_trace(longer, finetune=False).sync is not None


def test_noisy_trace_mostly_decoded(noisy_run):
    trace, truth = noisy_run
    result = decode_trace(trace)
    decoded = by_sf(result.dcis_by_sf())
    expected = by_sf(truth.dcis_by_sf())
    total = sum(len(v) for v in expected.values())
    found = sum(len(set(decoded.get(k, [])) & set(v)) for k, v in expected.items())
    assert found >= 0.9 * total


def test_segmented_feed_matches_whole_trace(clean_run):
    """Feeding the samples in uneven chunks decodes the same as one pass."""
    trace, _ = clean_run
    whole = decode_trace(trace, finetune=False)
    decoder = Decoder(trace.sample_rate, meta=trace.meta)
    results = []
    for pos in range(0, len(trace.samples), 7001):
        results.extend(decoder.feed(trace.samples[pos:pos + 7001]))
    results.extend(decoder.finish())
    assert [r.sf_index for r in results] == [r.sf_index for r in whole.subframes]
    assert {r.sf_index: keys(r.dcis) for r in results} == by_sf(whole.dcis_by_sf())


def test_pipeline_matches_decode_trace(clean_run, clean_decode):
    trace, _ = clean_run
    result = run_pipeline(ArrayTraceSource(trace), PipelineConfig(k=4, segment_s=0.02, unbounded=True))
    assert [r.sf_index for r in result.subframes] == sorted(r.sf_index for r in result.subframes)
    assert by_sf(result.dcis_by_sf()) == by_sf(clean_decode.dcis_by_sf())
    assert not result.log.events("overrun")


def test_finetuner_recovers_in_decode(offset_run):
    trace, truth = offset_run
    result = decode_trace(trace)
    assert by_sf(result.dcis_by_sf()) == by_sf(truth.dcis_by_sf())
    assert result.path_counts()[FINETUNER_PATH] > 0


def test_zero_deadline_keeps_main_pass(offset_run):
    """With no tuning budget only main-pass DCIs come out and the losses are logged."""
    trace, _ = offset_run
    pcfg = PipelineConfig(k=3, segment_s=0.02, finetune_deadline=0.0)
    result = run_pipeline(ArrayTraceSource(trace), pcfg)
    assert FINETUNER_PATH not in result.path_counts()
    assert result.tuner_timeouts > 0
    assert len(result.log.events("finetune-timeout")) == result.tuner_timeouts
    assert len(result.log.events("lost-uncertain")) == result.tuner_timeouts


def test_jump_is_logged_and_followed():
    scenario = small_scenario(frames=5, seed=12, impairments=Impairments(jumps={2: 40}))
    trace, truth = generate(scenario, workers=2)
    result = decode_trace(trace)
    resyncs = result.log.events("resync")
    assert resyncs == [(20, "resync", "jump +40 samples")]
    decoded = by_sf(result.dcis_by_sf())
    expected = by_sf(truth.dcis_by_sf())
    for k in range(20, 50):
        assert decoded[k] == expected[k], k


def test_pipeline_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(k=2)
    with pytest.raises(ConfigError):
        PipelineConfig(k=4, segment_s=0.1, finetune_deadline=0.5)
    with pytest.raises(ConfigError):
        PipelineConfig(unbounded=True, live=True)
    with pytest.raises(ConfigError):
        PipelineConfig(mode="fast")
    with pytest.raises(ConfigError):
        PipelineConfig.from_kv({"k": "4", "buffers": "8"})
    assert PipelineConfig(k=5, segment_s=0.1, live=True).deadline_s == pytest.approx(0.3)
    assert PipelineConfig(unbounded=True).deadline_s is None
    assert PipelineConfig.from_kv({"k": "6", "live": "yes"}).live


def test_offline_pipeline_tunes_without_deadline():
    """Offline runs only get a tuning budget when one is asked for."""
    assert PipelineConfig(k=4).deadline_s is None
    assert PipelineConfig(k=4, segment_s=0.1, finetune_deadline=0.05).deadline_s == pytest.approx(0.05)
    assert PipelineConfig(k=4, segment_s=0.1, finetune_deadline=0.05, unbounded=True).deadline_s is None
    assert PipelineConfig.from_kv({"k": "4", "segment_s": "0.1", "live": "true"}).deadline_s == pytest.approx(0.2)


def test_offline_pipeline_matches_finetuned_decode(offset_run):
    """k=4 on a file with default settings recovers everything the one-shot decode does."""
    trace, _ = offset_run
    result = run_pipeline(ArrayTraceSource(trace), PipelineConfig(k=4, segment_s=0.02))
    assert by_sf(result.dcis_by_sf()) == by_sf(decode_trace(trace).dcis_by_sf())
    assert result.tuner_timeouts == 0


def log_frame(entries):
    rows = [
        {"sf_index": sf, "time": f"{sf // 10}.{sf % 10}", "rnti": rnti, "direction": direction, "format": "1A",
         "mcs": mcs, "n_rb": 2, "tbs": tbs, "cce_start": 0, "aggregation": 4, "decode_path": "list-match", "cfi": 2}
        for sf, rnti, direction, tbs, mcs in entries
    ]
    return parse_dci_log(export_dci_log(rows))


def test_stats_rates():
    log = log_frame([
        (0, 0x0100, "downlink", 1000, 9),
        (10, 0x0200, "downlink", 100, 4),
        (20, 0x0100, "uplink", 300, 5),
        (500, 0x0100, "downlink", None, 9),
        (1500, 0xFFFF, "downlink", 50, 2),
    ])
    result = stats(log, bin_s=1.0, top_n=1)
    rates = result.rates
    assert rates["bin_start_s"].tolist() == [0.0, 1.0]
    assert rates["dl_bps"].tolist() == [1100.0, 50.0]
    assert rates["ul_bps"].tolist() == [300.0, 0.0]
    assert rates["dl_0100"].tolist() == [1000.0, 0.0]
    assert rates["dl_rest"].tolist() == [100.0, 50.0]
    assert "dl_0200" not in rates.columns


def test_stats_mcs():
    log = log_frame([(0, 0x0100, "downlink", 1000, 9), (700, 0x0100, "downlink", 1000, 9),
                     (900, 0x0200, "downlink", 100, 3), (1000, 0x0200, "downlink", 100, 5)])
    mcs = stats(log).mcs
    row = mcs[mcs["rnti"] == "0100"].iloc[0]
    assert row["mcs_mean"] == 9
    assert row["mcs_std"] == 0
    assert row["n"] == 2
    other = mcs[mcs["rnti"] == "0200"].iloc[0]
    assert other["mcs_std"] == pytest.approx(1.0)


def test_stats_empty_and_bad_bins():
    assert stats(log_frame([])).rates.empty
    with pytest.raises(ConfigError):
        stats(log_frame([]), bin_s=0)


def test_ratio_labels():
    assert _ratio_label(0, 0, 0) == NO_TRAFFIC
    assert _ratio_label(5, 5, 10) == "1.0"
    assert _ratio_label(4, 5, 10) == "<1.0"
    assert _ratio_label(11, 10, 20) == "(1.0,1.1]"
    assert _ratio_label(14, 10, 20) == "(1.1,1.5]"
    assert _ratio_label(20, 10, 20) == ">1.5"
    assert _ratio_label(3, 0, 5) == ">1.5"


def test_compare_modes_noiseless(clean_run):
    trace, _ = clean_run
    comparison = compare_modes(trace)
    assert comparison.owl.ratio == pytest.approx(1.0)
    assert comparison.lteye.ratio == pytest.approx(1.0)
    assert comparison.ratio_histogram["1.0"] + comparison.ratio_histogram[NO_TRAFFIC] == 6
    assert len(comparison.frames) == 6


def test_error_log_text():
    log = ErrorLog()
    log.append(20, "resync", "jump +40 samples")
    log.append(31, "sync-loss")
    assert log.to_text() == "20\tresync\tjump +40 samples\n31\tsync-loss\t\n"
    assert log.counts()["resync"] == 1


def test_cli_exit_codes(tmp_path):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["decode", str(tmp_path / "missing.dat")]) == EXIT_IO

    noise = tmp_path / "noise.dat"
    rng = np.random.default_rng(0)
    write_trace(noise, (rng.standard_normal(76800) + 1j * rng.standard_normal(76800)) / np.sqrt(2), 3.84e6)
    assert main(["decode", str(noise)]) == EXIT_NO_CELL
    assert main(["pipeline", str(noise), "--k", "2"]) == EXIT_USAGE


def test_cli_end_to_end(tmp_path):
    """simulate, decode, verify and stats chained through files."""
    scenario = tmp_path / "cell.cfg"
    scenario.write_text("# small test cell\nn_rb_dl=15\npci=101\nframes=3\nseed=7\nue_arrival_rate=150\n",
                        encoding="utf-8")
    trace = tmp_path / "cell.dat"
    log = tmp_path / "cell.tsv"
    errors = tmp_path / "cell.errors"
    assert main(["simulate", str(scenario), "--out", str(trace), "--workers", "2"]) == EXIT_OK
    assert truth_path(trace).exists()

    assert main(["decode", str(trace), "--out", str(log), "--errors", str(errors)]) == EXIT_OK
    decoded = parse_dci_log(log)
    truth = parse_dci_log(truth_path(trace))
    assert len(decoded) == len(truth)
    assert sorted(zip(decoded["sf_index"], decoded["rnti"])) == sorted(zip(truth["sf_index"], truth["rnti"]))
    assert errors.exists()

    verify_out = tmp_path / "verify.csv"
    assert main(["verify", str(trace), str(log), "--out", str(verify_out)]) == EXIT_OK
    lines = verify_out.read_text(encoding="utf-8").strip().split("\n")
    assert lines[-1].startswith("experiment,cell,")

    assert main(["stats", str(log), "--out", str(tmp_path / "cell")]) == EXIT_OK
    rates = pd.read_csv(tmp_path / "cell.rates.csv")
    assert rates["dl_bps"].sum() > 0
    assert (tmp_path / "cell.mcs.csv").exists()


def truth_downlink_rbs(dcis) -> set:
    return {rb for d in dcis if d.direction == "downlink" for rb in d.rbs}


@monte_carlo
def test_headline_decoding_25rb():
    """Ten seconds of a 25-RB cell at 20 dB: nearly every frame fully decoded, every UE admitted by its RAR."""
    scenario = ScenarioConfig(cfg=CellConfig.for_bandwidth(25, pci=250), frames=1000, seed=99, ue_arrival_rate=5.0,
                              impairments=Impairments(snr_db=20.0))
    trace, truth = generate(scenario)
    result = decode_trace(trace)
    decoded = result.dcis_by_sf()

    frames_total = frames_complete = rbs_total = rbs_found = 0
    per_frame: dict[int, list[int]] = {}
    for sf_index, st in truth.subframes.items():
        expected = truth_downlink_rbs(st.dcis)
        found = expected & truth_downlink_rbs(decoded.get(sf_index, []))
        acc = per_frame.setdefault(sf_index // 10, [0, 0])
        acc[0] += len(expected)
        acc[1] += len(found)
    for expected, found in per_frame.values():
        if expected:
            frames_total += 1
            frames_complete += expected == found
        rbs_total += expected
        rbs_found += found
    assert frames_complete >= 0.99 * frames_total
    assert rbs_found >= 0.995 * rbs_total

    first_admission = {}
    for rnti, origin, sf_index in result.admissions:
        first_admission.setdefault(rnti, (origin, sf_index))
    for rnti, first in truth.first_dci_sf().items():
        origin, sf_index = first_admission[rnti]
        assert origin == ORIGIN_RAR and sf_index <= first, rnti
    assert not [a for a in result.admissions if a[1] == ORIGIN_REENCODE]


@monte_carlo
def test_owl_never_decodes_less_than_lteye_at_10db():
    trace, _ = generate(small_scenario(frames=30, seed=21, impairments=Impairments(snr_db=10.0)), workers=2)
    frames = compare_modes(trace).frames
    busy = frames[frames["occupied_rbs"] > 0]
    assert (busy["owl_decoded_rbs"] >= busy["lteye_decoded_rbs"]).all()
    assert (busy["owl_decoded_rbs"] > busy["lteye_decoded_rbs"]).mean() >= 0.3


@monte_carlo
def test_finetuner_recovers_offset_losses():
    """Most DCIs lost to control-symbol offsets come back, and they stay a small share of the log."""
    scenario = small_scenario(frames=40, seed=5, min_cfi=2, control_offset_rate=0.03)
    trace, truth = generate(scenario, workers=2)
    expected = {(k, key) for k, v in by_sf(truth.dcis_by_sf()).items() for key in v}
    main_pass = {(k, key) for k, v in by_sf(decode_trace(trace, finetune=False).dcis_by_sf()).items() for key in v}
    tuned = decode_trace(trace)
    recovered = {(k, key) for k, v in by_sf(tuned.dcis_by_sf()).items() for key in v}
    lost = expected - main_pass
    assert lost
    assert len(lost & recovered) >= 0.8 * len(lost)
    counts = tuned.path_counts()
    assert counts[FINETUNER_PATH] < 0.05 * sum(counts.values())
