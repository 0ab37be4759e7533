"""
Test script for the active RNTI list, the acceptance oracle and random-access decoding.
"""
import numpy as np
import pytest

import coding
from cellsim import Impairments, generate
from conftest import acceptance_trials, monte_carlo, small_scenario
from grid import SUBFRAMES_PER_FRAME, ofdm_demodulate, samples_per_subframe
from pdcch import P_RNTI, SI_RNTI, Admission, decode_subframe, equalize, reencode_mismatch
from pipeline import ErrorLog
from tracker import (
    COUNTER_PERIOD, EXPIRY_SUBFRAMES, ORIGIN_RAR, ORIGIN_REENCODE, REENCODE_MAX_MISMATCH, AcceptanceOracle,
    RarUnsupported, RntiList, RntiRangeError, build_rar_pdu, parse_rar_pdu, process_subframe, ra_rnti_for,
    reencode_verify, rnti_oracle,
)


def test_admit_range():
    rntis = RntiList()
    with pytest.raises(RntiRangeError):
        rntis.admit(0x0005, ORIGIN_RAR, 0)
    with pytest.raises(RntiRangeError):
        rntis.admit(SI_RNTI, ORIGIN_RAR, 0)
    rntis.admit(0x003D, ORIGIN_RAR, 0)
    assert 0x003D in rntis


def test_expiry_boundary():
    """An RNTI idle for exactly one SFN cycle stays; one subframe more evicts it."""
    rntis = RntiList()
    rntis.admit(0x1234, ORIGIN_RAR, 0)
    assert rntis.expire(EXPIRY_SUBFRAMES) == []
    assert rntis.expire(EXPIRY_SUBFRAMES + 1) == [0x1234]
    assert rntis.expire(EXPIRY_SUBFRAMES + 1) == []
    assert len(rntis) == 0


def test_expiry_across_counter_wrap():
    rntis = RntiList()
    rntis.admit(0x1234, ORIGIN_RAR, COUNTER_PERIOD - 5)
    assert rntis.expire(100) == []
    assert rntis.expire((COUNTER_PERIOD - 5 + EXPIRY_SUBFRAMES + 1) % COUNTER_PERIOD) == [0x1234]


def test_touch_refreshes():
    rntis = RntiList()
    rntis.admit(0x1234, ORIGIN_REENCODE, 0)
    assert rntis.touch(0x1234, 5000)
    assert not rntis.touch(0x4321, 5000)
    assert rntis.expire(EXPIRY_SUBFRAMES + 1) == []
    assert rntis.entries()[0].origin == ORIGIN_REENCODE


def test_warm_start(tmp_path):
    path = tmp_path / "rntis.txt"
    path.write_text("# seen yesterday\n1234\n\nzzzz\n0003\n4601\n", encoding="utf-8")
    rntis = RntiList()
    assert rntis.load_warmstart(path) == 2
    assert rntis.snapshot() == frozenset({0x1234, 0x4601})


def test_ra_rnti():
    assert ra_rnti_for(0) == 1
    assert ra_rnti_for(9) == 10
    with pytest.raises(ValueError):
        ra_rnti_for(10)


def test_rar_pdu_fields():
    message = parse_rar_pdu(build_rar_pdu(17, 0x4601, 300, 0xABCDE))
    assert message.rapid == 17
    assert message.temp_crnti == 0x4601
    assert message.timing_advance == 300
    assert message.ul_grant == 0xABCDE
    assert len(message.raw) == 6


def test_rar_pdu_rejects():
    with pytest.raises(RarUnsupported):
        parse_rar_pdu(b"\x40\x00")
    with pytest.raises(RarUnsupported):
        parse_rar_pdu(bytes([0x05]) + bytes(6))
    with pytest.raises(RarUnsupported):
        parse_rar_pdu(bytes([0xC0 | 3]) + bytes(12))


def test_oracle_categories():
    oracle = AcceptanceOracle(frozenset({0x1234}))
    assert oracle(0x1234) is Admission.LIST
    assert oracle(3) is Admission.RA
    assert oracle(SI_RNTI) is Admission.RESERVED
    assert oracle(P_RNTI) is Admission.RESERVED
    assert oracle(0x4321) is Admission.DEFER
    assert oracle(0) is Admission.REJECT
    assert oracle(0xFFF5) is Admission.REJECT


def test_lteye_oracle_defers_everything():
    rntis = RntiList()
    rntis.admit(0x1234, ORIGIN_RAR, 0)
    oracle = rnti_oracle(rntis, "lteye")
    assert oracle.active == frozenset()
    assert oracle(0x1234) is Admission.DEFER
    assert oracle(SI_RNTI) is Admission.DEFER
    assert rnti_oracle(rntis).active == frozenset({0x1234})


def test_reencode_verify_tolerance(rng):
    """Two wrong bits in 144 pass, four do not."""
    payload = rng.integers(0, 2, 27, dtype=np.uint8)
    sent = coding.rate_match_conv(coding.conv_encode(coding.attach_crc(payload, "crc16", 0x1234)), 144)
    soft = 1.0 - 2.0 * sent
    assert reencode_verify(soft, payload, 0x1234)
    assert not reencode_verify(soft, payload, 0x1235)
    two = soft.copy()
    two[[3, 90]] *= -1
    assert reencode_verify(two, payload, 0x1234)
    four = soft.copy()
    four[[3, 40, 90, 120]] *= -1
    assert not reencode_verify(four, payload, 0x1234)


def test_reencode_exact_limit_is_rejected(rng):
    """A mismatch of exactly the limit fails; one bit fewer passes."""
    payload = rng.integers(0, 2, 27, dtype=np.uint8)
    codeword = coding.attach_crc(payload, "crc16", 0x4321)
    soft = 1.0 - 2.0 * coding.rate_match_conv(coding.conv_encode(codeword), 100)
    one = soft.copy()
    one[7] *= -1
    assert reencode_verify(one, payload, 0x4321)
    two = soft.copy()
    two[[7, 61]] *= -1
    assert reencode_mismatch(two[None, :], codeword[None, :])[0] == REENCODE_MAX_MISMATCH
    assert not reencode_verify(two, payload, 0x4321)


def decoded_subframe(trace, cfg, sf_index, rntis, mode="owl"):
    start = sf_index * samples_per_subframe(cfg)
    grid = ofdm_demodulate(trace, cfg, start, sfn=sf_index // SUBFRAMES_PER_FRAME,
                           subframe=sf_index % SUBFRAMES_PER_FRAME)
    eq = equalize(grid, cfg)
    return decode_subframe(grid, cfg, rnti_oracle(rntis, mode), eq=eq), eq


def test_rar_admits_temporary_rnti(clean_run, cell15):
    """The random-access response on the shared channel admits the RNTI it carries."""
    trace, truth = clean_run
    sf_index, st = next((k, st) for k, st in sorted(truth.subframes.items()) if st.rars)
    rntis = RntiList()
    log = ErrorLog()
    report, eq = decoded_subframe(trace, cell15, sf_index, rntis)
    admitted = process_subframe(report, eq, cell15, rntis, sf_index, log=log)
    expected = {rar.temp_crnti for rar in st.rars}
    assert {rnti for rnti, origin, _ in admitted if origin == ORIGIN_RAR} == expected
    assert expected <= rntis.snapshot()
    assert not log.events("rar-crc-error")


def test_reencode_admission_then_list_match(clean_run, cell15):
    """A C-RNTI first accepted by re-encoding is list-matched afterwards."""
    trace, truth = clean_run
    sf_index, dci = next((k, d) for k, d in truth.all_dcis() if d.rnti > 10 and d.rnti != SI_RNTI)
    rntis = RntiList()
    report, eq = decoded_subframe(trace, cell15, sf_index, rntis)
    admitted = process_subframe(report, eq, cell15, rntis, sf_index)
    assert (dci.rnti, ORIGIN_REENCODE) in {(r, o) for r, o, _ in admitted}
    report, _ = decoded_subframe(trace, cell15, sf_index, rntis)
    assert {d.decode_path for d in report.dcis if d.rnti == dci.rnti} == {Admission.LIST.value}


def test_lteye_mode_keeps_no_state(clean_run, cell15):
    trace, truth = clean_run
    sf_index = next(k for k, st in sorted(truth.subframes.items()) if st.rars)
    rntis = RntiList()
    report, eq = decoded_subframe(trace, cell15, sf_index, rntis, "lteye")
    assert process_subframe(report, eq, cell15, rntis, sf_index, "lteye") == []
    assert len(rntis) == 0


@monte_carlo
def test_rar_extraction_at_10db(cell15):
    """At 10 dB 99% of random-access responses admit the temporary C-RNTI they carry."""
    n = acceptance_trials(500)
    accesses = hits = 0
    seed = 0
    while accesses < n:
        scenario = small_scenario(frames=50, seed=seed, ue_arrival_rate=300.0, ue_dci_rate=10.0, max_ues=100_000,
                                  impairments=Impairments(snr_db=10.0))
        trace, truth = generate(scenario, workers=2)
        for sf_index, st in sorted(truth.subframes.items()):
            if not st.rars:
                continue
            rntis = RntiList()
            report, eq = decoded_subframe(trace, cell15, sf_index, rntis)
            admitted = {rnti for rnti, origin, _ in process_subframe(report, eq, cell15, rntis, sf_index)
                        if origin == ORIGIN_RAR}
            accesses += len(st.rars)
            hits += sum(rar.temp_crnti in admitted for rar in st.rars)
        seed += 1
    assert hits >= 0.99 * accesses
