import json
import math

import numpy as np
import pytest

from cvqkd.errors import DomainError, EstimationError, PrecisionError
from cvqkd.keyrate import ChannelParams, DetectorParams
from cvqkd.simulate import (
    CalibrationRecord,
    DetectionRecord,
    ModulationFormat,
    SimulationConfig,
    SymbolBlock,
    calibrate_snu,
    channel_apply,
    dark_record,
    detect,
    end_to_end_run,
    estimate_parameters,
    gaussian_pair,
    mean_photon_number,
    modulate,
    modulation_variance_from_power,
    power_from_modulation_variance,
    rayleigh_amplitude_pdf,
    stage_rng,
    standard_normals,
    vacuum_record,
    write_samples_csv,
)

CAPTION_DET = DetectorParams(0.6, 0.15, "trusted")


def vacuum_block(n, seed=0):
    zero = SymbolBlock(np.zeros(n), np.zeros(n))
    return channel_apply(zero, ChannelParams(1.0, 0.0), seed)


def calibrated(record, det, n=2_000_000, seed=11, gain=1e3):
    cal = calibrate_snu(det.calibration, vacuum_record(det, n, seed, gain), dark_record(det, n, seed, gain))
    return record.normalize(cal)


# ---- Box-Muller


def test_gaussian_pair_examples():
    z0, z1 = gaussian_pair(math.exp(-2), 0.0)
    assert z0 == pytest.approx(2.0) and z1 == pytest.approx(0.0)
    assert gaussian_pair(1.0, 0.3) == (0.0, 0.0)
    with pytest.raises(DomainError):
        gaussian_pair(0.0, 0.5)


def test_gaussian_pair_statistics():
    z0, z1 = standard_normals(stage_rng(3, "modulate"), 10**6)
    z = np.concatenate([z0, z1])
    assert abs(z.mean()) < 5 / math.sqrt(z.size)
    assert z.var() == pytest.approx(1.0, rel=0.01)
    assert abs(np.corrcoef(z0, z1)[0, 1]) < 5 / math.sqrt(z0.size)


# ---- modulation


def test_gaussian_modulation_variance():
    b = modulate(ModulationFormat("gaussian", 4.0), 10**6, seed=1)
    assert 3.96 <= b.x.var() <= 4.04 and 3.96 <= b.p.var() <= 4.04


def test_qpsk_single_ring():
    b = modulate(ModulationFormat("mpsk", 2.0, M=4), 1000, seed=1)
    amp = np.hypot(b.x, b.p)
    assert np.allclose(amp, amp[0])
    assert len(np.unique(np.round(np.angle(b.x + 1j * b.p), 9))) == 4
    assert np.mean(b.x**2 + b.p**2) == pytest.approx(4.0)


@pytest.mark.parametrize("shaping", ["uniform", "gaussian"])
def test_qam_second_moment(shaping):
    fmt = ModulationFormat("qam", 3.0, M=256, shaping=shaping)
    pts, probs = fmt.constellation()
    assert np.sum(probs * pts.real**2) == pytest.approx(3.0)
    b = modulate(fmt, 200_000, seed=2)
    assert b.x.var() == pytest.approx(3.0, rel=0.03)


def test_gaussian_shaping_favours_low_energy():
    pts, probs = ModulationFormat("qam", 3.0, M=16, shaping="gaussian").constellation()
    assert probs[np.argmin(np.abs(pts))] > probs[np.argmax(np.abs(pts))]


def test_unidimensional_and_zero_modulation():
    b = modulate(ModulationFormat("unidimensional", 4.0), 1000, seed=1)
    assert np.all(b.p == 0) and b.x.var() > 1
    z = modulate(ModulationFormat("gaussian", 0.0), 100, seed=1)
    assert np.all(z.x == 0) and np.all(z.p == 0)


def test_unknown_format_rejected():
    with pytest.raises(DomainError):
        ModulationFormat("ook")
    with pytest.raises(DomainError):
        SymbolBlock([1.0, 2.0], [1.0])


# ---- channel


def test_channel_identity_adds_shot_noise():
    b = modulate(ModulationFormat("gaussian", 4.0), 10**6, seed=5)
    out = channel_apply(b, ChannelParams(1.0, 0.0), seed=5)
    assert np.var(out.x - b.x) == pytest.approx(1.0, rel=0.01)
    assert out.x.var() == pytest.approx(5.0, rel=0.01)


def test_channel_output_variance():
    b = modulate(ModulationFormat("gaussian", 4.0), 10**6, seed=6)
    out = channel_apply(b, ChannelParams(0.5, 0.05), seed=6)
    assert out.x.var() == pytest.approx(3.025, rel=0.01)


def test_channel_vanishing_transmittance():
    b = modulate(ModulationFormat("gaussian", 4.0), 10**5, seed=6)
    out = channel_apply(b, ChannelParams(1e-9, 0.0), seed=6)
    assert out.x.var() == pytest.approx(1.0, rel=0.02)


@pytest.mark.parametrize("T, eps, V_M", [(0.2, 0.01, 2.0), (0.7, 0.1, 6.0), (0.05, 0.2, 1.0), (0.9, 0.0, 10.0)])
def test_bob_variance_within_three_standard_errors(T, eps, V_M):
    n = 200_000
    b = modulate(ModulationFormat("gaussian", V_M), n, seed=9)
    out = channel_apply(b, ChannelParams(T, eps), seed=9)
    expected = T * (V_M + eps) + 1
    se = expected * math.sqrt(2 / n)
    assert abs(out.x.var(ddof=1) - expected) < 3 * se


# ---- detection and calibration


def test_ideal_detector_unit_gain_vacuum():
    rec = detect(vacuum_block(10**6), DetectorParams(), "homodyne", seed=1, gain=1.0)
    assert rec.raw.var() == pytest.approx(1.0, rel=0.01)


@pytest.mark.parametrize("mode, expected", [("two_time", 1.15), ("one_time", 1.0)])
def test_normalised_vacuum_variance(mode, expected):
    det = DetectorParams(0.6, 0.15, calibration=mode)
    n = 400_000
    rec = calibrated(detect(vacuum_block(n), det, "homodyne", seed=2), det)
    se = expected * math.sqrt(2 / n)
    assert abs(rec.normalized.var(ddof=1) - expected) < 3 * se + 2e-3 * expected


def test_heterodyne_reproduces_detector_noise():
    det = DetectorParams(0.6, 0.15)
    n = 400_000
    rec = calibrated(detect(vacuum_block(n), det, "heterodyne", seed=3), det)
    # vacuum input: each arm shows 1 + nu in SNU
    assert rec.normalized.var(axis=0) == pytest.approx([1.15, 1.15], rel=0.01)
    # input-referred noise of one arm: (1 + nu - eta/2)/(eta/2) equals chi_het
    chi = (1 + det.nu_ele - det.eta / 2) / (det.eta / 2)
    assert chi == pytest.approx(det.chi("heterodyne"))


def test_heterodyne_mean_of_coherent_state():
    n = 200_000
    disp = np.full(n, 3.0)
    block = channel_apply(SymbolBlock(disp, -disp), ChannelParams(1.0, 0.0), seed=4)
    rec = calibrated(detect(block, DetectorParams(), "heterodyne", seed=4), DetectorParams())
    assert rec.normalized.mean(axis=0) == pytest.approx([3.0 / math.sqrt(2), -3.0 / math.sqrt(2)], abs=0.01)


def test_heterodyne_quadratures_uncorrelated():
    n = 400_000
    b = channel_apply(modulate(ModulationFormat("gaussian", 4.0), n, 8), ChannelParams(0.5, 0.05), 8)
    rec = detect(b, CAPTION_DET, "heterodyne", seed=8)
    assert abs(np.corrcoef(rec.raw[:, 0], rec.raw[:, 1])[0, 1]) < 5 / math.sqrt(n)


def test_calibration_two_time():
    rng = np.random.default_rng(0)
    vac = rng.normal(0, math.sqrt(4.6), 10**6)
    dark = rng.normal(0, math.sqrt(0.6), 10**6)
    assert 3.96 <= calibrate_snu("two_time", vac, dark).snu <= 4.04
    one = calibrate_snu("one_time", vac)
    assert one.snu == pytest.approx(4.6, rel=0.01) and one.snu == one.V_total_hat


def test_calibration_zero_dark_and_errors():
    vac = np.random.default_rng(1).normal(0, 2, 20_000)
    rec = calibrate_snu("two_time", vac, np.zeros(20_000))
    assert rec.snu == rec.V_total_hat
    with pytest.raises(PrecisionError):
        calibrate_snu("one_time", vac[:9999])
    with pytest.raises(DomainError):
        calibrate_snu("two_time", vac)


def test_normalised_is_raw_over_root_snu():
    rec = DetectionRecord(np.array([2.0, -4.0]), np.array([0, 1]), "homodyne")
    out = rec.normalize(CalibrationRecord("one_time", 4.0, 0.0, 4.0))
    assert np.allclose(out.normalized, [1.0, -2.0]) and out.snu_estimate == 4.0


# ---- estimation


def pipeline(chan, det, n, seed, measurement="homodyne", exact_snu=False):
    fmt = ModulationFormat("gaussian", 4.0)
    block = modulate(fmt, n, seed)
    rec = detect(channel_apply(block, chan, seed), det, measurement, seed)
    if exact_snu:
        return block, rec.normalize(CalibrationRecord("two_time", 1e6 * (1 + det.nu_ele), 1e6 * det.nu_ele, 1e6))
    return block, calibrated(rec, det, n=10**7, seed=seed)


def test_loopback_estimation():
    block, rec = pipeline(ChannelParams(1.0, 0.0), DetectorParams(), 10**6, seed=7)
    est = estimate_parameters(block, rec, DetectorParams())
    assert 0.99 <= est.T_hat <= 1.01
    assert -0.005 <= est.eps_hat <= 0.005


def test_estimation_with_trusted_detector():
    block, rec = pipeline(ChannelParams(0.5, 0.05), CAPTION_DET, 10**6, seed=7)
    est = estimate_parameters(block, rec, CAPTION_DET)
    assert abs(est.T_hat - 0.5) < 0.005
    assert abs(est.eps_hat - 0.05) < 0.005


def test_estimated_covariance_structure():
    block, rec = pipeline(ChannelParams(0.5, 0.05), DetectorParams(), 10**5, seed=3)
    est = estimate_parameters(block, rec, DetectorParams())
    g = est.gamma_AB_hat
    assert g[0, 0] == 5.0 and g[2, 2] == pytest.approx(est.T_hat * (4 + est.eps_hat) + 1)
    assert g[0, 2] == pytest.approx(math.sqrt(est.T_hat * 24)) and g[1, 3] == -g[0, 2]


def test_zero_correlation_flagged():
    n = 100_000
    block = modulate(ModulationFormat("gaussian", 4.0), n, 1)
    other = modulate(ModulationFormat("gaussian", 4.0), n, 2)
    rec = calibrated(detect(channel_apply(other, ChannelParams(0.5), 2), DetectorParams(), "homodyne", 2), DetectorParams())
    with pytest.raises(EstimationError):
        estimate_parameters(block, rec, DetectorParams())


def test_estimator_error_shrinks_with_n():
    det = DetectorParams()
    errs = []
    for n in (10**4, 10**5, 10**6):
        trials = []
        for seed in range(8):
            block, rec = pipeline(ChannelParams(0.5, 0.05), det, n, seed=100 + seed, exact_snu=True)
            trials.append(estimate_parameters(block, rec, det).T_hat - 0.5)
        errs.append(math.sqrt(np.mean(np.square(trials))))
    # RMS error should fall roughly as 1/sqrt(n); allow generous slack for 8 trials
    assert errs[1] < errs[0] and errs[2] < errs[1]
    assert errs[2] < errs[0] / 3


def test_heterodyne_estimation():
    block, rec = pipeline(ChannelParams(0.5, 0.05), DetectorParams(), 10**6, seed=7, measurement="heterodyne")
    est = estimate_parameters(block, rec, DetectorParams())
    assert est.T_hat == pytest.approx(0.5, rel=0.01)
    assert abs(est.eps_hat - 0.05) < 0.015


# ---- end to end


def test_ideal_loopback_rate():
    cfg = SimulationConfig(ChannelParams(1.0, 0.0), n_symbols=200_000, seed=7, calibration_samples=10**6)
    rep = end_to_end_run(cfg)
    assert rep.rate_estimated["rate"] == pytest.approx(rep.rate_true["rate"], rel=0.05)


def test_caption_point_positive():
    cfg = SimulationConfig(
        ChannelParams.from_fiber(25, 0.2, 0.0383),
        CAPTION_DET,
        ModulationFormat("gaussian", 4.0),
        beta=0.956,
        n_symbols=200_000,
        calibration_samples=10**6,
    )
    assert end_to_end_run(cfg).rate_estimated["rate"] > 0


def test_seeded_run_is_bit_identical():
    cfg = SimulationConfig(ChannelParams(0.5, 0.05), CAPTION_DET, n_symbols=20_000, calibration_samples=20_000, seed=3)
    assert end_to_end_run(cfg).to_json() == end_to_end_run(cfg).to_json()
    json.loads(end_to_end_run(cfg).to_json())


def test_sample_csv(tmp_path):
    block = modulate(ModulationFormat("gaussian", 1.0), 5, 1)
    rec = detect(channel_apply(block, ChannelParams(0.5), 1), DetectorParams(), "heterodyne", 1)
    write_samples_csv(tmp_path / "s.csv", block, rec)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "idx,x_mod,p_mod,basis,raw,normalized" and len(lines) == 11


# ---- source monitoring


def test_source_monitor_conversions():
    assert mean_photon_number(4.0) == 2.0
    P = power_from_modulation_variance(4.0, 1550e-9, 1e8)
    assert modulation_variance_from_power(P, 1550e-9, 1e8) == pytest.approx(4.0)
    # ~1.28e-19 J per photon at 1550 nm
    assert P == pytest.approx(2 * 1.2816e-19 * 1e8, rel=1e-3)


def test_rayleigh_pdf_normalised():
    r = np.linspace(0, 30, 200_001)
    assert np.trapezoid(rayleigh_amplitude_pdf(r, 4.0), r) == pytest.approx(1.0, abs=1e-6)
