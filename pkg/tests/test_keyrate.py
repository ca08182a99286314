import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cvqkd import phase_space as ps
from cvqkd.errors import DomainError
from cvqkd.keyrate import (
    ChannelParams,
    DetectorParams,
    DiscreteModulationCovariance,
    FiniteSizeParams,
    ProtocolSpec,
    asymptotic_rate,
    channel_covariance,
    entropic_components,
    finite_size_rate,
    holevo_bound,
    keyrate_from_covariance,
    mutual_information,
    one_time_calibration_adjustment,
    optimize_modulation_variance,
    plob_bound,
    rate_distance_curve,
    z_quantile,
)

ROWS = list(itertools.product(["coherent", "squeezed"], ["homodyne", "heterodyne"], ["direct", "reverse"]))
CAPTION_DET = DetectorParams(eta=0.6, nu_ele=0.15, trust="trusted")


def spec(state="coherent", meas="heterodyne", rec="reverse", V_M=4.0, beta=1.0):
    return ProtocolSpec(state, meas, rec, V_M, beta)


# ---- types


def test_invalid_types_rejected():
    with pytest.raises(DomainError):
        ChannelParams(0.0)
    with pytest.raises(DomainError):
        ChannelParams(0.5, -0.1)
    with pytest.raises(DomainError):
        DetectorParams(eta=1.2)
    with pytest.raises(DomainError):
        ProtocolSpec("cat", "homodyne", "reverse")
    with pytest.raises(DomainError):
        FiniteSizeParams(N=100, n=100)


def test_detector_noise_terms():
    det = DetectorParams(0.6, 0.15)
    assert det.chi("homodyne") == pytest.approx((0.4 + 0.15) / 0.6)
    assert det.chi("heterodyne") == pytest.approx((1 + 0.4 + 0.3) / 0.6)
    assert DetectorParams().chi("homodyne") == 0.0
    assert DetectorParams().chi("heterodyne") == 1.0


def test_output_noise_conversion():
    assert ChannelParams.from_output_noise(0.5, 0.01).epsilon == pytest.approx(0.02)


def test_dm_covariance_requires_z():
    with pytest.raises(TypeError):
        DiscreteModulationCovariance(4.0, 0.5, 0.01)
    cov = DiscreteModulationCovariance(4.0, 0.5, 0.01, Z=1.9).matrix()
    assert cov[0, 2] == pytest.approx(math.sqrt(0.5) * 1.9)


# ---- mutual information


def test_mi_coherent_heterodyne_lossless():
    assert mutual_information(spec(), ChannelParams(1.0)) == pytest.approx(math.log2(3))


def test_mi_coherent_homodyne_half_loss():
    got = mutual_information(spec(meas="homodyne"), ChannelParams(0.5))
    assert got == pytest.approx(0.5 * math.log2(3))


@pytest.mark.parametrize("row", ROWS)
def test_mi_zero_without_modulation(row):
    assert mutual_information(spec(*row, V_M=0.0), ChannelParams(0.3, 0.01)) == 0.0


# ---- Holevo bound


def test_lossless_noiseless_leaks_nothing():
    for V_M in (0.5, 4.0, 50.0):
        assert holevo_bound(spec(meas="homodyne", V_M=V_M), ChannelParams(1.0)) == pytest.approx(0, abs=1e-7)


def test_holevo_reference_point_matches_conditioning():
    sp = spec(V_M=4.0)
    ch = ChannelParams(0.316, 0.01)
    _, chi = entropic_components(channel_covariance(sp, ch), sp)
    assert holevo_bound(sp, ch) == pytest.approx(chi, abs=1e-9)


def test_trusted_ideal_equals_untrusted_ideal():
    ch = ChannelParams(0.4, 0.02)
    for row in ROWS:
        a = holevo_bound(spec(*row), ch, DetectorParams(1.0, 0.0, "trusted"))
        b = holevo_bound(spec(*row), ch, DetectorParams(1.0, 0.0, "untrusted"))
        assert a == pytest.approx(b, abs=1e-12)


def test_unphysical_covariance_rejected():
    with pytest.raises(DomainError):
        keyrate_from_covariance(0.5 * np.eye(4), spec())


def test_unphysical_channel_rejected_closed_form():
    # negative chi_line cannot be produced through ChannelParams, so go around it
    from cvqkd.keyrate import _Resolved, _holevo

    with pytest.raises(DomainError):
        _holevo(spec(), _Resolved(T=0.5, eps=-1.5, eta=1.0, nu=0.0))


@pytest.mark.parametrize("row", ROWS)
@pytest.mark.parametrize(
    "det",
    [
        DetectorParams(),
        DetectorParams(0.6, 0.15, "trusted"),
        DetectorParams(0.6, 0.15, "untrusted"),
        DetectorParams(0.7, 0.1, "trusted", "one_time"),
        DetectorParams(0.7, 0.1, "untrusted", "one_time"),
    ],
)
def test_closed_forms_match_conditioning(row, det):
    rng = np.random.default_rng(abs(hash((row, det))) % 2**32)
    for _ in range(10):
        sp = spec(*row, V_M=10 ** rng.uniform(-1, 2), beta=0.95)
        ch = ChannelParams(rng.uniform(0.01, 1.0), rng.uniform(0.0, 0.1))
        I_num, chi_num = entropic_components(channel_covariance(sp, ch), sp, det)
        assert mutual_information(sp, ch, det) == pytest.approx(I_num, abs=1e-9)
        assert holevo_bound(sp, ch, det) == pytest.approx(chi_num, abs=1e-9)


def test_covariance_route_rejects_trusted_noise_at_unit_efficiency():
    sp = spec(state="squeezed", meas="heterodyne")
    with pytest.raises(DomainError):
        holevo_bound(sp, ChannelParams(0.5, 0.01), DetectorParams(1.0, 0.1, "trusted"))


# ---- rates


def test_direct_reconciliation_three_db():
    below = asymptotic_rate(spec(meas="homodyne", rec="direct", V_M=20), ChannelParams(0.49))
    above = asymptotic_rate(spec(meas="homodyne", rec="direct", V_M=20), ChannelParams(0.6))
    assert below.rate <= 0 < above.rate


def test_report_reproducible_from_fields():
    rep = asymptotic_rate(spec(beta=0.95), ChannelParams(0.3, 0.01), CAPTION_DET)
    assert rep.rate == pytest.approx(rep.beta * rep.I_AB - rep.chi_E)
    assert rep.rate_clamped == max(rep.rate, 0)
    fs = finite_size_rate(spec(beta=0.95), ChannelParams(0.3, 0.01), CAPTION_DET, FiniteSizeParams(1e9, 5e8))
    assert fs.rate == pytest.approx(fs.prefactor * (fs.beta * fs.I_AB - fs.chi_E - fs.delta))
    assert set(fs.to_dict()["worst_case"]) == {"t_min", "sigma2_max"}


def test_long_distance_positive():
    res = optimize_modulation_variance(
        spec(beta=0.98), ChannelParams(8.8e-5, 0.005), CAPTION_DET
    )
    assert res.rate > 0


def test_one_time_model():
    assert one_time_calibration_adjustment(DetectorParams(0.6, 0.0)).eta_e == 1.0
    assert one_time_calibration_adjustment(DetectorParams(0.6, 0.15)).eta_e == pytest.approx(0.8696, abs=1e-4)


@pytest.mark.parametrize("row", ROWS)
def test_one_time_not_better_than_two_time_trusted(row):
    ch = ChannelParams(0.3, 0.01)
    two = asymptotic_rate(spec(*row), ch, DetectorParams(0.6, 0.15, "trusted", "two_time"))
    one = asymptotic_rate(spec(*row), ch, DetectorParams(0.6, 0.15, "trusted", "one_time"))
    assert one.rate <= two.rate + 1e-12


def test_one_time_untrusted_shares_total_noise():
    # both calibrations see the same total noise, so I_AB agrees; only the
    # attribution (loss vs. excess noise) of the electronic noise differs
    ch = ChannelParams(0.3, 0.01)
    two = asymptotic_rate(spec(meas="homodyne"), ch, DetectorParams(0.6, 0.15, "untrusted"))
    one = asymptotic_rate(spec(meas="homodyne"), ch, DetectorParams(0.6, 0.15, "untrusted", "one_time"))
    assert one.I_AB == pytest.approx(two.I_AB, rel=1e-12)


# ---- finite size


def test_z_quantile():
    assert z_quantile(1e-10) == pytest.approx(6.467, abs=1e-3)
    # tail check with an independent formula
    z = z_quantile(1e-3)
    assert math.erfc(z / math.sqrt(2)) == pytest.approx(1e-3, rel=1e-9)


def test_finite_size_converges_and_is_monotone():
    sp, ch = spec(meas="homodyne", beta=0.95), ChannelParams(0.5, 0.05)
    asym = asymptotic_rate(sp, ch).rate
    rates = [
        finite_size_rate(sp, ch, DetectorParams(), FiniteSizeParams.from_pe_fraction(N, 2e-3)).rate
        for N in (1e6, 1e8, 1e10, 1e12)
    ]
    assert all(b >= a for a, b in zip(rates, rates[1:]))
    assert abs(rates[-1] - asym) <= 0.01 * abs(asym)


def test_finite_size_rejects_bad_blocks():
    with pytest.raises(DomainError):
        FiniteSizeParams(N=1e6, n=2e6)


# ---- PLOB


def test_plob_values():
    assert plob_bound(0.5) == 1.0
    assert plob_bound(1e-9) == pytest.approx(1e-9 / math.log(2), rel=1e-6)
    assert plob_bound(1.0) == math.inf
    with pytest.raises(DomainError):
        plob_bound(0.0)


# ---- optimisation


def test_optimizer_noiseless_hits_upper_bound():
    res = optimize_modulation_variance(spec(), ChannelParams(1.0))
    assert res.at_boundary and res.V_M == pytest.approx(1e3)


def test_optimizer_caption_params():
    sp = spec(beta=0.956)
    ch = ChannelParams(0.316, 0.0383)
    res = optimize_modulation_variance(sp, ch, CAPTION_DET)
    assert 1 <= res.V_M <= 20 and not res.at_boundary
    grid = [asymptotic_rate(sp.with_vm(v), ch, CAPTION_DET).rate for v in np.logspace(-3, 3, 2001)]
    assert res.rate >= max(grid) - 1e-9
    assert res.rate >= asymptotic_rate(sp.with_vm(4.0), ch, CAPTION_DET).rate


def test_optimizer_flags_all_negative():
    res = optimize_modulation_variance(spec(meas="homodyne", rec="direct"), ChannelParams(0.2))
    assert res.all_negative and res.rate <= 0


def test_optimizer_deterministic():
    a = optimize_modulation_variance(spec(beta=0.95), ChannelParams(0.1, 0.01), CAPTION_DET)
    b = optimize_modulation_variance(spec(beta=0.95), ChannelParams(0.1, 0.01), CAPTION_DET)
    assert a == b


# ---- curves


def test_curve_rows_and_monotone():
    d = list(range(0, 201, 10))
    rows = rate_distance_curve(spec(beta=0.95), DetectorParams(), 0.2, 0.01, d)
    assert rows[0].T == 1.0
    assert rows[5].T == pytest.approx(0.1)
    rates = [r.rate for r in rows]
    assert all(b <= a + 1e-12 for a, b in zip(rates, rates[1:]))


def test_curve_threads_preserve_order():
    d = [0, 30, 5, 80]
    one = rate_distance_curve(spec(beta=0.95), CAPTION_DET, 0.2, lambda x: 0.01 + 1e-4 * x, d, optimize=True)
    four = rate_distance_curve(spec(beta=0.95), CAPTION_DET, 0.2, lambda x: 0.01 + 1e-4 * x, d, optimize=True, threads=4)
    assert one == four and [r.distance_km for r in one] == d


def test_curve_rejects_bad_attenuation():
    with pytest.raises(DomainError):
        rate_distance_curve(spec(), DetectorParams(), 0.0, 0.0, [1])


# ---- covariance entry point


def test_covariance_round_trip():
    sp, ch = spec(beta=0.95), ChannelParams(0.5, 0.05)
    a = keyrate_from_covariance(channel_covariance(sp, ch), sp)
    b = asymptotic_rate(sp, ch)
    assert a.I_AB == pytest.approx(b.I_AB, abs=1e-12)
    assert a.chi_E == pytest.approx(b.chi_E, abs=1e-9)


def test_uncorrelated_covariance_gives_no_key():
    rep = keyrate_from_covariance(ps.two_mode_covariance(5.0, 3.0, 0.0), spec())
    assert rep.rate <= 0


# ---- properties

params = st.tuples(
    st.sampled_from(ROWS),
    st.floats(0.1, 50.0),
    st.floats(0.01, 0.99),
    st.floats(0.0, 0.1),
)


@given(st.floats(0.01, 0.499), st.floats(0.5, 100.0))
@settings(max_examples=100, deadline=None)
def test_reverse_beats_direct_below_half(T, V_M):
    for meas in ("homodyne", "heterodyne"):
        rr = asymptotic_rate(spec(meas=meas, rec="reverse", V_M=V_M), ChannelParams(T)).rate
        dr = asymptotic_rate(spec(meas=meas, rec="direct", V_M=V_M), ChannelParams(T)).rate
        assert rr >= dr - 1e-12


@given(params, st.floats(1e-4, 0.05))
@settings(max_examples=100, deadline=None)
def test_rate_nonincreasing_in_eps(p, d):
    row, V_M, T, eps = p
    sp = spec(*row, V_M=V_M, beta=0.95)
    assert asymptotic_rate(sp, ChannelParams(T, eps + d), CAPTION_DET).rate <= (
        asymptotic_rate(sp, ChannelParams(T, eps), CAPTION_DET).rate + 1e-10
    )


@given(params, st.floats(0.0, 0.3), st.floats(1e-3, 0.2))
@settings(max_examples=100, deadline=None)
def test_key_nonincreasing_in_electronic_noise(p, nu, dnu):
    row, V_M, T, eps = p
    sp = spec(*row, V_M=V_M, beta=0.95)
    ch = ChannelParams(T, eps)
    lo = asymptotic_rate(sp, ch, DetectorParams(0.6, nu, "untrusted")).rate_clamped
    hi = asymptotic_rate(sp, ch, DetectorParams(0.6, nu + dnu, "untrusted")).rate_clamped
    assert hi <= lo + 1e-10


@given(params, st.floats(0.3, 0.95), st.floats(1e-3, 0.05))
@settings(max_examples=100, deadline=None)
def test_key_nondecreasing_in_eta(p, eta, deta):
    row, V_M, T, eps = p
    sp = spec(*row, V_M=V_M, beta=0.95)
    ch = ChannelParams(T, eps)
    lo = asymptotic_rate(sp, ch, DetectorParams(eta, 0.1, "untrusted")).rate_clamped
    hi = asymptotic_rate(sp, ch, DetectorParams(min(eta + deta, 1.0), 0.1, "untrusted")).rate_clamped
    assert hi >= lo - 1e-10


def test_trusted_noise_can_help_reverse_reconciliation():
    # Noise Eve cannot touch degrades her guess of Bob's data faster than it
    # degrades I_AB near the break-even distance; both routes agree on this.
    sp = spec(meas="heterodyne", V_M=31.0, beta=0.95)
    ch = ChannelParams(0.0625, 0.0)
    quiet = DetectorParams(0.6, 0.0, "trusted")
    noisy = DetectorParams(0.6, 0.125, "trusted")
    assert asymptotic_rate(sp, ch, noisy).chi_E < asymptotic_rate(sp, ch, quiet).chi_E
    for det in (quiet, noisy):
        _, chi = entropic_components(channel_covariance(sp, ch), sp, det)
        assert chi == pytest.approx(holevo_bound(sp, ch, det), abs=1e-9)


@given(params, st.floats(0.5, 0.99), st.floats(1e-3, 0.01))
@settings(max_examples=100, deadline=None)
def test_rate_nondecreasing_in_beta(p, beta, db):
    row, V_M, T, eps = p
    ch = ChannelParams(T, eps)
    assert asymptotic_rate(spec(*row, V_M=V_M, beta=beta + db), ch).rate >= asymptotic_rate(
        spec(*row, V_M=V_M, beta=beta), ch
    ).rate


@given(params, st.floats(0.3, 1.0), st.floats(0.0, 0.3))
@settings(max_examples=100, deadline=None)
def test_trusted_dominates_untrusted(p, eta, nu):
    row, V_M, T, eps = p
    assume(not (eta == 1.0 and nu > 0))
    sp = spec(*row, V_M=V_M, beta=0.95)
    ch = ChannelParams(T, eps)
    tr = asymptotic_rate(sp, ch, DetectorParams(eta, nu, "trusted")).rate
    un = asymptotic_rate(sp, ch, DetectorParams(eta, nu, "untrusted")).rate
    assert tr >= un - 1e-10


@given(params, st.floats(1e4, 1e13))
@settings(max_examples=100, deadline=None)
def test_finite_size_below_asymptotic(p, N):
    row, V_M, T, eps = p
    sp = spec(*row, V_M=V_M, beta=0.95)
    ch = ChannelParams(T, eps)
    fs = finite_size_rate(sp, ch, CAPTION_DET, FiniteSizeParams.from_pe_fraction(N, 0.5))
    assert fs.rate_clamped <= asymptotic_rate(sp, ch, CAPTION_DET).rate_clamped + 1e-12
    assert fs.rate <= fs.prefactor * asymptotic_rate(sp, ch, CAPTION_DET).rate + 1e-12
