"""Secret key rates of Gaussian-modulated CV-QKD protocols.

Two independent routes compute the same quantities:

* closed forms over the standard-form blocks ``a = V``, ``b = T (V + chi)``,
  ``c = sqrt(T (V^2 - 1))`` (``mutual_information``, ``holevo_bound``);
* a covariance route that builds the entanglement-based picture mode by mode,
  conditions it on the measurements with :mod:`cvqkd.phase_space` and takes
  entropy differences (``entropic_components``, ``keyrate_from_covariance``).

Excess noise ``eps`` is referred to the channel input, so
``chi_line = 1/T - 1 + eps``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Callable, Literal, Optional, Sequence, Union

import numpy as np
from scipy.special import erfcinv

from . import phase_space as ps
from .errors import DomainError

StateKind = Literal["coherent", "squeezed"]
Measurement = Literal["homodyne", "heterodyne"]
Reconciliation = Literal["direct", "reverse"]


@dataclass(frozen=True)
class ProtocolSpec:
    """Protocol row (state, measurement, reconciliation) plus ``V_M`` and ``beta``."""

    state_kind: StateKind = "coherent"
    measurement: Measurement = "heterodyne"
    reconciliation: Reconciliation = "reverse"
    V_M: float = 4.0
    beta: float = 0.95

    def __post_init__(self):
        if self.state_kind not in ("coherent", "squeezed"):
            raise DomainError(f"unknown state kind {self.state_kind!r}")
        if self.measurement not in ("homodyne", "heterodyne"):
            raise DomainError(f"unknown measurement {self.measurement!r}")
        if self.reconciliation not in ("direct", "reverse"):
            raise DomainError(f"unknown reconciliation {self.reconciliation!r}")
        if not self.V_M >= 0:
            raise DomainError(f"V_M must be >= 0, got {self.V_M}")
        if not 0 < self.beta <= 1:
            raise DomainError(f"beta must lie in (0, 1], got {self.beta}")

    @property
    def V(self) -> float:
        return self.V_M + 1.0

    def with_vm(self, V_M: float) -> "ProtocolSpec":
        return replace(self, V_M=V_M)


@dataclass(frozen=True)
class ChannelParams:
    T: float
    epsilon: float = 0.0

    def __post_init__(self):
        if not 0 < self.T <= 1:
            raise DomainError(f"transmittance must lie in (0, 1], got {self.T}")
        if self.epsilon < 0:
            raise DomainError(f"excess noise must be >= 0, got {self.epsilon}")

    @classmethod
    def from_output_noise(cls, T: float, xi: float) -> "ChannelParams":
        """Build from output-referred excess noise ``xi = T * eps``."""
        return cls(T, xi / T)

    @classmethod
    def from_fiber(cls, distance_km: float, alpha_db_per_km: float = 0.2, epsilon: float = 0.0):
        return cls(float(fiber_transmittance(distance_km, alpha_db_per_km)), epsilon)

    @property
    def chi_line(self) -> float:
        return 1.0 / self.T - 1.0 + self.epsilon


@dataclass(frozen=True)
class DetectorParams:
    """Receiver efficiency and electronic noise (per quadrature arm, SNU)."""

    eta: float = 1.0
    nu_ele: float = 0.0
    trust: Literal["trusted", "untrusted"] = "trusted"
    calibration: Literal["two_time", "one_time"] = "two_time"

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise DomainError(f"eta must lie in (0, 1], got {self.eta}")
        if self.nu_ele < 0:
            raise DomainError(f"nu_ele must be >= 0, got {self.nu_ele}")
        if self.trust not in ("trusted", "untrusted"):
            raise DomainError(f"unknown trust model {self.trust!r}")
        if self.calibration not in ("two_time", "one_time"):
            raise DomainError(f"unknown calibration {self.calibration!r}")

    @property
    def is_ideal(self) -> bool:
        return self.eta == 1.0 and self.nu_ele == 0.0

    def chi(self, measurement: Measurement) -> float:
        """Detection-added noise referred to Bob's input."""
        if measurement == "homodyne":
            return ((1.0 - self.eta) + self.nu_ele) / self.eta
        return (1.0 + (1.0 - self.eta) + 2.0 * self.nu_ele) / self.eta


IDEAL_DETECTOR = DetectorParams()


@dataclass(frozen=True)
class FiniteSizeParams:
    """Block sizes and failure probabilities; ``m = N - n`` symbols go to estimation."""

    N: float
    n: float
    eps_PE: float = 1e-10
    eps_bar: float = 1e-10
    eps_PA: float = 1e-10
    dim_HX: int = 2

    def __post_init__(self):
        if not 0 < self.n < self.N:
            raise DomainError(f"need 0 < n < N, got n={self.n}, N={self.N}")
        for name in ("eps_PE", "eps_bar", "eps_PA"):
            val = getattr(self, name)
            if not 0 < val < 1:
                raise DomainError(f"{name} must lie in (0, 1), got {val}")

    @classmethod
    def from_pe_fraction(cls, N: float, pe_fraction: float = 0.5, **kw) -> "FiniteSizeParams":
        m = N * pe_fraction
        return cls(N=N, n=N - m, **kw)

    @property
    def m(self) -> float:
        return self.N - self.n


@dataclass(frozen=True)
class DiscreteModulationCovariance:
    """Linear-channel covariance of a discrete-modulated protocol.

    ``Z`` (the A-B correlation term) depends on the constellation and must be
    supplied; no bound search is performed on it here.
    """

    V_M: float
    T: float
    eps: float
    Z: float

    def matrix(self) -> np.ndarray:
        a = self.V_M + 1.0
        b = self.T * self.V_M + 1.0 + self.T * self.eps
        return ps.two_mode_covariance(a, b, math.sqrt(self.T) * self.Z)


@dataclass(frozen=True)
class KeyRateReport:
    """Components of a key-rate evaluation, in bits per symbol.

    ``rate = prefactor * (beta * I_AB - chi_E - delta)`` holds exactly;
    ``prefactor = n/N`` and ``delta`` vanish in the asymptotic regime.
    """

    I_AB: float
    chi_E: float
    beta: float
    rate: float
    regime: Literal["asymptotic", "finite"] = "asymptotic"
    prefactor: float = 1.0
    delta: float = 0.0
    worst_case: Optional[tuple[float, float]] = None

    @property
    def rate_clamped(self) -> float:
        return max(self.rate, 0.0)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rate_clamped"] = self.rate_clamped
        if self.worst_case is not None:
            out["worst_case"] = {"t_min": self.worst_case[0], "sigma2_max": self.worst_case[1]}
        return out


def fiber_transmittance(distance_km, alpha_db_per_km: float = 0.2):
    if alpha_db_per_km <= 0:
        raise DomainError(f"attenuation must be positive, got {alpha_db_per_km}")
    return 10.0 ** (-alpha_db_per_km * np.asarray(distance_km, dtype=float) / 10.0)


# ---------------------------------------------------------------------------
# detector model resolution


@dataclass(frozen=True)
class OneTimeModel:
    """Detector model after redefining the shot-noise unit as the total noise.

    The electronic noise becomes an untrusted vacuum loss of transmittance
    ``eta_e``; the efficiency stage keeps its trust status with no noise.
    """

    eta_e: float
    untrusted_transmittance: float
    trusted_eta: float
    trusted_nu: float = 0.0


def one_time_calibration_adjustment(det: DetectorParams) -> OneTimeModel:
    eta_e = 1.0 / (1.0 + det.nu_ele)
    if det.trust == "trusted":
        return OneTimeModel(eta_e, eta_e, det.eta)
    return OneTimeModel(eta_e, eta_e * det.eta, 1.0)


@dataclass(frozen=True)
class _Resolved:
    T: float
    eps: float
    eta: float
    nu: float


def _resolve(chan: ChannelParams, det: DetectorParams, measurement: Measurement) -> _Resolved:
    """Fold every untrusted detector imperfection into the channel.

    What remains in ``eta``/``nu`` is the trusted part only.
    """
    if det.calibration == "one_time":
        model = one_time_calibration_adjustment(det)
        return _Resolved(chan.T * model.untrusted_transmittance, chan.epsilon, model.trusted_eta, 0.0)
    if det.trust == "trusted":
        return _Resolved(chan.T, chan.epsilon, det.eta, det.nu_ele)
    nu_eff = det.nu_ele if measurement == "homodyne" else 2.0 * det.nu_ele
    T_eff = chan.T * det.eta
    return _Resolved(T_eff, chan.epsilon + nu_eff / T_eff, 1.0, 0.0)


# ---------------------------------------------------------------------------
# closed forms


def _blocks(V: float, T: float, chi_line: float) -> tuple[float, float, float]:
    return V, T * (V + chi_line), math.sqrt(T * (V * V - 1.0))


def _pair_from_sum_product(s: float, p: float) -> tuple[float, float]:
    """Roots of ``l^4 - s l^2 + p = 0`` returned as ``(l1, l2)``."""
    rad = s * s - 4.0 * p
    # a radicand at roundoff level means a degenerate pair
    disc = math.sqrt(rad) if rad > 8.0 * np.finfo(float).eps * s * s else 0.0
    big = 0.5 * (s + disc)
    if big <= 0.0:
        return 0.0, 0.0
    # small root from the product avoids cancellation in s - disc
    return math.sqrt(big), math.sqrt(max(p / big, 0.0))


def _mi(spec: ProtocolSpec, r: _Resolved) -> float:
    if spec.V_M == 0:
        return 0.0
    V = spec.V
    chi_det = DetectorParams(r.eta, r.nu).chi(spec.measurement)
    chi_tot = 1.0 / r.T - 1.0 + r.eps + chi_det / r.T
    if spec.state_kind == "coherent":
        ratio = (V + chi_tot) / (1.0 + chi_tot)
        return math.log2(ratio) if spec.measurement == "heterodyne" else 0.5 * math.log2(ratio)
    return 0.5 * math.log2((V + chi_tot) / (1.0 / V + chi_tot))


def _holevo(spec: ProtocolSpec, r: _Resolved) -> float:
    V = spec.V
    chi = 1.0 / r.T - 1.0 + r.eps
    a, b, c = _blocks(V, r.T, chi)
    D = r.T * (V * chi + 1.0)  # ab - c^2 without cancellation
    Delta = (a - b) ** 2 + 2.0 * D  # a^2 + b^2 - 2c^2
    if D < 1.0 - ps.CLAMP_TOL or Delta < 0:
        raise DomainError("channel parameters give an unphysical covariance matrix")
    s_ab = float(np.sum(ps.g_function(_pair_from_sum_product(Delta, D * D))))

    if spec.reconciliation == "direct":
        # Eve's information on Alice's data does not involve Bob's detector
        if spec.state_kind == "squeezed":
            cond = [r.T * math.sqrt((V + chi) * (chi + 1.0 / V))]
        elif spec.measurement == "heterodyne":
            cond = [r.T * (chi + 1.0)]
        else:
            A = (a + b * D + Delta) / (a + 1.0)
            B = D * (b + D) / (a + 1.0)
            cond = list(_pair_from_sum_product(A, B))
        return s_ab - float(np.sum(ps.g_function(cond)))

    ideal = r.eta == 1.0 and r.nu == 0.0
    if spec.measurement == "homodyne":
        if ideal:
            cond = [math.sqrt(V * (V * chi + 1.0) / (chi + V))]
        else:
            chi_h = DetectorParams(r.eta, r.nu).chi("homodyne")
            chi_tot = chi + chi_h / r.T
            den = r.T * (V + chi_tot)
            E = (Delta * chi_h + V * D + r.T * (V + chi)) / den
            F = D * (V + D * chi_h) / den
            cond = list(_pair_from_sum_product(E, F))
    elif spec.state_kind == "coherent":
        if ideal:
            cond = [(V + r.T * (V * chi + 1.0)) / (r.T * (V + chi) + 1.0)]
        else:
            chi_h = DetectorParams(r.eta, r.nu).chi("heterodyne")
            chi_tot = chi + chi_h / r.T
            den = r.T * (V + chi_tot)
            E = (
                Delta * chi_h**2
                + D * D
                + 1.0
                + 2.0 * chi_h * (V * D + r.T * (V + chi))
                + 2.0 * r.T * (V * V - 1.0)
            ) / den**2
            F = ((V + D * chi_h) / den) ** 2
            cond = list(_pair_from_sum_product(E, F))
    else:
        if not ideal:
            # no closed form for single-quadrature heterodyne behind a noisy detector
            gamma = ps.two_mode_covariance(a, b, c)
            return _entropic(gamma, spec, r.eta, r.nu)[1]
        A = (b + a * D + Delta) / (b + 1.0)
        B = D * (a + D) / (b + 1.0)
        cond = list(_pair_from_sum_product(A, B))
    return s_ab - float(np.sum(ps.g_function(cond)))


def mutual_information(spec: ProtocolSpec, chan: ChannelParams, det: DetectorParams = IDEAL_DETECTOR) -> float:
    """Alice-Bob mutual information in bits per symbol."""
    return _mi(spec, _resolve(chan, det, spec.measurement))


def holevo_bound(spec: ProtocolSpec, chan: ChannelParams, det: DetectorParams = IDEAL_DETECTOR) -> float:
    """Upper bound on Eve's information about the reference side's data."""
    return _holevo(spec, _resolve(chan, det, spec.measurement))


def asymptotic_rate(spec: ProtocolSpec, chan: ChannelParams, det: DetectorParams = IDEAL_DETECTOR) -> KeyRateReport:
    r = _resolve(chan, det, spec.measurement)
    I_AB = _mi(spec, r)
    chi_E = _holevo(spec, r)
    return KeyRateReport(I_AB=I_AB, chi_E=chi_E, beta=spec.beta, rate=spec.beta * I_AB - chi_E)


# ---------------------------------------------------------------------------
# covariance route


class _Modes:
    """Covariance matrix with named modes, for building measurement schemes."""

    def __init__(self, cov, labels):
        self.cov = np.asarray(cov, dtype=float)
        self.labels = list(labels)

    def add(self, block, *labels):
        self.cov = ps.append_modes(self.cov, block)
        self.labels += labels

    def mix(self, first, second, t):
        self.cov = ps.beamsplitter(self.cov, self.labels.index(first), self.labels.index(second), t)

    def measure(self, label, kind):
        self.cov = ps.condition_on_measurement(self.cov, self.labels.index(label), kind)
        self.labels.remove(label)

    def entropy(self):
        return ps.von_neumann_entropy(self.cov)

    def var(self, label, quad=0):
        i = 2 * self.labels.index(label) + quad
        return self.cov[i, i]

    def copy(self):
        return _Modes(self.cov.copy(), self.labels)


def _bob_side(gamma_AB, measurement: Measurement, eta: float, nu: float) -> _Modes:
    """Attach the trusted detector (and the heterodyne split) to mode B."""
    m = _Modes(gamma_AB, ["A", "B"])
    nu_eff = nu if measurement == "homodyne" else 2.0 * nu
    if eta < 1.0:
        V_D = 1.0 + nu_eff / (1.0 - eta)
        m.add(ps.epr_state(V_D).cov, "F", "G")
        m.mix("B", "F", eta)
    elif nu_eff > 0:
        raise DomainError("trusted electronic noise needs eta < 1 in the covariance route")
    if measurement == "heterodyne":
        m.add(np.eye(2), "B2")
        m.mix("B", "B2", 0.5)
    return m


def _alice_side(gamma, state: StateKind, measurement: Measurement, both: bool) -> _Modes:
    """Condition Alice's mode on her (virtual) preparation measurement."""
    m = _Modes(gamma, ["A", "B"])
    if state == "squeezed":
        m.measure("A", "homodyne-x")
        return m
    m.add(np.eye(2), "A2")
    m.mix("A", "A2", 0.5)
    m.measure("A", "homodyne-x")
    if both:
        m.measure("A2", "homodyne-p")
    return m


def _entropic(gamma_AB, spec: ProtocolSpec, eta: float, nu: float) -> tuple[float, float]:
    gamma_AB = ps.as_covariance(gamma_AB)
    s_ab = ps.von_neumann_entropy(gamma_AB)

    # mutual information from Bob's measured variance and its conditional
    bob = _bob_side(gamma_AB, spec.measurement, eta, nu)
    var_b = bob.var("B")
    if spec.state_kind == "squeezed":
        bob.measure("A", "homodyne-x")
    else:
        bob.add(np.eye(2), "A2")
        bob.mix("A", "A2", 0.5)
        bob.measure("A", "homodyne-x")
    var_b_given_a = bob.var("B")
    I_AB = 0.5 * math.log2(var_b / var_b_given_a)
    if spec.state_kind == "coherent" and spec.measurement == "heterodyne":
        I_AB *= 2.0

    if spec.reconciliation == "direct":
        both = spec.state_kind == "coherent" and spec.measurement == "heterodyne"
        cond = _alice_side(gamma_AB, spec.state_kind, spec.measurement, both)
        return I_AB, s_ab - cond.entropy()

    m = _bob_side(gamma_AB, spec.measurement, eta, nu)
    m.measure("B", "homodyne-x")
    if spec.measurement == "heterodyne" and spec.state_kind == "coherent":
        m.measure("B2", "homodyne-p")
    return I_AB, s_ab - m.entropy()


def _untrusted_stages(gamma_AB, det: DetectorParams, measurement: Measurement):
    """Apply the untrusted part of the detector to B; return state and trusted pair."""
    m = _Modes(gamma_AB, ["A", "B"])
    if det.calibration == "one_time":
        model = one_time_calibration_adjustment(det)
        m.add(np.eye(2), "L")
        m.mix("B", "L", model.untrusted_transmittance)
        return ps.reduce_modes(m.cov, [0, 1]), model.trusted_eta, 0.0
    if det.trust == "trusted":
        return m.cov, det.eta, det.nu_ele
    nu_eff = det.nu_ele if measurement == "homodyne" else 2.0 * det.nu_ele
    m.add(np.eye(2), "L")
    m.mix("B", "L", det.eta)
    cov = ps.reduce_modes(m.cov, [0, 1]).copy()
    cov[2, 2] += nu_eff
    cov[3, 3] += nu_eff
    return cov, 1.0, 0.0


def entropic_components(gamma_AB, spec: ProtocolSpec, det: DetectorParams = IDEAL_DETECTOR) -> tuple[float, float]:
    """``(I_AB, chi_E)`` by explicit conditioning of the full covariance matrix."""
    gamma_AB = ps.as_covariance(gamma_AB)
    if gamma_AB.shape != (4, 4):
        raise DomainError("gamma_AB must describe exactly two modes")
    if not ps.is_physical(gamma_AB):
        raise DomainError("gamma_AB is not a physical covariance matrix")
    gamma, eta, nu = _untrusted_stages(gamma_AB, det, spec.measurement)
    return _entropic(gamma, spec, eta, nu)


def channel_covariance(spec: ProtocolSpec, chan: ChannelParams) -> np.ndarray:
    """Entanglement-based ``gamma_AB`` seen at Bob's input (before the detector)."""
    return ps.two_mode_covariance(*_blocks(spec.V, chan.T, chan.chi_line))


def keyrate_from_covariance(gamma_AB, spec: ProtocolSpec, det: DetectorParams = IDEAL_DETECTOR) -> KeyRateReport:
    """Asymptotic rate from an (estimated) channel-level covariance matrix."""
    I_AB, chi_E = entropic_components(gamma_AB, spec, det)
    return KeyRateReport(I_AB=I_AB, chi_E=chi_E, beta=spec.beta, rate=spec.beta * I_AB - chi_E)


# ---------------------------------------------------------------------------
# finite size, PLOB, optimisation, curves


def z_quantile(eps_PE: float) -> float:
    """Two-sided Gaussian quantile: ``(1 - erf(z/sqrt2))/2 = eps_PE/2``."""
    return math.sqrt(2.0) * float(erfcinv(eps_PE))


def privacy_amplification_penalty(n: float, eps_bar: float, eps_PA: float, dim_HX: int = 2) -> float:
    return (2 * dim_HX + 3) * math.sqrt(math.log2(2.0 / eps_bar) / n) + 2.0 / n * math.log2(1.0 / eps_PA)


def worst_case_parameters(spec: ProtocolSpec, r: _Resolved, fs: FiniteSizeParams):
    """Worst-case ``(t_min, sigma2_max)`` on Bob's normalised data and the channel they imply.

    Bob's data obeys ``y = t x + z`` with ``t = sqrt(g T)`` and
    ``Var z = 1 + nu + g T eps``, where ``g`` is the trusted efficiency
    (halved for heterodyne).
    """
    g = r.eta if spec.measurement == "homodyne" else 0.5 * r.eta
    z = z_quantile(fs.eps_PE)
    sigma2 = 1.0 + r.nu + g * r.T * r.eps
    t_min = math.sqrt(g * r.T) - z * math.sqrt(sigma2 / (fs.m * spec.V_M))
    sigma2_max = sigma2 + z * sigma2 * math.sqrt(2.0) / math.sqrt(fs.m)
    if t_min <= 0:
        return t_min, sigma2_max, None
    T_wc = min(t_min * t_min / g, 1.0)
    eps_wc = max((sigma2_max - 1.0 - r.nu) / (g * T_wc), 0.0)
    return t_min, sigma2_max, _Resolved(T_wc, eps_wc, r.eta, r.nu)


def finite_size_rate(
    spec: ProtocolSpec,
    chan: ChannelParams,
    det: DetectorParams,
    fs: FiniteSizeParams,
) -> KeyRateReport:
    if spec.V_M <= 0:
        raise DomainError("finite-size analysis needs V_M > 0")
    r = _resolve(chan, det, spec.measurement)
    I_AB = _mi(spec, r)
    t_min, sigma2_max, wc = worst_case_parameters(spec, r, fs)
    delta = privacy_amplification_penalty(fs.n, fs.eps_bar, fs.eps_PA, fs.dim_HX)
    prefactor = fs.n / fs.N
    chi_E = math.inf if wc is None else _holevo(spec, wc)
    rate = prefactor * (spec.beta * I_AB - chi_E - delta)
    return KeyRateReport(
        I_AB=I_AB,
        chi_E=chi_E,
        beta=spec.beta,
        rate=rate,
        regime="finite",
        prefactor=prefactor,
        delta=delta,
        worst_case=(t_min, sigma2_max),
    )


def plob_bound(T) -> float:
    """Repeaterless secret-key capacity ``-log2(1 - T)`` of a lossy channel."""
    T = float(T)
    if not 0 < T <= 1:
        raise DomainError(f"transmittance must lie in (0, 1], got {T}")
    if T == 1.0:
        return math.inf
    return -math.log2(1.0 - T)


def evaluate_rate(spec, chan, det=IDEAL_DETECTOR, fs: Optional[FiniteSizeParams] = None) -> KeyRateReport:
    if fs is None:
        return asymptotic_rate(spec, chan, det)
    return finite_size_rate(spec, chan, det, fs)


@dataclass(frozen=True)
class OptimizationResult:
    V_M: float
    rate: float
    report: KeyRateReport
    at_boundary: bool
    all_negative: bool


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def optimize_modulation_variance(
    spec: ProtocolSpec,
    chan: ChannelParams,
    det: DetectorParams = IDEAL_DETECTOR,
    fs: Optional[FiniteSizeParams] = None,
    bounds: tuple[float, float] = (1e-3, 1e3),
    grid_points: int = 121,
    tol: float = 1e-7,
) -> OptimizationResult:
    """Maximise the key rate over ``V_M``.

    A log-spaced grid brackets the best point, golden-section search over
    ``log10 V_M`` refines it, and a final local grid guards against
    plateaus. ``spec.V_M`` is ignored.
    """
    lo, hi = math.log10(bounds[0]), math.log10(bounds[1])

    def rate_at(log_vm: float) -> float:
        try:
            r = evaluate_rate(spec.with_vm(10.0**log_vm), chan, det, fs).rate
        except DomainError:
            return -math.inf
        return r if math.isfinite(r) else -math.inf

    grid = np.linspace(lo, hi, grid_points)
    values = np.array([rate_at(x) for x in grid])
    k = int(np.argmax(values))
    best_x, best_val = grid[k], values[k]

    if 0 < k < grid_points - 1:
        left, right = grid[k - 1], grid[k + 1]
        x1 = right - _GOLDEN * (right - left)
        x2 = left + _GOLDEN * (right - left)
        f1, f2 = rate_at(x1), rate_at(x2)
        while right - left > tol:
            if f1 >= f2:
                right, x2, f2 = x2, x1, f1
                x1 = right - _GOLDEN * (right - left)
                f1 = rate_at(x1)
            else:
                left, x1, f1 = x1, x2, f2
                x2 = left + _GOLDEN * (right - left)
                f2 = rate_at(x2)
        local = np.linspace(left - 10 * tol, right + 10 * tol, 11)
        for x in local:
            v = rate_at(x)
            if v > best_val:
                best_x, best_val = x, v

    V_M = float(10.0**best_x)
    report = evaluate_rate(spec.with_vm(V_M), chan, det, fs)
    return OptimizationResult(
        V_M=V_M,
        rate=report.rate,
        report=report,
        at_boundary=k in (0, grid_points - 1),
        all_negative=bool(best_val <= 0),
    )


@dataclass(frozen=True)
class CurvePoint:
    distance_km: float
    T: float
    rate: float
    V_M: float


def rate_distance_curve(
    spec: ProtocolSpec,
    det: DetectorParams,
    alpha_db_per_km: float,
    eps: Union[float, Callable[[float], float]],
    distances: Sequence[float],
    fs: Optional[FiniteSizeParams] = None,
    optimize: bool = False,
    threads: int = 1,
) -> list[CurvePoint]:
    """Key rate along a fiber link ``T = 10^(-alpha d / 10)``.

    ``eps`` is either a constant or a function of distance. Rows come back in
    the order of ``distances`` regardless of ``threads``.
    """
    if alpha_db_per_km <= 0:
        raise DomainError(f"attenuation must be positive, got {alpha_db_per_km}")
    eps_of = eps if callable(eps) else (lambda _d: eps)

    def point(d: float) -> CurvePoint:
        T = float(fiber_transmittance(d, alpha_db_per_km))
        chan = ChannelParams(T, eps_of(d))
        if optimize:
            res = optimize_modulation_variance(spec, chan, det, fs)
            return CurvePoint(float(d), float(T), float(res.rate), res.V_M)
        return CurvePoint(float(d), float(T), float(evaluate_rate(spec, chan, det, fs).rate), spec.V_M)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(point, distances))
    return [point(d) for d in distances]
