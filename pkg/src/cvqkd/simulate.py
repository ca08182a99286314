"""Monte-Carlo model of the prepare-and-measure pipeline.

Alice's modulation, the channel, Bob's detector and its shot-noise
calibration are sampled at the symbol level. Bob's raw data are in arbitrary
electrical units (gain ``A``); calibration divides them back into SNU.

Every stage draws from its own counter-based Philox stream derived from the
run seed, so outputs depend only on the seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Literal, Optional

import numpy as np
from scipy import constants

from .errors import DomainError, EstimationError, PrecisionError
from .keyrate import (
    ChannelParams,
    DetectorParams,
    FiniteSizeParams,
    ProtocolSpec,
    asymptotic_rate,
    finite_size_rate,
    keyrate_from_covariance,
)
from . import phase_space as ps

DEFAULT_GAIN = 1e3
MIN_CALIBRATION_SAMPLES = 10_000

# stream identifiers, one per pipeline stage
_STAGES = {
    "modulate": 1,
    "channel": 2,
    "detect": 3,
    "vacuum": 4,
    "dark": 5,
    "basis": 6,
    "code": 7,
    "keybits": 8,
    "toeplitz": 9,
    "hash": 10,
    "alice_basis": 11,
}

Basis = Literal["x", "p", "both"]


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent generator for one pipeline stage of a seeded run."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_STAGES[stage],))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Gaussian sampling


def gaussian_pair(u1, u2):
    """Box-Muller transform of two uniforms into two independent standard normals.

    Args:
        u1: uniform sample(s) in (0, 1].
        u2: uniform sample(s) in [0, 1).
    """
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    if np.any(u1 <= 0) or np.any(u1 > 1):
        raise DomainError("u1 must lie in (0, 1]")
    r = np.sqrt(-2.0 * np.log(u1))
    z0, z1 = r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)
    if z0.ndim == 0:
        return float(z0), float(z1)
    return z0, z1


def standard_normals(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    u1 = 1.0 - rng.random(n)  # (0, 1]
    u2 = rng.random(n)
    return gaussian_pair(u1, u2)


# ---------------------------------------------------------------------------
# modulation


@dataclass(frozen=True)
class ModulationFormat:
    """Constellation description.

    ``kind`` is one of ``gaussian``, ``mpsk``, ``qam`` or ``unidimensional``.
    For discrete kinds the constellation is rescaled so that the per-quadrature
    second moment equals ``V_M``.
    """

    kind: str = "gaussian"
    V_M: float = 4.0
    M: int = 4
    ring_radii: tuple[float, ...] = (1.0,)
    shaping: Literal["uniform", "gaussian"] = "uniform"
    shaping_strength: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "mpsk", "qam", "unidimensional"):
            raise DomainError(f"unknown modulation kind {self.kind!r}")
        if self.V_M < 0:
            raise DomainError(f"V_M must be >= 0, got {self.V_M}")
        if self.kind == "qam" and round(math.isqrt(self.M)) ** 2 != self.M:
            raise DomainError(f"QAM order must be a perfect square, got {self.M}")
        if self.kind == "mpsk" and self.M < 2:
            raise DomainError("PSK needs at least two phases")
        if self.shaping not in ("uniform", "gaussian"):
            raise DomainError(f"unknown shaping {self.shaping!r}")

    def constellation(self) -> tuple[np.ndarray, np.ndarray]:
        """Complex points and their probabilities, with ``E|a|^2 = 2 V_M``."""
        if self.kind == "mpsk":
            phases = np.exp(2j * np.pi * np.arange(self.M) / self.M)
            pts = np.concatenate([r * phases for r in self.ring_radii])
            probs = np.full(pts.size, 1.0 / pts.size)
        elif self.kind == "qam":
            side = math.isqrt(self.M)
            axis = np.arange(side) * 2.0 - (side - 1)
            pts = (axis[:, None] + 1j * axis[None, :]).ravel()
            energy = np.abs(pts) ** 2
            if self.shaping == "gaussian":
                # discretised Maxwell-Boltzmann weights over symbol energy
                probs = np.exp(-self.shaping_strength * energy / energy.mean())
            else:
                probs = np.ones(pts.size)
            probs /= probs.sum()
        else:
            raise DomainError(f"{self.kind} has no finite constellation")
        second = float(np.sum(probs * np.abs(pts) ** 2))
        scale = math.sqrt(2.0 * self.V_M / second) if second > 0 else 0.0
        return pts * scale, probs


@dataclass(frozen=True)
class SymbolBlock:
    """Paired quadrature amplitudes in SNU."""

    x: np.ndarray
    p: np.ndarray
    format: Optional[ModulationFormat] = None
    seed: Optional[int] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if x.shape != p.shape:
            raise DomainError("x and p must have equal lengths")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise DomainError("symbol block contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)

    def __len__(self) -> int:
        return self.x.size


def modulate(fmt: ModulationFormat, n: int, seed: int) -> SymbolBlock:
    if n < 1:
        raise DomainError(f"need at least one symbol, got {n}")
    rng = stage_rng(seed, "modulate")
    if fmt.kind in ("gaussian", "unidimensional"):
        z0, z1 = standard_normals(rng, n)
        s = math.sqrt(fmt.V_M)
        p = np.zeros(n) if fmt.kind == "unidimensional" else s * z1
        return SymbolBlock(s * z0, p, fmt, seed)
    pts, probs = fmt.constellation()
    idx = rng.choice(pts.size, size=n, p=probs)
    return SymbolBlock(pts[idx].real, pts[idx].imag, fmt, seed)


# ---------------------------------------------------------------------------
# channel and detection


def channel_apply(block: SymbolBlock, chan: ChannelParams, seed: int) -> SymbolBlock:
    """Bob's input-mode quadratures (shot noise included).

    ``x_out = sqrt(T) x_in + g`` with ``Var g = 1 + T eps``: the transmitted
    vacuum of the coherent state and the loss port together contribute one
    shot-noise unit.
    """
    rng = stage_rng(seed, "channel")
    z0, z1 = standard_normals(rng, len(block))
    s = math.sqrt(1.0 + chan.T * chan.epsilon)
    rt = math.sqrt(chan.T)
    return SymbolBlock(rt * block.x + s * z0, rt * block.p + s * z1, block.format, seed)


@dataclass(frozen=True)
class DetectionRecord:
    """Bob's measurement results.

    ``raw`` is in electrical units: shape ``(n,)`` for homodyne (``basis`` 0
    for x, 1 for p) or ``(n, 2)`` for heterodyne (``basis`` all 2).
    ``normalized = raw / sqrt(snu_estimate)`` once calibrated.
    """

    raw: np.ndarray
    basis: np.ndarray
    measurement: Literal["homodyne", "heterodyne"]
    normalized: Optional[np.ndarray] = None
    snu_estimate: float = math.nan

    def normalize(self, calib: "CalibrationRecord") -> "DetectionRecord":
        return replace(self, normalized=self.raw / math.sqrt(calib.snu), snu_estimate=calib.snu)


def detect(
    block: SymbolBlock,
    det: DetectorParams,
    measurement: Literal["homodyne", "heterodyne"],
    seed: int,
    gain: float = DEFAULT_GAIN,
) -> DetectionRecord:
    """Sample Bob's detector.

    Homodyne measures a uniformly random quadrature per symbol:
    ``y = A (sqrt(eta) q + sqrt(1-eta) v + e)`` with ``Var e = nu_ele``.
    Heterodyne splits the mode on a balanced beamsplitter first, so each arm
    sees ``sqrt(eta/2) q + sqrt(eta/2) v1 + sqrt(1-eta) v2 + e``.
    """
    rng = stage_rng(seed, "detect")
    n = len(block)
    eta, nu = det.eta, det.nu_ele
    if measurement == "homodyne":
        basis = stage_rng(seed, "basis").integers(0, 2, n)
        q = np.where(basis == 0, block.x, block.p)
        v, e = standard_normals(rng, n)
        y = math.sqrt(eta) * q + math.sqrt(1 - eta) * v + math.sqrt(nu) * e
        return DetectionRecord(gain * y, basis, "homodyne")
    if measurement != "heterodyne":
        raise DomainError(f"unknown measurement {measurement!r}")
    arms = []
    for q in (block.x, block.p):
        v1, v2 = standard_normals(rng, n)
        e, _ = standard_normals(rng, n)
        arms.append(
            math.sqrt(eta / 2) * q + math.sqrt(eta / 2) * v1 + math.sqrt(1 - eta) * v2 + math.sqrt(nu) * e
        )
    return DetectionRecord(gain * np.stack(arms, axis=1), np.full(n, 2), "heterodyne")


def vacuum_record(det: DetectorParams, n: int, seed: int, gain: float = DEFAULT_GAIN) -> np.ndarray:
    """Detector output with the LO on and the signal port blocked."""
    z0, z1 = standard_normals(stage_rng(seed, "vacuum"), n)
    return gain * (z0 + math.sqrt(det.nu_ele) * z1)


def dark_record(det: DetectorParams, n: int, seed: int, gain: float = DEFAULT_GAIN) -> np.ndarray:
    """Detector output with both the signal and the LO cut off."""
    z0, _ = standard_normals(stage_rng(seed, "dark"), n)
    return gain * math.sqrt(det.nu_ele) * z0


@dataclass(frozen=True)
class CalibrationRecord:
    mode: Literal["two_time", "one_time"]
    V_total_hat: float
    V_ele_hat: float
    snu: float


def calibrate_snu(mode: str, vacuum: np.ndarray, dark: Optional[np.ndarray] = None) -> CalibrationRecord:
    """Shot-noise unit from calibration records.

    ``two_time`` subtracts the electronic-noise variance measured without
    LO; ``one_time`` takes the total vacuum noise as the unit.
    """
    vacuum = np.asarray(vacuum, dtype=float)
    if vacuum.size < MIN_CALIBRATION_SAMPLES:
        raise PrecisionError(f"vacuum record has {vacuum.size} samples, need {MIN_CALIBRATION_SAMPLES}")
    v_tot = float(np.var(vacuum, ddof=1))
    if mode == "one_time":
        return CalibrationRecord("one_time", v_tot, 0.0, v_tot)
    if mode != "two_time":
        raise DomainError(f"unknown calibration mode {mode!r}")
    if dark is None:
        raise DomainError("two_time calibration needs an electronic-noise record")
    dark = np.asarray(dark, dtype=float)
    if dark.size < MIN_CALIBRATION_SAMPLES:
        raise PrecisionError(f"dark record has {dark.size} samples, need {MIN_CALIBRATION_SAMPLES}")
    v_ele = float(np.var(dark, ddof=1))
    return CalibrationRecord("two_time", v_tot, v_ele, v_tot - v_ele)


# ---------------------------------------------------------------------------
# estimation


def sift_pairs(block: SymbolBlock, record: DetectionRecord) -> tuple[np.ndarray, np.ndarray]:
    """Alice's quadrature matching each of Bob's normalised results."""
    if record.normalized is None:
        raise DomainError("detection record has not been normalised")
    if record.measurement == "homodyne":
        return np.where(record.basis == 0, block.x, block.p), record.normalized
    return np.concatenate([block.x, block.p]), np.concatenate(
        [record.normalized[:, 0], record.normalized[:, 1]]
    )


def data_gain(det: DetectorParams, measurement: str) -> tuple[float, float]:
    """``(g, nu)`` such that normalised data read ``y = sqrt(g T) x + z``, ``Var z = 1 + nu + g T eps``."""
    g = det.eta if measurement == "homodyne" else 0.5 * det.eta
    if det.calibration == "one_time":
        return g / (1.0 + det.nu_ele), 0.0
    return g, det.nu_ele


@dataclass(frozen=True)
class Estimates:
    T_hat: float
    eps_hat: float
    gamma_AB_hat: np.ndarray
    covariance: float
    residual_variance: float
    n_pairs: int


def estimate_parameters(
    block: SymbolBlock,
    record: DetectionRecord,
    det_model: DetectorParams,
    V_M: Optional[float] = None,
) -> Estimates:
    """Channel transmittance and input-referred excess noise from paired data.

    The slope of Bob's data on Alice's gives ``sqrt(g T)``; the residual
    variance, after removing the known detector terms, gives ``eps``. The
    covariance matrix is assembled with ``c = sqrt(T (V^2 - 1))``, which is
    what the entanglement-based mapping ``x_mod = sqrt(2 (V-1)/(V+1)) x_A``
    gives for the measured correlation.

    Raises:
        EstimationError: if the correlation is not significantly positive.
    """
    a, b = sift_pairs(block, record)
    if V_M is None:
        V_M = block.format.V_M if block.format is not None else float(np.var(a))
    n = a.size
    ac, bc = a - a.mean(), b - b.mean()
    var_a = float(ac @ ac) / (n - 1)
    cov = float(ac @ bc) / (n - 1)
    if var_a <= 0:
        raise EstimationError("no modulation in the sifted data")
    slope = cov / var_a
    resid = bc - slope * ac
    res_var = float(resid @ resid) / (n - 2)
    stderr = math.sqrt(res_var * var_a / n)
    if not cov > 5.0 * stderr:
        raise EstimationError(f"correlation {cov:.3g} is not significant (stderr {stderr:.2g})")
    g, nu = data_gain(det_model, record.measurement)
    T_hat = slope * slope / g
    eps_hat = (res_var - 1.0 - nu) / (g * T_hat)
    V = V_M + 1.0
    gamma = ps.two_mode_covariance(V, T_hat * (V_M + eps_hat) + 1.0, math.sqrt(T_hat * (V * V - 1.0)))
    return Estimates(T_hat, eps_hat, gamma, cov, res_var, n)


# ---------------------------------------------------------------------------
# end-to-end


@dataclass(frozen=True)
class SimulationConfig:
    channel: ChannelParams
    detector: DetectorParams = DetectorParams()
    format: ModulationFormat = ModulationFormat()
    measurement: Literal["homodyne", "heterodyne"] = "homodyne"
    n_symbols: int = 1_000_000
    seed: int = 7
    calibration_samples: int = 10_000_000
    gain: float = DEFAULT_GAIN
    beta: float = 0.95
    pe_fraction: float = 0.5
    eps_PE: float = 1e-10
    eps_bar: float = 1e-10
    eps_PA: float = 1e-10

    @property
    def protocol(self) -> ProtocolSpec:
        return ProtocolSpec("coherent", self.measurement, "reverse", self.format.V_M, self.beta)


@dataclass
class RunReport:
    T_true: float
    eps_true: float
    T_hat: float
    eps_hat: float
    snu: float
    calibration: str
    rate_true: dict
    rate_estimated: dict
    rate_finite: dict
    projected: bool
    n_pairs: int
    gamma_AB_hat: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def physical_projection(T_hat: float, eps_hat: float) -> tuple[float, float, bool]:
    """Clip estimates into ``0 < T <= 1``, ``eps >= 0`` for rate evaluation."""
    T = min(max(T_hat, 1e-12), 1.0)
    eps = max(eps_hat, 0.0)
    return T, eps, (T, eps) != (T_hat, eps_hat)


def simulate_measurements(cfg: SimulationConfig) -> tuple[SymbolBlock, DetectionRecord, CalibrationRecord]:
    """modulate -> channel -> detect -> calibrate -> normalise."""
    block = modulate(cfg.format, cfg.n_symbols, cfg.seed)
    rx = channel_apply(block, cfg.channel, cfg.seed)
    record = detect(rx, cfg.detector, cfg.measurement, cfg.seed, cfg.gain)
    vac = vacuum_record(cfg.detector, cfg.calibration_samples, cfg.seed, cfg.gain)
    dark = dark_record(cfg.detector, cfg.calibration_samples, cfg.seed, cfg.gain)
    calib = calibrate_snu(cfg.detector.calibration, vac, dark)
    return block, record.normalize(calib), calib


def end_to_end_run(cfg: SimulationConfig) -> RunReport:
    """Simulated measurements -> parameter estimation -> key rates."""
    if cfg.format.kind != "gaussian":
        raise DomainError("key rates are only defined here for Gaussian modulation")
    block, record, calib = simulate_measurements(cfg)
    est = estimate_parameters(block, record, cfg.detector, cfg.format.V_M)

    spec = cfg.protocol
    T_p, eps_p, projected = physical_projection(est.T_hat, est.eps_hat)
    chan_hat = ChannelParams(T_p, eps_p)
    V = spec.V
    gamma_p = ps.two_mode_covariance(V, T_p * (spec.V_M + eps_p) + 1.0, math.sqrt(T_p * (V * V - 1.0)))
    est_rate = keyrate_from_covariance(gamma_p, spec, cfg.detector)
    fs = FiniteSizeParams.from_pe_fraction(
        cfg.n_symbols, cfg.pe_fraction, eps_PE=cfg.eps_PE, eps_bar=cfg.eps_bar, eps_PA=cfg.eps_PA
    )
    return RunReport(
        T_true=cfg.channel.T,
        eps_true=cfg.channel.epsilon,
        T_hat=est.T_hat,
        eps_hat=est.eps_hat,
        snu=calib.snu,
        calibration=calib.mode,
        rate_true=asymptotic_rate(spec, cfg.channel, cfg.detector).to_dict(),
        rate_estimated=est_rate.to_dict(),
        rate_finite=finite_size_rate(spec, chan_hat, cfg.detector, fs).to_dict(),
        projected=projected,
        n_pairs=est.n_pairs,
        gamma_AB_hat=est.gamma_AB_hat.tolist(),
    )


def write_samples_csv(path, block: SymbolBlock, record: DetectionRecord) -> None:
    """Dump paired samples; heterodyne symbols produce one row per arm."""
    norm = record.normalized if record.normalized is not None else np.full(record.raw.shape, np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["idx", "x_mod", "p_mod", "basis", "raw", "normalized"])
        for i in range(len(block)):
            if record.measurement == "homodyne":
                arms = [("xp"[record.basis[i]], record.raw[i], norm[i])]
            else:
                arms = [("x", record.raw[i, 0], norm[i, 0]), ("p", record.raw[i, 1], norm[i, 1])]
            for basis, raw, nv in arms:
                w.writerow([i, repr(float(block.x[i])), repr(float(block.p[i])), basis, repr(float(raw)), repr(float(nv))])


# ---------------------------------------------------------------------------
# source monitoring


def mean_photon_number(V_M):
    """Average photon number of a Gaussian-modulated coherent ensemble."""
    return np.asarray(V_M, dtype=float) / 2.0


def modulation_variance_from_power(power_w, wavelength_m: float, rep_rate_hz: float):
    """``V_M = 2 P / (h nu f_rep)`` from the measured mean optical power."""
    photon_energy = constants.h * constants.c / wavelength_m
    return 2.0 * np.asarray(power_w, dtype=float) / (photon_energy * rep_rate_hz)


def power_from_modulation_variance(V_M, wavelength_m: float, rep_rate_hz: float):
    photon_energy = constants.h * constants.c / wavelength_m
    return np.asarray(V_M, dtype=float) * photon_energy * rep_rate_hz / 2.0


def rayleigh_amplitude_pdf(r, sigma2: float):
    """Density of ``|alpha|`` when both quadratures are ``N(0, sigma2)``."""
    r = np.asarray(r, dtype=float)
    return np.where(r >= 0, r / sigma2 * np.exp(-r * r / (2 * sigma2)), 0.0)
