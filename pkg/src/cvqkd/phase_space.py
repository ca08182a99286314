"""Gaussian-state linear algebra in shot-noise units.

Quadratures are ordered ``(x1, p1, x2, p2, ...)`` and the vacuum has unit
variance in each quadrature, so the uncertainty relation reads
``gamma + i*Omega >= 0`` and every symplectic eigenvalue of a physical state is
at least one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import DomainError

#: eigenvalues this far below one are treated as floating-point noise
CLAMP_TOL = 1e-9
SYMMETRY_RTOL = 1e-12

MeasurementKind = Literal["homodyne-x", "homodyne-p", "heterodyne"]

_PAULI_Z = np.diag([1.0, -1.0])


def symplectic_form(n_modes: int) -> np.ndarray:
    """Block-diagonal symplectic form with blocks ``[[0, 1], [-1, 0]]``."""
    if n_modes < 1:
        raise DomainError(f"n_modes must be positive, got {n_modes}")
    return np.kron(np.eye(n_modes), np.array([[0.0, 1.0], [-1.0, 0.0]]))


def as_covariance(cov) -> np.ndarray:
    """Validate a covariance matrix and return it as a float array.

    Raises:
        DomainError: if the matrix is not square with even size or is not
            symmetric to within a relative tolerance of 1e-12.
    """
    cov = np.array(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] % 2:
        raise DomainError(f"covariance must be a 2n x 2n matrix, got shape {cov.shape}")
    scale = max(np.max(np.abs(cov)), 1.0)
    if np.max(np.abs(cov - cov.T)) > SYMMETRY_RTOL * scale:
        raise DomainError("covariance matrix is not symmetric")
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class GaussianState:
    """First and second moments of an n-mode Gaussian state."""

    cov: np.ndarray
    displacement: np.ndarray = field(default=None)

    def __post_init__(self):
        cov = as_covariance(self.cov)
        object.__setattr__(self, "cov", cov)
        if self.displacement is None:
            disp = np.zeros(cov.shape[0])
        else:
            disp = np.asarray(self.displacement, dtype=float)
        if disp.shape != (cov.shape[0],):
            raise DomainError(
                f"displacement length {disp.size} does not match 2*n_modes = {cov.shape[0]}"
            )
        object.__setattr__(self, "displacement", disp)

    @property
    def n_modes(self) -> int:
        return self.cov.shape[0] // 2


def vacuum(n_modes: int = 1) -> GaussianState:
    return GaussianState(np.eye(2 * n_modes))


def thermal_state(V: float) -> GaussianState:
    """Single-mode thermal state with quadrature variance ``V``."""
    if V < 1:
        raise DomainError(f"thermal variance must be >= 1, got {V}")
    return GaussianState(V * np.eye(2))


def epr_state(V: float) -> GaussianState:
    """Two-mode squeezed vacuum with per-mode variance ``V``."""
    if not V >= 1:
        raise DomainError(f"EPR variance must be >= 1, got {V}")
    c = float(np.sqrt((V - 1.0) * (V + 1.0)))
    # The eigensolver resolves the spectrum only to ~eps*V^2, so step the
    # correlation down a few ulps until the stored matrix is physical with
    # that margin. V - c is exact here (Sterbenz), so the check is reliable.
    floor = 1.0 + 32.0 * np.finfo(float).eps * V * V
    if (V - c) * (V + c) < floor:
        # jump close to the target first; ulp steps are negligible when c is tiny
        c = min(c, float(np.sqrt(max(V * V - floor, 0.0))))
    while c > 0 and (V - c) * (V + c) < floor:
        c = float(np.nextafter(c, 0.0))
    return GaussianState(two_mode_covariance(V, V, c))


def two_mode_covariance(a: float, b: float, c: float) -> np.ndarray:
    """Standard-form covariance ``[[a I, c Z], [c Z, b I]]``."""
    eye = np.eye(2)
    return np.block([[a * eye, c * _PAULI_Z], [c * _PAULI_Z, b * eye]])


def symplectic_eigenvalues(cov) -> np.ndarray:
    """Symplectic spectrum, descending, computed from ``|eig(i Omega gamma)|``."""
    cov = as_covariance(cov)
    n = cov.shape[0] // 2
    ev = np.abs(np.linalg.eigvals(1j * symplectic_form(n) @ cov))
    ev = np.sort(ev)[::-1]
    # eigenvalues come in +/- pairs, so after abs() each value appears twice
    return 0.5 * (ev[0::2] + ev[1::2])


def is_physical(cov) -> bool:
    return bool(symplectic_eigenvalues(cov)[-1] >= 1.0 - CLAMP_TOL)


def g_function(x):
    """Entropy in bits of a thermal mode with symplectic eigenvalue ``x``.

    ``G(x) = (x+1)/2 log2((x+1)/2) - (x-1)/2 log2((x-1)/2)``. Accepts scalars
    or arrays; values within 1e-9 below one are clamped to one.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 1.0 - CLAMP_TOL) or np.any(np.isnan(x)):
        raise DomainError(f"G(x) requires x >= 1, got {x}")
    x = np.maximum(x, 1.0)
    plus = 0.5 * (x + 1.0)
    minus = 0.5 * (x - 1.0)
    safe = np.where(minus > 0, minus, 1.0)
    out = plus * np.log2(plus) - np.where(minus > 0, minus * np.log2(safe), 0.0)
    return out if out.ndim else float(out)


def von_neumann_entropy(cov) -> float:
    """Entropy in bits of the Gaussian state with covariance ``cov``."""
    nu = symplectic_eigenvalues(cov)
    if nu[-1] < 1.0 - CLAMP_TOL:
        raise DomainError(f"covariance is not physical (min symplectic eigenvalue {nu[-1]:.6g})")
    return float(np.sum(g_function(nu)))


def _quadrature_indices(modes: Sequence[int]) -> list[int]:
    return [2 * m + q for m in modes for q in (0, 1)]


def reduce_modes(cov, modes: Sequence[int]) -> np.ndarray:
    """Covariance of the listed modes (partial trace over the others)."""
    idx = _quadrature_indices(modes)
    return np.asarray(cov)[np.ix_(idx, idx)]


def append_modes(cov, block) -> np.ndarray:
    """Tensor an uncorrelated block onto the end of ``cov``."""
    cov = np.asarray(cov, dtype=float)
    block = np.asarray(block, dtype=float)
    n, k = cov.shape[0], block.shape[0]
    out = np.zeros((n + k, n + k))
    out[:n, :n] = cov
    out[n:, n:] = block
    return out


def beamsplitter(cov, i: int, j: int, transmittance: float) -> np.ndarray:
    """Mix modes ``i`` and ``j`` on a beamsplitter of given power transmittance.

    Mode ``i`` keeps the transmitted part of itself: ``i' = sqrt(t) i + sqrt(1-t) j``
    and ``j' = -sqrt(1-t) i + sqrt(t) j``.
    """
    if not 0.0 <= transmittance <= 1.0:
        raise DomainError(f"transmittance must lie in [0, 1], got {transmittance}")
    cov = np.asarray(cov, dtype=float)
    S = np.eye(cov.shape[0])
    t, r = np.sqrt(transmittance), np.sqrt(1.0 - transmittance)
    for q in (0, 1):
        a, b = 2 * i + q, 2 * j + q
        S[a, a], S[a, b], S[b, a], S[b, b] = t, r, -r, t
    return S @ cov @ S.T


def condition_on_measurement(state, mode: int, kind: MeasurementKind) -> np.ndarray:
    """Covariance of the remaining modes after measuring ``mode``.

    Homodyne uses the rank-one Moore-Penrose inverse of ``X gamma_B X``;
    heterodyne uses ``(gamma_B + I)^-1``. The conditional covariance does not
    depend on the measurement outcome.
    """
    cov = state.cov if isinstance(state, GaussianState) else as_covariance(state)
    n = cov.shape[0] // 2
    if not 0 <= mode < n:
        raise DomainError(f"mode index {mode} out of range for {n} modes")
    rest = [m for m in range(n) if m != mode]
    r_idx = _quadrature_indices(rest)
    m_idx = _quadrature_indices([mode])
    gamma_rest = cov[np.ix_(r_idx, r_idx)]
    sigma = cov[np.ix_(r_idx, m_idx)]
    gamma_m = cov[np.ix_(m_idx, m_idx)]
    if kind in ("homodyne-x", "homodyne-p"):
        q = 0 if kind == "homodyne-x" else 1
        H = np.zeros((2, 2))
        if gamma_m[q, q] > 0:
            H[q, q] = 1.0 / gamma_m[q, q]
    elif kind == "heterodyne":
        det = np.linalg.det(gamma_m + np.eye(2))
        if det <= 0:
            raise RuntimeError("singular heterodyne block")
        H = np.linalg.inv(gamma_m + np.eye(2))
    else:
        raise DomainError(f"unknown measurement kind {kind!r}")
    out = gamma_rest - sigma @ H @ sigma.T
    return 0.5 * (out + out.T)
