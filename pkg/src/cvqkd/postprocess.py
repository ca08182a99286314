"""Classical key distillation.

Sifting, multidimensional (MD) reconciliation on the unit sphere, syndrome
decoding with a small regular LDPC code, hash verification, efficiency
accounting and Toeplitz privacy amplification.

MD reconciliation works on blocks of ``d`` in {2, 4, 8} real Gaussian values.
Bob draws random bits ``u``, maps them to the sphere point
``s_i = (-1)^u_i / sqrt(d)`` and publishes ``m = s * conj(y)`` for his
normalised block ``y``. Alice computes ``m * x``, which is a noisy copy of
``s``. Multiplication is the Cayley-Dickson product (complex numbers,
quaternions, octonions), pinned by :func:`multiplication_table`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from scipy import sparse
from scipy.linalg import matmul_toeplitz
from scipy.special import gammaln

from .errors import DomainError
from .keyrate import KeyRateReport
from .simulate import SymbolBlock, stage_rng

Side = Literal["alice", "bob"]

MD_DIMENSIONS = (2, 4, 8)
HASH_BITS = 64
_HASH_PRIME = (1 << 64) - 59  # largest prime below 2^64
_LLR_CLIP = 30.0


# ---------------------------------------------------------------------------
# bit blocks


@dataclass(frozen=True)
class BitBlock:
    bits: np.ndarray
    origin: Side = "bob"

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1:
            raise DomainError("bit block must be one-dimensional")
        if bits.size and not np.all((bits == 0) | (bits == 1)):
            raise DomainError("bit block entries must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))
        if self.origin not in ("alice", "bob"):
            raise DomainError(f"origin must be 'alice' or 'bob', got {self.origin!r}")

    def __len__(self) -> int:
        return self.bits.size

    def to_bytes(self) -> bytes:
        """Packed bits, eight per byte, most significant bit first."""
        return np.packbits(self.bits, bitorder="big").tobytes()


# ---------------------------------------------------------------------------
# sifting


@dataclass(frozen=True)
class SiftResult:
    alice: np.ndarray
    bob: np.ndarray
    kept: np.ndarray
    no_sift: bool = False

    @property
    def kept_fraction(self) -> float:
        return float(np.mean(self.kept)) if self.kept.size else 0.0


def sift(
    block: SymbolBlock,
    bob_basis,
    bob_values,
    alice_basis=None,
) -> SiftResult:
    """Pair Alice's prepared quadratures with Bob's results.

    Args:
        block: Alice's prepared amplitudes.
        bob_basis: per-symbol basis announcement, 0 for x, 1 for p, 2 for a
            heterodyne result (both quadratures).
        bob_values: Bob's results, shape ``(n,)`` for homodyne or ``(n, 2)``
            for heterodyne.
        alice_basis: the quadrature Alice encoded per symbol, for protocols
            that prepare only one quadrature. ``None`` means both were
            prepared, so every homodyne symbol is kept.

    Heterodyne data pass through unchanged (x results then p results) with
    ``no_sift`` set.
    """
    bob_basis = np.asarray(bob_basis)
    bob_values = np.asarray(bob_values, dtype=float)
    n = len(block)
    if bob_basis.shape[0] != n or bob_values.shape[0] != n:
        raise DomainError(
            f"length mismatch: {n} symbols, {bob_basis.shape[0]} bases, {bob_values.shape[0]} results"
        )
    if np.all(bob_basis == 2):
        if bob_values.shape != (n, 2):
            raise DomainError("heterodyne results must have shape (n, 2)")
        return SiftResult(
            np.concatenate([block.x, block.p]),
            np.concatenate([bob_values[:, 0], bob_values[:, 1]]),
            np.ones(n, dtype=bool),
            no_sift=True,
        )
    if bob_values.ndim != 1 or not np.all((bob_basis == 0) | (bob_basis == 1)):
        raise DomainError("homodyne data need 0/1 bases and one result per symbol")
    if alice_basis is None:
        kept = np.ones(n, dtype=bool)
    else:
        alice_basis = np.asarray(alice_basis)
        if alice_basis.shape != (n,):
            raise DomainError(f"length mismatch: {n} symbols, {alice_basis.shape[0]} Alice bases")
        kept = alice_basis == bob_basis
    alice = np.where(bob_basis == 0, block.x, block.p)
    return SiftResult(alice[kept], bob_values[kept], kept)


# ---------------------------------------------------------------------------
# division-algebra arithmetic


def cd_conj(a: np.ndarray) -> np.ndarray:
    """Cayley-Dickson conjugate along the last axis."""
    out = -np.asarray(a, dtype=float)
    out[..., 0] *= -1.0
    return out


def cd_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cayley-Dickson product along the last axis.

    ``(p, q)(r, s) = (p r - conj(s) q, s p + q conj(r))``. Length 2 gives the
    complex numbers, 4 the quaternions and 8 the octonions.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = a.shape[-1]
    if d == 1:
        return a * b
    h = d // 2
    p, q = a[..., :h], a[..., h:]
    r, s = b[..., :h], b[..., h:]
    return np.concatenate(
        [cd_mul(p, r) - cd_mul(cd_conj(s), q), cd_mul(s, p) + cd_mul(q, cd_conj(r))], axis=-1
    )


def multiplication_table(d: int) -> np.ndarray:
    """Signed index table: ``e_i e_j = sign * e_k`` stored as ``sign * (k + 1)``."""
    _check_dim(d)
    eye = np.eye(d)
    table = np.zeros((d, d), dtype=int)
    for i in range(d):
        for j in range(d):
            prod = cd_mul(eye[i], eye[j])
            k = int(np.argmax(np.abs(prod)))
            table[i, j] = int(np.sign(prod[k])) * (k + 1)
    return table


def _check_dim(d: int) -> None:
    if d not in MD_DIMENSIONS:
        raise DomainError(f"MD dimension must be one of {MD_DIMENSIONS}, got {d}")


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DomainError("cannot normalise a zero-norm vector")
    return v / norm


# ---------------------------------------------------------------------------
# MD reconciliation


def sphere_point(u) -> np.ndarray:
    """Map bits to the sphere: ``s_i = (-1)^u_i / sqrt(d)``."""
    u = np.asarray(u)
    return (1.0 - 2.0 * u) / math.sqrt(u.shape[-1])


@dataclass(frozen=True)
class MdFrame:
    """One MD block. Each side fills in only what it knows."""

    d: int
    x: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None

    def __post_init__(self):
        _check_dim(self.d)
        for name in ("x", "y", "u"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float if name != "u" else np.uint8)
                if v.shape != (self.d,):
                    raise DomainError(f"{name} must have length {self.d}")
                object.__setattr__(self, name, v)


def md_bob_message(y: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Bob's public message ``m = s(u) * conj(y_hat)`` for blocks along the last axis."""
    y = _unit(y)
    _check_dim(y.shape[-1])
    return cd_mul(sphere_point(u), cd_conj(y))


def md_alice_estimate(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Alice's noisy copy ``m * x`` of Bob's sphere point (``x`` is not normalised)."""
    return cd_mul(np.asarray(m, dtype=float), np.asarray(x, dtype=float))


def md_reconcile(frame: MdFrame, side: Side, message: Optional[np.ndarray] = None) -> np.ndarray:
    """Bob's message for ``side='bob'``; Alice's sphere-point estimate for ``side='alice'``.

    Both sides normalise their vector first.
    """
    if side == "bob":
        if frame.y is None or frame.u is None:
            raise DomainError("Bob needs y and u")
        return md_bob_message(frame.y, frame.u)
    if side == "alice":
        if frame.x is None or message is None:
            raise DomainError("Alice needs x and Bob's message")
        return md_alice_estimate(_unit(frame.x), message)
    raise DomainError(f"side must be 'alice' or 'bob', got {side!r}")


def md_channel_moments(snr: float, d: int) -> tuple[float, float]:
    """Mean and variance of ``+-(m x)_i`` for unit-variance data at the given SNR.

    With ``x`` and ``y`` of unit variance and correlation ``rho``,
    ``(m x)_i = rho |y| s_i + w_i``. The chi-distributed ``|y|`` is replaced by
    its first two moments, giving a binary-input Gaussian approximation.
    """
    if snr <= 0:
        raise DomainError(f"SNR must be positive, got {snr}")
    rho2 = snr / (1.0 + snr)
    mean_norm = math.sqrt(2.0) * math.exp(gammaln((d + 1) / 2) - gammaln(d / 2))
    mean = math.sqrt(rho2) * mean_norm / math.sqrt(d)
    var = (1.0 - rho2) + rho2 * (d - mean_norm**2) / d
    return mean, var


def md_llr(z: np.ndarray, snr: float, d: int) -> np.ndarray:
    """Log-likelihood ratios ``log P(u=0)/P(u=1)`` from Alice's values ``m x``."""
    mean, var = md_channel_moments(snr, d)
    return np.clip(2.0 * mean * np.asarray(z) / var, -_LLR_CLIP, _LLR_CLIP)


# ---------------------------------------------------------------------------
# LDPC syndrome coding


@dataclass(frozen=True)
class LdpcCode:
    """Regular LDPC code stored edge-wise, edges grouped by check node."""

    n: int
    dv: int
    dc: int
    edge_var: np.ndarray
    seed: int

    @property
    def m(self) -> int:
        return self.n * self.dv // self.dc

    @property
    def rate(self) -> float:
        return 1.0 - self.m / self.n

    def parity_matrix(self) -> sparse.csr_matrix:
        rows = np.repeat(np.arange(self.m), self.dc)
        return sparse.csr_matrix(
            (np.ones(self.edge_var.size, dtype=np.int64), (rows, self.edge_var)), shape=(self.m, self.n)
        )

    def syndrome(self, bits: np.ndarray) -> np.ndarray:
        """``H bits mod 2``, batched over leading axes."""
        bits = np.asarray(bits, dtype=np.uint8)
        gathered = bits[..., self.edge_var].reshape(bits.shape[:-1] + (self.m, self.dc))
        return (gathered.sum(axis=-1) % 2).astype(np.uint8)


def regular_ldpc(n: int = 2048, dv: int = 3, dc: int = 6, seed: int = 0) -> LdpcCode:
    """Random regular code from a socket permutation, with repeated edges removed."""
    if (n * dv) % dc or n < dc:
        raise DomainError(f"n*dv = {n * dv} must be a positive multiple of dc={dc}")
    rng = stage_rng(seed, "code")
    edge_var = rng.permutation(np.repeat(np.arange(n), dv))
    m = n * dv // dc
    for _ in range(1000):
        groups = np.sort(edge_var.reshape(m, dc), axis=1)
        bad = np.flatnonzero(np.any(groups[:, 1:] == groups[:, :-1], axis=1))
        if bad.size == 0:
            return LdpcCode(n, dv, dc, edge_var, seed)
        # swap one socket of each offending check with a random socket elsewhere
        src = bad * dc + rng.integers(0, dc, bad.size)
        dst = rng.integers(0, edge_var.size, bad.size)
        edge_var[src], edge_var[dst] = edge_var[dst], edge_var[src].copy()
    raise RuntimeError("could not build a code without repeated edges")


@dataclass(frozen=True)
class DecodeResult:
    bits: np.ndarray
    success: np.ndarray
    iterations: np.ndarray
    leaked_bits: int


def ldpc_correct(
    llr: np.ndarray,
    syndrome: np.ndarray,
    code: LdpcCode,
    max_iters: int = 50,
) -> DecodeResult:
    """Sum-product decoding towards the coset with the given syndrome.

    Args:
        llr: channel log-likelihood ratios, shape ``(n,)`` or ``(frames, n)``;
            positive favours bit 0.
        syndrome: Bob's syndrome, shape ``(m,)`` or ``(frames, m)``.
        code: the shared code.
        max_iters: iteration budget. Frames that do not satisfy the syndrome
            by then are flagged as failures.

    Returns:
        Decoded bits, per-frame success flags and iteration counts, and the
        number of syndrome bits disclosed per frame.
    """
    llr = np.asarray(llr, dtype=float)
    single = llr.ndim == 1
    llr = np.atleast_2d(llr)
    syndrome = np.atleast_2d(np.asarray(syndrome, dtype=np.uint8))
    F = llr.shape[0]
    if llr.shape[1] != code.n or syndrome.shape != (F, code.m):
        raise DomainError("LLR or syndrome shape does not match the code")
    m, dc = code.m, code.dc
    E = code.edge_var.size
    incidence = sparse.csr_matrix((np.ones(E), (np.arange(E), code.edge_var)), shape=(E, code.n))
    sign_syn = (1.0 - 2.0 * syndrome)[:, :, None]

    c2v = np.zeros((F, E))
    total = llr.copy()
    bits = (total < 0).astype(np.uint8)
    done = np.all(code.syndrome(bits) == syndrome, axis=1)
    iterations = np.zeros(F, dtype=int)
    for it in range(1, max_iters + 1):
        active = ~done
        if not active.any():
            break
        v2c = total[active][:, code.edge_var] - c2v[active]
        t = np.tanh(np.clip(v2c, -_LLR_CLIP, _LLR_CLIP) / 2).reshape(-1, m, dc)
        sgn = np.where(t < 0, -1.0, 1.0)
        mag = np.log(np.maximum(np.abs(t), 1e-300))
        ext_sign = np.prod(sgn, axis=2, keepdims=True) * sgn * sign_syn[active]
        ext_mag = np.exp(np.sum(mag, axis=2, keepdims=True) - mag)
        ext_mag = np.minimum(ext_mag, 1.0 - 1e-15)
        new = (2.0 * np.arctanh(ext_mag) * ext_sign).reshape(-1, E)
        c2v[active] = new
        total[active] = llr[active] + (incidence.T @ new.T).T
        bits[active] = (total[active] < 0).astype(np.uint8)
        iterations[active] = it
        done[active] = np.all(code.syndrome(bits[active]) == syndrome[active], axis=1)
    if single:
        return DecodeResult(bits[0], done[:1], iterations[:1], m)
    return DecodeResult(bits, done, iterations, m)


# ---------------------------------------------------------------------------
# verification and accounting


def polynomial_hash(bits: np.ndarray, key: int) -> int:
    """64-bit polynomial hash of a bit string.

    Bits are packed into 32-bit words ``w_i`` and the hash is
    ``sum_i w_i key^(i+1) mod p`` with ``p = 2^64 - 59``. Two distinct strings
    of ``W`` words collide with probability at most ``W / p`` over the key.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    pad = (-bits.size) % 32
    words = np.packbits(np.concatenate([bits, np.zeros(pad, np.uint8)]), bitorder="big").view(">u4")
    acc = 0
    # Horner evaluation; the length word separates strings that differ only in padding
    for w in list(map(int, words)) + [bits.size]:
        acc = ((acc + w) * key) % _HASH_PRIME
    return acc


def hash_key(seed: int) -> int:
    return int(stage_rng(seed, "hash").integers(1, _HASH_PRIME, dtype=np.uint64))


def reconciliation_efficiency(H_X: float, leaked: float, I_AB: float) -> float:
    """``beta = (H_X - leaked) / I_AB``, all in bits per symbol."""
    if not I_AB > 0:
        raise DomainError(f"I_AB must be positive, got {I_AB}")
    return (H_X - leaked) / I_AB


# ---------------------------------------------------------------------------
# privacy amplification


@dataclass(frozen=True)
class ToeplitzSeed:
    t: np.ndarray
    n_in: int
    n_out: int

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.uint8)
        if not 0 < self.n_out < self.n_in:
            raise DomainError(f"need 0 < L < L', got L={self.n_out}, L'={self.n_in}")
        if t.shape != (self.n_in + self.n_out - 1,):
            raise DomainError(f"seed length must be L + L' - 1 = {self.n_in + self.n_out - 1}, got {t.size}")
        object.__setattr__(self, "t", t)

    @classmethod
    def random(cls, n_in: int, n_out: int, seed: int) -> "ToeplitzSeed":
        t = stage_rng(seed, "toeplitz").integers(0, 2, n_in + n_out - 1, dtype=np.uint8)
        return cls(t, n_in, n_out)

    def matrix(self) -> np.ndarray:
        """Dense ``T[i, j] = t[i - j + L' - 1]`` (for small sizes)."""
        i = np.arange(self.n_out)[:, None]
        j = np.arange(self.n_in)[None, :]
        return self.t[i - j + self.n_in - 1]


def privacy_amplify(key: BitBlock, seed: ToeplitzSeed, L: Optional[int] = None) -> BitBlock:
    """Compress ``key`` to ``L`` bits with the Toeplitz matrix over GF(2)."""
    if L is not None and L != seed.n_out:
        raise DomainError(f"seed is for {seed.n_out} output bits, asked for {L}")
    if len(key) != seed.n_in:
        raise DomainError(f"seed expects a {seed.n_in}-bit key, got {len(key)}")
    t = seed.t.astype(float)
    col = t[seed.n_in - 1 :]
    row = t[seed.n_in - 1 :: -1]
    # exact integer counts survive the FFT product well below 2^52
    out = matmul_toeplitz((col, row), key.bits.astype(float))
    return BitBlock(np.rint(out).astype(np.int64) % 2, key.origin)


def final_key_length(rate_report: KeyRateReport, n_kept: int) -> int:
    """``floor(n_kept * K)`` from a (finite-size) rate report, never negative."""
    return max(0, math.floor(n_kept * rate_report.rate))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PostprocessReport:
    n_frames: int
    frame_length: int
    d: int
    snr: float
    decoded: np.ndarray
    verified: np.ndarray
    iterations: np.ndarray
    raw_ber: float
    leaked_per_frame: int
    beta: float
    I_AB: float
    final_length: int
    alice_key: BitBlock
    bob_key: BitBlock
    alice_frames: np.ndarray = field(repr=False)
    bob_frames: np.ndarray = field(repr=False)

    @property
    def verified_bits(self) -> int:
        return int(np.sum(self.verified)) * self.frame_length

    @property
    def fer(self) -> float:
        return float(1.0 - np.mean(self.verified)) if self.n_frames else 1.0

    def metadata(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "frame_length": self.frame_length,
            "md_dimension": self.d,
            "snr": self.snr,
            "frames_decoded": int(np.sum(self.decoded)),
            "frames_verified": int(np.sum(self.verified)),
            "frame_error_rate": self.fer,
            "raw_ber": self.raw_ber,
            "leaked_bits_per_frame": self.leaked_per_frame,
            "I_AB": self.I_AB,
            "beta": self.beta,
            "final_key_bits": self.final_length,
        }


def estimate_snr(alice: np.ndarray, bob: np.ndarray) -> float:
    """``rho^2 / (1 - rho^2)`` from the sample correlation."""
    rho = float(np.corrcoef(alice, bob)[0, 1])
    if not 0 < abs(rho) < 1:
        raise DomainError(f"data correlation {rho} gives no usable SNR")
    return rho * rho / (1.0 - rho * rho)


def distill(
    alice: np.ndarray,
    bob: np.ndarray,
    seed: int,
    code: Optional[LdpcCode] = None,
    d: int = 8,
    snr: Optional[float] = None,
    max_iters: int = 50,
    rate_report: Optional[KeyRateReport] = None,
) -> PostprocessReport:
    """Reverse-reconciled key distillation on correlated Gaussian data.

    Args:
        alice, bob: paired real values (after sifting).
        seed: run seed for Bob's key bits, the hash key and the Toeplitz seed.
        code: LDPC code; defaults to the (3,6) code of length 2048.
        d: MD dimension.
        snr: channel SNR; estimated from the data when omitted.
        max_iters: decoder iteration budget.
        rate_report: key rate used to size the final key, which gets
            :func:`final_key_length` of the verified bits. Without it no
            privacy amplification is run.
    """
    _check_dim(d)
    code = regular_ldpc(seed=seed) if code is None else code
    if code.n % d:
        raise DomainError(f"code length {code.n} is not a multiple of d={d}")
    alice = np.asarray(alice, dtype=float)
    bob = np.asarray(bob, dtype=float)
    if alice.shape != bob.shape or alice.ndim != 1:
        raise DomainError("alice and bob must be equal-length 1-D arrays")
    snr = estimate_snr(alice, bob) if snr is None else snr
    F = alice.size // code.n
    if F == 0:
        raise DomainError(f"need at least {code.n} values, got {alice.size}")
    used = F * code.n
    x = (alice[:used] / np.std(alice)).reshape(F, code.n // d, d)
    y = (bob[:used] / np.std(bob)).reshape(F, code.n // d, d)

    u = stage_rng(seed, "keybits").integers(0, 2, (F, code.n), dtype=np.uint8)
    m = md_bob_message(y, u.reshape(F, -1, d))
    z = md_alice_estimate(x, m).reshape(F, code.n)
    llr = md_llr(z, snr, d)
    raw_ber = float(np.mean((llr < 0) != u.astype(bool)))
    res = ldpc_correct(llr, code.syndrome(u), code, max_iters)

    k = hash_key(seed)
    same_hash = np.array([polynomial_hash(a, k) == polynomial_hash(b, k) for a, b in zip(res.bits, u)])
    verified = res.success & same_hash

    leaked = res.leaked_bits + HASH_BITS
    I_AB = 0.5 * math.log2(1.0 + snr)
    beta = reconciliation_efficiency(1.0, leaked / code.n, I_AB)

    rep = PostprocessReport(
        F, code.n, d, snr, res.success, verified, res.iterations, raw_ber, leaked, beta, I_AB, 0,
        BitBlock(np.zeros(0), "alice"), BitBlock(np.zeros(0), "bob"), res.bits, u,
    )
    if rate_report is not None:
        amplify(rep, final_key_length(rate_report, rep.verified_bits), seed)
    return rep


def amplify(rep: PostprocessReport, L: int, seed: int) -> PostprocessReport:
    """Hash both sides' verified bits down to ``L`` bits with a shared Toeplitz seed.

    Fills in ``final_length`` and the two keys; ``L`` outside
    ``(0, verified bits)`` yields empty keys.
    """
    alice_raw = rep.alice_frames[rep.verified].ravel()
    bob_raw = rep.bob_frames[rep.verified].ravel()
    if 0 < L < bob_raw.size:
        pa_seed = ToeplitzSeed.random(bob_raw.size, L, seed)
        rep.alice_key = privacy_amplify(BitBlock(alice_raw, "alice"), pa_seed)
        rep.bob_key = privacy_amplify(BitBlock(bob_raw, "bob"), pa_seed)
        rep.final_length = L
    else:
        rep.alice_key, rep.bob_key = BitBlock(np.zeros(0), "alice"), BitBlock(np.zeros(0), "bob")
        rep.final_length = 0
    return rep


def export_key(path, key: BitBlock, metadata: dict) -> tuple[Path, Path]:
    """Write packed key bits and a JSON sidecar ``<path>.json``."""
    path = Path(path)
    path.write_bytes(key.to_bytes())
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps({"n_bits": len(key), "bit_order": "msb-first", **metadata}, indent=2, sort_keys=True))
    return path, side
