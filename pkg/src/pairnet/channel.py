"""Synthetic MU-MIMO channel generation with a scattering-ring correlation model.

Each single-antenna user sits at a radial distance ``s`` and azimuth ``theta``
from the base station and is surrounded by a ring of scatterers of radius
``r``, which subtends a half angular spread ``delta = arctan(r / s)`` as seen
from the array.  The spatial correlation between transmit antennas ``m`` and
``p`` is the average of plane-wave phase factors over arrival angles in
``[theta - delta, theta + delta]``:

    R[m, p] = (1 / (2 delta)) * integral_{-delta}^{delta}
              exp(j * k(alpha + theta)^T (u_m - u_p)) d alpha,

with wave vector ``k(a) = -(2 pi / wavelength) * (cos a, sin a)`` and antenna
positions ``u_m`` in the plane.  The integral is evaluated with a fixed-order
Gauss-Legendre rule, which is accurate to machine precision for the orders
used here (the integrand is analytic).

Channel realizations are drawn from the dominant eigenspace of each user's
correlation matrix: ``h = U diag(sqrt(lambda)) z`` with ``z`` i.i.d. standard
complex Gaussian, so that ``E[h h^H] = R``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "AntennaArray",
    "UserGeometry",
    "CorrelationMatrix",
    "EigenBasis",
    "UserChannel",
    "ChannelSet",
    "ChannelModelError",
    "correlation_matrix",
    "kl_decompose",
    "sample_channel",
    "generate_network",
    "save_channel_set",
    "load_channel_set",
]

DEFAULT_WAVELENGTH = 0.1
DEFAULT_RANK_THRESHOLD = 1e-6
DEFAULT_QUADRATURE_POINTS = 256

_HERMITIAN_TOL = 1e-10
_PSD_TOL = 1e-10
_UNIT_DIAG_TOL = 1e-10
_ORTHONORMAL_TOL = 1e-10


class ChannelModelError(ValueError):
    """Raised for degenerate geometry or failed matrix decompositions."""


@dataclass(frozen=True)
class AntennaArray:
    """Planar transmit array: one 2-D position per antenna, in meters."""

    positions: np.ndarray
    wavelength: float

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise ChannelModelError("antenna positions must be an (M, 2) array with M >= 1")
        if self.wavelength <= 0:
            raise ChannelModelError("wavelength must be positive")
        diffs = pos[:, None, :] - pos[None, :, :]
        dist = np.linalg.norm(diffs, axis=-1)
        np.fill_diagonal(dist, np.inf)
        if np.any(dist == 0.0):
            raise ChannelModelError("antenna positions must be pairwise distinct")
        object.__setattr__(self, "positions", pos)

    @property
    def num_antennas(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def uniform_linear(cls, num_antennas: int, wavelength: float = DEFAULT_WAVELENGTH) -> "AntennaArray":
        """Half-wavelength uniform linear array along the x axis."""
        m = np.arange(num_antennas, dtype=float)
        positions = np.stack([m * wavelength / 2.0, np.zeros(num_antennas)], axis=1)
        return cls(positions=positions, wavelength=wavelength)


@dataclass(frozen=True)
class UserGeometry:
    """Placement of one user and its scattering ring, all lengths in meters."""

    radial_distance: float
    azimuth: float
    scatter_radius: float
    angular_spread: float

    def __post_init__(self) -> None:
        if self.radial_distance <= 0 or self.scatter_radius <= 0:
            raise ChannelModelError("radial_distance and scatter_radius must be positive")
        expected = math.atan(self.scatter_radius / self.radial_distance)
        if abs(self.angular_spread - expected) > 1e-12:
            raise ChannelModelError(
                f"angular_spread {self.angular_spread!r} inconsistent with "
                f"arctan(scatter_radius / radial_distance) = {expected!r}"
            )
        if not 0.0 < self.angular_spread < math.pi / 2:
            raise ChannelModelError("angular_spread must lie in (0, pi/2)")

    @classmethod
    def place(cls, radial_distance: float, azimuth: float, scatter_radius: float) -> "UserGeometry":
        return cls(
            radial_distance=radial_distance,
            azimuth=azimuth,
            scatter_radius=scatter_radius,
            angular_spread=math.atan(scatter_radius / radial_distance),
        )


@dataclass(frozen=True)
class CorrelationMatrix:
    """Hermitian PSD antenna correlation matrix with unit diagonal."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        R = np.asarray(self.entries, dtype=complex)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ChannelModelError("correlation matrix must be square")
        if not np.all(np.isfinite(R)):
            raise ChannelModelError("correlation matrix has non-finite entries")
        if np.max(np.abs(R - R.conj().T)) > _HERMITIAN_TOL:
            raise ChannelModelError("correlation matrix is not Hermitian")
        if np.max(np.abs(np.diag(R) - 1.0)) > _UNIT_DIAG_TOL:
            raise ChannelModelError("correlation matrix diagonal must be 1")
        if np.min(np.linalg.eigvalsh(R)) < -_PSD_TOL:
            raise ChannelModelError("correlation matrix is not positive semi-definite")
        object.__setattr__(self, "entries", R)

    @property
    def num_antennas(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class EigenBasis:
    """Dominant eigenvectors/eigenvalues of a correlation matrix."""

    vectors: np.ndarray
    values: np.ndarray
    rank: int

    def __post_init__(self) -> None:
        U = np.asarray(self.vectors, dtype=complex)
        lam = np.asarray(self.values, dtype=float)
        if U.ndim != 2 or lam.ndim != 1 or U.shape[1] != lam.shape[0]:
            raise ChannelModelError("eigenbasis shape mismatch")
        if self.rank != lam.shape[0] or self.rank < 1:
            raise ChannelModelError("rank must equal the number of retained eigenvalues (>= 1)")
        if np.any(lam <= 0) or np.any(np.diff(lam) > 0):
            raise ChannelModelError("eigenvalues must be positive and in descending order")
        gram = U.conj().T @ U
        if np.max(np.abs(gram - np.eye(self.rank))) > _ORTHONORMAL_TOL:
            raise ChannelModelError("eigenvectors are not orthonormal")
        object.__setattr__(self, "vectors", U)
        object.__setattr__(self, "values", lam)

    @property
    def num_antennas(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class UserChannel:
    """Per-user channel statistics bundle."""

    geometry: UserGeometry
    correlation: CorrelationMatrix
    basis: EigenBasis


@dataclass(frozen=True)
class ChannelSet:
    """A cell snapshot: per-user statistics plus one realization per user.

    ``realizations`` is M x K with user k's channel vector in column k.
    Noise power is fixed at 1 so ``total_power`` doubles as the transmit SNR
    in linear units.
    """

    users: tuple[UserChannel, ...]
    realizations: np.ndarray
    total_power: float
    noise_power: float = 1.0

    def __post_init__(self) -> None:
        H = np.asarray(self.realizations, dtype=complex)
        if H.ndim != 2 or H.shape[1] != len(self.users):
            raise ChannelModelError("realizations must be M x K with one column per user")
        if self.total_power <= 0 or self.noise_power <= 0:
            raise ChannelModelError("total_power and noise_power must be positive")
        object.__setattr__(self, "realizations", H)
        object.__setattr__(self, "users", tuple(self.users))

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_antennas(self) -> int:
        return self.realizations.shape[0]

    def with_power(self, total_power: float) -> "ChannelSet":
        """Same realizations under a different transmit power budget."""
        return replace(self, total_power=total_power)


@lru_cache(maxsize=16)
def _gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return nodes, weights


def correlation_matrix(
    geom: UserGeometry,
    array: AntennaArray,
    quadrature_points: int = DEFAULT_QUADRATURE_POINTS,
) -> CorrelationMatrix:
    """Antenna correlation matrix of one user by Gauss-Legendre quadrature.

    ``quadrature_points`` is the rule order; 256 leaves the result converged
    to machine precision for angular spreads up to ~1 rad on arrays a few
    tens of wavelengths across.
    """
    if quadrature_points < 2:
        raise ChannelModelError("quadrature_points must be >= 2")
    nodes, weights = _gauss_legendre(quadrature_points)
    alphas = geom.angular_spread * nodes + geom.azimuth
    scale = 2.0 * math.pi / array.wavelength
    kx = -scale * np.cos(alphas)
    ky = -scale * np.sin(alphas)
    dx = array.positions[:, 0][:, None] - array.positions[:, 0][None, :]
    dy = array.positions[:, 1][:, None] - array.positions[:, 1][None, :]
    phase = kx[:, None, None] * dx + ky[:, None, None] * dy
    # (1/(2 delta)) * sum_t w_t * delta * f(alpha_t) = sum_t w_t f(alpha_t) / 2
    accum = np.tensordot(weights, np.exp(1j * phase), axes=(0, 0)) / 2.0
    entries = (accum + accum.conj().T) / 2.0
    if not np.all(np.isfinite(entries)):
        raise ChannelModelError("correlation integral diverged; degenerate geometry")
    return CorrelationMatrix(entries=entries)


def kl_decompose(R: CorrelationMatrix, rank_threshold: float = DEFAULT_RANK_THRESHOLD) -> EigenBasis:
    """Dominant eigenspace of ``R``, keeping eigenvalues above
    ``rank_threshold`` times the largest one."""
    if not 0.0 < rank_threshold < 1.0:
        raise ChannelModelError("rank_threshold must lie in (0, 1)")
    try:
        values, vectors = np.linalg.eigh(R.entries)
    except np.linalg.LinAlgError as exc:
        raise ChannelModelError(f"eigendecomposition failed on ill-conditioned input: {exc}") from exc
    order = np.argsort(values)[::-1]
    values = values[order]
    vectors = vectors[:, order]
    keep = values > rank_threshold * values[0]
    rank = int(np.sum(keep))
    basis = EigenBasis(vectors=vectors[:, :rank], values=values[:rank], rank=rank)
    approx = basis.vectors @ (basis.values[:, None] * basis.vectors.conj().T)
    rel = np.linalg.norm(approx - R.entries) / max(np.linalg.norm(R.entries), 1e-300)
    if rank_threshold <= 1e-12 and rel > 1e-8:
        raise ChannelModelError("eigenbasis fails to reconstruct the correlation matrix")
    return basis


def sample_channel(basis: EigenBasis, rng: np.random.Generator) -> np.ndarray:
    """One correlated Rayleigh channel vector with covariance ``U diag(lam) U^H``."""
    z = (rng.standard_normal(basis.rank) + 1j * rng.standard_normal(basis.rank)) / math.sqrt(2.0)
    return basis.vectors @ (np.sqrt(basis.values) * z)


def generate_network(
    num_users: int,
    cell_radius: float,
    ring_radius: float,
    array: AntennaArray,
    total_power: float,
    rng: np.random.Generator | int,
    quadrature_points: int = DEFAULT_QUADRATURE_POINTS,
    rank_threshold: float = DEFAULT_RANK_THRESHOLD,
) -> ChannelSet:
    """Drop ``num_users`` users uniformly in azimuth and radius and build
    their statistics plus one channel realization each.

    Radial distances are uniform on ``[0.1 * cell_radius, cell_radius]`` so no
    user sits on top of the array.  All randomness comes from ``rng``; an int
    seeds a fresh generator.
    """
    if num_users < 2:
        raise ChannelModelError("need at least 2 users")
    if cell_radius <= 0 or ring_radius <= 0:
        raise ChannelModelError("radii must be positive")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    azimuths = rng.uniform(0.0, 2.0 * math.pi, size=num_users)
    radii = rng.uniform(0.1 * cell_radius, cell_radius, size=num_users)
    users = []
    columns = []
    for theta, s in zip(azimuths, radii):
        geom = UserGeometry.place(radial_distance=float(s), azimuth=float(theta), scatter_radius=ring_radius)
        R = correlation_matrix(geom, array, quadrature_points)
        basis = kl_decompose(R, rank_threshold)
        users.append(UserChannel(geometry=geom, correlation=R, basis=basis))
        columns.append(sample_channel(basis, rng))
    H = np.stack(columns, axis=1)
    return ChannelSet(users=tuple(users), realizations=H, total_power=total_power, noise_power=1.0)


# ---------------------------------------------------------------------------
# Binary persistence ("PNCH" format)
#
# Layout, all little-endian:
#   magic        4 bytes  b"PNCH"
#   version      u8       1
#   K            u32      number of users
#   M            u32      number of transmit antennas
#   total_power  f64
#   noise_power  f64
#   per user k = 0..K-1:
#     radial_distance, azimuth, scatter_radius, angular_spread   4 x f64
#     r            u32    retained eigenvalue count
#     R            M*M complex64, row-major
#     U            M*r complex64, row-major
#     values       r   f64
#   H              M*K complex64, column-major (one column per user)
#
# Matrices are stored as complex64, so reloading is lossy at single precision;
# the format exists for experiment replay, not as a bit-exact cache.
# ---------------------------------------------------------------------------

_PNCH_MAGIC = b"PNCH"
_PNCH_VERSION = 1


def _repair_correlation(R: np.ndarray) -> np.ndarray:
    """Nearest valid correlation matrix after single-precision rounding.

    Hermitizes, clips tiny negative eigenvalues, and rescales the diagonal
    back to exactly 1 (a congruence, so definiteness is preserved).
    """
    R = (R + R.conj().T) / 2.0
    values, vectors = np.linalg.eigh(R)
    R = vectors @ (np.clip(values, 0.0, None)[:, None] * vectors.conj().T)
    R = (R + R.conj().T) / 2.0
    d = 1.0 / np.sqrt(np.real(np.diag(R)))
    R = d[:, None] * R * d[None, :]
    np.fill_diagonal(R, 1.0)
    return R


def _reorthonormalize(U: np.ndarray) -> np.ndarray:
    """Polar correction to the nearest matrix with orthonormal columns."""
    values, vectors = np.linalg.eigh(U.conj().T @ U)
    inv_sqrt = vectors @ ((1.0 / np.sqrt(values))[:, None] * vectors.conj().T)
    return U @ inv_sqrt


def save_channel_set(channels: ChannelSet, path: str | Path) -> None:
    """Write ``channels`` to ``path`` in the PNCH binary format."""
    out = bytearray()
    out += _PNCH_MAGIC
    out += struct.pack("<B", _PNCH_VERSION)
    out += struct.pack("<II", channels.num_users, channels.num_antennas)
    out += struct.pack("<dd", channels.total_power, channels.noise_power)
    for user in channels.users:
        g = user.geometry
        out += struct.pack("<dddd", g.radial_distance, g.azimuth, g.scatter_radius, g.angular_spread)
        out += struct.pack("<I", user.basis.rank)
        out += np.ascontiguousarray(user.correlation.entries).astype("<c8").tobytes()
        out += np.ascontiguousarray(user.basis.vectors).astype("<c8").tobytes()
        out += user.basis.values.astype("<f8").tobytes()
    out += np.asfortranarray(channels.realizations).astype("<c8").tobytes(order="F")
    Path(path).write_bytes(bytes(out))


def load_channel_set(path: str | Path) -> ChannelSet:
    """Read a ChannelSet written by :func:`save_channel_set`."""
    buf = Path(path).read_bytes()
    view = memoryview(buf)
    if bytes(view[:4]) != _PNCH_MAGIC:
        raise ChannelModelError(f"{path}: not a PNCH file")
    (version,) = struct.unpack_from("<B", view, 4)
    if version != _PNCH_VERSION:
        raise ChannelModelError(f"{path}: unsupported PNCH version {version}")
    offset = 5
    K, M = struct.unpack_from("<II", view, offset)
    offset += 8
    total_power, noise_power = struct.unpack_from("<dd", view, offset)
    offset += 16
    users = []
    for _ in range(K):
        s, theta, ring, spread = struct.unpack_from("<dddd", view, offset)
        offset += 32
        (r,) = struct.unpack_from("<I", view, offset)
        offset += 4
        R = np.frombuffer(view, dtype="<c8", count=M * M, offset=offset).reshape(M, M).astype(complex)
        offset += M * M * 8
        U = np.frombuffer(view, dtype="<c8", count=M * r, offset=offset).reshape(M, r).astype(complex)
        offset += M * r * 8
        values = np.frombuffer(view, dtype="<f8", count=r, offset=offset).astype(float)
        offset += r * 8
        geom = UserGeometry(radial_distance=s, azimuth=theta, scatter_radius=ring, angular_spread=spread)
        users.append(
            UserChannel(
                geometry=geom,
                correlation=CorrelationMatrix(entries=_repair_correlation(R)),
                basis=EigenBasis(vectors=_reorthonormalize(U), values=values, rank=r),
            )
        )
    H = np.frombuffer(view, dtype="<c8", count=M * K, offset=offset).reshape((M, K), order="F").astype(complex)
    return ChannelSet(users=tuple(users), realizations=H, total_power=total_power, noise_power=noise_power)
