"""Self-energy per unit length of a straight dislocation.

The energy of a straight line with Burgers vector b and direction t is,
per unit length and per unit logarithm of the cut-off ratio, the minimum
of an angular quadratic functional over profiles (f, g) subject to the
circulation constraint that f integrates to b.  The minimizer also yields
the singular strain field (1/r)(f(theta) x e_theta + g x e_r) around the
line, which seeds the cell solvers and the recovery-strain assembly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .elasticity import ElasticTensor
from .errors import OnSegmentError, SolverFailure, ValidationFailure

_E3 = np.array([0.0, 0.0, 1.0])


def frame_for_direction(t) -> np.ndarray:
    """Minimal-angle rotation Q with Q e3 = t (Rodrigues about e3 x t).

    Deterministic; the antipodal direction -e3 maps to the canonical
    fallback rotation by pi about e1.
    """
    t = np.asarray(t, dtype=float)
    if abs(np.linalg.norm(t) - 1.0) > 1e-10:
        raise ValidationFailure("direction must be a unit vector")
    c = float(_E3 @ t)
    if c < -1.0 + 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    k = np.cross(_E3, t)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + K + (K @ K) / (1.0 + c)


def _local_basis(theta: np.ndarray):
    """In-plane radial and azimuthal unit vectors before rotation by Q_t."""
    er = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], axis=-1)
    et = np.stack([-np.sin(theta), np.cos(theta), np.zeros_like(theta)], axis=-1)
    return er, et


@dataclass
class AngularProfile:
    """Angular minimizer (f, g) sampled on a uniform periodic grid."""

    theta: np.ndarray  # (N,) nodes in [0, 2pi)
    f: np.ndarray  # (N, 3)
    g: np.ndarray  # (3,)
    t: np.ndarray  # line direction, unit
    frame: np.ndarray  # Q_t with Q_t e3 = t
    burgers: np.ndarray

    def __post_init__(self):
        self._spline = None

    def f_interpolator(self) -> CubicSpline:
        if self._spline is None:
            th = np.append(self.theta, self.theta[0] + 2 * np.pi)
            fv = np.vstack([self.f, self.f[:1]])
            self._spline = CubicSpline(th, fv, bc_type="periodic")
        return self._spline

    def constraint_residual(self) -> float:
        w = 2 * np.pi / len(self.theta)
        return float(np.linalg.norm(w * self.f.sum(axis=0) - self.burgers))


@dataclass
class SelfEnergyResult:
    value: float
    profile: AngularProfile
    residuals: dict


def _kkt_blocks(C: ElasticTensor, t, n_theta: int):
    """Per-node quadratic blocks of the angular functional."""
    Q = frame_for_direction(t)
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    er, et = _local_basis(theta)
    er, et = er @ Q.T, et @ Q.T
    cc = C.components
    A = np.einsum("ijlm,kj,km->kil", cc, et, et)
    B = np.einsum("ijlm,kj,km->kil", cc, et, er)
    D = np.einsum("ijlm,kj,km->kil", cc, er, er)
    return Q, theta, A, B, D


def _assemble_kkt(A, B, D, n_theta: int):
    w = 2 * np.pi / n_theta
    n = 3 * n_theta + 3
    K = np.zeros((n + 3, n + 3))
    for k in range(n_theta):
        s = 3 * k
        K[s : s + 3, s : s + 3] = w * A[k]
        K[s : s + 3, n - 3 : n] = w * B[k]
        K[n - 3 : n, s : s + 3] = w * B[k].T
        K[s : s + 3, n : n + 3] = w * np.eye(3)
        K[n : n + 3, s : s + 3] = w * np.eye(3)
    K[n - 3 : n, n - 3 : n] = w * D.sum(axis=0)
    return K


def _solve_profiles(C: ElasticTensor, t, n_theta: int, rhs: np.ndarray):
    """Solve the constrained angular problem for one or more Burgers vectors.

    ``rhs`` has shape (m, 3); returns (Q, theta, solutions (m, 3N+3), values (m,)).
    """
    Q, theta, A, B, D = _kkt_blocks(C, t, n_theta)
    K = _assemble_kkt(A, B, D, n_theta)
    n = 3 * n_theta + 3
    b = np.zeros((K.shape[0], rhs.shape[0]))
    b[n:, :] = rhs.T
    try:
        sol = np.linalg.solve(K, b)
    except np.linalg.LinAlgError as exc:
        raise SolverFailure(f"singular KKT system in self-energy solve: {exc}")
    if not np.all(np.isfinite(sol)):
        raise SolverFailure("non-finite solution of the self-energy KKT system")
    x = sol[:n, :].T  # (m, n)
    w = 2 * np.pi / n_theta
    f = x[:, : 3 * n_theta].reshape(-1, n_theta, 3)
    g = x[:, 3 * n_theta :]
    # value = 1/2 x^T H x, assembled blockwise
    vals = 0.5 * w * (
        np.einsum("mki,kil,mkl->m", f, A, f)
        + 2 * np.einsum("mki,kil,ml->m", f, B, g)
        + np.einsum("mi,kil,ml->m", g, D, g)
    )
    return Q, theta, f, g, vals


def solve_self_energy(
    C: ElasticTensor, b, t, n_theta: int = 256
) -> SelfEnergyResult:
    """Line-tension density Psi0(b, t) by a direct symmetric KKT solve.

    ``n_theta`` must be even and at least 16; the discrete value converges
    at least quadratically under refinement.
    """
    if n_theta < 16 or n_theta % 2:
        raise ValidationFailure("n_theta must be even and >= 16")
    if not C.is_positive_definite():
        raise ValidationFailure("elastic tensor must be positive definite "
                                "on symmetric matrices")
    b = np.asarray(b, dtype=float)
    Q, theta, f, g, vals = _solve_profiles(C, t, n_theta, b[None, :])
    profile = AngularProfile(
        theta=theta, f=f[0], g=g[0], t=np.asarray(t, float), frame=Q, burgers=b
    )
    return SelfEnergyResult(
        value=float(vals[0]),
        profile=profile,
        residuals={"constraint": profile.constraint_residual()},
    )


def quadratic_form(C: ElasticTensor, t, n_theta: int = 64) -> np.ndarray:
    """Symmetric 3x3 form q(t) with Psi0(b, t) = b . q(t) b.

    One KKT solve per direction (six right-hand sides, polarization for the
    off-diagonal entries) serves all Burgers vectors; this is what makes
    dense (b, t) tables cheap.
    """
    rhs = np.array(
        [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1]],
        dtype=float,
    )
    _, _, _, _, vals = _solve_profiles(C, t, n_theta, rhs)
    q = np.diag(vals[:3])
    for m, (a, c) in zip(range(3, 6), [(0, 1), (0, 2), (1, 2)]):
        q[a, c] = q[c, a] = 0.5 * (vals[m] - vals[a] - vals[c])
    return q


def eval_eta(profile: AngularProfile, x) -> np.ndarray:
    """Singular strain of the profile at off-axis points.

    Homogeneous of degree -1 in the distance to the axis; f is interpolated
    with a periodic cubic spline.  Raises on axis points.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x) @ profile.frame  # local coordinates (Q^T x)
    rho = np.hypot(pts[:, 0], pts[:, 1])
    if np.any(rho <= 1e-14 * (1.0 + np.abs(pts[:, 2]))):
        raise OnSegmentError("eta evaluation on the dislocation axis")
    theta = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * np.pi)
    fv = profile.f_interpolator()(theta)
    er, et = _local_basis(theta)
    er, et = er @ profile.frame.T, et @ profile.frame.T
    eta = (fv[:, :, None] * et[:, None, :] + profile.g[None, :, None] * er[:, None, :])
    eta /= rho[:, None, None]
    return eta[0] if single else eta


def _bump(u: np.ndarray) -> np.ndarray:
    """Smooth bump supported on (-1, 1)."""
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


def _bump_prime(u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    ui = u[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ui**2)) * (-2.0 * ui / (1.0 - ui**2) ** 2)
    return out


def check_equilibrium(
    profile: AngularProfile,
    C: ElasticTensor,
    annulus=(0.5, 2.0),
    n_rho: int = 96,
    n_theta: int = 512,
) -> float:
    """Weak-form residual of div(C eta) against smooth annulus test fields.

    The residual is normalized by (1 + |b|); it vanishes identically for the
    zero profile and decreases as the profile resolution is refined.
    """
    r0, r1 = annulus
    rho = np.linspace(r0, r1, n_rho)
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    RR, TT = np.meshgrid(rho, theta, indexing="ij")
    pts_local = np.stack(
        [RR * np.cos(TT), RR * np.sin(TT), np.zeros_like(RR)], axis=-1
    )
    pts = pts_local.reshape(-1, 3) @ profile.frame.T
    if np.allclose(profile.f, 0.0) and np.allclose(profile.g, 0.0):
        return 0.0
    sigma = C.apply(eval_eta(profile, pts)).reshape(n_rho, n_theta, 3, 3)

    er, et = _local_basis(theta)
    er, et = er @ profile.frame.T, et @ profile.frame.T

    u = (2 * rho - (r0 + r1)) / (r1 - r0)
    chi = _bump(u)
    chi_p = _bump_prime(u) * 2.0 / (r1 - r0)

    harmonics = [np.ones_like(theta), np.cos(theta), np.sin(theta),
                 np.cos(2 * theta), np.sin(2 * theta)]
    harmonics_p = [np.zeros_like(theta), -np.sin(theta), np.cos(theta),
                   -2 * np.sin(2 * theta), 2 * np.cos(2 * theta)]

    w_rho = np.full(n_rho, rho[1] - rho[0])
    w_rho[[0, -1]] *= 0.5
    w_theta = 2 * np.pi / n_theta

    worst = 0.0
    for psi, psi_p in zip(harmonics, harmonics_p):
        # grad phi for phi = chi(rho) psi(theta) e_i
        grad = (
            chi_p[:, None, None] * psi[None, :, None] * er[None, :, :]
            + (chi[:, None, None] / RR[:, :, None]) * psi_p[None, :, None] * et[None, :, :]
        )
        integrand = np.einsum("rtij,rtj->rti", sigma, grad)
        vals = w_theta * np.einsum("rti,r->i", integrand, w_rho * rho)
        worst = max(worst, float(np.max(np.abs(vals))))
    return worst / (1.0 + float(np.linalg.norm(profile.burgers)))


@dataclass
class SelfEnergyScan:
    """Psi0 sampled over Burgers vectors and directions, with fitted constants."""

    burgers: np.ndarray  # (nb, 3)
    directions: np.ndarray  # (nd, 3)
    values: np.ndarray  # (nb, nd)
    c0: float
    c1: float
    continuity_constant: float


def self_energy_scan(
    C: ElasticTensor,
    burgers: Sequence,
    directions: Sequence,
    n_theta: int = 64,
) -> SelfEnergyScan:
    """Tabulate Psi0 on a (b, t) grid via per-direction quadratic forms.

    Fits the growth constants c0 <= c1 (values / |b|^2) and the direction
    continuity constant c with Psi0(b,t) <= (1 + c|t - t'|) Psi0(b,t').
    """
    B = np.atleast_2d(np.asarray(burgers, dtype=float))
    T = np.atleast_2d(np.asarray(directions, dtype=float))
    values = np.empty((len(B), len(T)))
    for j, t in enumerate(T):
        q = quadratic_form(C, t, n_theta)
        values[:, j] = np.einsum("bi,ij,bj->b", B, q, B)
    norms2 = np.einsum("bi,bi->b", B, B)
    nz = norms2 > 1e-18
    ratios = values[nz] / norms2[nz, None]
    c0 = float(ratios.min()) if ratios.size else 0.0
    c1 = float(ratios.max()) if ratios.size else 0.0

    cont = 0.0
    for j in range(len(T)):
        for k in range(len(T)):
            dt = float(np.linalg.norm(T[j] - T[k]))
            if dt < 1e-9:
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                r = (values[nz, j] / values[nz, k] - 1.0) / dt
            r = r[np.isfinite(r)]
            if r.size:
                cont = max(cont, float(r.max()))
    return SelfEnergyScan(
        burgers=B, directions=T, values=values, c0=c0, c1=c1,
        continuity_constant=cont,
    )
