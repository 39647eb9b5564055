"""Elastic tensors, nonlinear energy densities, and rotation fitting.

The default energy is the squared Frobenius distance to SO(3); its Hessian
at the identity supplies the elastic tensor used by all quadratic solves.
Rotation fitting (average-then-project) backs the rigidity diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import AssumptionViolationError, DegenerateProjectionError, SolverFailure

_EYE = np.eye(3)

# index pairs for the Voigt map, tensorial (no engineering factor) convention
_VOIGT_PAIRS = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` (need not be normalized) by ``angle``."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return _EYE.copy()
    k = axis / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return _EYE + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def is_rotation(R: np.ndarray, tol: float = 1e-12) -> bool:
    R = np.asarray(R, dtype=float)
    return (
        R.shape == (3, 3)
        and np.all(np.isfinite(R))
        and np.linalg.norm(R.T @ R - _EYE) <= 10 * tol
        and abs(np.linalg.det(R) - 1.0) <= 10 * tol
    )


def _signed_singular_values(F: np.ndarray):
    """Singular values (descending) with the smallest one sign-flipped when det F < 0."""
    U, s, Vt = np.linalg.svd(F)
    sign = np.sign(np.linalg.det(F))
    return U, s, Vt, sign


def distance_to_rotations(F) -> float | np.ndarray:
    """Frobenius distance from ``F`` to SO(3).

    Accepts a single 3x3 matrix or a batch of shape (..., 3, 3); for
    ``det F <= 0`` the smallest singular value contributes ``(s3 + 1)**2``.
    """
    F = np.asarray(F, dtype=float)
    s = np.linalg.svd(F, compute_uv=False)
    det = np.linalg.det(F)
    d = s - 1.0
    dsq = np.sum(d * d, axis=-1)
    # det <= 0: replace (s3 - 1)^2 by (s3 + 1)^2, a difference of 4*s3
    correction = np.where(det < 0.0, 4.0 * s[..., -1], 0.0)
    out = np.sqrt(dsq + correction)
    return float(out) if out.ndim == 0 else out


def project_to_rotations(F) -> np.ndarray:
    """Rotation attaining ``distance_to_rotations(F)``.

    Raises ``DegenerateProjectionError`` when ``det F <= 0`` and the two
    smallest singular values coincide (the projection is then non-unique).
    """
    F = np.asarray(F, dtype=float)
    U, s, Vt = np.linalg.svd(F)
    det = np.linalg.det(F)
    scale = np.maximum(s[..., 0], 1.0)
    degenerate = (det <= 0.0) & (s[..., 1] - s[..., 2] <= 1e-12 * scale)
    if np.any(degenerate):
        raise DegenerateProjectionError(
            "nearest rotation is non-unique: det F <= 0 with coinciding "
            "smallest singular values"
        )
    sign = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(F.shape[:-2] + (3,))
    D[..., 2] = sign
    return (U * D[..., None, :]) @ Vt


def _prototype_energy(F: np.ndarray):
    d = distance_to_rotations(F)
    return d * d


def _prototype_gradient(F: np.ndarray) -> np.ndarray:
    """Analytic gradient of dist^2(F, SO(3)): 2(F - U diag(1,1,sgn det F) V^T)."""
    F = np.asarray(F, dtype=float)
    U, s, Vt = np.linalg.svd(F)
    sign = np.where(np.linalg.det(F) < 0.0, -1.0, 1.0)
    D = np.ones(F.shape[:-2] + (3,))
    D[..., 2] = sign
    return 2.0 * (F - (U * D[..., None, :]) @ Vt)


@dataclass(frozen=True)
class EnergyModel:
    """Frame-indifferent energy density W with W(I) = 0 and quadratic growth.

    ``w`` must accept single matrices and (..., 3, 3) batches. ``grad`` is
    optional; a central-difference fallback is used when absent.
    """

    kind: str
    w: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @classmethod
    def prototype(cls) -> "EnergyModel":
        """W(F) = dist^2(F, SO(3))."""
        return cls(kind="dist-squared", w=_prototype_energy, grad=_prototype_gradient)

    @classmethod
    def scaled_prototype(cls, factor: float) -> "EnergyModel":
        return cls(
            kind=f"dist-squared*{factor:g}",
            w=lambda F: factor * _prototype_energy(F),
            grad=lambda F: factor * _prototype_gradient(F),
        )

    @classmethod
    def saint_venant(cls) -> "EnergyModel":
        """W(F) = |F^T F - I|^2 / 4: same Hessian at I as the prototype but
        with a nonzero third-order term along symmetric directions."""

        def w(F):
            F = np.asarray(F, dtype=float)
            E = np.swapaxes(F, -1, -2) @ F - np.eye(3)
            return 0.25 * np.einsum("...ij,...ij->...", E, E)

        def grad(F):
            F = np.asarray(F, dtype=float)
            return F @ (np.swapaxes(F, -1, -2) @ F - np.eye(3))

        return cls(kind="saint-venant", w=w, grad=grad)

    @classmethod
    def from_callable(cls, w, grad=None, kind: str = "user") -> "EnergyModel":
        return cls(kind=kind, w=w, grad=grad)

    def gradient(self, F: np.ndarray, step: float = 1e-6) -> np.ndarray:
        if self.grad is not None:
            return np.asarray(self.grad(F), dtype=float)
        F = np.asarray(F, dtype=float)
        G = np.zeros_like(F)
        for i in range(3):
            for j in range(3):
                E = np.zeros((3, 3))
                E[i, j] = step
                G[..., i, j] = (self.w(F + E) - self.w(F - E)) / (2 * step)
        return G


def energy_density(model: EnergyModel, F) -> float | np.ndarray:
    """W(F); exactly dist^2(F, SO(3)) for the prototype model."""
    out = np.asarray(model.w(np.asarray(F, dtype=float)), dtype=float)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ElasticTensor:
    """Fourth-order tensor acting on 3x3 matrices, components C[i,j,k,l]."""

    components: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.components, dtype=float)
        if c.shape != (3, 3, 3, 3):
            raise ValueError("elastic tensor components must have shape (3,3,3,3)")
        object.__setattr__(self, "components", c)

    @classmethod
    def isotropic(cls, mu: float, lam: float) -> "ElasticTensor":
        """C E = 2 mu sym E + lam tr(E) I."""
        d = _EYE
        c = lam * np.einsum("ij,kl->ijkl", d, d) + mu * (
            np.einsum("ik,jl->ijkl", d, d) + np.einsum("il,jk->ijkl", d, d)
        )
        return cls(c)

    @classmethod
    def isotropic_from_poisson(cls, mu: float, nu: float) -> "ElasticTensor":
        return cls.isotropic(mu, 2.0 * mu * nu / (1.0 - 2.0 * nu))

    def apply(self, E: np.ndarray) -> np.ndarray:
        """C E, for a single matrix or a (..., 3, 3) batch."""
        return np.einsum("ijkl,...kl->...ij", self.components, np.asarray(E, float))

    def quadratic(self, E: np.ndarray) -> float | np.ndarray:
        """C E : E."""
        E = np.asarray(E, dtype=float)
        out = np.einsum("...ij,...ij->...", self.apply(E), E)
        return float(out) if out.ndim == 0 else out

    def rotated(self, R: np.ndarray) -> "ElasticTensor":
        """Push-forward C'_{ijkl} = R_ia R_jb R_kc R_ld C_abcd."""
        R = np.asarray(R, dtype=float)
        return ElasticTensor(
            np.einsum("ia,jb,kc,ld,abcd->ijkl", R, R, R, R, self.components)
        )

    def to_voigt(self) -> np.ndarray:
        """6x6 Voigt matrix, tensorial shear components (no factor-2 scaling)."""
        V = np.empty((6, 6))
        for a, (i, j) in enumerate(_VOIGT_PAIRS):
            for b, (k, l) in enumerate(_VOIGT_PAIRS):
                V[a, b] = self.components[i, j, k, l]
        return V

    @classmethod
    def from_voigt(cls, V: np.ndarray) -> "ElasticTensor":
        V = np.asarray(V, dtype=float)
        if V.shape != (6, 6):
            raise ValueError("Voigt matrix must have shape (6,6)")
        c = np.empty((3, 3, 3, 3))
        for a, (i, j) in enumerate(_VOIGT_PAIRS):
            for b, (k, l) in enumerate(_VOIGT_PAIRS):
                for ii, jj in ((i, j), (j, i)):
                    for kk, ll in ((k, l), (l, k)):
                        c[ii, jj, kk, ll] = V[a, b]
        return cls(c)

    def to_json_dict(self) -> dict:
        return {
            "voigt": self.to_voigt().tolist(),
            "convention": "strain-engineering-off",
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ElasticTensor":
        if "voigt" in data:
            conv = data.get("convention", "strain-engineering-off")
            if conv != "strain-engineering-off":
                raise ValueError(f"unsupported Voigt convention {conv!r}")
            return cls.from_voigt(np.array(data["voigt"], dtype=float))
        if "mu" in data:
            if "nu" in data:
                return cls.isotropic_from_poisson(float(data["mu"]), float(data["nu"]))
            return cls.isotropic(float(data["mu"]), float(data.get("lambda", 0.0)))
        raise ValueError("elastic tensor JSON needs either 'voigt' or 'mu' keys")

    def _mandel(self) -> np.ndarray:
        # Mandel scaling makes the 6x6 eigenvalues those of the quadratic
        # form on symmetric matrices.
        w = np.array([1.0, 1.0, 1.0, np.sqrt(2), np.sqrt(2), np.sqrt(2)])
        return self.to_voigt() * np.outer(w, w)

    def symmetric_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of the quadratic form restricted to symmetric matrices."""
        M = self._mandel()
        return np.linalg.eigvalsh(0.5 * (M + M.T))

    def has_major_symmetry(self, tol: float = 1e-6) -> bool:
        c = self.components
        return bool(np.max(np.abs(c - c.transpose(2, 3, 0, 1))) <= tol)

    def is_positive_definite(self, tol: float = 0.0) -> bool:
        return bool(self.symmetric_eigenvalues().min() > tol)

    def annihilates_skew(self, tol: float = 1e-6) -> bool:
        for (i, j) in ((0, 1), (0, 2), (1, 2)):
            S = np.zeros((3, 3))
            S[i, j], S[j, i] = 1.0, -1.0
            if abs(self.quadratic(S)) > tol:
                return False
        return True


def hessian_at_identity(model: EnergyModel, step: float = 1e-4) -> ElasticTensor:
    """Elastic tensor from central second differences of W at the identity.

    ``step`` must lie in [1e-6, 1e-2]; the prototype model yields
    C E : E = 2 |sym E|^2.
    """
    if not (1e-6 <= step <= 1e-2):
        raise ValueError("finite-difference step must lie in [1e-6, 1e-2]")
    basis = [np.outer(_EYE[i], _EYE[j]) for i in range(3) for j in range(3)]
    H = np.empty((9, 9))
    for a, Ea in enumerate(basis):
        for b, Eb in enumerate(basis[: a + 1]):
            p, m = Ea + Eb, Ea - Eb
            val = (
                model.w(_EYE + step * p)
                - model.w(_EYE + step * m)
                - model.w(_EYE - step * m)
                + model.w(_EYE - step * p)
            ) / (4.0 * step * step)
            H[a, b] = H[b, a] = val
    if not np.all(np.isfinite(H)):
        raise SolverFailure("non-finite values in Hessian finite differences")
    c = H.reshape(3, 3, 3, 3)
    return ElasticTensor(0.5 * (c + c.transpose(2, 3, 0, 1)))


@dataclass
class ValidationReport:
    """Empirical constants for the quadratic-growth and Jacobian bounds."""

    samples: int
    c1: float
    c2: float
    jacobian_constant: float
    frame_violation: float
    ok: bool = True
    notes: list = field(default_factory=list)


def validate_energy_assumptions(
    model: EnergyModel, samples: int = 200, seed: int = 0
) -> ValidationReport:
    """Sample W near SO(3) and report the constants of its growth bounds.

    Raises ``AssumptionViolationError`` naming the failed clause when the
    sampled energy is negative or W(I) != 0.
    """
    if samples < 100:
        raise ValueError("need at least 100 samples")
    rng = np.random.default_rng(seed)

    wI = float(model.w(_EYE))
    if abs(wI) > 1e-12:
        raise AssumptionViolationError(f"clause (ii): W(I) = {wI:g} != 0")

    c1, c2, cjac, frame = np.inf, 0.0, 0.0, 0.0
    for _ in range(samples):
        R = random_rotation(rng)
        A = rng.normal(size=(3, 3))
        A *= 3.0 * rng.uniform() ** (1 / 3) / np.linalg.norm(A)
        F = R + A
        w = float(model.w(F))
        if w < -1e-12:
            raise AssumptionViolationError(f"clause (i)/(iv): W(F) = {w:g} < 0")
        d = distance_to_rotations(F)
        if d > 1e-8:
            c1 = min(c1, w / (d * d))
            c2 = max(c2, w / (d * d))
            cjac = max(cjac, np.linalg.norm(model.gradient(F)) / d)
        S = random_rotation(rng)
        frame = max(frame, abs(float(model.w(S @ F)) - w))
    return ValidationReport(
        samples=samples,
        c1=float(c1),
        c2=float(c2),
        jacobian_constant=float(cjac),
        frame_violation=float(frame),
    )


def best_fit_rotation_ratio(field: np.ndarray, weights=None):
    """Procrustes rotation of a sampled gradient field plus a rigidity ratio.

    ``field`` has shape (n, 3, 3); ``weights`` are quadrature weights (equal
    by default).  Returns ``(Q, ratio)`` where Q is the projection of the
    weighted average onto SO(3) and ratio = ||field - Q|| / ||dist(field, SO(3))||
    in the weighted L2 norms, with ratio := 0 for an exactly rigid field.
    """
    F = np.asarray(field, dtype=float)
    if F.ndim != 3 or F.shape[1:] != (3, 3) or F.shape[0] == 0:
        raise ValueError("field must have shape (n, 3, 3) with n >= 1")
    if not np.all(np.isfinite(F)):
        raise ValueError("field samples must be finite")
    w = np.full(F.shape[0], 1.0) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    mean = np.einsum("n,nij->ij", w, F)
    Q = project_to_rotations(mean)
    num = float(np.sqrt(np.einsum("n,nij->", w, (F - Q) ** 2)))
    dist = distance_to_rotations(F)
    den = float(np.sqrt(np.sum(w * dist * dist)))
    if den == 0.0:
        return Q, 0.0
    return Q, num / den
