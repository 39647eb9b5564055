"""Hollow-cylinder cell problems on a polar annulus mesh.

Both cell problems fix the circulation of the strain around the axis and
minimize the stored energy over single-valued corrections.  The unknown is
invariant along the axis (exact for the periodic linear problem by
translation averaging; an upper-bound competitor class for the nonconvex
one), which reduces everything to bilinear finite elements on a log-radial
annulus grid.  The multivalued part is carried by the angular-profile field
of the matching straight-line solve, so the correction potential stays
single-valued and the stiffness matrix is standard.  Values are normalized
per unit height and unit log of the radius ratio (the nonlinear one also
per squared inner radius); with the axis-invariant ansatz they do not
depend on the height at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elasticity import ElasticTensor, EnergyModel, hessian_at_identity
from .errors import SolverFailure, ValidationFailure
from .selfenergy import AngularProfile, _local_basis, solve_self_energy


@dataclass(frozen=True)
class CellSpec:
    """Hollow cylinder with inner/outer radii r < R <= h and a polar mesh."""

    b: np.ndarray
    t: np.ndarray
    h: float
    r: float
    R: float
    n_rho: int = 64
    n_theta: int = 128

    def __post_init__(self):
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "t", t / np.linalg.norm(t))
        if not (0 < self.r < self.R <= self.h):
            raise ValidationFailure("need 0 < r < R <= h")
        if self.n_rho < 8 or self.n_theta < 8:
            raise ValidationFailure("mesh resolutions must be at least 8")


@dataclass(frozen=True)
class NonlinearCellSpec:
    base: CellSpec
    Q: np.ndarray = None
    lam: float = 0.0
    max_iter: int = 200
    grad_tol: float = 1e-9

    def __post_init__(self):
        Q = np.eye(3) if self.Q is None else np.asarray(self.Q, dtype=float)
        object.__setattr__(self, "Q", Q)
        if self.lam < 0:
            raise ValidationFailure("penalty weight lambda must be >= 0")
        if self.max_iter < 1:
            raise ValidationFailure("need at least one iteration")


@dataclass
class CellResult:
    value: float
    diagnostics: dict


class _AnnulusMesh:
    """Log-radial x uniform-angular grid with 2x2 Gauss quadrature data.

    Degrees of freedom: a 3-vector per node plus one constant 3-vector for
    the axis-direction column of the strain (the only axis-invariant
    curl-free completion besides in-plane gradients).
    """

    def __init__(self, spec: CellSpec, profile: AngularProfile):
        self.spec = spec
        n_rho, n_theta = spec.n_rho, spec.n_theta
        self.rho_nodes = spec.r * (spec.R / spec.r) ** (np.arange(n_rho + 1) / n_rho)
        self.theta_nodes = 2 * np.pi * np.arange(n_theta) / n_theta
        self.n_nodes = (n_rho + 1) * n_theta
        self.ndof = 3 * self.n_nodes + 3
        self.frame = profile.frame
        self.axis = np.asarray(profile.t, dtype=float)
        self.profile = profile

        gp = np.array([-1.0, 1.0]) / np.sqrt(3.0)
        xs, ys = np.meshgrid(gp, gp, indexing="ij")
        xs, ys = xs.ravel(), ys.ravel()  # 4 quadrature points per cell
        # bilinear shape functions, local node order (r-,t-),(r+,t-),(r+,t+),(r-,t+)
        self.N = np.stack(
            [
                (1 - xs) * (1 - ys) / 4,
                (1 + xs) * (1 - ys) / 4,
                (1 + xs) * (1 + ys) / 4,
                (1 - xs) * (1 + ys) / 4,
            ],
            axis=1,
        )
        self.dNdx = np.stack(
            [-(1 - ys) / 4, (1 - ys) / 4, (1 + ys) / 4, -(1 + ys) / 4], axis=1
        )
        self.dNdy = np.stack(
            [-(1 - xs) / 4, -(1 + xs) / 4, (1 + xs) / 4, (1 - xs) / 4], axis=1
        )

        ii, jj = np.meshgrid(np.arange(n_rho), np.arange(n_theta), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        jp = (jj + 1) % n_theta
        self.conn = np.stack(
            [
                ii * n_theta + jj,
                (ii + 1) * n_theta + jj,
                (ii + 1) * n_theta + jp,
                ii * n_theta + jp,
            ],
            axis=1,
        )

        r0, r1 = self.rho_nodes[ii], self.rho_nodes[ii + 1]
        dth = 2 * np.pi / n_theta
        self.rho_q = r0[:, None] * (1 - xs)[None, :] / 2 + r1[:, None] * (1 + xs)[None, :] / 2
        self.th_q = self.theta_nodes[jj][:, None] + dth * (1 + ys)[None, :] / 2
        jac_r = (r1 - r0)[:, None] / 2.0
        jac_t = dth / 2.0
        self.w_q = self.rho_q * jac_r * jac_t

        er, et = _local_basis(self.th_q.ravel())
        shape3 = self.rho_q.shape + (3,)
        self.er_q = (er @ self.frame.T).reshape(shape3)
        self.et_q = (et @ self.frame.T).reshape(shape3)

        dN_drho = self.dNdx[None, :, :] / jac_r[:, :, None]
        dN_dth = self.dNdy[None, :, :] / jac_t
        # nodal value u_a contributes u_a (x) Gvec[cell, q, a, :] to grad u
        self.Gvec = (
            dN_drho[..., None] * self.er_q[:, :, None, :]
            + (dN_dth / self.rho_q[:, :, None])[..., None] * self.et_q[:, :, None, :]
        )

        fv = profile.f_interpolator()(np.mod(self.th_q.ravel(), 2 * np.pi))
        fv = fv.reshape(shape3)
        self.eta_q = (
            fv[..., :, None] * self.et_q[..., None, :]
            + profile.g[None, None, :, None] * self.er_q[..., None, :]
        ) / self.rho_q[..., None, None]

    # -- algebra ---------------------------------------------------------

    def correction_field(self, x: np.ndarray) -> np.ndarray:
        """Strain contribution of the dof vector at all quadrature points."""
        u = x[: 3 * self.n_nodes].reshape(self.n_nodes, 3)
        c = x[3 * self.n_nodes :]
        ue = u[self.conn]  # (ncell, 4a, 3)
        out = np.einsum("cai,cqam->cqim", ue, self.Gvec)
        out += c[None, None, :, None] * self.axis[None, None, None, :]
        return out

    def assemble_matrix(self, C4: np.ndarray, lam: float = 0.0) -> sp.csr_matrix:
        """Sparse form of the quadratic energy for tensor C4 plus 2 lam |.|^2."""
        Ct = C4 + 2.0 * lam * np.einsum("il,jm->ijlm", np.eye(3), np.eye(3))
        ncell = self.conn.shape[0]
        nu = 3 * self.n_nodes
        rows, cols, vals = [], [], []

        def add_block(blk, ra, cb):
            rows.append(ra.ravel())
            cols.append(cb.ravel())
            vals.append(blk.ravel())

        eye3 = np.arange(3)
        for a in range(4):
            Ga = self.Gvec[:, :, a, :]
            ra = (3 * self.conn[:, a])[:, None, None] + eye3[None, :, None]
            ra = np.broadcast_to(ra, (ncell, 3, 3))
            for b in range(4):
                Gb = self.Gvec[:, :, b, :]
                blk = np.einsum("ijlm,cqj,cqm,cq->cil", Ct, Ga, Gb, self.w_q,
                                optimize=True)
                cb = (3 * self.conn[:, b])[:, None, None] + eye3[None, None, :]
                add_block(blk, ra, np.broadcast_to(cb, (ncell, 3, 3)))
            blk = np.einsum("ijlm,cqj,m,cq->cil", Ct, Ga, self.axis, self.w_q,
                            optimize=True)
            cb = nu + np.broadcast_to(eye3[None, None, :], (ncell, 3, 3))
            add_block(blk, ra, cb)
            add_block(blk.transpose(0, 2, 1), cb.transpose(0, 2, 1),
                      ra.transpose(0, 2, 1))
        w_tot = float(self.w_q.sum())
        blk_cc = w_tot * np.einsum("ijlm,j,m->il", Ct, self.axis, self.axis)
        ra = nu + eye3[:, None] + np.zeros((3, 3), dtype=int)
        cb = nu + eye3[None, :] + np.zeros((3, 3), dtype=int)
        add_block(blk_cc, ra, cb)
        K = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.ndof, self.ndof),
        )
        return K.tocsr()

    def assemble_dual(self, S_q: np.ndarray) -> np.ndarray:
        """Pair a per-quad-point matrix field against all dof directions.

        Returns the vector g with g . dx = sum_q w_q S_q : d(correction).
        """
        g = np.zeros(self.ndof)
        for a in range(4):
            ga = np.einsum("cqij,cqj,cq->ci", S_q, self.Gvec[:, :, a, :], self.w_q,
                           optimize=True)
            np.add.at(g[: 3 * self.n_nodes].reshape(self.n_nodes, 3),
                      self.conn[:, a], ga)
        g[3 * self.n_nodes :] = np.einsum("cqij,j,cq->i", S_q, self.axis, self.w_q,
                                          optimize=True)
        return g

    def integrate(self, dens_q: np.ndarray) -> float:
        return float(np.sum(dens_q * self.w_q))

    def reduced_solve(self, K: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
        """Solve with the three dofs of node 0 pinned (constant-shift gauge)."""
        keep = np.ones(self.ndof, dtype=bool)
        keep[:3] = False
        Kr = K[keep][:, keep]
        try:
            xr = spla.spsolve(Kr.tocsc(), rhs[keep])
        except RuntimeError as exc:
            raise SolverFailure(f"singular cell stiffness matrix: {exc}")
        if not np.all(np.isfinite(xr)):
            raise SolverFailure("non-finite cell solution")
        x = np.zeros(self.ndof)
        x[keep] = xr
        return x

    def circulation_residual(self, base_scale: float) -> float:
        """Max over node rings of |ring circulation - expected| via trapezoid.

        The correction part contributes exactly zero on every ring (periodic
        single-valued potential, axis column orthogonal to e_theta), so the
        residual measures the profile quadrature only.
        """
        theta = self.theta_nodes
        fv = self.profile.f_interpolator()(theta)
        circ = fv.mean(axis=0) * 2 * np.pi
        return float(np.linalg.norm(circ - self.profile.burgers)) * base_scale


def _profile_for(C: ElasticTensor, b, t, n_theta_profile: int) -> AngularProfile:
    return solve_self_energy(C, b, t, n_theta_profile).profile


def solve_linear_cell(
    spec: CellSpec,
    C: ElasticTensor,
    profile: Optional[AngularProfile] = None,
    n_theta_profile: int = 256,
) -> CellResult:
    """Quadratic cell energy per unit height and unit log(R/r).

    The admissible strain is the circulation-carrying profile field plus the
    gradient of a single-valued potential; one sparse solve minimizes the
    energy exactly over the mesh space.
    """
    if not C.is_positive_definite():
        raise ValidationFailure("elastic tensor must be positive definite")
    if profile is None:
        profile = _profile_for(C, spec.b, spec.t, n_theta_profile)
    mesh = _AnnulusMesh(spec, profile)
    K = mesh.assemble_matrix(C.components, lam=0.0)
    S0 = np.einsum("ijlm,cqlm->cqij", C.components, mesh.eta_q)
    F = mesh.assemble_dual(S0)
    x = mesh.reduced_solve(K, -F)
    E0 = 0.5 * mesh.integrate(np.einsum("cqij,cqij->cq", S0, mesh.eta_q))
    E = E0 + 0.5 * float(F @ x)
    logratio = np.log(spec.R / spec.r)
    value = E / logratio
    if value < -1e-12:
        raise SolverFailure("negative linear cell energy")
    return CellResult(
        value=max(value, 0.0),
        diagnostics={
            "constraint_residual": mesh.circulation_residual(1.0),
            "iterations": 1,
            "correction_energy": E - E0,
            "profile_energy": E0,
            "log_ratio": logratio,
            "r_over_R": spec.r / spec.R,
            "h_over_R": spec.h / spec.R,
        },
    )


def _model_tensor(model: EnergyModel) -> ElasticTensor:
    if model.kind in ("dist-squared", "saint-venant"):
        return ElasticTensor.isotropic(1.0, 0.0)
    if model.kind.startswith("dist-squared*"):
        factor = float(model.kind.split("*", 1)[1])
        return ElasticTensor.isotropic(factor, 0.0)
    return hessian_at_identity(model)


def solve_nonlinear_cell(
    spec: NonlinearCellSpec,
    model: Optional[EnergyModel] = None,
    profile: Optional[AngularProfile] = None,
    n_theta_profile: int = 256,
) -> CellResult:
    """Penalized nonlinear cell energy per unit height, r^2, and log(R/r).

    Minimizes W(beta) + lambda |beta - Q|^2 over the axis-invariant
    competitor class beta = Q(I + r eta) + grad u with damped constant-metric
    Newton iterations (Armijo backtracking) started from the quadratic
    model's minimizer.  Reported values are upper bounds for the unrestricted
    problem.
    """
    model = model or EnergyModel.prototype()
    base = spec.base
    C = _model_tensor(model)
    b_rot = spec.Q.T @ base.b
    if profile is None:
        profile = _profile_for(C, b_rot, base.t, n_theta_profile)
    mesh = _AnnulusMesh(base, profile)
    r, lam, Q = base.r, spec.lam, spec.Q

    C_rot = np.einsum("ip,lq,pjqm->ijlm", Q, Q, C.components)
    K = mesh.assemble_matrix(C_rot, lam=lam)
    keep = np.ones(mesh.ndof, dtype=bool)
    keep[:3] = False
    Kr = K[keep][:, keep].tocsc()
    try:
        lu = spla.factorized(Kr)
    except RuntimeError as exc:
        raise SolverFailure(f"singular nonlinear cell metric: {exc}")

    base_q = Q[None, None, :, :] @ (
        np.eye(3)[None, None, :, :] + r * mesh.eta_q
    )

    def beta_of(x):
        return base_q + mesh.correction_field(x)

    def energy(beta):
        dens = model.w(beta)
        if lam:
            dens = dens + lam * np.einsum("cqij,cqij->cq", beta - Q, beta - Q)
        return mesh.integrate(dens)

    def gradient(beta):
        S = model.gradient(beta)
        if lam:
            S = S + 2.0 * lam * (beta - Q)
        return mesh.assemble_dual(S)

    x = np.zeros(mesh.ndof)
    beta = beta_of(x)
    E = energy(beta)
    scale = r * r * np.log(base.R / base.r) * max(1.0, float(b_rot @ b_rot))
    tol = spec.grad_tol * scale

    iterations = 0
    converged = False
    for iterations in range(1, spec.max_iter + 1):
        g = gradient(beta)
        gnorm = float(np.linalg.norm(g[keep]))
        if gnorm <= tol:
            converged = True
            break
        d = np.zeros(mesh.ndof)
        d[keep] = lu(-g[keep])
        slope = float(g @ d)
        if slope >= 0:
            raise SolverFailure("nonlinear cell: search direction is not a descent")
        step, accepted = 1.0, False
        for _ in range(40):
            E_trial = energy(beta_of(x + step * d))
            if E_trial <= E + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise SolverFailure("nonlinear cell: Armijo line search failed")
        x = x + step * d
        beta = beta_of(x)
        E_new = energy(beta)
        if abs(E - E_new) <= 1e-15 * max(1.0, abs(E)):
            E = E_new
            converged = True
            break
        E = E_new
    if not converged:
        raise SolverFailure(
            f"nonlinear cell did not converge in {spec.max_iter} iterations"
        )

    logratio = np.log(base.R / base.r)
    value = E / (r * r * logratio)
    return CellResult(
        value=float(value),
        diagnostics={
            "constraint_residual": mesh.circulation_residual(r),
            "iterations": iterations,
            "gradient_norm": float(np.linalg.norm(gradient(beta)[keep])),
            "log_ratio": logratio,
            "r_over_R": base.r / base.R,
            "h_over_R": base.h / base.R,
            "lambda": lam,
            "minimizer_field": beta,
            "quad_weights": mesh.w_q,
        },
    )


def cell_convergence_scan(
    b,
    t,
    C: ElasticTensor,
    r_over_R_list,
    h_over_R: float = 8.0,
    lambda_list=None,
    Q: Optional[np.ndarray] = None,
    model: Optional[EnergyModel] = None,
    mesh_per_decade: int = 32,
    n_theta: int = 96,
    psi0: Optional[float] = None,
) -> dict:
    """Nested-schedule scan of the cell values against the straight-line density.

    Runs the linear solver along decreasing r/R (and the nonlinear one along
    a paired (lambda, r/R) schedule when ``lambda_list`` is given), reports
    the gaps to Psi0 and the fitted moduli (observed gap at each r/R for the
    fixed height ratio).
    """
    Q = np.eye(3) if Q is None else np.asarray(Q, dtype=float)
    b = np.asarray(b, dtype=float)
    from .selfenergy import solve_self_energy as _sse

    if psi0 is None:
        psi0 = _sse(C, Q.T @ b, t, 256).value
    rows = []
    for idx, rr in enumerate(r_over_R_list):
        n_rho = max(8, int(round(mesh_per_decade * abs(np.log10(rr)))))
        spec = CellSpec(b=b, t=t, h=h_over_R, r=rr, R=1.0, n_rho=n_rho,
                        n_theta=n_theta)
        lin = solve_linear_cell(spec, C)
        row = {
            "r_over_R": float(rr),
            "h_over_R": float(h_over_R),
            "linear_value": lin.value,
            "linear_gap": abs(psi0 - lin.value),
            "constraint_residual": lin.diagnostics["constraint_residual"],
            "iterations": lin.diagnostics["iterations"],
        }
        if lambda_list is not None:
            lam = lambda_list[idx]
            nspec = NonlinearCellSpec(base=spec, Q=Q, lam=lam)
            nl = solve_nonlinear_cell(nspec, model)
            row.update(
                {
                    "lambda": float(lam),
                    "nonlinear_value": nl.value,
                    "nonlinear_gap": abs(nl.value - psi0),
                    "nonlinear_iterations": nl.diagnostics["iterations"],
                }
            )
        rows.append(row)
    gaps = [r["linear_gap"] for r in rows]
    report = {
        "psi0": float(psi0),
        "rows": rows,
        "linear_gap_monotone": all(
            gaps[k + 1] <= gaps[k] + 1e-12 for k in range(len(gaps) - 1)
        ),
        "fitted_modulus": {f"{r['r_over_R']:g}": r["linear_gap"] for r in rows},
    }
    if lambda_list is not None:
        ngaps = [r["nonlinear_gap"] for r in rows]
        report["nonlinear_gap_monotone"] = all(
            ngaps[k + 1] <= ngaps[k] + 1e-12 for k in range(len(ngaps) - 1)
        )
    return report


def lower_bound_certificates(
    result: CellResult, spec, c_star: float, psi0_rotated: float,
    modulus: float = 0.0, interaction_constant: float = 0.0,
) -> dict:
    """Margins of the two uniform lower bounds for a converged cell value.

    Checks value >= (1 - R/h) c_star |b|^2 and value >= Psi0(Q^T b, t)
    - C K^2 / M - omega with the fitted constants; violations are reported
    through negative margins, never thrown.
    """
    base = spec.base if isinstance(spec, NonlinearCellSpec) else spec
    b2 = float(base.b @ base.b)
    M = base.h / base.R
    bound1 = (1.0 - base.R / base.h) * c_star * b2
    bound2 = psi0_rotated - interaction_constant * b2 / M - modulus
    return {
        "value": result.value,
        "quadratic_bound": bound1,
        "quadratic_margin": result.value - bound1,
        "cell_bound": bound2,
        "cell_margin": result.value - bound2,
        "h_over_R": M,
    }
