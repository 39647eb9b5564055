"""Incompatible strain fields and the energy scan toward the limit functional.

The far field of a polyhedral measure comes from the inverse-Laplacian
kernel, integrated in closed form along each segment; inside disjoint core
tubes it is blended with the mollified straight-line profile of the matching
self-energy solve.  Recovery strains package a constant rotation, a smooth
curl-free part, and the glued singular field at scale eps; their rescaled
energies are compared against the limit functional (bulk quadratic term plus
relaxed line tension).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dislocations import (
    Box,
    Mollifier,
    PolyhedralMeasure,
    ScaleSchedule,
    Segment,
    check_dilute,
    segment_distance,
)
from .elasticity import ElasticTensor, EnergyModel, hessian_at_identity
from .envelope import EnvelopeTable
from .errors import OnSegmentError, SolverFailure, ValidationFailure
from .selfenergy import AngularProfile, solve_self_energy


# ---------------------------------------------------------------------------
# kernel field
# ---------------------------------------------------------------------------


def _segment_geometry(seg: Segment, x: np.ndarray):
    t, L = seg.tangent, seg.length
    w = x - seg.start
    s0 = w @ t
    perp = w - s0[..., None] * t
    rho2 = np.einsum("...i,...i->...", perp, perp)
    return t, L, w, s0, rho2


def segment_kernel_field(seg: Segment, x) -> np.ndarray:
    """Closed-form kernel strain of one segment, b (x) v(x).

    v is the unit-circulation line field with the standard finite-segment
    arctangent primitive; the orientation convention makes the loop
    circulation around the segment equal +b.  On-segment evaluation raises;
    on the segment's extension line the field vanishes.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    t, L, w, s0, rho2 = _segment_geometry(seg, pts)
    scale = max(L, 1.0)
    on_line = rho2 <= (1e-13 * scale) ** 2
    on_seg = on_line & (s0 >= -1e-13 * scale) & (s0 <= L + 1e-13 * scale)
    if np.any(on_seg):
        raise OnSegmentError("kernel field evaluated on the segment")
    s1, s2 = -s0, L - s0
    r1 = np.sqrt(rho2 + s1 * s1)
    r2 = np.sqrt(rho2 + s2 * s2)
    with np.errstate(divide="ignore", invalid="ignore"):
        bracket = (s2 / r2 - s1 / r1) / rho2
    bracket[on_line] = 0.0
    v = np.cross(np.broadcast_to(t, pts.shape), w) * bracket[..., None] / (4 * np.pi)
    out = seg.burgers[None, :, None] * v[:, None, :]
    return out[0] if single else out


def kernel_field(measure: PolyhedralMeasure, x) -> np.ndarray:
    """Superposed kernel field of all segments; linear in the measure."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    out = np.zeros((len(pts), 3, 3))
    for seg in measure.segments:
        out += segment_kernel_field(seg, pts)
    return out[0] if single else out


def loop_circulation(field_fn, center, normal, radius: float, n: int = 256,
                     shape: str = "circle") -> np.ndarray:
    """Quadrature of the matrix line integral around a planar loop.

    ``shape`` picks a circle, square, or 2:1 ellipse in the plane through
    ``center`` with the given ``normal``; rows of the field are integrated
    against the tangent so the result is the enclosed Burgers content.
    """
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    a = np.array([1.0, 0.0, 0.0])
    if abs(a @ normal) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, a)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    phi = 2 * np.pi * np.arange(n) / n
    if shape == "circle":
        cu, cv = radius * np.cos(phi), radius * np.sin(phi)
    elif shape == "ellipse":
        cu, cv = radius * np.cos(phi), 0.5 * radius * np.sin(phi)
    elif shape == "square":
        cu, cv = _square_path(phi, radius)
    else:
        raise ValidationFailure(f"unknown loop shape {shape!r}")
    pts = center + cu[:, None] * u[None, :] + cv[:, None] * v[None, :]
    # midpoint rule on the closed polyline
    d = np.roll(pts, -1, axis=0) - pts
    vals = field_fn(pts + 0.5 * d)
    return np.einsum("nij,nj->i", vals, d)


def _square_path(phi, radius):
    s = phi / (2 * np.pi) * 4.0
    side = np.floor(s).astype(int) % 4
    frac = s - np.floor(s)
    cu = np.where(side == 0, -1 + 2 * frac,
         np.where(side == 1, 1.0, np.where(side == 2, 1 - 2 * frac, -1.0)))
    cv = np.where(side == 0, -1.0,
         np.where(side == 1, -1 + 2 * frac, np.where(side == 2, 1.0, 1 - 2 * frac)))
    return radius * cu, radius * cv


def fit_decay_constants(measure: PolyhedralMeasure, rng=None, n_probe: int = 400):
    """Empirical constants of the near and far kernel-field decay bounds.

    Near: max |eta| dist / |b| over probes near single segments; far:
    max |eta| dist^2 / |mu| over distant probes.
    """
    rng = rng or np.random.default_rng(0)
    diam = max(measure.bounding_diameter(), 1.0)
    center = np.mean(
        [0.5 * (s.start + s.end) for s in measure.segments], axis=0
    )
    c_near = 0.0
    for seg in measure.segments:
        t = seg.tangent
        a = np.array([1.0, 0, 0]) if abs(t[0]) < 0.9 else np.array([0.0, 1, 0])
        n1 = np.cross(t, a)
        n1 /= np.linalg.norm(n1)
        n2 = np.cross(t, n1)
        for d in np.geomspace(1e-3 * seg.length, 0.2 * seg.length, 12):
            phi = rng.uniform(0, 2 * np.pi, 8)
            pts = (
                0.5 * (seg.start + seg.end)
                + d * np.cos(phi)[:, None] * n1
                + d * np.sin(phi)[:, None] * n2
            )
            eta = segment_kernel_field(seg, pts)
            mag = np.linalg.norm(eta, axis=(1, 2)).max()
            c_near = max(c_near, mag * d / np.linalg.norm(seg.burgers))
    mass = measure.weighted_length(1)
    c_far = 0.0
    for d in np.geomspace(1.2 * diam, 30 * diam, 12):
        u = rng.normal(size=(16, 3))
        u /= np.linalg.norm(u, axis=1)[:, None]
        pts = center + d * u
        eta = kernel_field(measure, pts)
        mag = np.linalg.norm(eta, axis=(1, 2)).max()
        dist = max(d - diam, 1e-9)
        c_far = max(c_far, mag * dist * dist / mass)
    return c_near, c_far


# ---------------------------------------------------------------------------
# smooth curl-free fields
# ---------------------------------------------------------------------------


class ConstantField:
    """Constant matrix field (always curl-free)."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.shape != (3, 3):
            raise ValidationFailure("constant field needs a 3x3 matrix")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.matrix.copy()
        return np.broadcast_to(self.matrix, (len(x), 3, 3)).copy()

    def to_json_dict(self):
        return {"kind": "constant", "matrix": self.matrix.tolist()}


class PotentialField:
    """Gradient of a polynomial vector potential, curl-free by construction.

    ``terms`` are {"component": i, "exponents": [px, py, pz],
    "coefficient": c} describing u_i += c x^px y^py z^pz; the field is
    grad u.
    """

    def __init__(self, terms: Sequence[dict]):
        self.terms = [
            (int(t["component"]), tuple(int(p) for p in t["exponents"]),
             float(t["coefficient"]))
            for t in terms
        ]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        out = np.zeros((len(pts), 3, 3))
        for comp, powers, c in self.terms:
            for j, p in enumerate(powers):
                if p == 0:
                    continue
                out[:, comp, j] += c * p * self._mono_reduced(pts, powers, j)
        return out[0] if single else out

    @staticmethod
    def _mono_reduced(pts, powers, j):
        prod = np.ones(len(pts))
        for k, p in enumerate(powers):
            q = p - 1 if k == j else p
            if q:
                prod = prod * pts[:, k] ** q
        return prod

    def to_json_dict(self):
        return {
            "kind": "potential",
            "terms": [
                {"component": c, "exponents": list(e), "coefficient": v}
                for c, e, v in self.terms
            ],
        }


def beta_field_from_json(data: Optional[dict]):
    if data is None:
        return ConstantField(np.zeros((3, 3)))
    kind = data.get("kind")
    if kind == "constant":
        return ConstantField(np.array(data["matrix"], dtype=float))
    if kind == "potential":
        return PotentialField(data["terms"])
    raise ValidationFailure(f"unknown beta field kind {kind!r}")


def verify_curl_free(field_fn, probes: int = 5, radius: float = 0.3,
                     rng=None) -> float:
    """Max probe-loop circulation per unit loop length (0 for curl-free)."""
    rng = rng or np.random.default_rng(3)
    worst = 0.0
    for _ in range(probes):
        center = rng.uniform(-1, 1, 3)
        normal = rng.normal(size=3)
        circ = loop_circulation(field_fn, center, normal, radius, n=128)
        worst = max(worst, float(np.linalg.norm(circ)) / (2 * np.pi * radius))
    return worst


# ---------------------------------------------------------------------------
# recovery strain
# ---------------------------------------------------------------------------


def _smoothstep(s: np.ndarray) -> np.ndarray:
    """1 for s <= 0.5, 0 for s >= 1, C^1 cubic blend between."""
    u = np.clip((1.0 - s) * 2.0, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


@dataclass
class RecoveryStrain:
    """Composite strain Q (I + eps sqrt|log eps| beta + eps theta_hat).

    theta_hat carries the Q^T-rotated Burgers vectors, so the total curl is
    the mollified measure itself and the rescaled frame-relative strain
    (Q^T beta_eps - I) / (eps sqrt|log eps|) converges to beta.
    """

    Q: np.ndarray
    beta: object
    eps: float
    measure: PolyhedralMeasure
    core_radius: float
    profiles: List[AngularProfile]
    rotated_burgers: List[np.ndarray]
    bound_constant: float = 0.0

    @property
    def amplitude(self) -> float:
        return self.eps * np.sqrt(abs(np.log(self.eps)))

    def _profile_field(self, j: int, pts: np.ndarray) -> np.ndarray:
        """Mollified straight-line profile of segment j, capped inside eps.

        The 1/rho amplitude carries the finite-segment axial factor, so the
        profile fades to the half-line strength at the segment ends instead
        of continuing as an infinite-line ghost past a corner.
        """
        seg = self.measure.segments[j]
        prof = self.profiles[j]
        rel = pts - seg.start
        s = rel @ seg.tangent
        perp = rel - s[:, None] * seg.tangent
        rho = np.linalg.norm(perp, axis=1)
        eps = self.eps
        m = np.where(
            rho >= eps,
            1.0 / np.maximum(rho, 1e-300),
            2.0 * rho / eps**2 - rho**3 / eps**4,
        )
        s1, s2 = -s, seg.length - s
        reff = np.maximum(rho, eps)
        m = m * 0.5 * (
            s2 / np.sqrt(reff**2 + s2**2) - s1 / np.sqrt(reff**2 + s1**2)
        )
        # angular coordinate in the profile frame
        loc = rel @ prof.frame
        theta = np.mod(np.arctan2(loc[:, 1], loc[:, 0]), 2 * np.pi)
        fv = prof.f_interpolator()(theta)
        from .selfenergy import _local_basis

        er, et = _local_basis(theta)
        er = er @ prof.frame.T
        et = et @ prof.frame.T
        field = fv[:, :, None] * et[:, None, :] + prof.g[None, :, None] * er[:, None, :]
        return field * m[:, None, None]

    def theta_hat(self, x) -> np.ndarray:
        """Glued singular field: far kernel sum blended into core profiles.

        Inside the core tubes the per-segment profiles are mixed with
        inverse-square proximity weights, so each profile keeps full
        strength deep in its own tube and hands over to the neighbor only
        near the shared-corner bisector; a smooth radial ramp on the
        distance to the whole support blends the mix into the kernel sum.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        n = len(pts)
        segs = self.measure.segments
        if not segs:
            return np.zeros((3, 3)) if single else np.zeros((n, 3, 3))
        dists = np.empty((len(segs), n))
        for j, seg in enumerate(segs):
            _, L, w, s0, rho2 = _segment_geometry(seg, pts)
            ss = np.clip(s0, 0.0, L)
            dists[j] = np.linalg.norm(
                pts - (seg.start + ss[:, None] * seg.tangent), axis=1
            )
        cutoff = _smoothstep(dists / self.core_radius)
        prox = cutoff / (dists + self.eps) ** 2
        prox_total = prox.sum(axis=0)
        dmin = dists.min(axis=0)
        ramp = _smoothstep(dmin / self.core_radius)

        out = np.zeros((n, 3, 3))
        far_mask = ramp < 1.0
        if np.any(far_mask):
            far = np.zeros((int(far_mask.sum()), 3, 3))
            fpts = pts[far_mask]
            for j, seg in enumerate(segs):
                rot_seg = Segment(seg.start, seg.end, self.rotated_burgers[j])
                far += segment_kernel_field(rot_seg, fpts)
            out[far_mask] += (1.0 - ramp[far_mask])[:, None, None] * far
        denom = np.where(prox_total > 0.0, prox_total, 1.0)
        for j in range(len(segs)):
            wj = np.where(prox_total > 0.0, ramp * prox[j] / denom, 0.0)
            mask = wj > 0.0
            if np.any(mask):
                out[mask] += wj[mask, None, None] * self._profile_field(j, pts[mask])
        return out[0] if single else out

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        inner = (
            np.eye(3)[None, :, :]
            + self.amplitude * self.beta(pts)
            + self.eps * self.theta_hat(pts)
        )
        out = np.einsum("ij,njk->nik", self.Q, inner)
        return out[0] if single else out

    def probe_circulations(self, radius: Optional[float] = None, n: int = 512):
        """Loop circulation of the full strain around each segment midpoint.

        For an admissible recovery these equal eps * b within quadrature
        tolerance once the loop radius exceeds the mollification scale.
        """
        radius = radius or 2.0 * self.eps
        out = []
        for seg in self.measure.segments:
            mid = 0.5 * (seg.start + seg.end)
            circ = loop_circulation(self, mid, seg.tangent, radius, n=n)
            out.append(circ)
        return np.array(out)


def assemble_recovery(
    measure: PolyhedralMeasure,
    Q,
    beta,
    eps: float,
    C: Optional[ElasticTensor] = None,
    core_radius: Optional[float] = None,
    n_theta_profile: int = 128,
    curl_tolerance: float = 1e-8,
) -> RecoveryStrain:
    """Build the recovery strain for a closed (or extended) measure.

    The singular part pairs the far kernel sum with per-segment mollified
    straight-line profiles (Burgers rotated by Q^T, the whole field rotated
    back) through a smooth partition inside disjoint core tubes; the decay
    bound constant sup |theta_hat| (dist + eps) is fitted on probe points
    and stored.  Overlapping tubes of disjoint segments raise.
    """
    Q = np.asarray(Q, dtype=float)
    C = C or ElasticTensor.isotropic(1.0, 0.0)
    if beta is None:
        beta = ConstantField(np.zeros((3, 3)))
    if measure.segments and measure.frank_rule_residual() > 10 * measure.node_tolerance:
        raise ValidationFailure(
            "recovery needs a closed measure; extend it across the boundary first"
        )
    curl_res = verify_curl_free(beta)
    if curl_res > curl_tolerance:
        raise ValidationFailure(
            f"smooth part is not curl-free: probe circulation {curl_res:.3g}"
        )
    segs = measure.segments
    if core_radius is None:
        core_radius = _default_core_radius(measure)
    for i in range(len(segs)):
        for j in range(i + 1, len(segs)):
            if _segments_share_node(measure, i, j):
                continue
            if segment_distance(segs[i], segs[j]) < 2.0 * core_radius:
                raise ValidationFailure(
                    f"core tubes of disjoint segments {i},{j} overlap; "
                    "measure is not dilute enough for the chosen core radius"
                )
    if segs and core_radius <= 2 * eps:
        raise ValidationFailure(
            "core radius must exceed twice the mollification scale"
        )
    profiles, rotated = [], []
    cache: Dict[tuple, AngularProfile] = {}
    for seg in segs:
        b_rot = Q.T @ seg.burgers
        key = tuple(np.round(b_rot, 12)) + tuple(np.round(seg.tangent, 12))
        if key not in cache:
            cache[key] = solve_self_energy(C, b_rot, seg.tangent,
                                           n_theta_profile).profile
        profiles.append(cache[key])
        rotated.append(b_rot)
    strain = RecoveryStrain(
        Q=Q, beta=beta, eps=eps, measure=measure, core_radius=core_radius,
        profiles=profiles, rotated_burgers=rotated,
    )
    if segs:
        strain.bound_constant = _fit_bound_constant(strain)
    return strain


def _segments_share_node(measure: PolyhedralMeasure, i: int, j: int) -> bool:
    tol = measure.node_tolerance
    si, sj = measure.segments[i], measure.segments[j]
    return any(
        np.linalg.norm(p - q) <= tol
        for p in (si.start, si.end)
        for q in (sj.start, sj.end)
    )


def _default_core_radius(measure: PolyhedralMeasure) -> float:
    segs = measure.segments
    if not segs:
        return 1.0
    min_len = min(s.length for s in segs)
    r = 0.25 * min_len
    for i in range(len(segs)):
        for j in range(i + 1, len(segs)):
            if _segments_share_node(measure, i, j):
                continue
            r = min(r, 0.45 * segment_distance(segs[i], segs[j]))
    return r


def _fit_bound_constant(strain: RecoveryStrain, n_probe: int = 200) -> float:
    rng = np.random.default_rng(11)
    diam = max(strain.measure.bounding_diameter(), 1.0)
    center = np.mean(
        [0.5 * (s.start + s.end) for s in strain.measure.segments], axis=0
    )
    pts = center + rng.uniform(-0.8 * diam, 0.8 * diam, size=(n_probe, 3))
    th = strain.theta_hat(pts)
    mags = np.linalg.norm(th, axis=(1, 2))
    dists = np.array(
        [
            min(_point_segment_distance(p, s) for s in strain.measure.segments)
            for p in pts
        ]
    )
    return float(np.max(mags * (dists + strain.eps)))


def _point_segment_distance(p: np.ndarray, seg: Segment) -> float:
    rel = p - seg.start
    s = float(np.clip(rel @ seg.tangent, 0.0, seg.length))
    return float(np.linalg.norm(rel - s * seg.tangent))


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------


def energy_of_strain(
    strain: RecoveryStrain,
    model: EnergyModel,
    domain: Box,
    base_cells: int = 12,
    variation_trigger: float = 0.10,
    inset: float = 0.0,
    cell_budget: int = 4_000_000,
    stability_tolerance: float = 0.02,
) -> dict:
    """Rescaled energy of a recovery strain by octree-adaptive midpoint rule.

    Cells are split while they touch the eps-neighborhood of the measure and
    are wider than eps/2, or while the sampled energy density varies by more
    than the trigger fraction; variation-driven splits stop at a floor that
    scales with the distance to the support (the density decays like a power
    of that distance, so fixed-fraction-of-distance cells give a fixed
    relative shell error).  A final refinement pass that still moves the
    total by more than ``stability_tolerance`` raises.
    """
    eps = strain.eps
    box = domain.inset(inset) if inset else domain
    side = (box.hi - box.lo) / base_cells
    if np.max(side) > np.min(side) * 1.0001:
        n = np.ceil((box.hi - box.lo) / np.min(side)).astype(int)
    else:
        n = np.array([base_cells] * 3)
    grids = [box.lo[k] + (np.arange(n[k]) + 0.5) * (box.hi[k] - box.lo[k]) / n[k]
             for k in range(3)]
    X, Y, Z = np.meshgrid(*grids, indexing="ij")
    centers = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    sizes = np.full(len(centers), float((box.hi[0] - box.lo[0]) / n[0]))

    segs = strain.measure.segments

    def support_distance(pts):
        if not segs:
            return np.full(len(pts), np.inf)
        d = np.full(len(pts), np.inf)
        for seg in segs:
            _, L, w, s0, rho2 = _segment_geometry(seg, pts)
            ss = np.clip(s0, 0.0, L)
            dd = np.linalg.norm(pts - (seg.start + ss[:, None] * seg.tangent), axis=1)
            d = np.minimum(d, dd)
        return d

    def density(pts):
        return np.asarray(model.w(strain(pts)), dtype=float)

    leaves_s: List[np.ndarray] = []
    leaves_w: List[np.ndarray] = []
    totals = []
    total_leaves = 0

    corners = np.array(
        [[sx, sy, sz] for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)]
    )

    def corner_density(cs, ss):
        out = np.empty((len(cs), 8))
        block = 200_000
        for k in range(0, len(cs), block):
            pts = (
                cs[k : k + block][:, None, :]
                + corners[None, :, :] * ss[k : k + block][:, None, None]
            ).reshape(-1, 3)
            out[k : k + block] = density(pts).reshape(-1, 8)
        return out

    active_c, active_s = centers, sizes
    for _ in range(40):
        if total_leaves + len(active_c) > cell_budget:
            raise SolverFailure("quadrature cell budget exhausted")
        w_center = density(active_c)
        dist = support_distance(active_c)
        required = np.maximum(0.5 * eps, 0.25 * dist)
        near = dist <= eps + 0.87 * active_s
        must_split = near & (active_s > np.maximum(0.5 * eps, 1e-12))
        check = np.where(~must_split & (active_s > required))[0]
        split_var = np.zeros(len(active_c), dtype=bool)
        leaf_val = w_center
        if len(check):
            wv = corner_density(active_c[check], active_s[check])
            lo = np.minimum(wv.min(axis=1), w_center[check])
            hi = np.maximum(wv.max(axis=1), w_center[check])
            mean = (wv.sum(axis=1) + w_center[check]) / 9.0
            split_var[check] = (hi - lo) > variation_trigger * (mean + 1e-300)
        split = must_split | split_var
        keep = ~split
        leaves_s.append(active_s[keep])
        leaves_w.append(leaf_val[keep])
        total_leaves += int(keep.sum())
        running = sum(
            float(np.sum(w * s**3)) for w, s in zip(leaves_w, leaves_s)
        ) + float(np.sum(leaf_val[split] * active_s[split] ** 3))
        totals.append(running)
        if not np.any(split):
            break
        half = 0.5 * active_s[split]
        active_c = (
            active_c[split][:, None, :]
            + corners[None, :, :] * active_s[split][:, None, None] * 0.5
        ).reshape(-1, 3)
        active_s = np.repeat(half, 8)
    else:
        raise SolverFailure("quadrature refinement did not terminate")

    if len(totals) >= 2 and totals[-2] > 0:
        drift = abs(totals[-1] - totals[-2]) / max(abs(totals[-2]), 1e-300)
        if drift > stability_tolerance:
            raise SolverFailure(
                f"near-core refinement did not stabilize ({drift:.1%} between levels)"
            )
    raw = totals[-1]
    value = raw / (eps * eps * abs(np.log(eps)))
    return {
        "value": float(value),
        "raw_integral": float(raw),
        "cells": int(total_leaves),
        "levels": len(totals),
        "totals": [float(v) for v in totals],
    }


def limit_functional(
    measure: PolyhedralMeasure,
    beta,
    Q,
    C: ElasticTensor,
    envelope: EnvelopeTable,
    domain: Box,
    bulk_resolution: int = 24,
) -> dict:
    """Bulk quadratic energy plus relaxed line tension of the measure."""
    Q = np.asarray(Q, dtype=float)
    if beta is None:
        beta = ConstantField(np.zeros((3, 3)))
    grids = [
        domain.lo[k]
        + (np.arange(bulk_resolution) + 0.5)
        * (domain.hi[k] - domain.lo[k])
        / bulk_resolution
        for k in range(3)
    ]
    X, Y, Z = np.meshgrid(*grids, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    bv = beta(pts)
    dens = 0.5 * np.einsum("nij,nij->n", C.apply(bv), bv)
    cellvol = domain.volume / bulk_resolution**3
    bulk = float(dens.sum() * cellvol)
    line = 0.0
    for seg in measure.segments:
        line += envelope.interpolate(Q.T @ seg.burgers, seg.tangent) * seg.length
    return {"value": bulk + line, "bulk": bulk, "line": float(line)}


@dataclass
class GammaScanReport:
    eps: List[float]
    F_eps: List[float]
    F0: float
    gaps: List[float]
    monotone_tail: bool
    schedule: dict
    diagnostics: dict

    def to_json_dict(self) -> dict:
        return {
            "eps": self.eps,
            "F_eps": self.F_eps,
            "F0": self.F0,
            "gaps": self.gaps,
            "monotone_tail": self.monotone_tail,
            "schedule": self.schedule,
            "diagnostics": self.diagnostics,
        }


def gamma_scan(
    measure: PolyhedralMeasure,
    beta,
    Q,
    model: EnergyModel,
    eps_list: Sequence[float],
    schedule: ScaleSchedule,
    domain: Box,
    envelope: EnvelopeTable,
    C: Optional[ElasticTensor] = None,
    base_cells: int = 16,
    dilute_domain=None,
) -> GammaScanReport:
    """Evaluate the rescaled energies along eps and compare with the limit.

    Requires an admissible schedule and a measure that is dilute at every
    scanned scale; the gap envelope over the last three grid points must be
    reported (nonincreasing tail flag), not enforced.
    """
    from .dislocations import schedule_admissible

    adm = schedule_admissible(schedule)
    if not adm.admissible:
        raise ValidationFailure(f"schedule not admissible: {adm.reason}")
    C = C or _model_tensor_for(model)
    dd = dilute_domain if dilute_domain is not None else domain
    for eps in eps_list:
        if measure.segments:
            rep = check_dilute(measure, schedule.dilute_params(eps), dd)
            if not rep.ok:
                raise ValidationFailure(
                    f"measure not dilute at eps={eps:g}: {rep.first_violation}"
                )
    F_eps = []
    diagnostics = {"quadrature": []}
    for eps in eps_list:
        core = min(
            (schedule.alpha(eps) * schedule.h(eps)) ** 2,
            _default_core_radius(measure),
        )
        strain = assemble_recovery(measure, Q, beta, eps, C=C, core_radius=core)
        res = energy_of_strain(strain, model, domain, base_cells=base_cells)
        F_eps.append(res["value"])
        diagnostics["quadrature"].append(
            {"eps": eps, "cells": res["cells"], "levels": res["levels"],
             "bound_constant": strain.bound_constant}
        )
    F0 = limit_functional(measure, beta, Q, C, envelope, domain)["value"]
    gaps = [abs(f - F0) for f in F_eps]
    tail = gaps[-3:] if len(gaps) >= 3 else gaps
    monotone = all(tail[i + 1] <= tail[i] + 1e-12 for i in range(len(tail) - 1))
    return GammaScanReport(
        eps=[float(e) for e in eps_list],
        F_eps=[float(v) for v in F_eps],
        F0=float(F0),
        gaps=[float(g) for g in gaps],
        monotone_tail=bool(monotone),
        schedule={"H": schedule.H, "A": schedule.A, "a": schedule.a,
                  "c": schedule.c},
        diagnostics=diagnostics,
    )


def _model_tensor_for(model: EnergyModel) -> ElasticTensor:
    from .cell import _model_tensor

    return _model_tensor(model)
