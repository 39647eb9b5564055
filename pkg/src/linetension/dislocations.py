"""Dislocation measures as finite segment lists over a Burgers lattice.

Covers Frank's-rule balance at junctions, the (h, alpha)-diluteness checks,
half-space extension by reflection, mollified curl densities, and the
logarithmic-power scale schedules that keep the diluteness conditions
compatible with the core radius.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad

from .errors import ValidationFailure


# ---------------------------------------------------------------------------
# lattice and segments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BurgersLattice:
    """Discrete lattice of admissible Burgers vectors.

    Normalized so that the shortest nonzero lattice vector has length 1.
    """

    generators: np.ndarray  # (k, 3), k in {1, 2, 3}

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.generators, dtype=float))
        if g.shape[0] < 1 or g.shape[0] > 3 or g.shape[1] != 3:
            raise ValidationFailure("lattice needs 1 to 3 generator 3-vectors")
        if np.linalg.matrix_rank(g, tol=1e-12) < g.shape[0]:
            raise ValidationFailure("lattice generators must be linearly independent")
        object.__setattr__(self, "generators", g)
        m = self.minimal_norm()
        if abs(m - 1.0) > 1e-9:
            raise ValidationFailure(
                f"shortest nonzero lattice vector has length {m:.3g}, expected 1"
            )

    @classmethod
    def cubic(cls) -> "BurgersLattice":
        return cls(np.eye(3))

    def minimal_norm(self) -> float:
        g = self.generators
        smin = np.linalg.svd(g, compute_uv=False).min()
        bound = int(np.ceil(min(np.linalg.norm(g, axis=1)) / smin)) + 1
        rng = range(-bound, bound + 1)
        best = np.inf
        for coeffs in itertools.product(*[rng] * g.shape[0]):
            if all(c == 0 for c in coeffs):
                continue
            best = min(best, float(np.linalg.norm(np.asarray(coeffs) @ g)))
        return best

    def coefficients(self, b, tol: float = 1e-9) -> np.ndarray:
        """Integer coordinates of ``b`` in the lattice; raises if not a member."""
        b = np.asarray(b, dtype=float)
        m, res, _, _ = np.linalg.lstsq(self.generators.T, b, rcond=None)
        if np.linalg.norm(self.generators.T @ m - b) > tol:
            raise ValidationFailure(f"{b.tolist()} is not in the lattice span")
        mi = np.rint(m)
        if np.max(np.abs(m - mi)) > tol:
            raise ValidationFailure(f"{b.tolist()} is not a lattice vector")
        return mi.astype(int)

    def contains(self, b, tol: float = 1e-9) -> bool:
        try:
            self.coefficients(b, tol)
            return True
        except ValidationFailure:
            return False

    def vector(self, coeffs) -> np.ndarray:
        return np.asarray(coeffs, dtype=float) @ self.generators

    def ball(self, radius: float, include_zero: bool = False) -> np.ndarray:
        """All lattice vectors with |b| <= radius, sorted by norm then lexicographically."""
        g = self.generators
        smin = np.linalg.svd(g, compute_uv=False).min()
        bound = int(np.ceil(radius / smin)) + 1
        rng = range(-bound, bound + 1)
        out = []
        for coeffs in itertools.product(*[rng] * g.shape[0]):
            v = np.asarray(coeffs, dtype=float) @ g
            n = np.linalg.norm(v)
            if n <= radius + 1e-12 and (include_zero or n > 1e-12):
                out.append(v)
        out.sort(key=lambda v: (round(np.linalg.norm(v), 12), tuple(v)))
        return np.array(out) if out else np.zeros((0, 3))


@dataclass(frozen=True)
class Segment:
    """Oriented straight segment with a Cartesian Burgers vector."""

    start: np.ndarray
    end: np.ndarray
    burgers: np.ndarray

    def __post_init__(self):
        for name in ("start", "end", "burgers"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValidationFailure(f"segment {name} must be a finite 3-vector")
            object.__setattr__(self, name, v)
        if self.length <= 0.0:
            raise ValidationFailure("segment must have positive length")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def tangent(self) -> np.ndarray:
        return (self.end - self.start) / self.length

    def reversed(self) -> "Segment":
        return Segment(self.end, self.start, -self.burgers)

    def point(self, s: float) -> np.ndarray:
        return self.start + s * (self.end - self.start)


def segment_distance(a: Segment, b: Segment) -> float:
    """Euclidean distance between two segments (standard clamped closed form)."""
    p, u = a.start, a.end - a.start
    q, v = b.start, b.end - b.start
    w = p - q
    A, B, Cc = u @ u, u @ v, v @ v
    D, E = u @ w, v @ w
    den = A * Cc - B * B
    s = 0.0 if den < 1e-14 * A * Cc + 1e-300 else np.clip((B * E - Cc * D) / den, 0, 1)
    t = (B * s + E) / Cc if Cc > 0 else 0.0
    t = np.clip(t, 0.0, 1.0)
    s = np.clip((B * t - D) / A, 0.0, 1.0) if A > 0 else 0.0
    return float(np.linalg.norm(p + s * u - (q + t * v)))


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HalfSpace:
    """Interior is {x : normal . x < offset}; ``normal`` is normalized."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        nn = np.linalg.norm(n)
        if nn == 0:
            raise ValidationFailure("half-space normal must be nonzero")
        object.__setattr__(self, "normal", n / nn)
        object.__setattr__(self, "offset", float(self.offset) / nn)

    def signed_distance(self, x) -> np.ndarray:
        """Negative inside, zero on the boundary, positive outside."""
        return np.asarray(x, dtype=float) @ self.normal - self.offset

    def reflect(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x - 2.0 * np.outer(self.signed_distance(x), self.normal).reshape(x.shape)

    def boundary_normal(self, x) -> np.ndarray:
        return self.normal

    def incidence_angle(self, point, direction) -> float:
        """Angle between a direction and the tangent plane at a boundary point."""
        d = np.asarray(direction, dtype=float)
        return float(np.arcsin(min(1.0, abs(d @ self.normal) / np.linalg.norm(d))))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box domain, interior is the open box."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValidationFailure("box needs lo < hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def signed_distance(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = np.abs(pts - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        out = outside + inside
        return float(out[0]) if single else out

    def contains(self, x) -> np.ndarray:
        return self.signed_distance(x) < 0

    def boundary_normal(self, x) -> np.ndarray:
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = np.abs(np.asarray(x, dtype=float) - center) - half
        n = np.zeros(3)
        k = int(np.argmax(q))
        n[k] = np.sign(x[k] - center[k]) or 1.0
        return n

    def incidence_angle(self, point, direction) -> float:
        d = np.asarray(direction, dtype=float)
        n = self.boundary_normal(point)
        return float(np.arcsin(min(1.0, abs(d @ n) / np.linalg.norm(d))))

    def inset(self, margin: float) -> "Box":
        return Box(self.lo + margin, self.hi - margin)


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ValidationFailure("ball radius must be positive")

    def signed_distance(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.linalg.norm(x - self.center, axis=-1) - self.radius
        return out if out.size > 1 else float(out[0])

    def boundary_normal(self, x) -> np.ndarray:
        v = np.asarray(x, dtype=float) - self.center
        return v / np.linalg.norm(v)

    def incidence_angle(self, point, direction) -> float:
        d = np.asarray(direction, dtype=float)
        n = self.boundary_normal(point)
        return float(np.arcsin(min(1.0, abs(d @ n) / np.linalg.norm(d))))


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------


@dataclass
class PolyhedralMeasure:
    """Finite dislocation measure: a list of segments over a Burgers lattice."""

    segments: List[Segment]
    lattice: BurgersLattice = field(default_factory=BurgersLattice.cubic)
    node_tolerance: Optional[float] = None

    def __post_init__(self):
        for seg in self.segments:
            if not self.lattice.contains(seg.burgers):
                raise ValidationFailure(
                    f"Burgers vector {seg.burgers.tolist()} not in the lattice"
                )
        if self.node_tolerance is None:
            self.node_tolerance = 1e-9 * max(self.bounding_diameter(), 1e-9)

    def bounding_diameter(self) -> float:
        if not self.segments:
            return 0.0
        pts = np.array([p for s in self.segments for p in (s.start, s.end)])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def weighted_length(self, power: int = 1) -> float:
        """Sum of |b|^power H^1(gamma) over segments; power 1 is the total mass."""
        if power not in (1, 2):
            raise ValidationFailure("power must be 1 or 2")
        return float(
            sum(np.linalg.norm(s.burgers) ** power * s.length for s in self.segments)
        )

    def nodes(self) -> List[Tuple[np.ndarray, List[Tuple[int, int]]]]:
        """Cluster endpoints within node_tolerance.

        Returns (position, [(segment index, +1 for start / -1 for end), ...]).
        """
        clusters: List[Tuple[np.ndarray, List[Tuple[int, int]]]] = []
        for idx, seg in enumerate(self.segments):
            for pt, sign in ((seg.start, +1), (seg.end, -1)):
                for cpos, members in clusters:
                    if np.linalg.norm(pt - cpos) <= self.node_tolerance:
                        members.append((idx, sign))
                        break
                else:
                    clusters.append((pt.copy(), [(idx, sign)]))
        return clusters

    def frank_rule_residual(self, domain=None) -> float:
        """Max node imbalance |sum of outgoing b - sum of incoming b|.

        Nodes lying on the boundary of ``domain`` (within node_tolerance)
        are exempt; zero iff the measure is divergence-free.
        """
        worst = 0.0
        for pos, members in self.nodes():
            if domain is not None and abs(domain.signed_distance(pos)) <= max(
                self.node_tolerance, 1e-12
            ):
                continue
            total = np.zeros(3)
            for idx, sign in members:
                total += sign * self.segments[idx].burgers
            worst = max(worst, float(np.linalg.norm(total)))
        return worst

    def to_json_dict(self) -> dict:
        return {
            "lattice": self.lattice.generators.tolist(),
            "unit": "normalized",
            "segments": [
                {
                    "start": s.start.tolist(),
                    "end": s.end.tolist(),
                    "burgers": self.lattice.coefficients(s.burgers).tolist(),
                }
                for s in self.segments
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "PolyhedralMeasure":
        try:
            lattice = BurgersLattice(np.array(data["lattice"], dtype=float))
            segs = [
                Segment(
                    np.array(s["start"], dtype=float),
                    np.array(s["end"], dtype=float),
                    lattice.vector(s["burgers"]),
                )
                for s in data["segments"]
            ]
        except KeyError as exc:
            raise ValidationFailure(f"measure JSON missing key {exc}")
        return cls(segments=segs, lattice=lattice)

    @classmethod
    def from_json_file(cls, path) -> "PolyhedralMeasure":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationFailure(
                    f"malformed measure JSON at line {exc.lineno} column {exc.colno}: "
                    f"{exc.msg}"
                )
        return cls.from_json_dict(data)


def square_loop(
    side: float = 1.0,
    burgers=(0.0, 0.0, 1.0),
    center=(0.0, 0.0, 0.0),
    plane_axes=(0, 1),
    lattice: Optional[BurgersLattice] = None,
) -> PolyhedralMeasure:
    """Closed square loop fixture with a constant Burgers vector."""
    lattice = lattice or BurgersLattice.cubic()
    c = np.asarray(center, dtype=float)
    i, j = plane_axes
    ei, ej = np.zeros(3), np.zeros(3)
    ei[i], ej[j] = 1.0, 1.0
    h = side / 2.0
    corners = [c - h * ei - h * ej, c + h * ei - h * ej, c + h * ei + h * ej,
               c - h * ei + h * ej]
    b = np.asarray(burgers, dtype=float)
    segs = [Segment(corners[k], corners[(k + 1) % 4], b) for k in range(4)]
    return PolyhedralMeasure(segments=segs, lattice=lattice)


# ---------------------------------------------------------------------------
# diluteness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiluteParams:
    h: float
    alpha: float

    def __post_init__(self):
        if self.h <= 0 or not (0 < self.alpha < 1):
            raise ValidationFailure("need h > 0 and 0 < alpha < 1")


@dataclass
class DiluteReport:
    ok: bool
    violations: List[str]

    @property
    def first_violation(self) -> Optional[str]:
        return self.violations[0] if self.violations else None


def check_dilute(
    measure: PolyhedralMeasure, params: DiluteParams, domain=None
) -> DiluteReport:
    """Check the four separation conditions of an (h, alpha)-dilute measure.

    (a) every segment at least h long; (b) disjoint segments at distance
    >= alpha h; (c) segments sharing an endpoint meet at angle >= alpha;
    (d) transversal single-point boundary incidence, interior segments at
    distance >= h alpha from the boundary.  Violations are reported, not
    thrown.
    """
    if measure.frank_rule_residual(domain) > 10 * measure.node_tolerance:
        raise ValidationFailure(
            "measure is not divergence-free relative to the domain"
        )
    h, alpha = params.h, params.alpha
    tol = measure.node_tolerance
    violations: List[str] = []
    segs = measure.segments

    for i, s in enumerate(segs):
        if s.length < h - 1e-12:
            violations.append(f"(a) segment {i} has length {s.length:.4g} < h")

    shared = {}
    for pos, members in measure.nodes():
        for (ia, sa), (ib, sb) in itertools.combinations(members, 2):
            shared[(min(ia, ib), max(ia, ib))] = True
            da = sa * segs[ia].tangent
            db = sb * segs[ib].tangent
            ang = float(np.arccos(np.clip(da @ db, -1.0, 1.0)))
            if ang < alpha - 1e-12:
                violations.append(
                    f"(c) segments {ia},{ib} meet at angle {ang:.4g} < alpha"
                )

    for i, j in itertools.combinations(range(len(segs)), 2):
        if (i, j) in shared:
            continue
        d = segment_distance(segs[i], segs[j])
        if d < alpha * h - 1e-12:
            violations.append(f"(b) segments {i},{j} at distance {d:.4g} < alpha h")

    if domain is not None:
        for i, s in enumerate(segs):
            sd = np.array([domain.signed_distance(s.start),
                           domain.signed_distance(s.end)])
            touches = np.any(np.abs(sd) <= tol) or sd[0] * sd[1] < 0
            if touches:
                crossings = int(np.sum(np.abs(sd) <= tol)) + int(sd[0] * sd[1] < 0)
                if crossings > 1:
                    violations.append(f"(d) segment {i} meets the boundary twice")
                    continue
                if sd[0] * sd[1] < 0:
                    lam = sd[0] / (sd[0] - sd[1])
                    point = s.point(float(lam))
                else:
                    point = s.start if abs(sd[0]) <= tol else s.end
                ang = domain.incidence_angle(point, s.tangent)
                if ang < alpha - 1e-12:
                    violations.append(
                        f"(d) segment {i} boundary incidence angle {ang:.4g} < alpha"
                    )
            else:
                dist = _segment_boundary_distance(s, domain)
                if dist < h * alpha - 1e-12:
                    violations.append(
                        f"(d) interior segment {i} at distance {dist:.4g} "
                        "< h alpha from the boundary"
                    )
    return DiluteReport(ok=not violations, violations=violations)


def _segment_boundary_distance(seg: Segment, domain) -> float:
    ss = np.linspace(0.0, 1.0, 33)
    pts = seg.start[None, :] + ss[:, None] * (seg.end - seg.start)[None, :]
    return float(np.min(np.abs(domain.signed_distance(pts))))


# ---------------------------------------------------------------------------
# scale schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleSchedule:
    """Logarithmic-power schedule h = H |log eps|^-a, alpha = A |log eps|^-c."""

    H: float
    A: float
    a: float
    c: float

    def __post_init__(self):
        if self.H <= 0 or self.A <= 0:
            raise ValidationFailure("amplitudes H, A must be positive")
        if self.a < 0 or self.c < 0:
            raise ValidationFailure("exponents a, c must be nonnegative")

    def h(self, eps: float) -> float:
        return self.H * abs(np.log(eps)) ** (-self.a)

    def alpha(self, eps: float) -> float:
        return self.A * abs(np.log(eps)) ** (-self.c)

    def dilute_params(self, eps: float) -> DiluteParams:
        return DiluteParams(h=self.h(eps), alpha=min(self.alpha(eps), 1 - 1e-12))


@dataclass
class AdmissibilityReport:
    admissible: bool
    reason: str
    exponent_combination: float  # 4c + 6a
    amplitude_combination: float  # A^4 H^6
    separation_ratio_at_1e_3: float  # log(1/(alpha h)) / |log eps| at eps = 1e-3


def schedule_admissible(schedule: ScaleSchedule) -> AdmissibilityReport:
    """Decide whether alpha^4 h^6 |log eps| eventually exceeds 1.

    For the logarithmic-power family this reduces to 4c + 6a < 1 (or equal
    to 1 with A^4 H^6 > 1); the slow-decay condition holds automatically.
    """
    s = schedule
    combo = 4 * s.c + 6 * s.a
    amp = s.A**4 * s.H**6
    eps = 1e-3
    sep = float(np.log(1.0 / (s.alpha(eps) * s.h(eps))) / abs(np.log(eps)))
    if s.a == 0 or s.c == 0:
        return AdmissibilityReport(
            False, "exponents a, c must be positive so h, alpha -> 0",
            combo, amp, sep,
        )
    if combo < 1.0:
        return AdmissibilityReport(
            True, f"4c + 6a = {combo:g} < 1", combo, amp, sep
        )
    if combo == 1.0 and amp > 1.0:
        return AdmissibilityReport(
            True, f"4c + 6a = 1 with A^4 H^6 = {amp:g} > 1", combo, amp, sep
        )
    return AdmissibilityReport(
        False, f"4c + 6a = {combo:g} with A^4 H^6 = {amp:g}", combo, amp, sep
    )


# ---------------------------------------------------------------------------
# mollifier
# ---------------------------------------------------------------------------


def _bump_radial(r):
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def _bump_normalization() -> float:
    val, _ = quad(lambda r: 4 * np.pi * r * r * np.exp(-1.0 / (1.0 - r * r)), 0, 1)
    return 1.0 / val


_BUMP_NORM = _bump_normalization()


@dataclass(frozen=True)
class Mollifier:
    """Standard smooth radial bump supported in the ball of radius ``scale``."""

    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationFailure("mollifier scale must be positive")

    def value(self, x) -> np.ndarray:
        """phi_eps(x) = eps^-3 phi(x / eps), unit total integral."""
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(np.atleast_2d(x), axis=-1) / self.scale
        out = _BUMP_NORM * _bump_radial(r) / self.scale**3
        return float(out[0]) if x.ndim == 1 else out

    @property
    def sup_bound_constant(self) -> float:
        """C with phi <= C chi_B1 / |B1| for the unit-scale profile."""
        return _BUMP_NORM * np.exp(-1.0) * (4.0 * np.pi / 3.0)

    def integral_check(self, n: int = 200) -> float:
        r = np.linspace(0.0, 1.0, n)
        vals = 4 * np.pi * r * r * _bump_radial(r) * _BUMP_NORM
        return float(np.trapz(vals, r))


def mollified_curl_density(
    measure: PolyhedralMeasure, moll: Mollifier, x
) -> np.ndarray:
    """(mu * phi_eps)(x): 3x3 density from per-segment line quadrature.

    Vanishes whenever x is farther than the mollifier scale from the
    support; linear in the measure.
    """
    x = np.asarray(x, dtype=float)
    eps = moll.scale
    total = np.zeros((3, 3))
    nodes, weights = np.polynomial.legendre.leggauss(32)
    for seg in measure.segments:
        t, L = seg.tangent, seg.length
        w = x - seg.start
        s0 = float(w @ t)
        rho2 = float(w @ w) - s0 * s0
        if rho2 >= eps * eps:
            continue
        half = np.sqrt(eps * eps - rho2)
        lo, hi = max(0.0, s0 - half), min(L, s0 + half)
        if hi <= lo:
            continue
        ss = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        pts = x[None, :] - (seg.start[None, :] + ss[:, None] * t[None, :])
        integral = 0.5 * (hi - lo) * float(np.sum(weights * moll.value(pts)))
        total += integral * np.outer(seg.burgers, t)
    return total


# ---------------------------------------------------------------------------
# half-space extension by reflection
# ---------------------------------------------------------------------------


@dataclass
class ExtensionResult:
    measure: PolyhedralMeasure
    mass_ratio: float
    n_connectors: int


def _split_at_level(seg: Segment, level_fn, tol: float) -> List[Segment]:
    """Split a segment where ``level_fn`` changes sign."""
    v0, v1 = level_fn(seg.start), level_fn(seg.end)
    if v0 * v1 >= -tol * tol or min(abs(v0), abs(v1)) <= tol:
        return [seg]
    lam = v0 / (v0 - v1)
    mid = seg.point(float(lam))
    return [Segment(seg.start, mid, seg.burgers), Segment(mid, seg.end, seg.burgers)]


def extend_by_reflection(
    measure: PolyhedralMeasure,
    halfspace: HalfSpace,
    layer_depth: Optional[float] = None,
    connector_min_length: float = 0.0,
    angle_tolerance: float = 1e-6,
) -> ExtensionResult:
    """Extend a measure on a half-space to a globally divergence-free one.

    Strand components touching the boundary plane are mirrored across it
    (with reversed orientation so every plane node balances).  With a finite
    ``layer_depth`` only the boundary layer is mirrored and the truncated
    mirror strands are closed through straight connectors to a single hub
    outside the domain; connector lengths respect ``connector_min_length``.
    Segments strictly outside the half-space are discarded first.
    """
    tol = measure.node_tolerance

    kept: List[Segment] = []
    for seg in measure.segments:
        for piece in _split_at_level(seg, halfspace.signed_distance, tol):
            sd = max(
                float(halfspace.signed_distance(piece.start)),
                float(halfspace.signed_distance(piece.end)),
            )
            mid_sd = float(halfspace.signed_distance(0.5 * (piece.start + piece.end)))
            if mid_sd > tol and sd > tol:
                continue  # strictly outside
            kept.append(piece)
    clipped = PolyhedralMeasure(kept, measure.lattice, tol)

    # tangential crossings are ill-posed for reflection
    for i, seg in enumerate(clipped.segments):
        sd = np.array([halfspace.signed_distance(seg.start),
                       halfspace.signed_distance(seg.end)])
        if np.any(np.abs(sd) <= tol):
            ang = halfspace.incidence_angle(None, seg.tangent)
            if ang < angle_tolerance:
                raise ValidationFailure(
                    f"segment {i} crosses the boundary tangentially "
                    f"(angle {ang:.3g})"
                )

    if clipped.frank_rule_residual(domain=halfspace) > 10 * tol:
        raise ValidationFailure(
            "interior nodes of the measure are not Frank-balanced"
        )

    nodes = clipped.nodes()
    parent = list(range(len(nodes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    seg_nodes = {}
    for ni, (_, members) in enumerate(nodes):
        for idx, _ in members:
            seg_nodes.setdefault(idx, []).append(ni)
    for ids in seg_nodes.values():
        for k in ids[1:]:
            parent[find(k)] = find(ids[0])

    touching_roots = {
        find(ni)
        for ni, (pos, _) in enumerate(nodes)
        if abs(halfspace.signed_distance(pos)) <= tol
    }
    mirrored_indices = {
        idx
        for idx, ids in seg_nodes.items()
        if any(find(ni) in touching_roots for ni in ids)
    }

    out_segments = list(clipped.segments)
    n_connectors = 0
    loose: List[Tuple[np.ndarray, np.ndarray]] = []  # (point, residual burgers)

    depth_fn = lambda x: -halfspace.signed_distance(x)  # positive inside

    mirrored: List[Segment] = []
    for idx in sorted(mirrored_indices):
        seg = clipped.segments[idx]
        pieces = [seg]
        if layer_depth is not None:
            pieces = _split_at_level(
                seg, lambda x: depth_fn(x) - layer_depth, tol
            )
        for piece in pieces:
            d0, d1 = depth_fn(piece.start), depth_fn(piece.end)
            if layer_depth is not None and min(d0, d1) > layer_depth + tol:
                continue  # deeper than the mirrored layer
            mirrored.append(
                Segment(
                    halfspace.reflect(piece.start),
                    halfspace.reflect(piece.end),
                    -piece.burgers,
                )
            )
    out_segments.extend(mirrored)

    if layer_depth is not None and mirrored:
        probe = PolyhedralMeasure(mirrored, measure.lattice, tol)
        for pos, members in probe.nodes():
            if abs(halfspace.signed_distance(pos)) <= tol:
                continue
            residual = np.zeros(3)
            for idx, sign in members:
                residual += sign * mirrored[idx].burgers
            if np.linalg.norm(residual) > 10 * tol:
                loose.append((pos, residual))

    if loose:
        pts = np.array([p for p, _ in loose])
        centroid = pts.mean(axis=0)
        spread = max(float(np.max(np.linalg.norm(pts - centroid, axis=1))), 1.0)
        reach = max(connector_min_length, (layer_depth or 0.0)) + 2.0 * spread
        hub = centroid + reach * halfspace.normal
        hub += halfspace.normal * max(
            0.0, tol - float(halfspace.signed_distance(hub))
        )
        for pos, residual in loose:
            # connector from the loose end to the hub cancels the residual
            out_segments.append(Segment(pos, hub, -residual))
            n_connectors += 1

    extended = PolyhedralMeasure(out_segments, measure.lattice, tol)
    base = clipped.weighted_length(1)
    ratio = extended.weighted_length(1) / base if base > 0 else 1.0
    return ExtensionResult(measure=extended, mass_ratio=ratio,
                           n_connectors=n_connectors)
