"""Polynomial witnesses: maps C^n -> C^q fitted so that each stage stays close
to the previous map on an inner compact, blows past a prescribed modulus on the
current labyrinth pieces, and keeps full rank on checkpoint samples.

The target sets (ball plus finitely many totally real hyperplane disks) leave
room for polynomial separation: a degree-d polynomial can be ~(inner/gamma
radius ratio)^d smaller on the inner ball than on the pieces, which bounds the
achievable blow-up-to-drift ratio per stage. Fits use monomial features in
z/scale, iteratively reweighted ridge least squares with a hinge pull on
below-floor piece samples, and a rank margin check with small random
perturbation retries. Failure reports the best deviation/floor/margin seen so
callers can adjust stage layout instead of guessing.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegreeExhaustedError, InvalidDimensionError
from .geometry import from_complex, to_complex
from .jsonio import SCHEMA_VERSION, complex_pairs, dump_json, from_complex_pairs, load_json, require_schema
from .labyrinth import Labyrinth, build_sparse_labyrinth, disk_samples
from .sampling import ball_points, derive_seed, rng_for, sphere_points

log = logging.getLogger(__name__)


def monomial_exponents(n: int, degree: int) -> np.ndarray:
    """Exponent tuples of total degree <= degree, graded lexicographic."""
    if n < 1 or degree < 0:
        raise ValueError("need n >= 1 and degree >= 0")
    out = []
    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + [remaining])
            return
        for k in range(remaining, -1, -1):
            rec(prefix + [k], remaining - k, slots - 1)
    for total in range(degree + 1):
        rec([], total, n)
    return np.array(out, dtype=int)


def monomial_features(Z: np.ndarray, exps: np.ndarray, scale: float) -> np.ndarray:
    """Vandermonde block: features[i, j] = prod_k (Z[i,k]/scale)^exps[j,k]."""
    Z = np.atleast_2d(np.asarray(Z, dtype=complex)) / scale
    m, n = Z.shape
    dmax = int(exps.max(initial=0))
    powers = np.ones((n, m, dmax + 1), dtype=complex)
    for d in range(1, dmax + 1):
        powers[:, :, d] = powers[:, :, d - 1] * Z.T
    feats = np.ones((m, len(exps)), dtype=complex)
    for k in range(n):
        feats *= powers[k, :, exps[:, k]].T
    return feats


@dataclass
class PolyMap:
    """Polynomial map C^n -> C^q with monomial coefficients in z/scale."""

    n: int
    q: int
    degree: int
    scale: float
    coeffs: np.ndarray                  # (q, M) complex
    exps: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.q < 1 or self.q >= self.n:
            raise InvalidDimensionError(
                f"need 1 <= q < n, got q={self.q}, n={self.n}")
        if self.exps is None:
            self.exps = monomial_exponents(self.n, self.degree)
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=complex))
        if self.coeffs.shape != (self.q, len(self.exps)):
            raise ValueError(
                f"coeffs shape {self.coeffs.shape} != (q, {len(self.exps)})")

    @classmethod
    def seed_map(cls, n: int, q: int, scale: float = 1.0) -> "PolyMap":
        """The first q coordinate functions; the trivial nonsingular start."""
        exps = monomial_exponents(n, 1)
        coeffs = np.zeros((q, len(exps)), dtype=complex)
        for j in range(q):
            row = np.zeros(n, dtype=int)
            row[j] = 1
            idx = int(np.flatnonzero((exps == row).all(axis=1))[0])
            coeffs[j, idx] = scale     # cancels the 1/scale in the features
        return cls(n=n, q=q, degree=1, scale=scale, coeffs=coeffs, exps=exps)

    # -- evaluation ----------------------------------------------------------------

    def _as_complex(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts)
        if pts.dtype == complex:
            return np.atleast_2d(pts)
        return to_complex(np.atleast_2d(pts))

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        """Values, shape (k, q) complex. Accepts interleaved real or complex."""
        Z = self._as_complex(pts)
        feats = monomial_features(Z, self.exps, self.scale)
        return feats @ self.coeffs.T

    def jacobian(self, pts: np.ndarray) -> np.ndarray:
        """Complex Jacobian d f_i / d z_k, shape (k, q, n)."""
        Z = self._as_complex(pts)
        m = Z.shape[0]
        J = np.zeros((m, self.q, self.n), dtype=complex)
        for k in range(self.n):
            dex = self.exps.copy()
            keep = dex[:, k] > 0
            dex[:, k] = np.maximum(dex[:, k] - 1, 0)
            factor = self.exps[:, k] / self.scale
            feats = monomial_features(Z, dex, self.scale) * factor[None, :]
            J[:, :, k] = (feats[:, keep] @ self.coeffs[:, keep].T)
        return J

    # -- serialization -------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "poly_map",
            "n": self.n,
            "q": self.q,
            "degree": int(self.degree),
            "scale": float(self.scale),
            "coeffs": [complex_pairs(row) for row in self.coeffs],
        }

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def from_dict(cls, doc: dict) -> "PolyMap":
        require_schema(doc, "poly_map")
        coeffs = np.array([from_complex_pairs(row) for row in doc["coeffs"]])
        return cls(n=doc["n"], q=doc["q"], degree=doc["degree"],
                   scale=doc["scale"], coeffs=coeffs)

    @classmethod
    def load(cls, path) -> "PolyMap":
        return cls.from_dict(load_json(path))


# -- sampled sets ------------------------------------------------------------------

def sample_pieces(lab: Labyrinth, seed: int, per_unit_area: float = 60.0,
                  min_per_piece: int = 8) -> np.ndarray:
    """Points on the labyrinth pieces, count per piece proportional to its
    (2n-1)-dimensional measure, uniform over each disk."""
    dim = 2 * lab.n
    rng = rng_for(seed, "piece-samples")
    out = []
    for p in lab.pieces:
        area = p.radius ** (dim - 1)
        count = max(min_per_piece, int(per_unit_area * area))
        out.append(disk_samples(p, count, rng))
    return np.vstack(out) if out else np.zeros((0, dim))


def inner_compact_samples(n: int, radius: float, seed: int,
                          count: int | None = None) -> np.ndarray:
    """Ball samples with extra weight on the boundary sphere, where the
    maximum of a holomorphic function on the ball lives."""
    dim = 2 * n
    count = count or 50 * n * n
    interior = ball_points(dim, count, radius, derive_seed(seed, "inner"))
    boundary = sphere_points(dim, count, radius, derive_seed(seed, "innersph"))
    return np.vstack([interior, boundary])


# -- diagnostics -------------------------------------------------------------------

def min_modulus(poly: PolyMap, pts: np.ndarray) -> float:
    if len(pts) == 0:
        return math.inf
    vals = poly.evaluate(pts)
    return float(np.min(np.linalg.norm(vals, axis=1)))


def max_deviation(poly: PolyMap, prev: PolyMap, pts: np.ndarray) -> float:
    if len(pts) == 0:
        return 0.0
    d = poly.evaluate(pts) - prev.evaluate(pts)
    return float(np.max(np.linalg.norm(d, axis=1)))


def rank_margin(poly: PolyMap, pts: np.ndarray) -> float:
    """Smallest singular value of the complex Jacobian over the points; for
    q = 1 this is the gradient norm. The map is an eta-nonsingular witness on
    a region when this stays above eta there."""
    if len(pts) == 0:
        return math.inf
    J = poly.jacobian(pts)
    sv = np.linalg.svd(J, compute_uv=False)
    return float(np.min(sv[:, -1]))


@dataclass
class RankCheck:
    """Outcome of a pointwise full-rank test: margin is the worst smallest
    singular value found, witness the sample that achieved it."""

    ok: bool
    eta: float
    margin: float
    witness: np.ndarray | None

    def __bool__(self) -> bool:
        return self.ok


def rank_check(poly: PolyMap, pts, eta: float) -> RankCheck:
    """True iff the complex Jacobian keeps smallest singular value >= eta at
    every sample (gradient norm for q = 1); on failure the worst sample is
    returned as the witness."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    pts = np.asarray(_pts(pts), dtype=float)
    if len(pts) == 0:
        return RankCheck(ok=True, eta=eta, margin=math.inf, witness=None)
    J = poly.jacobian(pts)
    sv = np.linalg.svd(J, compute_uv=False)[:, -1]
    worst = int(np.argmin(sv))
    return RankCheck(ok=bool(sv[worst] >= eta), eta=eta,
                     margin=float(sv[worst]), witness=pts[worst].copy())


# -- fitting -----------------------------------------------------------------------

@dataclass
class StageReport:
    stage: int
    degree: int
    floor: float              # min |f| over gamma samples
    deviation: float          # max |f - f_prev| over the inner compact
    margin: float             # rank margin over checkpoints
    blow_up: float            # requested C
    drift: float              # requested delta
    perturbations: int
    gamma_count: int

    def to_dict(self) -> dict:
        return {k: (int(v) if isinstance(v, (int, np.integer)) else float(v))
                for k, v in self.__dict__.items()}


@dataclass
class FitReport:
    n: int
    q: int
    stages: list
    total_drift: float        # sum of requested deltas
    certified_lengths: list   # per stage: c_floor * total_enlargement ledger
    seed: int

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "fit_report",
            "n": self.n,
            "q": self.q,
            "stages": [s.to_dict() for s in self.stages],
            "total_drift": float(self.total_drift),
            "certified_lengths": [float(v) for v in self.certified_lengths],
            "seed": int(self.seed),
        }

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)


def _degree_ladder(cap: int) -> list:
    ladder = [d for d in (6, 10, 14, 18, 22, 26, 30, 36, 42, 50) if d < cap]
    return ladder + [cap]


def fit_step(prev: PolyMap, inner: np.ndarray, gamma: np.ndarray,
             blow_up: float, drift: float, degree_cap: int = 30,
             eta: float = 1e-3, seed: int = 0,
             checkpoints: np.ndarray | None = None,
             scale: float | None = None,
             growth_radius: float | None = None,
             gamma_check: np.ndarray | None = None,
             inner_check: np.ndarray | None = None) -> tuple:
    """One stage: return (poly, StageReport).

    Contract: |poly - prev| <= drift on `inner`, |poly| >= blow_up on `gamma`,
    rank margin >= eta on inner+gamma+checkpoints. Escalates the degree up to
    degree_cap and raises DegreeExhaustedError with the best shortfall seen.
    Feasibility is checked first: if prev already satisfies the stage, it is
    returned unchanged (the zero-drift solution). `gamma_check` / `inner_check`
    hold extra validation-only samples (typically denser and from fresh seeds),
    guarding against separators that clear the fitted samples but dip or spike
    between them; the reported floor and deviation are measured on the unions.
    """
    if degree_cap < prev.degree:
        raise ValueError(f"degree cap {degree_cap} below the previous map's "
                         f"degree {prev.degree}")
    inner = np.asarray(_pts(inner), dtype=float)
    gamma = np.asarray(_pts(gamma), dtype=float)
    if gamma_check is None or len(_pts(gamma_check)) == 0:
        gamma_check = gamma
    else:
        gamma_check = np.vstack([gamma, np.asarray(_pts(gamma_check), dtype=float)])
    if inner_check is None or len(_pts(inner_check)) == 0:
        inner_val = inner
    else:
        inner_val = np.vstack([inner, np.asarray(_pts(inner_check), dtype=float)])
    check_pts = [inner_val, gamma]
    if checkpoints is not None and len(checkpoints):
        check_pts.append(np.asarray(checkpoints, dtype=float))
    check_all = np.vstack([p for p in check_pts if len(p)])

    if len(gamma) == 0 or min_modulus(prev, gamma_check) >= blow_up:
        # Already past the floor (deeper stages inherit it from the outward
        # growth of earlier lifts); at most repair the rank margin in place.
        poly, pert = _rank_repair(prev, check_all, eta, drift,
                                  rng_for(seed, "fit"))
        rep = StageReport(stage=-1, degree=poly.degree,
                          floor=min_modulus(poly, gamma_check),
                          deviation=max_deviation(poly, prev, inner_val),
                          margin=rank_margin(poly, check_all),
                          blow_up=blow_up, drift=drift, perturbations=pert,
                          gamma_count=len(gamma))
        if (rep.floor >= blow_up or len(gamma) == 0) and rep.margin >= eta \
                and rep.deviation <= drift:
            return poly, rep

    if scale is None:
        scale = float(np.max(np.linalg.norm(gamma, axis=1))) * 1.05
    zi = to_complex(inner)
    ziv = to_complex(inner_val)
    zg = to_complex(gamma)
    zgc = to_complex(gamma_check)
    lift_bias = float(np.max(np.abs(prev.evaluate(gamma_check)[:, 0])))

    best = None      # least-shortfall candidate, for diagnostics
    passing = None   # highest-floor candidate that meets every target
    gated = math.inf   # smallest deviation bound among rejected candidates
    rng = rng_for(seed, "fit")
    for degree in _degree_ladder(degree_cap):
        exps = monomial_exponents(prev.n, degree)
        Phi_i = monomial_features(zi, exps, scale)
        Phi_iv = monomial_features(ziv, exps, scale)
        Phi_g = monomial_features(zg, exps, scale)
        Phi_gc = monomial_features(zgc, exps, scale)
        ridge = _growth_ridge(exps, scale, growth_radius)
        candidates = itertools.chain(_axis_candidates(exps, degree),
                                     _separator_sweep(Phi_i, Phi_g, ridge))
        for h_coef in candidates:
            eps_k = float(np.abs(Phi_iv @ h_coef).max())
            m_g = float(np.abs(Phi_gc @ h_coef).min())
            if m_g <= 0.0:
                continue
            # Spend the whole drift budget on floor headroom, up to 2.2x the
            # target: replay samples probe between the fitted ones, and the
            # slack is what absorbs the dips they find.
            amp = min((2.2 * blow_up + lift_bias) / m_g,
                      0.999 * drift / max(eps_k, 1e-300))
            if amp * m_g < 1.1 * blow_up + lift_bias:
                gated = min(gated, (1.1 * blow_up + lift_bias) / m_g * eps_k)
                continue     # this separator cannot clear the stage
            coeffs = np.zeros((prev.q, len(exps)), dtype=complex)
            coeffs[0] = amp * h_coef
            poly = _add_polys(prev, PolyMap(n=prev.n, q=prev.q, degree=degree,
                                            scale=scale, coeffs=coeffs,
                                            exps=exps))
            poly, pert = _rank_repair(poly, check_all, eta, drift, rng)
            dev = max_deviation(poly, prev, inner_val)
            floor = min_modulus(poly, gamma_check)
            margin = rank_margin(poly, check_all)
            log.info("fit degree=%d contrast=%.3g dev=%.3g floor=%.3g "
                     "margin=%.3g", degree, m_g / max(eps_k, 1e-300),
                     dev, floor, margin)
            cand = (poly, dev, floor, margin, pert, degree)
            if best is None or _shortfall(cand, blow_up, drift, eta) < \
                    _shortfall(best, blow_up, drift, eta):
                best = cand
            if dev <= drift and floor >= blow_up and margin >= eta:
                if passing is None or floor > passing[2]:
                    passing = cand
                if floor >= 2.0 * blow_up:
                    break    # ample headroom; stop searching this degree
        if passing is not None and passing[2] >= 2.0 * blow_up:
            break            # no need to escalate further
    if passing is not None:
        poly, dev, floor, margin, pert, degree = passing
        rep = StageReport(stage=-1, degree=degree, floor=floor,
                          deviation=dev, margin=margin,
                          blow_up=blow_up, drift=drift,
                          perturbations=pert, gamma_count=len(gamma))
        return poly, rep
    if best is None:
        detail = (f"best deviation bound {gated:.4g} vs drift {drift}"
                  if math.isfinite(gated) else "no separator with positive floor")
        raise DegreeExhaustedError(
            f"degree cap {degree_cap}: every candidate rejected ({detail})",
            deviation=gated, floor=0.0, margin=0.0)
    _, dev, floor, margin, _, _ = best
    raise DegreeExhaustedError(
        f"degree cap {degree_cap}: deviation {dev:.4g} (target {drift}), "
        f"floor {floor:.4g} (target {blow_up}), margin {margin:.4g} "
        f"(target {eta})", deviation=dev, floor=floor, margin=margin)


def _axis_candidates(exps: np.ndarray, degree: int):
    """Pure coordinate powers (z_k/scale)^degree: cheap explicit separators.

    When the stage pieces are axis-aligned (every direction within a small
    angle of the first coordinate plane), the z_1 power has closed-form
    contrast ((tau*align - rho)/r)^degree and a zero set far from every
    piece, so it is robust between samples in a way least-squares candidates
    are not. Yielded first; each is validated like any other candidate.
    """
    for k in range(exps.shape[1]):
        e = np.zeros(exps.shape[1], dtype=int)
        e[k] = degree
        idx = np.where((exps == e).all(axis=1))[0]
        if len(idx):
            coef = np.zeros(len(exps), dtype=complex)
            coef[idx[0]] = 1.0
            yield coef


def _shortfall(cand, blow_up, drift, eta) -> float:
    _, dev, floor, margin, _, _ = cand
    return (max(0.0, dev / drift - 1.0)
            + max(0.0, 1.0 - floor / blow_up)
            + max(0.0, 1.0 - margin / eta))


def _growth_ridge(exps: np.ndarray, scale: float,
                  growth_radius: float | None) -> np.ndarray:
    """Per-coefficient ridge weights. Penalizing degree a by g^a keeps the fit
    tame out to growth_radius = g*scale, where later stages will evaluate it."""
    degree = exps.sum(axis=1)
    if growth_radius is None or growth_radius <= scale:
        return 1e-9 * np.ones(len(exps))
    g = growth_radius / scale
    return 1e-9 * (g ** (2.0 * degree))


def _separator_sweep(Phi_i, Phi_g, ridge,
                     weights=(1e1, 1e2, 1e3, 1e4, 1e5, 1e6),
                     rounds: int = 12):
    """Yield candidate separator coefficient vectors h with h ~ 0 on the inner
    rows and |h| ~ 1 on the gamma rows, across a grid of inner weights.

    The gamma target phase is free (only the modulus enters the floor), so
    each round re-targets e^{i arg h} at the current iterate, phase-retrieval
    style; that lets the zero curve of h rotate out of the pieces instead of
    being pinned by a fixed-phase target. Low-modulus rows are up-weighted
    aggressively (weight ~ 1/|h|): the zero hypersurface of h must thread the
    gap between the inner ball and the pieces, and this is the force that
    drags it off the piece samples. The caller rescales the winner, so only
    the contrast max|h_inner| vs min|h_gamma| matters.
    """
    G_i = Phi_i.conj().T @ Phi_i
    for W in weights:
        w_g = np.ones(len(Phi_g))
        target = np.ones(len(Phi_g), dtype=complex)
        for _ in range(rounds):
            w2 = w_g ** 2
            G_g = Phi_g.conj().T @ (Phi_g * w2[:, None])
            rhs = Phi_g.conj().T @ (w2 * target)
            try:
                coef = np.linalg.solve(W * W * G_i + G_g + np.diag(ridge), rhs)
            except np.linalg.LinAlgError:
                break
            yield coef
            h_g = Phi_g @ coef
            mag = np.abs(h_g)
            target = h_g / np.maximum(mag, 1e-12)
            lift = np.maximum(1.0, 0.5 / np.maximum(mag, 1e-9))
            w_g = np.minimum(w_g * lift, 1e4)


def _add_polys(a: PolyMap, b: PolyMap) -> PolyMap:
    """Pointwise sum, expressed in b's scale (coefficient magnitudes match the
    original evaluations, so no precision is lost by the basis change)."""
    degree = max(a.degree, b.degree)
    exps = monomial_exponents(a.n, degree)
    index = {tuple(row): k for k, row in enumerate(exps)}
    coeffs = np.zeros((a.q, len(exps)), dtype=complex)
    for poly in (a, b):
        factor = (b.scale / poly.scale) ** poly.exps.sum(axis=1)
        for j, row in enumerate(poly.exps):
            coeffs[:, index[tuple(row)]] += poly.coeffs[:, j] * factor[j]
    return PolyMap(n=a.n, q=a.q, degree=degree, scale=b.scale,
                   coeffs=coeffs, exps=exps)


def _rank_repair(poly: PolyMap, check_pts: np.ndarray, eta: float,
                 drift: float, rng) -> tuple:
    """Critical points are nongeneric: tiny coefficient noise (well under the
    drift budget) restores the rank margin when a fit lands on one."""
    perturbations = 0
    coeffs = poly.coeffs
    for _ in range(20):
        if rank_margin(poly, check_pts) >= eta:
            break
        perturbations += 1
        bump = (rng.standard_normal(coeffs.shape)
                + 1j * rng.standard_normal(coeffs.shape))
        bump *= drift * 0.01 / max(1.0, float(np.abs(bump).max()))
        poly = PolyMap(n=poly.n, q=poly.q, degree=poly.degree,
                       scale=poly.scale, coeffs=coeffs + bump, exps=poly.exps)
    return poly, perturbations


# -- stage pipeline ----------------------------------------------------------------

@dataclass
class SampledCompact:
    """Finite point sample standing in for a compact set in C^n."""

    points: np.ndarray        # (m, 2n) real, interleaved coordinates
    label: str = ""

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size == 0:
            raise ValueError(f"empty sample set {self.label!r}")
        if not np.isfinite(self.points).all():
            raise ValueError(f"non-finite point in sample set {self.label!r}")


def _pts(obj) -> np.ndarray:
    return obj.points if isinstance(obj, SampledCompact) else np.asarray(obj)


@dataclass
class FitSchedule:
    """Stage plan: one shell per stage, floors C_i strictly increasing,
    deviations delta_i summable by construction (a finite prefix)."""

    shells: list
    floors: list
    deviations: list
    eta: float = 1e-3
    degree_cap: int = 30

    def __post_init__(self):
        if not (len(self.shells) == len(self.floors) == len(self.deviations)):
            raise ValueError("shells, floors, deviations must align")
        floors = [float(c) for c in self.floors]
        if any(c <= 0 for c in floors):
            raise ValueError("floors must be positive")
        if any(b <= a for a, b in zip(floors, floors[1:])):
            raise ValueError("floors must be strictly increasing")
        if any(d <= 0 for d in self.deviations):
            raise ValueError("deviations must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.degree_cap < 1:
            raise ValueError("degree cap must be at least 1")

    @property
    def total_drift(self) -> float:
        return float(sum(self.deviations))


def default_stage_labyrinths(schedule: FitSchedule, seed: int = 0,
                             n: int = 2, align: float = 0.95) -> list:
    """Axis-aligned sparse piece stacks sized so a degree-cap fit has room.

    Every piece direction stays within a small angle of the first complex
    coordinate plane, so |z1| >= tau*align - rho on each disk and a pure z1
    power separates pieces from the inner ball with the closed-form contrast
    ((1+pad)(align - radius_scale*tan beta))^degree. Later stages inherit
    their floors from the outward growth of the stage-1 lift for the same
    reason; their pads only need to fit the shell.
    """
    labs = []
    rs = 0.25
    beta = 0.45
    for i, shell in enumerate(schedule.shells):
        ratio = shell.outer / shell.inner
        pad = min(0.5, ratio * 0.93 - 1.0)
        labs.append(build_sparse_labyrinth(
            shell, beta=beta, layer_count=3,
            seed=derive_seed(seed, "stage-lab", i), n=n,
            bottom_pad=pad, radius_scale=rs, axis_align=align))
    return labs


def build_function(schedule: FitSchedule, labyrinths: list, seed: int = 0,
                   q: int = 1, n: int | None = None) -> tuple:
    """Run the staged construction; returns (list of stage PolyMaps, FitReport).

    Stage i keeps the map within deviations[i] of its predecessor on the
    inner compact (the stage shell's inner ball plus all earlier piece
    samples) and pushes its modulus past floors[i] on the current pieces.
    Deeper stages often inherit their floor outright from the outward growth
    of earlier lifts; those stages report deviation 0. The certified length
    ledger accumulates c_floor * total enlargement per stage for downstream
    divergence audits.
    """
    if len(labyrinths) != len(schedule.shells):
        raise ValueError("need one labyrinth per shell")
    if not labyrinths:
        dim = n or 2
        seed_map = PolyMap.seed_map(dim, q)
        report = FitReport(n=dim, q=q, stages=[], total_drift=0.0,
                           certified_lengths=[], seed=seed)
        return [seed_map], report
    n = labyrinths[0].n
    prev = PolyMap.seed_map(n, q)
    maps = []
    reports = []
    lengths = []
    gamma_history: list = []
    for i, lab in enumerate(labyrinths):
        if lab.n != n:
            raise InvalidDimensionError("all stages must share the same n")
        shell = schedule.shells[i]
        gamma = sample_pieces(lab, derive_seed(seed, "gamma", i),
                              per_unit_area=1200.0, min_per_piece=72)
        gamma_check = sample_pieces(lab, derive_seed(seed, "gammachk", i),
                                    per_unit_area=4800.0, min_per_piece=288)
        # Degree-cap monomial count sets how densely the inner boundary must
        # be pinned: the lift is holomorphic, so by the maximum principle a
        # dense boundary sample controls the whole inner ball.
        dof = len(monomial_exponents(n, schedule.degree_cap))
        inner = inner_compact_samples(n, shell.inner,
                                      derive_seed(seed, "inner", i),
                                      count=min(4000, max(50 * n * n, 3 * dof)))
        inner_check = [inner_compact_samples(
            n, shell.inner, derive_seed(seed, "innerchk", i), count=600)]
        for j, old in enumerate(labyrinths[:i]):
            inner_check.append(sample_pieces(
                old, derive_seed(seed, "innerchk-g", i, j),
                per_unit_area=1600.0, min_per_piece=96))
        if gamma_history:
            inner = np.vstack([inner] + gamma_history)
        checkpoints = ball_points(2 * n, 400, shell.outer,
                                  derive_seed(seed, "check", i))
        try:
            poly, rep = fit_step(prev, inner, gamma,
                                 float(schedule.floors[i]),
                                 float(schedule.deviations[i]),
                                 degree_cap=schedule.degree_cap,
                                 eta=schedule.eta,
                                 seed=derive_seed(seed, "stage", i),
                                 checkpoints=checkpoints,
                                 growth_radius=(schedule.shells[i + 1].outer
                                                if i + 1 < len(schedule.shells)
                                                else None),
                                 gamma_check=gamma_check,
                                 inner_check=np.vstack(inner_check))
        except DegreeExhaustedError as exc:
            raise DegreeExhaustedError(
                f"stage {i}: {exc.args[0]}", deviation=exc.deviation,
                floor=exc.floor, margin=exc.margin) from exc
        rep.stage = i
        reports.append(rep)
        maps.append(poly)
        lengths.append(lab.c_floor * lab.total_enlargement)
        gamma_history.append(gamma)
        prev = poly
    fit = FitReport(n=n, q=q, stages=reports,
                    total_drift=schedule.total_drift,
                    certified_lengths=lengths, seed=seed)
    return maps, fit
