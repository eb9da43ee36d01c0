"""Proper foliations from polynomial submersions: saturation oracles, a
properness check by witness ray, leaf tracing by predictor-corrector
continuation, and the completeness audit comparing measured path lengths
against certified per-shell enlargements.

A foliation is carried by a generator map f: C^n -> C^q (q < n) plus an
optional automorphism word Phi; leaves are Phi(f^{-1}(c)). The saturation of
a compact K is exposed only through a membership oracle over the sampled
generator image: the saturated set is unbounded, so no finite geometric
representation exists, and the oracle is all the avoidance planner needs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .approx import PolyMap, rank_check
from .autos import AutWord
from .errors import (
    ImproperFoliationError,
    InvalidDimensionError,
    SingularStartError,
    TraceFailureError,
)
from .geometry import (
    MetricField,
    PathSample,
    comparability_constant,
    from_complex,
    get_metric,
    metric_length,
    to_complex,
)
from .jsonio import SCHEMA_VERSION, dump_json, load_json, require_schema
from .labyrinth import segments_hit_any
from .sampling import ball_points, derive_seed

log = logging.getLogger(__name__)

_COEFF_TOL = 1e-15          # below this a coefficient counts as absent
_TIE_TOL = 1e-12            # steering gradient below this is a tie


def _sample_points(obj) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(getattr(obj, "points", obj), dtype=float))
    if pts.size == 0:
        raise ValueError("the compact sample set must be nonempty")
    return pts


def _nonconstant_components(poly: PolyMap) -> list:
    """Per component: does any monomial of positive total degree survive?"""
    live = poly.exps.sum(axis=1) >= 1
    return [bool(np.any(np.abs(row[live]) > _COEFF_TOL)) for row in poly.coeffs]


# -- foliation ---------------------------------------------------------------------

@dataclass
class ProperFoliation:
    """Leaves Phi(f^{-1}(c)) for a polynomial generator f and a twist Phi.

    With no twist the leaves are plain fibers of the generator. The generator
    must have a nonconstant component; a constant map would saturate every
    compact to the whole space, which is exactly what this class refuses to
    represent (the standalone properness check still accepts raw generators
    so the degenerate case stays testable).
    """

    generator: PolyMap
    twist: AutWord | None = None

    def __post_init__(self):
        if not any(_nonconstant_components(self.generator)):
            raise ImproperFoliationError(
                "generator is constant: the saturation of any compact would "
                "be the whole space")
        if self.twist is not None and len(self.twist):
            if self.twist.n != self.generator.n:
                raise InvalidDimensionError(
                    f"twist acts on C^{self.twist.n}, generator on "
                    f"C^{self.generator.n}")

    @property
    def n(self) -> int:
        return self.generator.n

    @property
    def q(self) -> int:
        return self.generator.q

    def _twist_word(self) -> AutWord | None:
        if self.twist is not None and len(self.twist):
            return self.twist
        return None

    def untwist(self, pts: np.ndarray) -> np.ndarray:
        """Phi^{-1} on real interleaved points (fiber coordinates)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        word = self._twist_word()
        return word.inverse().apply(pts) if word else pts

    def twist_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        word = self._twist_word()
        return word.apply(pts) if word else pts

    def level_values(self, pts: np.ndarray) -> np.ndarray:
        """Generator values on the untwisted points, shape (k, q) complex."""
        return self.generator.evaluate(self.untwist(pts))

    # -- serialization -------------------------------------------------------------

    def to_dict(self) -> dict:
        word = self._twist_word()
        return {"schema_version": SCHEMA_VERSION, "kind": "proper_foliation",
                "generator": self.generator.to_dict(),
                "twist": word.to_dict() if word else None}

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def from_dict(cls, doc: dict) -> "ProperFoliation":
        require_schema(doc, "proper_foliation")
        twist = doc.get("twist")
        return cls(generator=PolyMap.from_dict(doc["generator"]),
                   twist=AutWord.from_dict(twist) if twist else None)

    @classmethod
    def load(cls, path) -> "ProperFoliation":
        return cls.from_dict(load_json(path))


# -- saturation oracle -------------------------------------------------------------

@dataclass
class MembershipOracle:
    """Point-membership test for a saturated set, with batch form.

    `test` answers one real interleaved point; `contains` answers a (k, 2n)
    batch with a boolean array. Tightening the tolerance never adds members:
    the decision is a fixed distance compared against tol.
    """

    test: Callable
    provenance: str
    contains: Callable | None = None
    tol: float = 0.0

    def __post_init__(self):
        if self.contains is None:
            single = self.test
            self.contains = lambda pts: np.array(
                [single(p) for p in np.atleast_2d(pts)], dtype=bool)

    def __call__(self, point) -> bool:
        return bool(self.test(point))


def saturation_oracle(F: ProperFoliation, K, tol: float) -> MembershipOracle:
    """Oracle for the saturation F(K) via the generator image.

    A point belongs iff its generator value (after untwisting) lies within
    tol of the sampled image f(Phi^{-1}(K)). This over-approximates the true
    saturation up to the sampling of f(K): members through sampled leaves are
    never excluded, and the decision is monotone in both tol and K.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pts = _sample_points(K)
    image = F.generator.evaluate(F.untwist(pts))
    tree = cKDTree(from_complex(image))
    word = F._twist_word()

    def contains(query: np.ndarray) -> np.ndarray:
        q2 = np.atleast_2d(np.asarray(query, dtype=float))
        vals = F.generator.evaluate(F.untwist(q2))
        dist, _ = tree.query(from_complex(vals))
        return np.asarray(dist) <= tol

    def test(point) -> bool:
        return bool(contains(np.asarray(point, dtype=float).reshape(1, -1))[0])

    provenance = (f"generator-image distance <= {tol:g} against {len(pts)} "
                  f"sampled leaves (q={F.q}, "
                  f"{'twisted' if word else 'untwisted'})")
    return MembershipOracle(test=test, provenance=provenance,
                            contains=contains, tol=tol)


# -- properness --------------------------------------------------------------------

@dataclass
class PropernessResult:
    """Witness-ray properness verdict.

    status: proper | improper | inconclusive. `improper` is the definitive
    failure (constant generator); `inconclusive` means the probe budget ran
    out before a witness cleared the image gap, which is distinct from
    failure. partial_check records that only a witness ray is certified, not
    unboundedness of the whole complement.
    """

    status: str
    witness: np.ndarray | None
    component: int | None
    detail: str
    probes_used: int = 0
    partial_check: bool = True

    def __bool__(self) -> bool:
        return self.status == "proper"

    def to_dict(self) -> dict:
        return {"status": self.status,
                "witness": None if self.witness is None
                else [float(v) for v in self.witness],
                "component": self.component, "detail": self.detail,
                "probes_used": int(self.probes_used),
                "partial_check": bool(self.partial_check)}


def _probe_directions(poly: PolyMap, component: int) -> list:
    """Complex unit rays to search along: the coordinates the component
    actually depends on, then the diagonal mixing all of them."""
    n = poly.n
    weights = np.abs(poly.coeffs[component])
    dirs = []
    for k in range(n):
        if np.any((poly.exps[:, k] >= 1) & (weights > _COEFF_TOL)):
            e = np.zeros(n, dtype=complex)
            e[k] = 1.0
            dirs.append(e)
    dirs.append(np.ones(n, dtype=complex) / math.sqrt(n))
    return dirs


def properness_check(F, K, probe_budget: int = 64) -> PropernessResult:
    """Accepts a ProperFoliation or a raw PolyMap generator.

    Constant generators are definitively improper. Otherwise a doubling line
    search along rays seeks a witness whose generator value clears the
    sampled image of K by a gap and whose modulus dominates K; running out
    of probes is reported as inconclusive, never as failure.
    """
    if probe_budget < 1:
        raise ValueError("probe budget must be at least one evaluation")
    gen = F.generator if isinstance(F, ProperFoliation) else F
    word = F._twist_word() if isinstance(F, ProperFoliation) else None
    pts = _sample_points(K)
    flags = _nonconstant_components(gen)
    if not any(flags):
        return PropernessResult(
            status="improper", witness=None, component=None,
            detail="every generator component is constant; each saturation "
                   "is the whole space", probes_used=0)
    j = flags.index(True)
    base = word.inverse().apply(pts) if word else pts
    values = gen.evaluate(base)[:, j]
    vmax = float(np.max(np.abs(values))) if len(values) else 0.0
    gap = 0.5 * max(1.0, vmax)
    radial = max(1.0, 2.0 * float(np.max(np.linalg.norm(pts, axis=1))))
    dirs = _probe_directions(gen, j)
    per_dir = max(6, probe_budget // len(dirs))
    probes = 0
    for d in dirs:
        t = 1.0
        for _ in range(per_dir):
            if probes >= probe_budget:
                break
            w = t * d
            probes += 1
            val = gen.evaluate(w[None, :])[0, j]
            dist = float(np.min(np.abs(val - values)))
            ambient = from_complex(w[None, :])
            if word is not None:
                ambient = word.apply(ambient)
            modulus = float(np.linalg.norm(ambient[0]))
            if dist >= gap and modulus >= radial:
                return PropernessResult(
                    status="proper", witness=ambient[0], component=j,
                    detail=(f"component {j} reaches image distance "
                            f"{dist:.3g} >= {gap:.3g} at modulus "
                            f"{modulus:.3g} >= {radial:.3g}; witness ray "
                            "only, complement unboundedness not certified"),
                    probes_used=probes)
            t *= 2.0
        if probes >= probe_budget:
            break
    return PropernessResult(
        status="inconclusive", witness=None, component=j,
        detail=f"probe budget {probe_budget} exhausted before a witness "
               "cleared the image gap", probes_used=probes)


# -- leaf tracing ------------------------------------------------------------------

@dataclass
class LeafTrace(PathSample):
    """A traced leaf path plus its continuation diagnostics.

    status: escaped | steps-exhausted (normal returns) or stalled |
    corrector-diverged | rank-collapse (truncations, with `diagnostic`).
    """

    status: str = "steps-exhausted"
    level: np.ndarray | None = None      # the held generator value c, (q,)
    residual_max: float = 0.0
    steps_taken: int = 0
    diagnostic: str = ""

    @property
    def truncated(self) -> bool:
        return self.status in ("stalled", "corrector-diverged", "rank-collapse")


def _kernel_basis(J: np.ndarray) -> tuple:
    """(smallest singular value, orthonormal kernel rows (n-q, n))."""
    _, S, Vh = np.linalg.svd(J)
    return float(S[-1]), Vh[J.shape[0]:].conj()


def _ordered_kernel(K: np.ndarray) -> np.ndarray:
    """Phase-fix each kernel vector (largest entry real positive) and order
    rows by their coordinate tuples, so tie-breaks are deterministic."""
    rows = []
    for row in K:
        lead = row[int(np.argmax(np.abs(row)))]
        rows.append(row * (np.conj(lead) / abs(lead)))
    rows.sort(key=lambda r: tuple(
        np.round(np.column_stack([r.real, r.imag]).ravel(), 12)), reverse=True)
    return np.asarray(rows)


def _steer(K: np.ndarray, M: np.ndarray, target: np.ndarray) -> tuple:
    """Kernel combination maximizing Re<dz, target>: u in fiber coordinates,
    dz its ambient image. Gradient below the tie tolerance falls back to the
    first (coordinate-ordered) basis vector."""
    c = M @ np.conj(target)
    mag = float(np.linalg.norm(c))
    if mag < _TIE_TOL:
        a = np.zeros(len(K), dtype=complex)
        a[0] = 1.0
    else:
        a = np.conj(c) / mag
    return a @ K, a @ M


def _newton_correct(gen: PolyMap, w: np.ndarray, c: np.ndarray,
                    tol: float, max_iter: int = 30) -> tuple:
    """Damped Newton pullback onto the level set f = c. Returns
    (point, residual, converged); the minimum-norm step keeps the correction
    transverse to the kernel, preserving predictor progress."""
    rn = float(np.linalg.norm(gen.evaluate(w[None, :])[0] - c))
    for _ in range(max_iter):
        if rn <= tol:
            return w, rn, True
        J = gen.jacobian(w[None, :])[0]
        r = gen.evaluate(w[None, :])[0] - c
        delta = np.linalg.lstsq(J, r, rcond=None)[0]
        alpha = 1.0
        accepted = False
        while alpha > 1.0 / 512.0:
            w_try = w - alpha * delta
            rn_try = float(np.linalg.norm(gen.evaluate(w_try[None, :])[0] - c))
            if rn_try < rn or rn_try <= tol:
                w, rn, accepted = w_try, rn_try, True
                break
            alpha *= 0.5
        if not accepted:
            return w, rn, False
    return w, rn, rn <= tol


def trace_leaf(F: ProperFoliation, start, steer="outward", steps: int = 800,
               step_size: float = 0.05, stop_radius: float | None = None,
               residual_tol: float = 1e-10, rank_tol: float = 1e-8,
               stall_window: int = 100,
               min_start_margin: float = 1e-6) -> LeafTrace:
    """Predictor-corrector continuation along the leaf through `start`.

    The predictor moves inside the generator's Jacobian kernel — steered to
    maximize ambient radial growth ("outward") or alignment with a fixed
    real interleaved direction — and the corrector pulls back onto the level
    set until the residual is below residual_tol. Steps adapt: the predictor
    shrinks when the corrector struggles and regrows after easy accepts. The
    path truncates (with a diagnostic, not an exception) on rank collapse,
    corrector divergence, or no radial progress over `stall_window` steps.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    start = np.asarray(start, dtype=float).ravel()
    if start.shape != (2 * F.n,):
        raise InvalidDimensionError(
            f"start must have {2 * F.n} real coordinates, got {start.shape}")
    base = F.untwist(start[None, :])
    check = rank_check(F.generator, base, eta=min_start_margin)
    if not check.ok:
        raise SingularStartError(
            f"generator rank margin {check.margin:.3e} below "
            f"{min_start_margin:g} at the start point", margin=check.margin)
    fixed = None
    if not (isinstance(steer, str) and steer == "outward"):
        arr = np.asarray(steer, dtype=float).ravel()
        if arr.shape != (2 * F.n,) or not np.linalg.norm(arr) > 0:
            raise ValueError("steer must be 'outward' or a nonzero "
                             f"{2 * F.n}-vector")
        fixed = to_complex(arr[None, :])[0]
        fixed = fixed / np.linalg.norm(fixed)

    word = F._twist_word()
    w = to_complex(base)[0]
    c = F.generator.evaluate(w[None, :])[0]
    z = word.apply_complex(w[None, :])[0] if word else w
    points = [from_complex(z[None, :])[0]]
    res_max = 0.0
    best_radius = float(np.linalg.norm(points[0]))
    stall = 0
    h = step_size
    easy = 0
    status, diag = "steps-exhausted", ""

    for k in range(steps):
        J = F.generator.jacobian(w[None, :])[0]
        smin, kernel = _kernel_basis(J)
        if smin < rank_tol:
            status = "rank-collapse"
            diag = f"smallest singular value {smin:.3e} at step {k}"
            break
        kernel = _ordered_kernel(kernel)
        if word:
            images = word.jacobian_apply(
                np.repeat(w[None, :], len(kernel), axis=0), kernel)
        else:
            images = kernel
        u, zdot = _steer(kernel, images, z if fixed is None else fixed)
        speed = float(np.linalg.norm(zdot))

        accepted = False
        h_try = h
        for _ in range(12):
            hw = min(h_try / max(speed, 1e-9), 4.0 * h_try)
            w_new, rn, ok = _newton_correct(
                F.generator, w + hw * u, c, residual_tol)
            if ok and np.linalg.norm(w_new - w) > 1e-14:
                accepted = True
                break
            h_try *= 0.5
        if not accepted:
            status = "corrector-diverged"
            diag = f"no accepted correction at step {k} (step {h_try:.2e})"
            break
        if h_try < h:
            h, easy = h_try, 0
        else:
            easy += 1
            if easy >= 3:
                h, easy = min(h * 1.3, step_size), 0

        w = w_new
        z = word.apply_complex(w[None, :])[0] if word else w
        points.append(from_complex(z[None, :])[0])
        res_max = max(res_max, rn)
        radius = float(np.linalg.norm(points[-1]))
        if stop_radius is not None and radius >= stop_radius:
            status = "escaped"
            break
        if radius > best_radius + 1e-9:
            best_radius, stall = radius, 0
        else:
            stall += 1
            if stall >= stall_window:
                status = "stalled"
                diag = f"no radial progress over {stall_window} steps at step {k}"
                break

    if len(points) < 2:
        raise TraceFailureError(
            f"no progress from the start point ({status}: {diag})")
    pts = np.asarray(points)
    params = np.arange(len(pts), dtype=float) / len(pts)
    return LeafTrace(pts, params, F.n, status=status, level=c,
                     residual_max=res_max, steps_taken=len(pts) - 1,
                     diagnostic=diag)


# -- completeness audit ------------------------------------------------------------

@dataclass
class PathRecord:
    """One audited leaf path: what it crossed, what it cleared, and how its
    measured metric length compares to the certified detour bound."""

    index: int
    start: np.ndarray
    status: str
    max_radius: float
    crossed: list
    avoided: list
    hits: list
    measured: float
    certified: float
    ok: bool

    def to_dict(self) -> dict:
        return {"index": int(self.index),
                "start": [float(v) for v in self.start],
                "status": self.status,
                "max_radius": float(self.max_radius),
                "crossed": [int(j) for j in self.crossed],
                "avoided": [int(j) for j in self.avoided],
                "hits": self.hits,
                "measured": float(self.measured),
                "certified": float(self.certified),
                "ok": bool(self.ok)}


@dataclass
class AuditReport:
    """Completeness audit: per-path records plus a global summary.

    Every record must satisfy measured >= (1 - slack) * certified; a record
    failing that is listed under summary["counterexamples"], and a path
    touching a piece is a finding in its `hits`, never an exception.
    """

    n: int
    metric: str
    paths: int
    seed: int
    clearance: float
    slack: float
    shells: list
    records: list
    properness: dict
    summary: dict
    traces: list = field(default_factory=list, repr=False, compare=False)

    def __bool__(self) -> bool:
        return bool(self.summary.get("all_ok", False))

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "kind": "audit_report",
                "n": int(self.n), "metric": self.metric,
                "paths": int(self.paths), "seed": int(self.seed),
                "clearance": float(self.clearance), "slack": float(self.slack),
                "shells": self.shells,
                "records": [r.to_dict() for r in self.records],
                "properness": self.properness, "summary": self.summary}

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    def save_paths(self, directory, prefix: str = "path") -> list:
        """One CSV per traced path; returns the written file paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for rec, trace in zip(self.records, self.traces):
            target = directory / f"{prefix}_{rec.index:03d}.csv"
            trace.to_csv(str(target))
            written.append(target)
        return written


def completeness_audit(F: ProperFoliation, labyrinths: list, metric,
                       paths: int, seed: int = 0, *, trace_steps: int = 4000,
                       trace_step: float = 0.05, clearance: float = 1e-6,
                       slack: float = 0.05, start_radius_frac: float = 0.8,
                       properness_budget: int = 64) -> AuditReport:
    """Trace outward leaves from the innermost ball and audit each crossing.

    Per path: which labyrinth shells it fully crossed, whether it cleared
    every piece (clearance via segment-disk distance), its measured metric
    length, and the certified bound sum(c_i * M_i) over the avoided crossed
    labyrinths, with c_i the measured comparability constant of the metric
    on shell i and M_i that labyrinth's certified total enlargement. Piece
    contact and bound violations are findings in the report, not exceptions.
    """
    if paths < 1:
        raise ValueError("need at least one audited path")
    if not labyrinths:
        raise ValueError("need at least one labyrinth")
    if isinstance(metric, str):
        metric = get_metric(metric, labyrinths[0].n)
    if not isinstance(metric, MetricField):
        raise TypeError("metric must be a MetricField or a registry name")
    n = F.n
    for lab in labyrinths:
        if lab.n != n:
            raise InvalidDimensionError(
                f"labyrinth in C^{lab.n} cannot audit a foliation of C^{n}")
    for a, b in zip(labyrinths, labyrinths[1:]):
        if b.shell.inner < a.shell.outer - 1e-9:
            raise ValueError("labyrinths must be ordered by shell, "
                             "inner radii beyond the previous outer radius")

    r0 = labyrinths[0].shell.inner
    outermost = labyrinths[-1].shell.outer
    stop_radius = outermost * 1.02 + 2.0 * trace_step
    cvals = [comparability_constant(metric, lab.shell, n)
             for lab in labyrinths]
    mvals = [float(lab.total_enlargement) for lab in labyrinths]
    arrays = [lab.piece_arrays() for lab in labyrinths]
    prop = properness_check(
        F, ball_points(2 * n, 64, r0, derive_seed(seed, "audit-prop")),
        probe_budget=properness_budget)

    records, traces = [], []
    for i in range(paths):
        start = None
        for attempt in range(24):
            cand = ball_points(2 * n, 1, start_radius_frac * r0,
                               derive_seed(seed, "audit-start", i, attempt))[0]
            if rank_check(F.generator, F.untwist(cand[None, :]),
                          eta=1e-6).ok:
                start = cand
                break
        if start is None:
            raise TraceFailureError(
                f"no full-rank start found for audited path {i}")
        trace = trace_leaf(F, start, "outward", steps=trace_steps,
                           step_size=trace_step, stop_radius=stop_radius)
        rmax = float(trace.radii().max())
        crossed = [j for j, lab in enumerate(labyrinths)
                   if rmax >= lab.shell.outer - 1e-9]
        hits, avoided = [], []
        for j in crossed:
            seg = segments_hit_any(trace.points[:-1], trace.points[1:],
                                   arrays[j], clearance)
            if seg.any():
                hits.append({"labyrinth": int(j),
                             "segment": int(np.argmax(seg))})
            else:
                avoided.append(j)
        certified = float(sum(cvals[j] * mvals[j] for j in avoided))
        measured = metric_length(trace, metric)
        ok = measured >= (1.0 - slack) * certified
        records.append(PathRecord(
            index=i, start=start, status=trace.status, max_radius=rmax,
            crossed=crossed, avoided=avoided, hits=hits, measured=measured,
            certified=certified, ok=ok))
        traces.append(trace)
        log.info("audit path %d: status=%s crossed=%d hits=%d "
                 "measured=%.4f certified=%.4f", i, trace.status,
                 len(crossed), len(hits), measured, certified)

    ratios = [r.measured / r.certified for r in records if r.certified > 0]
    summary = {
        "all_ok": bool(all(r.ok for r in records)
                       and not any(r.hits for r in records)),
        "counterexamples": [r.index for r in records if not r.ok],
        "piece_hits": int(sum(len(r.hits) for r in records)),
        "paths_crossing_all": int(sum(
            1 for r in records if len(r.crossed) == len(labyrinths))),
        "min_length_ratio": float(min(ratios)) if ratios else None,
    }
    shells = [{"inner": float(lab.shell.inner),
               "outer": float(lab.shell.outer),
               "comparability": float(cvals[j]),
               "enlargement": float(mvals[j]),
               "claimed": float(lab.enlargement),
               "c_floor": float(lab.c_floor),
               "pieces": len(lab.pieces)}
              for j, lab in enumerate(labyrinths)]
    return AuditReport(n=n, metric=metric.description, paths=paths, seed=seed,
                       clearance=clearance, slack=slack, shells=shells,
                       records=records,
                       properness=prop.to_dict(), summary=summary,
                       traces=traces)
