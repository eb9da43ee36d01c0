"""Ambient geometry: points of C^n as real 2n-vectors, shells, sampled paths,
and black-box Riemannian length functionals.

Complex coordinates are stored interleaved: (x1, y1, ..., xn, yn) for
z_k = x_k + i y_k. A metric is any callable g(x, v) >= 0, positively homogeneous
of degree one in v; only lengths of paths are ever needed, so no inner products
are assumed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateMetricError,
    InvalidDimensionError,
    MetricEvaluationError,
)
from .sampling import derive_seed, halton, sphere_directions

SUPPORTED_N = (2, 3)


def to_complex(coords: np.ndarray) -> np.ndarray:
    """Interleaved real vector(s) -> complex vector(s). Works on (..., 2n)."""
    arr = np.asarray(coords, dtype=float)
    return arr[..., 0::2] + 1j * arr[..., 1::2]


def from_complex(z: np.ndarray) -> np.ndarray:
    """Complex vector(s) -> interleaved real vector(s)."""
    z = np.asarray(z, dtype=complex)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],), dtype=float)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


@dataclass(frozen=True)
class CPoint:
    """A point of C^n held as its interleaved real coordinate vector."""

    coords: np.ndarray
    n: int

    def __post_init__(self):
        arr = np.asarray(self.coords, dtype=float)
        if self.n not in SUPPORTED_N:
            raise InvalidDimensionError(f"n={self.n} not in {SUPPORTED_N}")
        if arr.shape != (2 * self.n,):
            raise ValueError(f"coords shape {arr.shape} != (2n,) with n={self.n}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite coordinates")
        object.__setattr__(self, "coords", arr)

    @classmethod
    def of(cls, *z: complex) -> "CPoint":
        zc = np.asarray(z, dtype=complex)
        return cls(from_complex(zc), len(z))

    def z(self) -> np.ndarray:
        return to_complex(self.coords)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coords))


@dataclass(frozen=True)
class Shell:
    """Closed round shell inner <= |x| <= outer (radii in the ambient R^{2n})."""

    inner: float
    outer: float

    def __post_init__(self):
        if not (0.0 < self.inner < self.outer):
            raise ValueError(f"need 0 < inner < outer, got ({self.inner}, {self.outer})")

    @property
    def width(self) -> float:
        return self.outer - self.inner


@dataclass
class PathSample:
    """Polyline sample of a path: points (k, 2n) with parameters in [0, 1).

    Parameters are strictly increasing; consecutive points must be distinct.
    The open right end matches the divergent-path convention gamma:[0,1) -> X.
    """

    points: np.ndarray
    params: np.ndarray
    n: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        par = np.asarray(self.params, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 * self.n:
            raise ValueError(f"points must be (k, 2n), got {pts.shape} for n={self.n}")
        if pts.shape[0] < 2:
            raise ValueError("a path sample needs at least two points")
        if par.shape != (pts.shape[0],):
            raise ValueError("params length must match points")
        if np.any(par < 0.0) or np.any(par >= 1.0):
            raise ValueError("params must lie in [0, 1)")
        if np.any(np.diff(par) <= 0.0):
            raise ValueError("params must be strictly increasing")
        seg = np.diff(pts, axis=0)
        if np.any(np.linalg.norm(seg, axis=1) == 0.0):
            raise ValueError("consecutive path points must be distinct")
        self.points = pts
        self.params = par

    @classmethod
    def from_points(cls, pts: np.ndarray, n: int) -> "PathSample":
        pts = np.asarray(pts, dtype=float)
        k = pts.shape[0]
        par = np.arange(k, dtype=float) / k  # lives in [0, 1)
        return cls(pts, par, n)

    def euclidean_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def radii(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    # -- CSV round trip (header t,x1,y1,...,xn,yn) --------------------------------

    def to_csv(self, path_or_buf) -> None:
        header = ["t"]
        for k in range(1, self.n + 1):
            header += [f"x{k}", f"y{k}"]
        own = isinstance(path_or_buf, (str, bytes))
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            w = csv.writer(fh)
            w.writerow(header)
            for t, row in zip(self.params, self.points):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        finally:
            if own:
                fh.close()

    @classmethod
    def from_csv(cls, path_or_buf) -> "PathSample":
        own = isinstance(path_or_buf, (str, bytes))
        fh = open(path_or_buf, "r", newline="") if own else path_or_buf
        try:
            rows = list(csv.reader(fh))
        finally:
            if own:
                fh.close()
        header = [h.strip() for h in rows[0]]
        if header[0] != "t" or (len(header) - 1) % 2 != 0:
            raise ValueError(f"unrecognized path csv header: {header}")
        n = (len(header) - 1) // 2
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        return cls(data[:, 1:], data[:, 0], n)


class MetricField:
    """Black-box length functional g(x, v), degree-1 homogeneous in v.

    `form` maps (point_2n, vector_2n) -> float. A vectorized `batch`
    implementation (points (k,2n), vectors (k,2n)) -> (k,) may be supplied for
    speed; otherwise evaluation loops over `form`.
    """

    def __init__(self, form: Callable[[np.ndarray, np.ndarray], float],
                 description: str,
                 batch: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None):
        self.form = form
        self.description = description
        self._batch = batch

    def __repr__(self) -> str:
        return f"MetricField({self.description!r})"

    def evaluate(self, points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
        if self._batch is not None:
            vals = np.asarray(self._batch(points, vectors), dtype=float)
        else:
            vals = np.array([self.form(p, v) for p, v in zip(points, vectors)], dtype=float)
        return vals

    def check_homogeneity(self, points: np.ndarray, vectors: np.ndarray,
                          scales: Iterable[float] = (0.5, 2.0, 7.0),
                          tol: float = 1e-10) -> None:
        """Raise if g(x, c v) deviates from c g(x, v) beyond tol (relative)."""
        base = self.evaluate(points, vectors)
        for c in scales:
            scaled = self.evaluate(points, c * np.atleast_2d(vectors))
            ref = c * base
            err = np.max(np.abs(scaled - ref) / np.maximum(1.0, np.abs(ref)))
            if err > tol:
                raise ValueError(f"metric not homogeneous: scale {c}, error {err:.3e}")


# -- registry ----------------------------------------------------------------------

def _euclidean_batch(points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    return np.linalg.norm(vectors, axis=1)


def _conformal_batch(weight: Callable[[np.ndarray], np.ndarray]):
    def batch(points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        return weight(points) * np.linalg.norm(vectors, axis=1)
    return batch


def _w_invsq(points: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.sum(points * points, axis=1))


def _w_invsq02(points: np.ndarray) -> np.ndarray:
    return np.maximum(0.2, _w_invsq(points))


def get_metric(name: str, n: int | None = None) -> MetricField:
    """Resolve a registry name: euclidean | scaled:<c> | conformal:<expr-id>.

    Known conformal expressions: `invsq` (|v|/(1+|x|^2)) and `invsq02`
    (max(0.2, 1/(1+|x|^2)) |v|, floor 0.2 on every shell beyond radius 2).
    """
    if name == "euclidean":
        m = MetricField(lambda p, v: float(np.linalg.norm(v)), "euclidean",
                        batch=_euclidean_batch)
        return m
    if name.startswith("scaled:"):
        c = float(name.split(":", 1)[1])
        if not (c > 0.0 and math.isfinite(c)):
            raise ValueError(f"scaled metric needs a positive factor, got {c}")
        return MetricField(lambda p, v, c=c: c * float(np.linalg.norm(v)),
                           name, batch=lambda P, V, c=c: c * np.linalg.norm(V, axis=1))
    if name.startswith("conformal:"):
        expr = name.split(":", 1)[1]
        table = {"invsq": _w_invsq, "invsq02": _w_invsq02}
        if expr not in table:
            raise ValueError(f"unknown conformal expression id: {expr!r}")
        w = table[expr]
        return MetricField(
            lambda p, v, w=w: float(w(np.atleast_2d(p))[0] * np.linalg.norm(v)),
            name, batch=_conformal_batch(w))
    raise ValueError(f"unknown metric name: {name!r}")


# -- operations --------------------------------------------------------------------

def metric_length(path: PathSample, metric: MetricField) -> float:
    """Length of the piecewise-linear interpolant under the metric.

    Composite trapezoid per segment: the segment velocity is constant, the
    integrand is evaluated at both endpoints. For the Euclidean metric this is
    exactly the sum of segment norms, and concatenation is exactly additive.
    """
    pts, par = path.points, path.params
    dt = np.diff(par)
    vel = np.diff(pts, axis=0) / dt[:, None]
    g_start = metric.evaluate(pts[:-1], vel)
    g_end = metric.evaluate(pts[1:], vel)
    vals = np.concatenate([g_start, g_end])
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0] % len(dt))
        raise MetricEvaluationError(
            f"metric returned a non-finite value near sample {bad}", sample_index=bad)
    return float(np.sum(0.5 * dt * (g_start + g_end)))


def comparability_constant(metric: MetricField, region: Shell, n: int,
                           sample_count: int = 4096, seed: int = 0) -> float:
    """Estimated min of g(x, v) over the closed shell and unit tangent sphere.

    Low-discrepancy interior samples plus dedicated boundary-sphere samples
    (the minimum of a conformal factor often sits on a boundary sphere). The
    value is an over-estimate of the infimum only up to sampling density.
    """
    if n not in SUPPORTED_N:
        raise InvalidDimensionError(f"n={n} not in {SUPPORTED_N}")
    if sample_count < 100:
        raise ValueError("sample_count must be at least 100")
    dim = 2 * n
    n_bnd = max(16, sample_count // 8)
    n_int = sample_count - 2 * n_bnd

    pts_dirs = sphere_directions(dim, n_int, derive_seed(seed, "cmp", "pdir"))
    u = halton(1, n_int, derive_seed(seed, "cmp", "rad"))[:, 0]
    radii = ((1.0 - u) * region.inner ** dim + u * region.outer ** dim) ** (1.0 / dim)
    pts = pts_dirs * radii[:, None]
    bnd_dirs = sphere_directions(dim, n_bnd, derive_seed(seed, "cmp", "bdir"))
    pts = np.vstack([pts, region.inner * bnd_dirs, region.outer * bnd_dirs])

    tans = sphere_directions(dim, pts.shape[0], derive_seed(seed, "cmp", "tan"))
    vals = metric.evaluate(pts, tans)
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise MetricEvaluationError(
            f"metric returned a non-finite value at shell sample {bad}", sample_index=bad)
    m = float(np.min(vals))
    if m <= 0.0:
        raise DegenerateMetricError(
            f"metric evaluated to {m} on a nonzero tangent vector")
    return m


def admissible_dimensions(n: int, has_epimorphism: bool = False) -> frozenset:
    """Admissible foliation dimensions k for complete k-foliations of C^n."""
    if n < 2:
        raise InvalidDimensionError(f"ambient dimension n={n} must be at least 2")
    if has_epimorphism:
        return frozenset(range(1, n))
    return frozenset(range(n // 2, n))
