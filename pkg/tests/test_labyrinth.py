"""Labyrinth construction, collision predicate, certificates, roadmap search."""

import math

import numpy as np
import pytest

from foliakit.errors import CapacityError, InvalidLabyrinthError
from foliakit.geometry import Shell, get_metric
from foliakit.labyrinth import (
    HyperplanePiece,
    Labyrinth,
    LabyrinthTuning,
    SearchBudget,
    analytic_enlargement_bound,
    build_labyrinth,
    piece_hit,
    segments_hit_any,
    validate_labyrinth,
    verify_enlargement,
    _PieceArrays,
)


def _disk(center, normal, radius):
    c = np.asarray(center, dtype=float)
    u = np.asarray(normal, dtype=float)
    return HyperplanePiece(center=c, normal=u / np.linalg.norm(u), radius=radius)


def _empty_lab(shell=Shell(1.0, 2.0), pieces=(), n=2):
    return Labyrinth(n=n, shell=shell, layer_radii=[], pieces=list(pieces),
                     enlargement=0.0, analytic_bound=0.0, taut_bound=0.0,
                     total_enlargement=shell.width, c_floor=1.0, seed=0)


# -- piece_hit: hand-checked cases -------------------------------------------------

def test_piece_hit_straight_crossing():
    p = _disk([1.5, 0, 0, 0], [1, 0, 0, 0], 0.3)
    assert piece_hit([1, 0, 0, 0], [2, 0, 0, 0], p)


def test_piece_hit_crossing_outside_radius():
    p = _disk([1.5, 0, 0, 0], [1, 0, 0, 0], 0.3)
    # Crosses the hyperplane at in-plane distance 0.4 from the center.
    assert not piece_hit([1, 0.4, 0, 0], [2, 0.4, 0, 0], p)
    assert piece_hit([1, 0.4, 0, 0], [2, 0.4, 0, 0], p, clearance=0.11)


def test_piece_hit_endpoint_proximity():
    p = _disk([1.5, 0, 0, 0], [1, 0, 0, 0], 0.3)
    # Endpoint hovers 0.05 above the interior of the disk; no plane crossing.
    a = [1.55, 0.2, 0, 0]
    b = [1.60, 0.2, 0, 0]
    assert piece_hit(a, b, p, clearance=0.06)
    assert not piece_hit(a, b, p, clearance=0.04)


def test_piece_hit_in_plane_segment():
    p = _disk([1.5, 0, 0, 0], [1, 0, 0, 0], 0.3)
    # Entire segment inside the hyperplane, passing 0.301 from the center.
    a = [1.5, 0.301, 0, 0]
    b = [1.5, 1.0, 0, 0]
    assert not piece_hit(a, b, p)
    assert piece_hit(a, b, p, clearance=2e-3)


def test_piece_hit_matches_dense_sampling_oracle():
    """Independent reference: scan the segment densely, flag if any sample is
    within clearance of the disk or consecutive samples straddle the plane
    inside radius+clearance."""
    rng = np.random.default_rng(20240817)
    clearance = 0.02
    disagreements = 0
    for _ in range(200):
        c = rng.normal(size=4)
        c *= (1.2 + rng.random()) / np.linalg.norm(c)
        u = rng.normal(size=4)
        u /= np.linalg.norm(u)
        rho = 0.1 + 0.4 * rng.random()
        p = HyperplanePiece(center=c, normal=u, radius=rho)
        a = rng.normal(size=4) * 1.2
        b = rng.normal(size=4) * 1.2

        ts = np.linspace(0.0, 1.0, 4001)
        pts = a[None, :] + ts[:, None] * (b - a)[None, :]
        rel = pts - c[None, :]
        xi = rel @ u
        sigma = np.linalg.norm(rel - xi[:, None] * u[None, :], axis=1)
        d = np.hypot(np.maximum(0.0, sigma - rho), xi)
        mind = float(d.min())
        if abs(mind - clearance) < 1e-3:
            continue  # too close to the decision boundary for a sampled oracle
        oracle = mind <= clearance
        got = piece_hit(a, b, p, clearance=clearance)
        if got != oracle:
            disagreements += 1
    assert disagreements == 0


def test_segments_hit_any_agrees_with_scalar():
    rng = np.random.default_rng(5)
    pieces = []
    for _ in range(40):
        u = rng.normal(size=4)
        u /= np.linalg.norm(u)
        tau = 1.1 + 0.8 * rng.random()
        pieces.append(HyperplanePiece(center=tau * u, normal=u,
                                      radius=0.05 + 0.2 * rng.random()))
    arr = _PieceArrays.from_pieces(pieces, 4)
    P0 = rng.normal(size=(300, 4))
    P1 = rng.normal(size=(300, 4))
    got = segments_hit_any(P0, P1, arr, 1e-6)
    want = np.array([any(piece_hit(P0[i], P1[i], p, 1e-6) for p in pieces)
                     for i in range(300)])
    assert np.array_equal(got, want)


# -- certificates ------------------------------------------------------------------

def test_bound_zero_for_empty():
    assert analytic_enlargement_bound(_empty_lab()) == 0.0


def test_bound_zero_for_single_piece():
    # One disk shadows a cone; almost every direction crosses for free.
    p = _disk([1.5, 0, 0, 0], [1, 0, 0, 0], 0.3)
    lab = _empty_lab(pieces=[p])
    assert analytic_enlargement_bound(lab) == 0.0


def test_bound_deterministic():
    lab = build_labyrinth(Shell(1.0, 2.0), enlargement=0.02, seed=7, n=2)
    b1 = analytic_enlargement_bound(lab, probe_count=2000, seed=1)
    b2 = analytic_enlargement_bound(lab, probe_count=2000, seed=1)
    assert b1 == b2


# -- builder -----------------------------------------------------------------------

def test_build_meets_modest_target_and_validates():
    lab = build_labyrinth(Shell(1.0, 2.0), enlargement=0.02, c_floor=1.0,
                          seed=7, n=2)
    assert lab.analytic_bound >= 0.02
    assert len(lab.pieces) <= LabyrinthTuning().piece_cap
    arr = lab.piece_arrays()
    assert np.all(arr.taus > 1.0)
    assert np.all(arr.rims < 2.0)
    validate_labyrinth(lab)
    assert lab.total_enlargement == pytest.approx(
        math.hypot(1.0, lab.analytic_bound), rel=1e-12)


def test_build_deterministic_and_seed_sensitive():
    lab1 = build_labyrinth(Shell(1.0, 2.0), enlargement=0.02, seed=7, n=2)
    lab2 = build_labyrinth(Shell(1.0, 2.0), enlargement=0.02, seed=7, n=2)
    lab3 = build_labyrinth(Shell(1.0, 2.0), enlargement=0.02, seed=8, n=2)
    c1 = np.array([p.center for p in lab1.pieces])
    c2 = np.array([p.center for p in lab2.pieces])
    assert np.array_equal(c1, c2)
    assert lab1.analytic_bound == lab2.analytic_bound
    c3 = np.array([p.center for p in lab3.pieces])
    assert c1.shape != c3.shape or not np.array_equal(c1, c3)


def test_build_unreachable_target_raises_capacity():
    with pytest.raises(CapacityError) as exc:
        build_labyrinth(Shell(1.0, 2.0), enlargement=5.0, c_floor=1.0,
                        seed=7, n=2,
                        tuning=LabyrinthTuning(max_rebuilds=3))
    err = exc.value
    assert 0.0 < err.achieved < 5.0
    assert err.pieces > 0


def test_validate_rejects_overlapping_pieces():
    u = np.array([1.0, 0, 0, 0])
    v = np.array([math.cos(0.05), math.sin(0.05), 0, 0])
    pieces = [HyperplanePiece(center=1.5 * u, normal=u, radius=0.3),
              HyperplanePiece(center=1.5 * v, normal=v, radius=0.3)]
    lab = _empty_lab(pieces=pieces)
    with pytest.raises(InvalidLabyrinthError):
        validate_labyrinth(lab)


def test_validate_rejects_piece_outside_shell():
    u = np.array([1.0, 0, 0, 0])
    lab = _empty_lab(pieces=[HyperplanePiece(center=0.9 * u, normal=u, radius=0.1)])
    with pytest.raises(InvalidLabyrinthError):
        validate_labyrinth(lab)


def test_piece_requires_unit_normal():
    with pytest.raises(InvalidLabyrinthError):
        HyperplanePiece(center=np.array([1.5, 0, 0, 0]),
                        normal=np.array([1.0, 1e-5, 0, 0]), radius=0.1)


# -- roadmap verification ----------------------------------------------------------

def test_verify_empty_shell_is_width():
    rep = verify_enlargement(_empty_lab(), get_metric("euclidean", 2),
                             SearchBudget(samples=6000), seed=3)
    assert rep.found
    assert rep.euclidean_length == pytest.approx(1.0, abs=1e-2)


def test_verify_single_disk_free_endpoints():
    # A radial ray grazing the shadow cone realizes width exactly.
    p = _disk([1.5, 0, 0, 0], [1, 0, 0, 0], 0.3)
    lab = _empty_lab(pieces=[p])
    rep = verify_enlargement(lab, get_metric("euclidean", 2),
                             SearchBudget(samples=8000), seed=3)
    assert rep.found
    assert rep.euclidean_length == pytest.approx(1.0, rel=0.02)


def test_verify_single_disk_pinned_detour():
    # Start and exit on the blocked axis: two straight legs past the rim,
    # length 2*sqrt(0.5^2 + 0.3^2).
    p = _disk([1.5, 0, 0, 0], [1, 0, 0, 0], 0.3)
    lab = _empty_lab(pieces=[p])
    rep = verify_enlargement(lab, get_metric("euclidean", 2),
                             SearchBudget(samples=8000), seed=3,
                             start=np.array([1.0, 0, 0, 0]),
                             goal=np.array([2.0, 0, 0, 0]))
    assert rep.found
    assert rep.euclidean_length == pytest.approx(2.0 * math.hypot(0.5, 0.3),
                                                 rel=0.02)


def test_verify_path_avoids_pieces_and_respects_bound():
    lab = build_labyrinth(Shell(1.0, 2.0), enlargement=0.02, seed=7, n=2)
    rep = verify_enlargement(lab, get_metric("euclidean", 2),
                             SearchBudget(samples=12000), seed=11)
    assert rep.found
    assert rep.consistent
    assert rep.euclidean_length >= lab.analytic_bound * 0.99
    pts = rep.path.points
    arr = lab.piece_arrays()
    assert not np.any(segments_hit_any(pts[:-1], pts[1:], arr, 1e-9))
    # crossing really happened
    radii = np.linalg.norm(pts, axis=1)
    assert radii[0] <= 1.0 + 1e-9
    assert radii[-1] >= 2.0 - 1e-9


def test_verify_metric_length_scales():
    lab = _empty_lab()
    rep = verify_enlargement(lab, get_metric("scaled:2.0", 2),
                             SearchBudget(samples=4000), seed=3)
    assert rep.metric_length == pytest.approx(2.0 * rep.euclidean_length,
                                              rel=1e-9)


# -- serialization -----------------------------------------------------------------

def test_labyrinth_json_round_trip(tmp_path):
    lab = build_labyrinth(Shell(1.0, 2.0), enlargement=0.02, seed=7, n=2)
    path = tmp_path / "lab.json"
    lab.save(path)
    lab2 = Labyrinth.load(path)
    assert lab2.n == lab.n
    assert lab2.shell == lab.shell
    assert len(lab2.pieces) == len(lab.pieces)
    assert lab2.analytic_bound == lab.analytic_bound
    np.testing.assert_array_equal(
        np.array([p.center for p in lab.pieces]),
        np.array([p.center for p in lab2.pieces]))
    # canonical output: identical bytes when saved twice
    path2 = tmp_path / "lab2.json"
    lab2.save(path2)
    assert path.read_bytes() == path2.read_bytes()
