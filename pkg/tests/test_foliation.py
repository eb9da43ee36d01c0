"""Foliation layer: saturation oracles, properness, leaf tracing, audits."""

import numpy as np
import pytest

from foliakit.approx import (
    FitSchedule,
    PolyMap,
    build_function,
    default_stage_labyrinths,
    monomial_exponents,
    sample_pieces,
)
from foliakit.autos import AutWord, Shear
from foliakit.errors import (
    ImproperFoliationError,
    InvalidDimensionError,
    SingularStartError,
)
from foliakit.foliation import (
    LeafTrace,
    MembershipOracle,
    ProperFoliation,
    completeness_audit,
    properness_check,
    saturation_oracle,
    trace_leaf,
)
from foliakit.geometry import PathSample, Shell, get_metric
from foliakit.jsonio import canonical
from foliakit.labyrinth import (
    HyperplanePiece,
    Labyrinth,
    build_sparse_labyrinth,
)
from foliakit.sampling import ball_points, derive_seed, sphere_points

E2C = np.array([0.0, 1.0], dtype=complex)


def _poly_z1(n=2):
    return PolyMap.seed_map(n, 1)


def _poly_z1z2():
    """f(z) = z1 * z2 on C^2."""
    exps = monomial_exponents(2, 2)
    coeffs = np.zeros((1, len(exps)), dtype=complex)
    idx = int(np.flatnonzero((exps == (1, 1)).all(axis=1))[0])
    coeffs[0, idx] = 1.0
    return PolyMap(n=2, q=1, degree=2, scale=1.0, coeffs=coeffs, exps=exps)


def _poly_const(value=1.5 + 0.5j):
    exps = monomial_exponents(2, 1)
    coeffs = np.zeros((1, len(exps)), dtype=complex)
    idx = int(np.flatnonzero((exps == (0, 0)).all(axis=1))[0])
    coeffs[0, idx] = value
    return PolyMap(n=2, q=1, degree=1, scale=1.0, coeffs=coeffs, exps=exps)


def _affine_twist(c0=0.3, c1=0.4):
    """(z1, z2) -> (z1 + c0 + c1 z2, z2): an affine shear word."""
    letter = Shear(kind="additive", direction=np.array([1.0, 0.0], complex),
                   functional=E2C, profile=np.array([c0, c1]))
    return AutWord(letters=[letter])


def _bent_twist():
    """Two-letter nonlinear twist, mild enough to keep desk-scale points tame."""
    first = Shear(kind="additive", direction=np.array([1.0, 0.0], complex),
                  functional=E2C, profile=np.array([0.1, 0.2, 0.05]))
    second = Shear(kind="additive", direction=np.array([0.0, 1.0], complex),
                   functional=np.array([1.0, 0.0], complex),
                   profile=np.array([0.0, -0.15]))
    return AutWord(letters=[first, second])


def _ball(n, count, radius, seed):
    return ball_points(2 * n, count, radius, seed)


# -- construction and serialization ------------------------------------------------


def test_foliation_rejects_constant_generator():
    with pytest.raises(ImproperFoliationError):
        ProperFoliation(generator=_poly_const())


def test_foliation_rejects_mismatched_twist_dimension():
    with pytest.raises(InvalidDimensionError):
        ProperFoliation(generator=_poly_z1(n=3), twist=_affine_twist())


def test_foliation_round_trip(tmp_path):
    fol = ProperFoliation(generator=_poly_z1z2(), twist=_bent_twist())
    path = tmp_path / "foliation.json"
    fol.save(path)
    back = ProperFoliation.load(path)
    pts = _ball(2, 50, 1.3, seed=4)
    assert np.allclose(back.level_values(pts), fol.level_values(pts),
                       atol=1e-12)
    plain = ProperFoliation(generator=_poly_z1())
    doc = plain.to_dict()
    assert doc["twist"] is None
    again = ProperFoliation.from_dict(doc)
    assert np.allclose(again.level_values(pts)[:, 0],
                       pts[:, 0] + 1j * pts[:, 1], atol=1e-12)


def test_untwist_inverts_twist():
    fol = ProperFoliation(generator=_poly_z1(), twist=_bent_twist())
    pts = _ball(2, 80, 1.0, seed=9)
    assert np.allclose(fol.untwist(fol.twist_points(pts)), pts, atol=1e-10)


# -- saturation oracle -------------------------------------------------------------

# Independent brute-force oracle used before the KD-tree machinery below: a
# point lies in the sampled saturation iff one enumerated leaf through K comes
# within tol, decided by a direct O(k*m) modulus scan.


def _brute_force_distance(poly, word, compact_pts, query):
    base = word.inverse().apply(compact_pts) if word else compact_pts
    values = poly.evaluate(base)
    wq = word.inverse().apply(query) if word else query
    vals = poly.evaluate(wq)
    return np.linalg.norm(vals[:, None, :] - values[None, :, :], axis=2).min(axis=1)


def test_saturation_single_fiber_is_tolerance_tube():
    fol = ProperFoliation(generator=_poly_z1())
    oracle = saturation_oracle(fol, np.zeros((1, 4)), tol=0.3)
    angles = np.linspace(0.0, 2 * np.pi, 9)
    inside = np.stack([0.27 * np.cos(angles), 0.27 * np.sin(angles),
                       np.full(9, 5.0), np.full(9, -3.0)], axis=1)
    outside = np.stack([0.33 * np.cos(angles), 0.33 * np.sin(angles),
                        np.zeros(9), np.zeros(9)], axis=1)
    assert oracle.contains(inside).all()        # fiber tube, any z2
    assert not oracle.contains(outside).any()
    assert oracle.test(np.array([0.0, 0.0, 100.0, 0.0]))


def test_saturation_ball_is_thickened_disc():
    # Interior samples alone under-cover the image disc's rim (boundary mass
    # of |z1| vanishes on a solid ball), so the compact gets its bounding
    # sphere too; then membership is |z1| <= 1 + tol up to a covering slack
    # the probes stay clear of.
    fol = ProperFoliation(generator=_poly_z1())
    compact = np.vstack([_ball(2, 2000, 1.0, seed=11),
                         sphere_points(4, 2000, 1.0, 12)])
    oracle = saturation_oracle(fol, compact, tol=0.25)
    rng = np.random.default_rng(3)
    phases = rng.uniform(0, 2 * np.pi, 40)
    z2 = rng.normal(size=(40, 2)) * 2.0
    near = np.stack([1.05 * np.cos(phases), 1.05 * np.sin(phases),
                     z2[:, 0], z2[:, 1]], axis=1)
    far = np.stack([1.40 * np.cos(phases), 1.40 * np.sin(phases),
                    z2[:, 0], z2[:, 1]], axis=1)
    assert oracle.contains(near).all()
    assert not oracle.contains(far).any()


def test_saturation_product_generator_against_brute_force():
    # f = z1 z2, K = unit ball: image is the disc |c| <= 1/2 (|z1 z2| is
    # maximized on |z1| = |z2| = 1/sqrt(2)), so fiber points with |c| <= 0.45
    # must be members and |f| >= 0.8 probes must not.
    poly = _poly_z1z2()
    fol = ProperFoliation(generator=poly)
    compact = _ball(2, 3000, 1.0, seed=21)
    tol = 0.2

    fiber_probes = []
    for rho in (0.05, 0.15, 0.25, 0.35, 0.45):
        for ang in np.linspace(0.0, 2 * np.pi, 8, endpoint=False):
            c = rho * np.exp(1j * ang)
            for r1 in (0.4, 0.9, 1.5):
                z1 = r1 * np.exp(1j * (ang / 3 + 0.7))
                z2 = c / z1
                fiber_probes.append([z1.real, z1.imag, z2.real, z2.imag])
    fiber_probes = np.asarray(fiber_probes)
    rng = np.random.default_rng(5)
    far_probes = []
    while len(far_probes) < 60:
        pt = rng.normal(size=4) * 1.4
        if abs((pt[0] + 1j * pt[1]) * (pt[2] + 1j * pt[3])) >= 0.8:
            far_probes.append(pt)
    far_probes = np.asarray(far_probes)
    probes = np.vstack([fiber_probes, far_probes])

    brute = _brute_force_distance(poly, None, compact, probes)
    expected = brute <= tol
    assert expected[:len(fiber_probes)].all()      # enumerated leaves inside
    assert not expected[len(fiber_probes):].any()  # |f| >= 0.8 cleanly out

    oracle = saturation_oracle(fol, compact, tol=tol)
    got = oracle.contains(probes)
    assert np.array_equal(got, expected)


def test_saturation_monotone_in_samples():
    fol = ProperFoliation(generator=_poly_z1z2())
    samples = _ball(2, 2000, 1.0, seed=31)
    small = saturation_oracle(fol, samples[:400], tol=0.15)
    large = saturation_oracle(fol, samples, tol=0.15)
    probes = ball_points(4, 300, 2.0, 32)
    hit_small = small.contains(probes)
    hit_large = large.contains(probes)
    assert np.all(~hit_small | hit_large)   # K subseteq K' keeps members
    assert hit_large.sum() > hit_small.sum()


def test_saturation_monotone_in_tolerance():
    fol = ProperFoliation(generator=_poly_z1())
    compact = _ball(2, 500, 1.0, seed=41)
    tight = saturation_oracle(fol, compact, tol=0.05)
    loose = saturation_oracle(fol, compact, tol=0.2)
    probes = ball_points(4, 400, 1.6, 42)
    assert np.all(~tight.contains(probes) | loose.contains(probes))


def test_saturation_twisted_matches_pushforward():
    word = _bent_twist()
    base_fol = ProperFoliation(generator=_poly_z1())
    twisted = ProperFoliation(generator=_poly_z1(), twist=word)
    base_compact = _ball(2, 600, 1.0, seed=51)
    probes = ball_points(4, 250, 1.8, 52)
    plain = saturation_oracle(base_fol, base_compact, tol=0.2)
    pushed = saturation_oracle(twisted, word.apply(base_compact), tol=0.2)
    assert np.array_equal(pushed.contains(word.apply(probes)),
                          plain.contains(probes))


def test_membership_oracle_defaults_and_call():
    oracle = MembershipOracle(test=lambda p: float(np.asarray(p)[0]) > 0,
                              provenance="first coordinate sign")
    pts = np.array([[1.0, 0, 0, 0], [-2.0, 0, 0, 0], [3.0, 0, 0, 0]])
    assert oracle.contains(pts).tolist() == [True, False, True]
    assert oracle(pts[0]) and not oracle(pts[1])


def test_saturation_validations():
    fol = ProperFoliation(generator=_poly_z1())
    with pytest.raises(ValueError):
        saturation_oracle(fol, np.zeros((0, 4)), tol=0.1)
    with pytest.raises(ValueError):
        saturation_oracle(fol, np.zeros((1, 4)), tol=0.0)


# -- properness --------------------------------------------------------------------


def test_properness_z1_ball_witness_on_axis_ray():
    fol = ProperFoliation(generator=_poly_z1())
    res = properness_check(fol, _ball(2, 400, 1.0, seed=61))
    assert res.status == "proper" and bool(res)
    assert res.component == 0
    # Doubling search along the z1 axis exits the unit-disc image at t = 2.
    assert np.allclose(res.witness, [2.0, 0.0, 0.0, 0.0], atol=1e-12)
    assert res.partial_check


def test_properness_constant_generator_is_improper():
    res = properness_check(_poly_const(), _ball(2, 100, 1.0, seed=62))
    assert res.status == "improper"
    assert res.witness is None and not bool(res)


def test_properness_pair_generator_on_c3():
    gen = PolyMap.seed_map(3, 2)
    fol = ProperFoliation(generator=gen)
    res = properness_check(fol, _ball(3, 300, 1.0, seed=63))
    assert res.status == "proper"
    assert np.linalg.norm(res.witness) >= 2.0 - 1e-12


def test_properness_product_generator_needs_diagonal_ray():
    res = properness_check(_poly_z1z2(), _ball(2, 400, 1.0, seed=64))
    assert res.status == "proper"
    w = res.witness
    assert abs((w[0] + 1j * w[1]) * (w[2] + 1j * w[3])) > 1.0


def test_properness_budget_exhaustion_is_inconclusive():
    fol = ProperFoliation(generator=_poly_z1())
    res = properness_check(fol, _ball(2, 200, 1.0, seed=65), probe_budget=1)
    assert res.status == "inconclusive"
    assert res.probes_used == 1
    assert res.status != "improper" and not bool(res)


def test_properness_twisted_witness_in_ambient_space():
    fol = ProperFoliation(generator=_poly_z1(), twist=_bent_twist())
    res = properness_check(fol, _ball(2, 300, 1.0, seed=66))
    assert res.status == "proper"
    assert np.linalg.norm(res.witness) >= 1.0


# -- leaf tracing ------------------------------------------------------------------


def test_trace_coordinate_plane_leaf_outward():
    fol = ProperFoliation(generator=_poly_z1())
    trace = trace_leaf(fol, [0.0, 0.0, 1.0, 0.0], steer="outward",
                       steps=500, step_size=0.05, stop_radius=3.0)
    assert isinstance(trace, PathSample)
    assert trace.status == "escaped"
    assert trace.residual_max <= 1e-10
    # Leaf {z1 = 0}: the path stays in the plane and runs straight up the
    # positive real z2 ray, radius strictly increasing.
    assert np.max(np.abs(trace.points[:, :2])) <= 1e-10
    assert np.max(np.abs(trace.points[:, 3])) <= 1e-9
    assert np.all(np.diff(trace.points[:, 2]) > 0)
    assert np.all(np.diff(trace.radii()) > 0)
    assert trace.radii()[-1] >= 3.0


def test_trace_level_residual_everywhere():
    fol = ProperFoliation(generator=_poly_z1z2())
    start = np.array([1.0, 0.0, 1.0, 0.0])
    trace = trace_leaf(fol, start, steps=200, step_size=0.04)
    values = fol.level_values(trace.points)
    assert np.max(np.abs(values - trace.level[None, :])) <= 1e-10
    assert trace.steps_taken == len(trace.points) - 1


def test_trace_twisted_commutes_with_pushforward():
    # Affine twist (degree-1 profile): its derivative is the constant map
    # L u = u + c1 u_2 e_1, so the twisted trace steered along L e2 must be
    # exactly the pushforward of the untwisted trace steered along e2 with a
    # matched step. Closed-form commutation, no fit involved.
    c0, c1 = 0.3, 0.4
    word = _affine_twist(c0, c1)
    speed = float(np.hypot(1.0, c1))
    steps, step = 60, 0.05
    plain = ProperFoliation(generator=_poly_z1())
    twisted = ProperFoliation(generator=_poly_z1(), twist=word)
    w0 = np.array([0.0, 0.0, 1.0, 0.0])
    t_plain = trace_leaf(plain, w0, steer=[0.0, 0.0, 1.0, 0.0],
                         steps=steps, step_size=step / speed)
    z0 = word.apply(w0[None, :])[0]
    t_twisted = trace_leaf(twisted, z0, steer=[c1, 0.0, 1.0, 0.0],
                           steps=steps, step_size=step)
    pushed = word.apply(t_plain.points)
    assert pushed.shape == t_twisted.points.shape
    assert np.max(np.abs(pushed - t_twisted.points)) <= 1e-8


def test_trace_twisted_outward_stays_on_leaf():
    fol = ProperFoliation(generator=_poly_z1(), twist=_bent_twist())
    start = fol.twist_points(np.array([[0.3, -0.1, 0.8, 0.2]]))[0]
    trace = trace_leaf(fol, start, steps=300, step_size=0.05,
                       stop_radius=4.0)
    assert not trace.truncated
    values = fol.level_values(trace.points)
    assert np.max(np.abs(values - trace.level[None, :])) <= 1e-10
    assert trace.radii().max() > np.linalg.norm(start) + 0.5


def test_trace_fixed_direction_projects_to_kernel():
    fol = ProperFoliation(generator=_poly_z1(n=3))
    start = np.array([0.0, 0.0, 1.0, 0.0, 0.5, 0.0])
    steer = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 0.0])   # push z3
    trace = trace_leaf(fol, start, steer=steer, steps=80, step_size=0.05)
    assert np.allclose(trace.points[:, 2], 1.0, atol=1e-10)  # z2 pinned
    assert np.all(np.diff(trace.points[:, 4]) > 0)           # z3 advances
    assert trace.residual_max <= 1e-10


def test_trace_singular_start_rejected():
    fol = ProperFoliation(generator=_poly_z1z2())
    with pytest.raises(SingularStartError) as err:
        trace_leaf(fol, np.zeros(4))
    assert err.value.margin is not None and err.value.margin < 1e-6


def test_trace_stall_detector_truncates():
    # Fixed inward steering never improves the best radius: the stall window
    # must cut the trace off with a diagnostic rather than spinning.
    fol = ProperFoliation(generator=_poly_z1())
    trace = trace_leaf(fol, [0.0, 0.0, 3.0, 0.0],
                       steer=[0.0, 0.0, -1.0, 0.0],
                       steps=500, step_size=0.05, stall_window=50)
    assert trace.status == "stalled"
    assert trace.truncated
    assert trace.steps_taken <= 60
    assert "no radial progress" in trace.diagnostic


def test_trace_argument_validation():
    fol = ProperFoliation(generator=_poly_z1())
    with pytest.raises(ValueError):
        trace_leaf(fol, [0.0, 0.0, 1.0, 0.0], steps=0)
    with pytest.raises(ValueError):
        trace_leaf(fol, [0.0, 0.0, 1.0, 0.0], step_size=-0.1)
    with pytest.raises(InvalidDimensionError):
        trace_leaf(fol, [0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        trace_leaf(fol, [0.0, 0.0, 1.0, 0.0], steer=[0.0, 0.0, 0.0, 0.0])


def test_leaf_trace_csv_round_trip(tmp_path):
    fol = ProperFoliation(generator=_poly_z1())
    trace = trace_leaf(fol, [0.0, 0.0, 1.0, 0.0], steps=40, step_size=0.05)
    target = tmp_path / "leaf.csv"
    trace.to_csv(str(target))
    back = PathSample.from_csv(str(target))
    assert np.allclose(back.points, trace.points, atol=0)
    assert isinstance(trace, LeafTrace) and isinstance(trace, PathSample)


# -- completeness audit ------------------------------------------------------------


@pytest.fixture(scope="module")
def wide_run():
    """Three-stage build on width-2 shells: certified enlargement 2 each."""
    schedule = FitSchedule(shells=[Shell(1.0, 3.0), Shell(3.0, 5.0),
                                   Shell(5.0, 7.0)],
                           floors=[10.0, 20.0, 30.0],
                           deviations=[0.1, 0.05, 0.025])
    labs = default_stage_labyrinths(schedule, seed=424242)
    maps, report = build_function(schedule, labs, seed=424242)
    return schedule, labs, maps, report


def test_audit_trivial_when_path_stays_inside(tmp_path):
    lab = build_sparse_labyrinth(Shell(1.0, 2.0), beta=0.45, layer_count=2,
                                 seed=3, axis_align=0.95)
    fol = ProperFoliation(generator=_poly_z1())
    report = completeness_audit(fol, [lab], "euclidean", paths=2, seed=9,
                                trace_steps=3, trace_step=0.01)
    assert bool(report)
    for rec in report.records:
        assert rec.crossed == [] and rec.certified == 0.0
        assert rec.ok and rec.measured > 0.0
    assert report.summary["min_length_ratio"] is None


def test_audit_wide_shells_end_to_end(wide_run):
    # Certified Euclidean bound per shell is the crossing-lemma total
    # hypot(width, detour) = 2 for these sparse stacks, so three avoided
    # crossings force measured length >= 6 within the 5% slack.
    schedule, labs, maps, report = wide_run
    for lab in labs:
        assert lab.analytic_bound <= 0.1
        assert lab.total_enlargement == pytest.approx(2.0, abs=3e-3)
    fol = ProperFoliation(generator=maps[-1])
    audit = completeness_audit(fol, labs, "euclidean", paths=6, seed=20260823)
    expected = sum(lab.total_enlargement for lab in labs)
    assert expected >= 6.0 - 1e-9
    for rec in audit.records:
        assert rec.crossed == [0, 1, 2]
        assert rec.avoided == [0, 1, 2]
        assert rec.hits == []
        assert rec.certified == pytest.approx(expected, rel=1e-12)
        assert rec.measured >= 0.95 * 6.0
        assert rec.ok
    assert audit.summary["all_ok"]
    assert audit.summary["paths_crossing_all"] == 6
    assert audit.summary["min_length_ratio"] >= 0.95
    assert audit.properness["status"] == "proper"
    assert audit.properness["partial_check"] is True


def test_audit_conformal_metric_uses_measured_floor(wide_run):
    # conformal:invsq02 floors the weight at 0.2, and every shell here
    # reaches radius 2, so each measured comparability constant is the floor
    # exactly and certified bounds scale to 0.2 * M_i.
    schedule, labs, maps, _ = wide_run
    fol = ProperFoliation(generator=maps[-1])
    audit = completeness_audit(fol, labs, "conformal:invsq02", paths=4,
                               seed=7)
    for entry in audit.shells:
        assert entry["comparability"] == pytest.approx(0.2, abs=1e-15)
    expected = 0.2 * sum(lab.total_enlargement for lab in labs)
    for rec in audit.records:
        assert rec.certified == pytest.approx(expected, rel=1e-12)
        assert rec.measured >= 0.95 * expected
    assert audit.summary["all_ok"]


def test_audit_agrees_with_modulus_certificate(wide_run):
    # Untwisted consistency: pieces carry generator modulus above the stage
    # floor minus downstream drift, leaves carry modulus below the start
    # ball plus drift, so geometric avoidance and the modulus certificate
    # must agree on every crossed labyrinth.
    schedule, labs, maps, _ = wide_run
    final = maps[-1]
    drift = schedule.total_drift
    for i, lab in enumerate(labs):
        fresh = sample_pieces(lab, derive_seed(5, "consistency", i))
        moduli = np.abs(final.evaluate(fresh))[:, 0]
        assert moduli.min() >= schedule.floors[i] - drift
    fol = ProperFoliation(generator=final)
    audit = completeness_audit(fol, labs, "euclidean", paths=3, seed=13)
    for rec, trace in zip(audit.records, audit.traces):
        level = np.max(np.abs(fol.level_values(trace.points)))
        assert level <= 1.0 + drift
        assert rec.avoided == rec.crossed   # modulus gap forbids any hit


def test_audit_piece_hit_recorded_not_raised():
    # Plant a disk dead across the one ray the deterministic start will ride
    # (f = z1 leaves trace straight along the z2 phase ray), then check the
    # contact surfaces as a finding while the audit still completes.
    shell = Shell(1.5, 3.0)
    seed = 77
    start = ball_points(4, 1, 0.4 * shell.inner,
                        derive_seed(seed, "audit-start", 0, 0))[0]
    z2 = start[2] + 1j * start[3]
    ray = z2 / abs(z2)
    center = np.array([start[0], start[1],
                       2.2 * ray.real, 2.2 * ray.imag])
    normal = np.array([0.0, 0.0, ray.real, ray.imag])
    piece = HyperplanePiece(center=center, normal=normal, radius=0.5)
    lab = Labyrinth(n=2, shell=shell, layer_radii=[2.2], pieces=[piece],
                    enlargement=shell.width, analytic_bound=0.0,
                    taut_bound=0.0, total_enlargement=shell.width,
                    c_floor=1.0, seed=seed)
    fol = ProperFoliation(generator=_poly_z1())
    report = completeness_audit(fol, [lab], "euclidean", paths=1, seed=seed,
                                start_radius_frac=0.4)
    rec = report.records[0]
    assert rec.crossed == [0]
    assert rec.avoided == []
    assert rec.hits and rec.hits[0]["labyrinth"] == 0
    assert rec.certified == 0.0 and rec.ok
    assert report.summary["piece_hits"] == 1
    assert not report.summary["all_ok"]


def test_audit_preconditions():
    lab_a = build_sparse_labyrinth(Shell(1.0, 2.0), beta=0.45, layer_count=1,
                                   seed=1, axis_align=0.95)
    lab_b = build_sparse_labyrinth(Shell(2.0, 3.0), beta=0.45, layer_count=1,
                                   seed=2, axis_align=0.95)
    fol = ProperFoliation(generator=_poly_z1())
    with pytest.raises(ValueError):
        completeness_audit(fol, [lab_b, lab_a], "euclidean", paths=1)
    with pytest.raises(ValueError):
        completeness_audit(fol, [lab_a], "euclidean", paths=0)
    with pytest.raises(ValueError):
        completeness_audit(fol, [], "euclidean", paths=1)
    with pytest.raises(TypeError):
        completeness_audit(fol, [lab_a], object(), paths=1)
    lab_c3 = build_sparse_labyrinth(Shell(1.0, 2.0), beta=0.45,
                                    layer_count=1, seed=3, n=3)
    with pytest.raises(InvalidDimensionError):
        completeness_audit(fol, [lab_c3], "euclidean", paths=1)


def test_audit_report_serialization_and_determinism(tmp_path):
    lab = build_sparse_labyrinth(Shell(1.0, 2.0), beta=0.45, layer_count=2,
                                 seed=6, axis_align=0.95)
    fol = ProperFoliation(generator=_poly_z1())

    def run():
        return completeness_audit(fol, [lab], "scaled:0.5", paths=2, seed=99,
                                  trace_steps=400, trace_step=0.05)

    first, second = run(), run()
    assert canonical(first.to_dict()) == canonical(second.to_dict())

    target = tmp_path / "audit.json"
    first.save(target)
    raw = target.read_text()
    assert raw.endswith("\n") and '"audit_report"' in raw

    written = first.save_paths(tmp_path / "paths")
    assert len(written) == 2
    back = PathSample.from_csv(str(written[0]))
    assert np.allclose(back.points, first.traces[0].points, atol=0)
    # scaled:0.5 halves lengths; crossing the unit-width shell still clears
    # the certified 0.5 * M bound.
    assert first.shells[0]["comparability"] == pytest.approx(0.5, abs=1e-12)
    assert bool(first)
