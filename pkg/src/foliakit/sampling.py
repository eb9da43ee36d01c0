"""Deterministic seeded samplers used throughout the package.

All randomness flows from a single run seed through `derive_seed`, which maps
(seed, label) pairs to independent child seeds with numpy's SeedSequence. Low
discrepancy streams use scrambled Halton sequences so that sample counts do not
have to be powers of two.
"""

from __future__ import annotations

import zlib

import numpy as np
from scipy.stats import qmc


def derive_seed(master: int, *labels: object) -> int:
    """Stable child seed for a purpose labelled by strings/ints.

    The label hash uses crc32 so the mapping is reproducible across runs and
    platforms; SeedSequence mixes it with the master seed.
    """
    words = [int(master) & 0xFFFFFFFF]
    for lab in labels:
        words.append(zlib.crc32(str(lab).encode("utf-8")) & 0xFFFFFFFF)
    seq = np.random.SeedSequence(words)
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def rng_for(master: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))


def halton(dim: int, count: int, seed: int) -> np.ndarray:
    """Scrambled Halton points in the unit cube, shape (count, dim)."""
    engine = qmc.Halton(d=dim, scramble=True, seed=seed)
    return engine.random(count)


def sphere_directions(dim: int, count: int, seed: int,
                      engine: str = "halton") -> np.ndarray:
    """Unit vectors in R^dim.

    The default Halton/probit stream is great for nets but digital-net
    artifacts leave small voids near coordinate axes; pass engine="rng" where
    isotropy around specific points matters more than discrepancy.
    """
    if engine == "rng":
        g = np.random.default_rng(seed).standard_normal((count, dim))
    else:
        from scipy.special import ndtri

        u = halton(dim, count, seed)
        # Keep strictly inside (0,1) before the probit transform.
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        g = ndtri(u)
    norms = np.linalg.norm(g, axis=1)
    norms[norms < 1e-30] = 1.0
    return g / norms[:, None]


def ball_points(dim: int, count: int, radius: float, seed: int,
                center: np.ndarray | None = None,
                engine: str = "halton") -> np.ndarray:
    """Volume-uniform points of the closed ball (see sphere_directions on engines)."""
    dirs = sphere_directions(dim, count, derive_seed(seed, "dir"), engine=engine)
    if engine == "rng":
        u = np.random.default_rng(derive_seed(seed, "rad")).random(count)
    else:
        u = halton(1, count, derive_seed(seed, "rad"))[:, 0]
    r = radius * u ** (1.0 / dim)
    pts = dirs * r[:, None]
    if center is not None:
        pts = pts + np.asarray(center)[None, :]
    return pts


def shell_points(dim: int, count: int, inner: float, outer: float, seed: int) -> np.ndarray:
    """Volume-uniform low-discrepancy points of the closed shell inner<=|x|<=outer."""
    dirs = sphere_directions(dim, count, derive_seed(seed, "dir"))
    u = halton(1, count, derive_seed(seed, "rad"))[:, 0]
    r = ((1.0 - u) * inner ** dim + u * outer ** dim) ** (1.0 / dim)
    return dirs * r[:, None]


def sphere_points(dim: int, count: int, radius: float, seed: int) -> np.ndarray:
    return radius * sphere_directions(dim, count, seed)
