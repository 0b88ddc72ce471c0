"""Regenerate the bundled spherical t-design tables (``src/shcenhance/data/designs.json``).

Each design is found numerically: a random start is relaxed by minimizing the
Legendre energy ``sum_{n=1..t} sum_ij P_n(x_i . x_j)``, which vanishes exactly
on t-designs, then polished with least squares on the residual moments
``sum_i Y_n^m(x_i)``. Only designs whose residual reaches ~1e-14 are kept.

    python scripts/make_designs.py
"""
import json
import sys
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares, minimize

from shcenhance.sh_core import sph_harm_matrix

# point counts per degree: comfortably above the dimension count so
# designs exist and the solver converges from random starts
SIZES = {4: 14, 6: 26, 8: 40, 10: 62}


def _to_xyz(ang):
    th, ph = np.split(ang, 2)
    st = np.sin(th)
    return np.stack([st * np.cos(ph), st * np.sin(ph), np.cos(th)], axis=1)


def _energy(ang, t):
    x = _to_xyz(ang)
    g = np.clip(x @ x.T, -1.0, 1.0)
    p_prev, p = np.ones_like(g), g.copy()
    dp_prev, dp = np.zeros_like(g), np.ones_like(g)
    e = p.sum()
    de = dp.copy()
    for n in range(2, t + 1):
        p_next = ((2 * n - 1) * g * p - (n - 1) * p_prev) / n
        dp_next = dp_prev + (2 * n - 1) * p
        p_prev, p, dp_prev, dp = p, p_next, dp, dp_next
        e += p.sum()
        de += dp
    # gradient w.r.t. cartesian points, then chain to angles
    gx = 2.0 * de @ x
    th, ph = np.split(ang, 2)
    dth = np.stack([np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph), -np.sin(th)], axis=1)
    dph = np.stack([-np.sin(th) * np.sin(ph), np.sin(th) * np.cos(ph), np.zeros_like(th)], axis=1)
    return e, np.concatenate([(gx * dth).sum(1), (gx * dph).sum(1)])


def _moments(ang, t):
    # canonicalize through cartesian points: unconstrained angles may leave [0, pi]
    x = _to_xyz(ang)
    th = np.arccos(np.clip(x[:, 2], -1.0, 1.0))
    ph = np.arctan2(x[:, 1], x[:, 0])
    s = sph_harm_matrix(t, th, ph).sum(axis=0)[1:]
    return np.concatenate([s.real, s.imag])


def find_design(t, size, seed=0, tries=50):
    rng = np.random.default_rng(seed)
    for _ in range(tries):
        v = rng.normal(size=(size, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        ang = np.concatenate([np.arccos(v[:, 2]), np.arctan2(v[:, 1], v[:, 0])])
        ang = minimize(_energy, ang, args=(t,), jac=True, method="L-BFGS-B",
                       options={"maxiter": 5000, "gtol": 1e-12}).x
        res = least_squares(_moments, ang, args=(t,), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        err = np.abs(res.fun).max()
        if err < 1e-13:
            return _to_xyz(res.x), err
    raise RuntimeError(f"no {t}-design with {size} points found")


def main(out=Path(__file__).resolve().parents[1] / "src/shcenhance/data/designs.json"):
    designs = {}
    for t, size in SIZES.items():
        pts, err = find_design(t, size)
        print(f"t={t}: {size} points, max moment residual {err:.2e}", file=sys.stderr)
        designs[str(t)] = {"size": size, "points": [[float(c) for c in p] for p in pts]}
    out.write_text(json.dumps({"version": 1, "designs": designs}, indent=1))


if __name__ == "__main__":
    main()
