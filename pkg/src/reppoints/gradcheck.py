"""Autograd versus central finite differences on random instances.

Every suite draws random float64 instances kept away from the kinks of the
operation under test (ties for min-max, integer sample coordinates for
bilinear interpolation), differentiates with autograd, and compares against
:func:`reppoints.oracles.fd_gradient`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import deform, geometry, losses
from .oracles import FiniteDiffSpec, fd_gradient, relative_error

GEOMETRY_TOL = 1e-4
NETWORK_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_rel_err: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<16} instances={self.instances:<4} max_rel_err={self.max_rel_err:.3e} "
                f"tol={self.tolerance:.0e} ({self.seconds:.1f}s)")


def _autograd(fn: Callable[[torch.Tensor], torch.Tensor], x: np.ndarray) -> np.ndarray:
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    return t.grad.numpy()


def _numeric(fn: Callable[[torch.Tensor], torch.Tensor], x: np.ndarray, step: float) -> np.ndarray:
    with torch.no_grad():
        return fd_gradient(lambda v: float(fn(torch.from_numpy(v))), x, FiniteDiffSpec(step=step)).gradient


def _separated_points(rng: np.random.Generator, n: int, subset=None, margin: float = 1e-2) -> np.ndarray:
    while True:
        pts = rng.uniform(0, 50, (n, 2))
        sel = pts if subset is None else pts[list(subset)]
        ok = True
        for axis in range(2):
            v = np.sort(sel[:, axis])
            if len(v) > 1 and (v[1] - v[0] < margin or v[-1] - v[-2] < margin):
                ok = False
        if ok:
            return pts


def _check_box_op(rng, count, make_input, op, step, n_outputs=4):
    worst = 0.0
    for _ in range(count):
        x = make_input(rng)
        for k in range(n_outputs):
            fn = lambda t, k=k: op(t)[..., k].sum()
            worst = max(worst, relative_error(_autograd(fn, x), _numeric(fn, x, step)))
    return worst


def suite_minmax(rng, count):
    return _check_box_op(rng, count, lambda r: _separated_points(r, 9), geometry.pseudo_box_minmax, 1e-4)


def suite_partial_minmax(rng, count):
    subset = geometry.DEFAULT_PARTIAL_SUBSET
    return _check_box_op(rng, count, lambda r: _separated_points(r, 9, subset),
                         lambda t: geometry.pseudo_box_partial_minmax(t, subset), 1e-4)


def suite_moment(rng, count):
    def make(r):
        return np.concatenate([r.uniform(0, 50, 18), r.uniform(-0.5, 0.5, 2)])

    def op(x):
        return geometry.pseudo_box_moment(x[:18].reshape(9, 2), x[18:])

    return _check_box_op(rng, count, make, op, 1e-4)


def suite_refine(rng, count):
    def make(r):
        return r.uniform(-20, 20, 36)

    proj = torch.from_numpy(rng.normal(size=(9, 2)))

    def op(x):
        out = geometry.refine_points(x[:18].reshape(9, 2), x[18:].reshape(9, 2))
        return (out * proj).sum().reshape(1)

    return _check_box_op(rng, count, make, op, 1e-4, n_outputs=1)


def _away_from_integers(r, size, low, high, margin=0.02):
    v = r.uniform(low, high, size)
    frac = v - np.floor(v)
    return np.where(frac < margin, v + 2 * margin, np.where(frac > 1 - margin, v - 2 * margin, v))


def suite_bilinear(rng, count):
    c, h, w = 3, 5, 6
    worst = 0.0
    for _ in range(count):
        feat = rng.normal(size=c * h * w)
        xy = _away_from_integers(rng, 2, -1.5, w + 0.5)
        xy[1] = _away_from_integers(rng, 1, -1.5, h + 0.5)[0]
        proj = torch.from_numpy(rng.normal(size=c))
        x = np.concatenate([feat, xy])

        def fn(t):
            f = t[:c * h * w].reshape(c, h, w)
            return (deform.bilinear_sample(f, t[-2], t[-1]) * proj).sum()

        worst = max(worst, relative_error(_autograd(fn, x), _numeric(fn, x, 1e-3)))
    return worst


def suite_deform_conv(rng, count):
    b, cin, cout, h, w = 1, 2, 2, 3, 3
    sizes = [b * cin * h * w, b * 18 * h * w, cout * cin * 9, cout]
    worst = 0.0
    for _ in range(count):
        feat = rng.normal(size=sizes[0])
        off = _away_from_integers(rng, sizes[1], -1.5, 1.5)
        weight = rng.normal(size=sizes[2])
        bias = rng.normal(size=sizes[3])
        x = np.concatenate([feat, off, weight, bias])
        proj = torch.from_numpy(rng.normal(size=(b, cout, h, w)))
        cuts = np.cumsum(sizes)

        def fn(t):
            f = t[:cuts[0]].reshape(b, cin, h, w)
            o = t[cuts[0]:cuts[1]].reshape(b, 18, h, w)
            wt = t[cuts[1]:cuts[2]].reshape(cout, cin, 3, 3)
            return (deform.deform_conv3x3(f, o, wt, t[cuts[2]:]) * proj).sum()

        worst = max(worst, relative_error(_autograd(fn, x), _numeric(fn, x, 1e-3)))
    return worst


def suite_focal(rng, count):
    worst = 0.0
    for _ in range(count):
        p = rng.uniform(0.05, 0.95, 8)
        positive = torch.from_numpy(rng.random(8) < 0.5)
        gamma = float(rng.uniform(0, 3))
        alpha = float(rng.uniform(0.1, 0.9))
        fn = lambda t: losses.focal_loss(t, positive, alpha, gamma).sum()
        worst = max(worst, relative_error(_autograd(fn, p), _numeric(fn, p, 1e-6)))
    return worst


def suite_smooth_l1(rng, count):
    worst = 0.0
    for _ in range(count):
        beta = float(rng.uniform(0.05, 1.0))
        x = rng.uniform(-3, 3, 8)
        # keep a margin from the branch switch at |x| = beta
        x = np.where(np.abs(np.abs(x) - beta) < 1e-3, x * 1.1, x)
        fn = lambda t: losses.smooth_l1(t, beta).sum()
        worst = max(worst, relative_error(_autograd(fn, x), _numeric(fn, x, 1e-6)))
    return worst


SUITES = {
    "minmax": (suite_minmax, GEOMETRY_TOL),
    "partial_minmax": (suite_partial_minmax, GEOMETRY_TOL),
    "moment": (suite_moment, GEOMETRY_TOL),
    "refine_points": (suite_refine, GEOMETRY_TOL),
    "bilinear_sample": (suite_bilinear, NETWORK_TOL),
    "deform_conv3x3": (suite_deform_conv, NETWORK_TOL),
    "focal_loss": (suite_focal, NETWORK_TOL),
    "smooth_l1": (suite_smooth_l1, NETWORK_TOL),
}


def run_suites(instances: int = 100, seed: int = 0, names=None) -> list[SuiteResult]:
    results = []
    for name in names or SUITES:
        fn, tol = SUITES[name]
        rng = np.random.default_rng([seed, list(SUITES).index(name)])
        start = time.perf_counter()
        worst = fn(rng, instances)
        results.append(SuiteResult(name, instances, worst, tol, time.perf_counter() - start))
    return results
