"""Finite-difference verification of every tensor operator and loss term.

Each entry builds well-conditioned double-precision instances (probability
inputs away from the clamp boundaries, ground truth with every class present,
scale/shift parameters away from their neutral values) so central differences
measure the true gradient rather than rounding noise, then compares against
the tape gradient at relative tolerance 1e-5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bevseg import losses
from bevseg.autodiff import Tensor, finite_diff_check, ops
from bevseg.grid import DistanceMap

TOL = 1e-5


def _probs(rng, shape) -> np.ndarray:
    return 0.1 + 0.8 * rng.random(shape)


def _gt(rng, c: int, h: int, w: int) -> np.ndarray:
    """Random binary stack where every class has positives and negatives."""
    g = (rng.random((c, h, w)) < 0.45).astype(np.uint8)
    for ci in range(c):
        g[ci].flat[ci] = 1
        g[ci].flat[-1 - ci] = 0
    return g


def _weighted(op):
    """Reduce ``op`` to a scalar through a fixed random linear functional."""
    def build(rng, x_arr):
        r = rng.normal(size=op(Tensor(x_arr.copy())).shape)
        return (lambda t: ops.tsum(ops.mul(op(t), r))), Tensor(x_arr)
    return build


def _op_checks():
    def binary(op, side):
        def build(rng):
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4,)) + (2.5 if op is ops.div else 0.0)
            fixed, x = (Tensor(b), a) if side == 0 else (Tensor(a), b)
            if side == 0:
                return _weighted(lambda t: op(t, fixed))(rng, x)
            return _weighted(lambda t: op(fixed, t))(rng, x)
        return build

    def unary(op, sampler=None):
        def build(rng):
            x = sampler(rng) if sampler else rng.normal(size=(3, 5))
            return _weighted(op)(rng, x)
        return build

    def conv_like(which):
        def build(rng):
            x = rng.normal(size=(1, 2, 6, 6))
            w = rng.normal(size=(3, 2, 3, 3)) * 0.5
            b = rng.normal(size=(3,))
            parts = {"x": x, "w": w, "b": b}
            xt, wt, bt = Tensor(x), Tensor(w), Tensor(b)
            def op(t):
                args = {"x": xt, "w": wt, "b": bt, which: t}
                return ops.conv2d(args["x"], args["w"], args["b"], stride=1, padding=1)
            return _weighted(op)(rng, parts[which])
        return build

    def deconv_like(which):
        def build(rng):
            x = rng.normal(size=(1, 3, 4, 4))
            w = rng.normal(size=(3, 2, 2, 2)) * 0.5
            parts = {"x": x, "w": w}
            xt, wt = Tensor(x), Tensor(w)
            def op(t):
                args = {"x": xt, "w": wt, which: t}
                return ops.conv_transpose2d(args["x"], args["w"], None,
                                            stride=2, output_padding=1)
            return _weighted(op)(rng, parts[which])
        return build

    def linear_like(which):
        def build(rng):
            x = rng.normal(size=(6, 4))
            w = rng.normal(size=(4, 3))
            b = rng.normal(size=(3,))
            parts = {"x": x, "w": w, "b": b}
            xt, wt, bt = Tensor(x), Tensor(w), Tensor(b)
            def op(t):
                args = {"x": xt, "w": wt, "b": bt, which: t}
                return ops.linear(args["x"], args["w"], args["b"])
            return _weighted(op)(rng, parts[which])
        return build

    def matmul_side(side):
        def build(rng):
            a = rng.normal(size=(4, 5))
            b = rng.normal(size=(5, 3))
            if side == 0:
                bt = Tensor(b)
                return _weighted(lambda t: ops.matmul(t, bt))(rng, a)
            at = Tensor(a)
            return _weighted(lambda t: ops.matmul(at, t))(rng, b)
        return build

    def bn_check(which, training):
        def build(rng):
            x = rng.normal(size=(2, 3, 4, 4))
            gamma = 0.5 + rng.random(3)
            beta = rng.normal(size=(3,))
            rm = rng.normal(size=(3,)) * 0.2
            rv = 0.5 + rng.random(3)
            parts = {"x": x, "gamma": gamma, "beta": beta}
            xt, gt_, bt = Tensor(x), Tensor(gamma), Tensor(beta)
            def op(t):
                args = {"x": xt, "gamma": gt_, "beta": bt, which: t}
                return ops.batchnorm2d(args["x"], args["gamma"], args["beta"],
                                       rm.copy(), rv.copy(), training=training)
            return _weighted(op)(rng, parts[which])
        return build

    def grid_sample_check(which):
        def build(rng):
            feat = rng.normal(size=(3, 7, 7))
            pts = np.stack([rng.uniform(0.4, 5.6, 9), rng.uniform(0.4, 5.6, 9)], axis=1)
            pts += 0.37  # keep clear of the integer lattice for the FD probes
            pts = np.clip(pts, 0.2, 5.8)
            ft, pt = Tensor(feat), Tensor(pts)
            if which == "feat":
                return _weighted(lambda t: ops.grid_sample(t, pt))(rng, feat)
            return _weighted(lambda t: ops.grid_sample(ft, t))(rng, pts)
        return build

    checks = [
        ("add[a]", binary(ops.add, 0)), ("add[b]", binary(ops.add, 1)),
        ("sub[a]", binary(ops.sub, 0)), ("sub[b]", binary(ops.sub, 1)),
        ("mul[a]", binary(ops.mul, 0)), ("mul[b]", binary(ops.mul, 1)),
        ("div[a]", binary(ops.div, 0)), ("div[b]", binary(ops.div, 1)),
        ("neg", unary(ops.neg)),
        ("pow_scalar", unary(lambda t: ops.pow_scalar(t, 3.0),
                             sampler=lambda rng: 0.5 + rng.random((3, 5)))),
        ("log", unary(ops.log, sampler=lambda rng: 0.2 + rng.random((3, 5)))),
        ("exp", unary(ops.exp)),
        ("clamp", unary(lambda t: ops.clamp(t, -1.0, 1.0),
                        sampler=lambda rng: rng.uniform(-2, 2, (4, 5)))),
        ("relu", unary(ops.relu, sampler=lambda rng: rng.normal(size=(4, 5)) + 0.01)),
        ("sigmoid", unary(ops.sigmoid)),
        ("tsum", unary(lambda t: ops.tsum(t, axis=1, keepdims=True))),
        ("tsum[all]", unary(lambda t: ops.tsum(t))),
        ("tmean", unary(lambda t: ops.tmean(t, axis=0))),
        ("reshape", unary(lambda t: ops.reshape(t, (5, 3)))),
        ("transpose", unary(lambda t: ops.transpose(t, (1, 0)))),
        ("softmax", unary(lambda t: ops.softmax(t, axis=-1))),
        ("matmul[a]", matmul_side(0)), ("matmul[b]", matmul_side(1)),
        ("linear[x]", linear_like("x")), ("linear[w]", linear_like("w")),
        ("linear[b]", linear_like("b")),
        ("conv2d[x]", conv_like("x")), ("conv2d[w]", conv_like("w")),
        ("conv2d[b]", conv_like("b")),
        ("conv_transpose2d[x]", deconv_like("x")),
        ("conv_transpose2d[w]", deconv_like("w")),
        ("maxpool2d", unary(lambda t: ops.maxpool2d(t, 2, 2),
                            sampler=lambda rng: rng.normal(size=(1, 2, 6, 6)))),
        ("maxpool2d[floor_odd]", unary(lambda t: ops.maxpool2d(t, 2, 2, floor_odd=True),
                                       sampler=lambda rng: rng.normal(size=(1, 2, 7, 7)))),
        ("bilinear_resize[up]", unary(lambda t: ops.bilinear_resize(t, 9, 9),
                                      sampler=lambda rng: rng.normal(size=(1, 2, 5, 5)))),
        ("bilinear_resize[down]", unary(lambda t: ops.bilinear_resize(t, 4, 4),
                                        sampler=lambda rng: rng.normal(size=(1, 2, 7, 7)))),
        ("batchnorm2d[x]", bn_check("x", True)),
        ("batchnorm2d[gamma]", bn_check("gamma", True)),
        ("batchnorm2d[beta]", bn_check("beta", True)),
        ("batchnorm2d[x,eval]", bn_check("x", False)),
        ("grid_sample[feat]", grid_sample_check("feat")),
        ("grid_sample[points]", grid_sample_check("points")),
    ]

    def concat_side(side):
        def build(rng):
            a = rng.normal(size=(1, 2, 4, 4))
            b = rng.normal(size=(1, 3, 4, 4))
            if side == 0:
                bt = Tensor(b)
                return _weighted(lambda t: ops.concat_channels(t, bt))(rng, a)
            at = Tensor(a)
            return _weighted(lambda t: ops.concat_channels(at, t))(rng, b)
        return build

    checks.append(("concat_channels[a]", concat_side(0)))
    checks.append(("concat_channels[b]", concat_side(1)))
    return checks


def _loss_checks():
    C, H, W = 4, 6, 6

    def with_gt(fn):
        def build(rng):
            p = _probs(rng, (C, H, W))
            g = _gt(rng, C, H, W)
            return (lambda t: fn(t, g)), Tensor(p)
        return build

    def boundary(normalized):
        def build(rng):
            p = _probs(rng, (C, H, W))
            dmap = DistanceMap.from_masks(_gt(rng, C, H, W))
            return (lambda t: losses.boundary_loss(t, dmap, normalized=normalized)), Tensor(p)
        return build

    def total(rng):
        p = _probs(rng, (C, H, W))
        g = _gt(rng, C, H, W)
        cfg = losses.LossConfig()
        dmap = DistanceMap.from_masks(g, alpha=cfg.boundary_alpha, m_alpha=cfg.boundary_m_alpha)
        return (lambda t: losses.total_loss(t, g, cfg, dmap).tensor), Tensor(p)

    return [
        ("focal_loss", with_gt(losses.focal_loss)),
        ("dice_loss", with_gt(losses.dice_loss)),
        ("lovasz_loss", with_gt(losses.lovasz_loss)),
        ("sem_scal_loss", with_gt(losses.sem_scal_loss)),
        ("geo_scal_loss", with_gt(losses.geo_scal_loss)),
        ("boundary_loss[raw]", boundary(False)),
        ("boundary_loss[normalized]", boundary(True)),
        ("total_loss", total),
    ]


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    tol: float = TOL

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tol


def run_suite(instances: int = 5, tol: float = TOL, seed: int = 0,
              report=None) -> list[CheckResult]:
    """Run every check ``instances`` times; ``report`` gets one line per check."""
    results = []
    for idx, (name, build) in enumerate(_op_checks() + _loss_checks()):
        worst = 0.0
        for k in range(instances):
            rng = np.random.default_rng((seed, idx, k))
            f, x = build(rng)
            worst = max(worst, finite_diff_check(f, x, rng=np.random.default_rng((seed, idx, k, 1))))
        res = CheckResult(name=name, instances=instances, max_rel_err=worst, tol=tol)
        results.append(res)
        if report is not None:
            report(f"{'PASS' if res.ok else 'FAIL'}  {name:28s} max rel err {worst:.3e}")
    return results


def suite_passed(results: list[CheckResult]) -> bool:
    return all(r.ok for r in results)
