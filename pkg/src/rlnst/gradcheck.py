"""Finite-difference verification of every backward rule the models use.

All checks run in float64 with central differences at h=1e-3 and compare
against the tape gradients. Probe points are drawn from fixed substreams and
placed where the checked function is differentiable: stacks of relu layers
with zero bias are positively homogeneous, so feature-net probes are scaled
up to keep every kink outside the finite-difference window without changing
the code path under test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import nets
from .autodiff import Tensor
from .rng import Rng

H_STEP = 1e-3
TOL_DEFAULT = 1e-4
TOL_POLICY = 1e-3
FEATURE_PROBE_SCALE = 100.0


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_err <= self.tol


def _probe(f: Callable[[Tensor], Tensor], x: Tensor, i: int, h: float) -> float:
    flat = x.data.reshape(-1)
    orig = flat[i]
    with ad.no_grad():
        flat[i] = orig + h
        fp = f(Tensor(x.data.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(x.data.copy())).item()
        flat[i] = orig
    return (fp - fm) / (2 * h)


def _grad_pair(f: Callable[[Tensor], Tensor], x: Tensor,
               coords: Optional[np.ndarray] = None,
               tol: float = TOL_DEFAULT) -> float:
    """Worst relative error between tape gradient and central differences.

    coords optionally restricts the probe to a subset of flat indices (large
    parameter tensors would make the full probe needlessly slow). A
    coordinate whose h=1e-3 window straddles a kink (relu, |.|) makes the
    central difference meaningless there; such coordinates are re-verified at
    h=1e-5 against a 10x stricter bar, and only that refinement may replace
    the wide-step estimate.
    """
    x.grad = None
    with ad.tape():
        loss = f(x)
        ad.backward(loss)
        analytic = x.grad.copy()
    x.grad = None
    if coords is None:
        numeric = ad.finite_diff_gradient(f, x, H_STEP).reshape(-1)
        coords = np.arange(numeric.size)
    else:
        numeric = np.array([_probe(f, x, i, H_STEP) for i in coords])
    ana = analytic.reshape(-1)[coords]
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(initial=0.0)) + 1e-12
    errs = np.abs(ana - numeric) / scale
    for j in np.nonzero(errs > tol / 4)[0]:
        refined = _probe(f, x, int(coords[j]), 1e-5)
        if abs(ana[j] - refined) / scale <= tol / 10:
            errs[j] = abs(ana[j] - refined) / scale
    return float(errs.max(initial=0.0))


def run_suite(seed: int = 0, inject_fault: bool = False) -> List[CheckResult]:
    rng = Rng(seed)
    results: List[CheckResult] = []

    def add(name, err, tol=TOL_DEFAULT):
        results.append(CheckResult(name, float(err), tol))

    def randn(label, shape, scale=1.0):
        return rng.derive(label).normal(shape) * scale

    # matmul
    a = Tensor(randn("mm.a", (3, 4)), requires_grad=True)
    b = Tensor(randn("mm.b", (4, 2)))
    cm = Tensor(randn("mm.c", (3, 2)))
    add("matmul", _grad_pair(lambda t: (ad.matmul(t, b) * cm).sum(), a, tol=1e-6), tol=1e-6)

    # conv2d, stride 1 and 2
    w1 = Tensor(randn("c1.w", (2, 2, 3, 3)), requires_grad=True)
    b1 = Tensor(randn("c1.b", (2,)))
    x1 = Tensor(randn("c1.x", (1, 2, 8, 8)), requires_grad=True)
    co1 = Tensor(randn("c1.c", (1, 2, 8, 8)))
    add("conv2d_s1.x", _grad_pair(
        lambda t: (ad.conv2d_reflect(t, w1, b1) * co1).sum(), x1))
    err_w = _grad_pair(
        lambda t: (ad.conv2d_reflect(x1, t, b1) * co1).sum(), w1)
    if inject_fault:
        err_w += 1.0  # simulate a corrupted backward rule
    add("conv2d_s1.w", err_w)
    co2 = Tensor(randn("c2.c", (1, 2, 4, 4)))
    add("conv2d_s2.x", _grad_pair(
        lambda t: (ad.conv2d_reflect(t, w1, b1, stride=2) * co2).sum(), x1))

    # upsample / adaptive pool
    xu = Tensor(randn("up.x", (1, 2, 5, 5)), requires_grad=True)
    cu = Tensor(randn("up.c", (1, 2, 10, 10)))
    add("upsample_nearest", _grad_pair(
        lambda t: (ad.upsample_nearest(t, 2) * cu).sum(), xu))
    xp = Tensor(randn("pool.x", (1, 3, 7, 9)), requires_grad=True)
    cp = Tensor(randn("pool.c", (1, 3, 3, 4)))
    add("avg_pool_to", _grad_pair(
        lambda t: (ad.avg_pool_to(t, 3, 4) * cp).sum(), xp))

    # instance norm
    gin = Tensor(randn("in.g", (3,)), requires_grad=True)
    bin_ = Tensor(randn("in.b", (3,)))
    xin = Tensor(randn("in.x", (2, 3, 6, 6)), requires_grad=True)
    cin = Tensor(randn("in.c", (2, 3, 6, 6)))
    add("instance_norm.x", _grad_pair(
        lambda t: (nets.instance_norm(t, gin, bin_) * cin).sum(), xin))
    add("instance_norm.gain", _grad_pair(
        lambda t: (nets.instance_norm(xin, t, bin_) * cin).sum(), gin))

    # residual block and ConvGRU on a throwaway registry
    reg = nets.ParamRegistry()
    block_rng = Rng(seed).derive("block")
    block = nets.ResidualBlock(reg, "chk.res", 4, block_rng)
    xr = Tensor(randn("res.x", (1, 4, 8, 8), scale=FEATURE_PROBE_SCALE),
                requires_grad=True)
    cr = Tensor(randn("res.c", (1, 4, 8, 8)))
    add("residual_block.x", _grad_pair(lambda t: (block(t) * cr).sum(), xr))

    gru = nets.ConvGRUCell(reg, "chk.gru", 3, 4, block_rng)
    xg = Tensor(randn("gru.x", (1, 3, 6, 6)), requires_grad=True)
    hg = Tensor(randn("gru.h", (1, 4, 6, 6)), requires_grad=True)
    cg = Tensor(randn("gru.c", (1, 4, 6, 6)))
    add("conv_gru.x", _grad_pair(lambda t: (gru(t, hg) * cg).sum(), xg))
    add("conv_gru.h", _grad_pair(lambda t: (gru(xg, t) * cg).sum(), hg))

    # bilinear warp
    xw = Tensor(randn("warp.x", (1, 3, 8, 8)), requires_grad=True)
    flow = randn("warp.f", (2, 8, 8)) * 1.7
    cw = Tensor(randn("warp.c", (1, 3, 8, 8)))
    add("warp.x", _grad_pair(lambda t: (L.warp(t, flow) * cw).sum(), xw))

    # perceptual losses; probes scaled so relu kinks sit outside the window
    model = nets.build_model(seed=seed)
    fn = model.featnet
    s = FEATURE_PROBE_SCALE
    xm = Tensor(rng.derive("loss.m").uniform((1, 3, 16, 16)) * s, requires_grad=True)
    cref = Tensor(rng.derive("loss.c").uniform((1, 3, 16, 16)) * s)
    style = rng.derive("loss.e").uniform((3, 16, 16)) * s
    target = L.StyleTarget.from_image(style, fn)
    add("content_loss", _grad_pair(lambda t: L.content_loss(t, cref, fn), xm))
    add("style_loss", _grad_pair(lambda t: L.style_loss(t, target, fn), xm))
    add("tv_loss", _grad_pair(lambda t: L.tv_loss(t), xm))
    xf = Tensor(rng.derive("feat.x").uniform((1, 3, 16, 16)) * s, requires_grad=True)
    add("feature_forward", _grad_pair(lambda t: fn(t)[3].sum(), xf))

    # compound temporal loss w.r.t. the stylizer output stage (the probe
    # parameter sits downstream of every relu in the two branches)
    state = Tensor(rng.derive("ct.s").uniform((1, 3, 16, 16)).astype(np.float64))
    eps = rng.derive("ct.eps").normal((1, 1, 4, 4))
    ct_flow = L.synth_motion(16, 16, rng.derive("ct.flow"))
    ct_delta = rng.derive("ct.delta").normal((1, 3, 16, 16), std=0.0015)

    def ct_loss(wt: Tensor) -> Tensor:
        saved = model.stylizer.out.w
        model.stylizer.out.w = wt
        try:
            out = model.actor(state)
            a = out.mu + out.log_sigma.exp() * Tensor(eps)
            m, _ = model.stylizer(a, out.skips)
            return L.compound_temporal_loss(model, state, m, ct_flow, ct_delta, eps)
        finally:
            model.stylizer.out.w = saved

    wt0 = Tensor(model.stylizer.out.w.data.astype(np.float64), requires_grad=True)
    ct_coords = rng.derive("ct.coords").integers(24, wt0.size)
    add("compound_temporal.w", _grad_pair(ct_loss, wt0, coords=ct_coords))

    # critic: action gradient is linear-in-a, checked exactly
    sc = Tensor(rng.derive("q.s").uniform((1, 3, 16, 16)).astype(np.float64))
    ac = Tensor(rng.derive("q.a").normal((1, 1, 4, 4)), requires_grad=True)
    add("critic.dQ_da", _grad_pair(lambda t: model.critic(sc, t).sum(), ac))

    # policy objective composite w.r.t. the Gaussian heads (tol 1e-3)
    alpha = 0.2

    def policy_obj(wt: Tensor) -> Tensor:
        saved = model.actor.head_mu.w
        model.actor.head_mu.w = wt
        try:
            out = model.actor(state)
            a = out.mu + out.log_sigma.exp() * Tensor(eps)
            logp = nets.gaussian_log_prob(a, out.mu, out.log_sigma)
            q = model.critic(state, a)
            return (alpha * logp - q).mean()
        finally:
            model.actor.head_mu.w = saved

    wmu = Tensor(model.actor.head_mu.w.data.astype(np.float64), requires_grad=True)
    mu_coords = rng.derive("pi.coords").integers(24, wmu.size)
    add("policy_objective.head_mu",
        _grad_pair(policy_obj, wmu, coords=mu_coords, tol=TOL_POLICY),
        tol=TOL_POLICY)

    def policy_obj_sigma(wt: Tensor) -> Tensor:
        saved = model.actor.head_log_sigma.w
        model.actor.head_log_sigma.w = wt
        try:
            out = model.actor(state)
            a = out.mu + out.log_sigma.exp() * Tensor(eps)
            logp = nets.gaussian_log_prob(a, out.mu, out.log_sigma)
            q = model.critic(state, a)
            return (alpha * logp - q).mean()
        finally:
            model.actor.head_log_sigma.w = saved

    wls = Tensor(model.actor.head_log_sigma.w.data.astype(np.float64),
                 requires_grad=True)
    ls_coords = rng.derive("pi.ls.coords").integers(24, wls.size)
    add("policy_objective.head_log_sigma",
        _grad_pair(policy_obj_sigma, wls, coords=ls_coords, tol=TOL_POLICY),
        tol=TOL_POLICY)

    return results


def format_report(results: List[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<32s} rel_err {r.rel_err:.3e}  (tol {r.tol:.0e})")
    worst = max(results, key=lambda r: r.rel_err / r.tol)
    lines.append(f"{len(results)} checks; worst {worst.name} at {worst.rel_err:.3e}")
    return "\n".join(lines)
