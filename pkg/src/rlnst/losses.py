"""Supervised objectives: content, style (Gram), total variation, compound
temporal consistency, their weighted combination, and the evaluation-only
temporal metric for stylized clips.

Content compares feature-tap activations of the moving image against its
content reference; style compares Gram statistics against a fixed target;
temporal consistency penalizes disagreement between stylizing a warped state
and warping the stylized output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imageops import gaussian_blur, resize_bilinear
from .rng import Rng

CONTENT_TAP = 1  # second feature tap carries the content comparison


@dataclass
class LossWeights:
    lam: float = 1e5    # style term ("lambda" in configs)
    beta: float = 1e-7  # total variation term
    zeta: float = 1e2   # temporal term, video mode only

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0 or self.zeta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class StyleTarget:
    """Style image plus its cached per-tap Gram matrices."""

    image: np.ndarray               # (3, H, W) in [0, 1]
    grams: list = field(default_factory=list)   # list of (C, C) float64 arrays

    @classmethod
    def from_image(cls, image: np.ndarray, featnet) -> "StyleTarget":
        img = np.asarray(image)
        with ad.no_grad():
            taps = featnet(Tensor(img[None].astype(np.float32)))
            grams = [gram(t).data[0].astype(np.float64) for t in taps]
        return cls(image=img, grams=grams)


def gram(feat: Tensor) -> Tensor:
    """Per-item channel Gram matrix F~ F~^T / (C*H*W); output (N, C, C)."""
    n, c, h, w = feat.shape
    items = []
    for i in range(n):
        f = feat[i].reshape(c, h * w)
        g = ad.matmul(f, f.t()) * (1.0 / (c * h * w))
        items.append(g.reshape(1, c, c))
    return items[0] if n == 1 else ad.concat(items, axis=0)


def content_loss(m: Tensor, c: Tensor, featnet) -> Tensor:
    """Normalized squared feature distance at the content tap."""
    if m.shape != c.shape:
        raise ad.ShapeError(f"moving image {m.shape} vs content {c.shape}")
    fm = featnet(m)[CONTENT_TAP]
    with ad.no_grad():
        fc = featnet(c if isinstance(c, Tensor) else Tensor(c))
    target = fc[CONTENT_TAP].data
    n, ch, h, w = fm.shape
    diff = fm - Tensor(target)
    return diff.square().sum() * (1.0 / (ch * h * w * n))


def style_loss(m: Tensor, target: StyleTarget, featnet) -> Tensor:
    """Sum over taps of squared Frobenius distance between Gram matrices."""
    taps = featnet(m)
    n = m.shape[0]
    total = None
    for tap, g_target in zip(taps, target.grams):
        g = gram(tap)
        diff = g - Tensor(np.broadcast_to(g_target.astype(tap.dtype), g.shape).copy())
        term = diff.square().sum()
        total = term if total is None else total + term
    return total * (1.0 / n)


def tv_loss(m: Tensor) -> Tensor:
    """Squared anisotropic neighbor differences, normalized by N*C*H*W."""
    n, c, h, w = m.shape
    if h * w < 2:
        raise ValueError("total variation needs at least 2 pixels")
    dh = m[:, :, 1:, :] - m[:, :, :-1, :]
    dw = m[:, :, :, 1:] - m[:, :, :, :-1]
    return (dh.square().sum() + dw.square().sum()) * (1.0 / (n * c * h * w))


# -- warping -------------------------------------------------------------------

def warp(x: Tensor, flow) -> Tensor:
    """Bilinear backward-warp with border clamping.

    flow has channels (dx, dy) in pixel units, shape (2, H, W) or (N, 2, H, W);
    it is treated as a constant (gradient flows into x only).
    """
    flow_arr = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
    if flow_arr.ndim == 3:
        flow_arr = flow_arr[None]
    n, c, h, w = x.shape
    if flow_arr.shape[0] == 1 and n > 1:
        flow_arr = np.broadcast_to(flow_arr, (n, 2, h, w))
    grid_y, grid_x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out_data = np.empty_like(x.data)
    gathers = []
    for i in range(n):
        sx = np.clip(grid_x + flow_arr[i, 0].astype(np.float64), 0, w - 1)
        sy = np.clip(grid_y + flow_arr[i, 1].astype(np.float64), 0, h - 1)
        x0 = np.floor(sx).astype(int)
        y0 = np.floor(sy).astype(int)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        wx = (sx - x0).astype(x.dtype)
        wy = (sy - y0).astype(x.dtype)
        idx = [(y0 * w + x0).ravel(), (y0 * w + x1).ravel(),
               (y1 * w + x0).ravel(), (y1 * w + x1).ravel()]
        wts = [((1 - wy) * (1 - wx)).ravel(), ((1 - wy) * wx).ravel(),
               (wy * (1 - wx)).ravel(), (wy * wx).ravel()]
        flat = x.data[i].reshape(c, h * w)
        acc = sum(wt[None, :] * flat[:, ix] for ix, wt in zip(idx, wts))
        out_data[i] = acc.reshape(c, h, w)
        gathers.append((idx, wts))
    out = Tensor(out_data, requires_grad=ad._track(x))
    if out.requires_grad:
        src = x

        def backward(g):
            gx = np.zeros_like(src.data)
            for i, (idx, wts) in enumerate(gathers):
                gi = g[i].reshape(c, h * w)
                tgt = gx[i].reshape(c, h * w)
                for ix, wt in zip(idx, wts):
                    np.add.at(tgt, (slice(None), ix), gi * wt[None, :])
            src._accumulate(gx)

        ad._record(out, (src,), backward)
    return out


def warp_np(arr: np.ndarray, flow: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return warp(Tensor(arr[None] if arr.ndim == 3 else arr), flow).data.reshape(arr.shape)


def synth_motion(h: int, w: int, rng: Rng, wavy_std: float = 0.001,
                 translation: Optional[Sequence[float]] = None) -> np.ndarray:
    """Random smooth flow: a blurred coarse Gaussian map plus a global shift.

    The coarse map has one cell per ~100 pixels, is resized to full size and
    blurred (nominal kernel size 100), then a per-axis uniform translation in
    [-10, 10] is added. Deterministic given the rng.
    """
    gh = max(1, round(h / 100))
    gw = max(1, round(w / 100))
    wavy = rng.normal((2, gh, gw), std=wavy_std) if wavy_std > 0 else np.zeros((2, gh, gw))
    full = np.stack([
        gaussian_blur(resize_bilinear(wavy[k], h, w), 100) for k in range(2)
    ])
    if translation is None:
        translation = rng.uniform((2,), low=-10.0, high=10.0)
    return (full + np.asarray(translation, dtype=np.float64)[:, None, None]).astype(np.float32)


def draw_noise(shape, rng: Rng) -> np.ndarray:
    """State perturbation for the temporal term: N(0, s^2) with s ~ U(0.001, 0.002)."""
    sigma = rng.uniform((), low=0.001, high=0.002)
    return rng.normal(shape, std=float(sigma)).astype(np.float32)


def compound_temporal_loss(model, s: Tensor, m: Tensor, flow, delta,
                           eps: np.ndarray) -> Tensor:
    """L1 consistency between stylizing the warped-and-noised state and
    warping the current moving image.

    eps is the frozen policy noise that produced m; reusing it in the warped
    branch makes the loss exactly zero under identity motion and zero noise.
    """
    if m.shape != s.shape:
        raise ad.ShapeError(f"moving image {m.shape} vs state {s.shape}")
    delta_arr = np.asarray(delta, dtype=np.float32)
    s_warp = warp(s if isinstance(s, Tensor) else Tensor(s), flow) + Tensor(delta_arr)
    out = model.actor(s_warp)
    a = out.mu + out.log_sigma.exp() * Tensor(eps.astype(out.mu.dtype))
    m_branch, _ = model.stylizer(a, out.skips)
    m_warp = warp(m, flow)
    return (m_branch - m_warp).abs().mean()


def combined_loss(m: Tensor, c: Tensor, target: StyleTarget, weights: LossWeights,
                  featnet, mode: str = "image", video_ctx: Optional[dict] = None):
    """Weighted sum of the style-learning terms.

    Returns (loss, parts) where parts maps term names to float values.
    video_ctx supplies {model, s, flow, delta, eps} and is rejected in image
    mode.
    """
    if mode not in ("image", "video"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "image" and video_ctx is not None:
        raise ValueError("video arguments supplied in image mode")
    if mode == "video" and video_ctx is None:
        raise ValueError("video mode requires flow/noise context")
    l_co = content_loss(m, c, featnet)
    l_st = style_loss(m, target, featnet)
    l_tv = tv_loss(m)
    loss = l_co + weights.lam * l_st + weights.beta * l_tv
    parts = {"Lco": l_co.item(), "Lst": l_st.item(), "Ltv": l_tv.item()}
    if mode == "video":
        l_ct = compound_temporal_loss(video_ctx["model"], video_ctx["s"], m,
                                      video_ctx["flow"], video_ctx["delta"],
                                      video_ctx["eps"])
        loss = loss + weights.zeta * l_ct
        parts["Lct"] = l_ct.item()
    return loss, parts


def temporal_metric(frames: Sequence[np.ndarray], flows: Sequence[np.ndarray],
                    masks: Optional[Sequence[np.ndarray]] = None) -> float:
    """Mean masked L1 between each stylized frame warped forward and its
    successor. flows[t] is the flow that synthesized frame t+1 from frame t.
    """
    if len(frames) < 2:
        raise ValueError("temporal metric needs at least 2 frames")
    if len(flows) < len(frames) - 1:
        raise ValueError("need one flow per consecutive frame pair")
    total = 0.0
    for t in range(len(frames) - 1):
        warped = warp_np(np.asarray(frames[t], dtype=np.float64), flows[t])
        diff = np.abs(warped - np.asarray(frames[t + 1], dtype=np.float64))
        if masks is not None:
            mask = np.asarray(masks[t], dtype=np.float64)
            denom = mask.sum() * frames[t].shape[0]
            total += float((diff * mask[None]).sum() / max(denom, 1e-12))
        else:
            total += float(diff.mean())
    return total / (len(frames) - 1)
