"""Network building blocks and the three model heads.

The actor encodes the current moving image into a spatial Gaussian over
latent actions, the stylizer decodes an action plus skip features back into
the next moving image, and the critic scores state-action pairs. A fixed
convolutional feature stack provides the perceptual taps used by the losses;
its weights never train.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng

# Trunk widths land the actor+stylizer trainable count at 178,757 (~0.18M).
ACTOR_CHANNELS = (16, 32, 64)
DECODER_CHANNELS = (64, 32, 16)
CRITIC_CHANNELS = (16, 16, 32, 32, 64, 64, 64)
FEATURE_CHANNELS = (16, 16, 32, 32, 64, 64, 64, 64)
FEATURE_TAPS = (1, 3, 5, 7)  # layer indices (0-based) whose relu output is tapped
# tap-output gain calibrated so desk-scale style losses sit near 1e-5 and the
# default reward scale yields order-1 rewards, while the style term's
# gradients stay stable under the default style learning rate
FEATURE_SCALE = 0.15
LOG_SIGMA_MIN, LOG_SIGMA_MAX = -10.0, 2.0


class DegenerateStatsError(ValueError):
    """Instance statistics are undefined (single spatial element)."""


class ParamRegistry:
    """Ordered name -> Tensor map, grouped by dotted owner prefix."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def group(self, owner: str):
        prefix = owner + "."
        return [(n, t) for n, t in self._params.items() if n.startswith(prefix)]

    def count(self, *owners: str) -> int:
        """Total trainable parameter count across the named owners."""
        total = 0
        for owner in owners:
            total += sum(t.size for _, t in self.group(owner) if t.requires_grad)
        return total

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data) for n, t in self._params.items())


# -- initializers ------------------------------------------------------------

def he_normal(rng: Rng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape, std=math.sqrt(2.0 / fan_in))


def orthogonal_rows(rng: Rng, rows: int, cols: int, gain: float) -> np.ndarray:
    """Orthonormal rows via modified Gram-Schmidt in float64.

    Avoids LAPACK so the result is bit-stable across platforms.
    """
    if rows > cols:
        raise ValueError(f"cannot orthogonalize {rows} rows of length {cols}")
    g = rng.normal((rows, cols))
    basis = np.empty_like(g)
    for r in range(rows):
        v = g[r].copy()
        for j in range(r):
            v -= np.sum(basis[j] * v) * basis[j]
        norm = math.sqrt(np.sum(v * v))
        basis[r] = v / norm
    return gain * basis


# -- layers -------------------------------------------------------------------

def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(item, channel) normalization followed by a learned affine map.

    Fused forward/backward: the composition would allocate ~10 full-size
    temporaries per call, which dominates single-core runtime.
    """
    if x.ndim != 4:
        raise ad.ShapeError(f"instance_norm needs NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 2:
        raise DegenerateStatsError("instance statistics need at least 2 spatial elements")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt(centered.var(axis=(2, 3), keepdims=True) + eps)
    xhat = centered * inv_std
    out = Tensor(xhat * gain.data[None, :, None, None] + bias.data[None, :, None, None],
                 requires_grad=ad._track(x, gain, bias))
    if out.requires_grad:
        px, pg, pb = x, gain, bias
        m = h * w

        def backward(g):
            if pb.requires_grad:
                pb._accumulate(g.sum(axis=(0, 2, 3)))
            if pg.requires_grad:
                pg._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if px.requires_grad:
                gh = g * pg.data[None, :, None, None]
                mean_gh = gh.mean(axis=(2, 3), keepdims=True)
                mean_gh_xhat = (gh * xhat).mean(axis=(2, 3), keepdims=True)
                px._accumulate(inv_std * (gh - mean_gh - xhat * mean_gh_xhat))

        ad._record(out, (x, gain, bias), backward)
    return out


class Conv2d:
    def __init__(self, reg: ParamRegistry, name: str, in_ch: int, out_ch: int,
                 k: int, rng: Rng, stride: int = 1, trainable: bool = True,
                 weight_scale: float = 1.0):
        self.stride = stride
        fan_in = in_ch * k * k
        w = he_normal(rng.derive(name + ".weight"), (out_ch, in_ch, k, k), fan_in)
        self.w = reg.add(name + ".weight", (w * weight_scale).astype(np.float32),
                         requires_grad=trainable)
        self.b = reg.add(name + ".bias", np.zeros(out_ch, dtype=np.float32),
                         requires_grad=trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d_reflect(x, self.w, self.b, stride=self.stride)


class InstanceNorm:
    def __init__(self, reg: ParamRegistry, name: str, ch: int, trainable: bool = True):
        self.gain = reg.add(name + ".gain", np.ones(ch, dtype=np.float32),
                            requires_grad=trainable)
        self.bias = reg.add(name + ".bias", np.zeros(ch, dtype=np.float32),
                            requires_grad=trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gain, self.bias)


class ConvBlock:
    """conv -> instance norm -> relu (relu optional)."""

    def __init__(self, reg, name, in_ch, out_ch, k, rng, stride=1, relu=True):
        self.conv = Conv2d(reg, name + ".conv", in_ch, out_ch, k, rng, stride=stride)
        self.norm = InstanceNorm(reg, name + ".norm", out_ch)
        self.relu = relu

    def __call__(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x))
        return y.relu() if self.relu else y


class ResidualBlock:
    """x + conv-norm-relu-conv-norm(x); identity when weights are zeroed."""

    def __init__(self, reg, name, ch, rng):
        self.block_a = ConvBlock(reg, name + ".a", ch, ch, 3, rng, relu=True)
        self.block_b = ConvBlock(reg, name + ".b", ch, ch, 3, rng, relu=False)
        self.ch = ch

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.ch:
            raise ad.ShapeError(f"residual block expects {self.ch} channels, got {x.shape[1]}")
        return x + self.block_b(self.block_a(x))


class ConvGRUCell:
    """GRU gating with reflection-padded 3x3 convolutions."""

    def __init__(self, reg, name, in_ch, hidden_ch, rng):
        self.hidden_ch = hidden_ch
        cat = in_ch + hidden_ch
        self.update = Conv2d(reg, name + ".update", cat, hidden_ch, 3, rng)
        self.reset = Conv2d(reg, name + ".reset", cat, hidden_ch, 3, rng)
        self.candidate = Conv2d(reg, name + ".candidate", cat, hidden_ch, 3, rng)

    def __call__(self, x: Tensor, h: Optional[Tensor]) -> Tensor:
        if h is None:
            n, _, hh, ww = x.shape
            h = Tensor(np.zeros((n, self.hidden_ch, hh, ww), dtype=x.dtype))
        elif h.shape[2:] != x.shape[2:]:
            raise ad.ShapeError(f"hidden spatial {h.shape[2:]} does not match input {x.shape[2:]}")
        xh = ad.concat([x, h], axis=1)
        z = self.update(xh).sigmoid()
        r = self.reset(xh).sigmoid()
        n_cand = self.candidate(ad.concat([x, r * h], axis=1)).tanh()
        return (1.0 - z) * h + z * n_cand


# -- networks -------------------------------------------------------------------

@dataclass
class ActorOutput:
    mu: Tensor
    log_sigma: Tensor
    skips: tuple
    step_hidden: Optional[Tensor] = None


class Actor:
    """Three conv blocks plus a residual layer feeding Gaussian heads."""

    def __init__(self, reg, rng, video: bool = False):
        c1, c2, c3 = ACTOR_CHANNELS
        self.block1 = ConvBlock(reg, "actor.block1", 3, c1, 9, rng)
        self.block2 = ConvBlock(reg, "actor.block2", c1, c2, 3, rng, stride=2)
        self.block3 = ConvBlock(reg, "actor.block3", c2, c3, 3, rng, stride=2)
        self.res = ResidualBlock(reg, "actor.res", c3, rng)
        self.step_gru = ConvGRUCell(reg, "actor.step_gru", c3, c3, rng) if video else None
        # small-gain heads keep the initial policy near a unit Gaussian
        self.head_mu = Conv2d(reg, "actor.head_mu", c3, 1, 3, rng, weight_scale=0.1)
        self.head_log_sigma = Conv2d(reg, "actor.head_log_sigma", c3, 1, 3, rng,
                                     weight_scale=0.1)

    def __call__(self, s: Tensor, step_hidden: Optional[Tensor] = None) -> ActorOutput:
        if s.ndim != 4 or s.shape[1] != 3:
            raise ad.ShapeError(f"actor expects N3HW input, got {s.shape}")
        if s.shape[2] % 4 or s.shape[3] % 4:
            raise ad.ShapeError(
                f"spatial dims {s.shape[2]}x{s.shape[3]} must be divisible by 4; pad the input")
        h1 = self.block1(s)
        h2 = self.block2(h1)
        h3 = self.block3(h2)
        top = self.res(h3)
        new_hidden = None
        if self.step_gru is not None:
            top = self.step_gru(top, step_hidden)
            new_hidden = top
        mu = self.head_mu(top)
        log_sigma = self.head_log_sigma(top).clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return ActorOutput(mu=mu, log_sigma=log_sigma, skips=(h1, h2, h3),
                           step_hidden=new_hidden)


def sample_action(out: ActorOutput, rng: Optional[Rng] = None,
                  mean_action: bool = False):
    """Reparameterized draw a = mu + exp(log_sigma) * eps, plus its log density.

    Returns (action, log_prob) with log_prob summed over action elements,
    one value per batch item. With mean_action=True the draw is mu itself.
    """
    if mean_action:
        eps = np.zeros(out.mu.shape, dtype=out.mu.dtype)
    else:
        if rng is None:
            raise ValueError("rng required unless mean_action=True")
        eps = rng.normal(out.mu.shape).astype(out.mu.dtype)
    sigma = out.log_sigma.exp()
    a = out.mu + sigma * Tensor(eps)
    log_prob = gaussian_log_prob(a, out.mu, out.log_sigma)
    return a, log_prob


def gaussian_log_prob(a: Tensor, mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Diagonal Gaussian log density, summed over all non-batch dims."""
    z = (a - mu) / log_sigma.exp()
    per_elem = z.square() * -0.5 - log_sigma - 0.5 * math.log(2.0 * math.pi)
    return per_elem.sum(axis=tuple(range(1, a.ndim)))


class Stylizer:
    """Decoder: latent action + skips -> next moving image in [0,1]."""

    def __init__(self, reg, rng, video: bool = False):
        c1, c2, c3 = ACTOR_CHANNELS
        d1, d2, d3 = DECODER_CHANNELS
        self.dec1 = ConvBlock(reg, "stylizer.dec1", c3 + 1, d1, 3, rng)
        self.frame_gru = ConvGRUCell(reg, "stylizer.frame_gru", d1, d1, rng) if video else None
        self.dec2 = ConvBlock(reg, "stylizer.dec2", d1 + c2, d2, 3, rng)
        self.dec3 = ConvBlock(reg, "stylizer.dec3", d2 + c1, d3, 3, rng)
        self.out = Conv2d(reg, "stylizer.out", d3, 3, 9, rng)

    def __call__(self, a: Tensor, skips: Sequence[Tensor],
                 frame_hidden: Optional[Tensor] = None):
        s1, s2, s3 = skips
        if a.shape[2:] != s3.shape[2:]:
            raise ad.ShapeError(
                f"action spatial {a.shape[2:]} does not match deepest skip {s3.shape[2:]}")
        x = self.dec1(ad.concat([a, s3], axis=1))
        new_hidden = None
        if self.frame_gru is not None:
            x = self.frame_gru(x, frame_hidden)
            new_hidden = x
        x = ad.upsample_nearest(x, 2)
        x = self.dec2(ad.concat([x, s2], axis=1))
        x = ad.upsample_nearest(x, 2)
        x = self.dec3(ad.concat([x, s1], axis=1))
        m = self.out(x).sigmoid()
        return m, new_hidden


class Critic:
    """Seven stride-alternating convs, pooled, concatenated with the pooled
    action, then a single fully-connected scalar head.

    Conv weights start well below He scale: the soft Bellman residual is
    optimized by plain SGD, and a full-scale conv stack at training
    resolution has gradient norms that exceed the stability bound of the
    default critic learning rate.
    """

    CONV_INIT_SCALE = 0.3

    def __init__(self, reg, rng, owner: str = "critic", trainable: bool = True):
        chans = (3,) + CRITIC_CHANNELS
        self.convs = []
        for i in range(7):
            stride = 2 if i % 2 == 1 else 1
            self.convs.append(Conv2d(reg, f"{owner}.conv{i + 1}", chans[i],
                                     chans[i + 1], 3, rng, stride=stride,
                                     trainable=trainable,
                                     weight_scale=self.CONV_INIT_SCALE))
        fc_in = CRITIC_CHANNELS[-1] * 16 + 64
        w = he_normal(rng.derive(f"{owner}.fc.weight"), (fc_in, 1), fc_in)
        self.fc_w = reg.add(f"{owner}.fc.weight", w.astype(np.float32),
                            requires_grad=trainable)
        self.fc_b = reg.add(f"{owner}.fc.bias", np.zeros(1, dtype=np.float32),
                            requires_grad=trainable)

    def __call__(self, s: Tensor, a: Tensor) -> Tensor:
        if s.shape[0] != a.shape[0]:
            raise ad.ShapeError(f"batch mismatch: state {s.shape[0]} vs action {a.shape[0]}")
        x = s
        for conv in self.convs:
            x = conv(x).relu()
        n = x.shape[0]
        # tanh bounds both pooled vectors: a linear action pathway would give
        # the policy-improvement step an unbounded ascent direction
        state_vec = ad.avg_pool_to(x, 4, 4).reshape(n, CRITIC_CHANNELS[-1] * 16).tanh()
        action_vec = ad.avg_pool_to(a, 8, 8).reshape(n, 64).tanh()
        joint = ad.concat([state_vec, action_vec], axis=1)
        q = ad.matmul(joint, self.fc_w) + self.fc_b
        return q.reshape(n)


class FeatureNet:
    """Fixed 8-layer conv stack with four relu taps; the perceptual backbone.

    Weights are orthogonally initialized from the seed (or loaded from a
    checkpoint container) and never train. Tap outputs are scaled by a
    constant so desk-scale loss magnitudes stay well-conditioned.
    """

    def __init__(self, reg, rng, scale: float = FEATURE_SCALE):
        self.scale = scale
        self.convs = []
        chans = (3,) + FEATURE_CHANNELS
        for i in range(8):
            name = f"featnet.conv{i + 1}"
            fan_in = chans[i] * 9
            w64 = orthogonal_rows(rng.derive(name + ".weight"),
                                  chans[i + 1], fan_in, gain=math.sqrt(2.0))
            conv = object.__new__(Conv2d)
            conv.stride = 1
            conv.w = reg.add(name + ".weight",
                             w64.reshape(chans[i + 1], chans[i], 3, 3).astype(np.float32),
                             requires_grad=False)
            conv.b = reg.add(name + ".bias", np.zeros(chans[i + 1], dtype=np.float32),
                             requires_grad=False)
            self.convs.append(conv)

    def __call__(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ad.ShapeError(f"feature net expects N3HW input, got {x.shape}")
        if x.shape[2] < 16 or x.shape[3] < 16:
            raise ad.ShapeError(f"feature net needs spatial extent >= 16, got {x.shape[2:]}")
        taps = []
        for i, conv in enumerate(self.convs):
            x = conv(x).relu()
            if i in FEATURE_TAPS:
                taps.append(x * self.scale)
            if i in (1, 3, 5):
                x = ad.avg_pool_to(x, x.shape[2] // 2, x.shape[3] // 2)
        return taps


# -- model bundle ------------------------------------------------------------

TRAINABLE_GROUPS = ("actor", "stylizer", "critic", "target_critic", "alpha")


@dataclass
class Model:
    registry: ParamRegistry
    actor: Actor
    stylizer: Stylizer
    critic: Critic
    target_critic: Critic
    featnet: FeatureNet
    log_alpha: Tensor
    video: bool = False

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data[0]))

    def inference_param_count(self) -> int:
        return self.registry.count("actor", "stylizer")

    def stylize_step(self, s: Tensor, rng: Optional[Rng] = None,
                     mean_action: bool = False,
                     step_hidden: Optional[Tensor] = None,
                     frame_hidden: Optional[Tensor] = None):
        """One step: sample an action for s and decode the next moving image.

        Returns (m, action, log_prob, new_step_hidden, new_frame_hidden).
        """
        out = self.actor(s, step_hidden=step_hidden)
        a, log_prob = sample_action(out, rng=rng, mean_action=mean_action)
        m, new_frame_hidden = self.stylizer(a, out.skips, frame_hidden=frame_hidden)
        return m, a, log_prob, out.step_hidden, new_frame_hidden


def build_model(seed: int, video: bool = False,
                feature_scale: float = FEATURE_SCALE) -> Model:
    """Fresh model with all five parameter groups plus the fixed feature net."""
    reg = ParamRegistry()
    rng = Rng(seed).derive("init")
    actor = Actor(reg, rng, video=video)
    stylizer = Stylizer(reg, rng, video=video)
    critic = Critic(reg, rng, owner="critic")
    target = Critic(reg, rng, owner="target_critic", trainable=False)
    for (name, p), (_, tp) in zip(reg.group("critic"), reg.group("target_critic")):
        tp.data = p.data.copy()
    featnet = FeatureNet(reg, rng, scale=feature_scale)
    log_alpha = reg.add("alpha.log_alpha",
                        np.array([math.log(0.2)], dtype=np.float32))
    return Model(registry=reg, actor=actor, stylizer=stylizer, critic=critic,
                 target_critic=target, featnet=featnet, log_alpha=log_alpha,
                 video=video)
