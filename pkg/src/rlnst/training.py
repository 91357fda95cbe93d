"""Step-wise learning: replay pool, reward, the four gradient updates, the
target-network moving average, and the joint training loop that interleaves
supervised style steps with actor-critic steps.

Each gradient update steps exactly one parameter group (style: actor and
stylizer; critic: critic; policy: actor; alpha: temperature; target: EMA
copy), which the tests pin down as the gradient-separation invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .nets import Model, sample_action
from .rng import Rng


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss at iteration {iteration} (value {value})")
        self.iteration = iteration


@dataclass
class Transition:
    s: np.ndarray        # state image (3, H, W)
    a: np.ndarray        # latent action (1, H/4, W/4)
    r: float
    s_next: np.ndarray
    done: bool = False


class ReplayPool:
    """Bounded FIFO ring with seeded uniform sampling."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: List[Transition] = []
        self._start = 0

    def __len__(self):
        return len(self._items)

    def push(self, t: Transition):
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._start] = t
            self._start = (self._start + 1) % self.capacity

    def ordered(self) -> List[Transition]:
        return self._items[self._start:] + self._items[:self._start]

    def sample(self, n: int, rng: Rng) -> List[Transition]:
        if not self._items:
            raise ValueError("cannot sample from an empty pool")
        idx = rng.integers(n, len(self._items))
        return [self._items[i] for i in idx]


@dataclass
class TrainConfig:
    mode: str = "image"
    iterations: int = 2000
    episode_len: int = 10          # T
    batch_size: int = 4
    gamma: float = 0.99
    tau: float = 0.005
    eta: float = 1e-4              # style learning rate
    eta_q: float = 3e-4
    eta_phi: float = 3e-4
    alpha_init: float = 0.2
    target_entropy: Optional[float] = None   # default: -(action element count)
    replay_capacity: int = 10_000
    reward_scale: float = 1e5
    seed: int = 0
    resolution: int = 64
    save_every: int = 500

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.episode_len < 1:
            raise ValueError("episode length must be >= 1")
        if self.mode not in ("image", "video"):
            raise ValueError(f"unknown mode {self.mode!r}")


def compute_reward(s_next: np.ndarray, target: L.StyleTarget, featnet,
                   scale: float = 1e5) -> float:
    """Negative scaled style loss of the freshly produced moving image."""
    with ad.no_grad():
        sl = L.style_loss(Tensor(s_next[None].astype(np.float32)), target, featnet)
    return -scale * sl.item()


# -- environment --------------------------------------------------------------

class Env:
    """Holds the moving image and episode position for one content stream."""

    def __init__(self, model: Model, contents: Sequence[np.ndarray],
                 target: L.StyleTarget, episode_len: int, rng: Rng,
                 reward_scale: float = 1e5):
        if not contents:
            raise ValueError("need at least one content image")
        self.model = model
        self.contents = [np.asarray(c, dtype=np.float32) for c in contents]
        self.target = target
        self.episode_len = episode_len
        self.rng = rng
        self.reward_scale = reward_scale
        self.content_idx = 0
        self.t = 0
        self.state = self.contents[0].copy()
        self.step_hidden = None
        # frame-wise hiddens thread per step index across frames of a clip
        self.frame_hiddens = [None] * episode_len

    def _reset_episode(self):
        self.t = 0
        self.content_idx = (self.content_idx + 1) % len(self.contents)
        if self.model.video and self.content_idx == 0:
            self.frame_hiddens = [None] * self.episode_len  # clip boundary
        self.state = self.contents[self.content_idx].copy()
        self.step_hidden = None

    def step(self) -> Transition:
        """Advance one action; resets to the next content image after T steps."""
        idx = self.t
        with ad.no_grad():
            s_t = Tensor(self.state[None])
            m, a, _, step_h, frame_h = self.model.stylize_step(
                s_t, rng=self.rng, step_hidden=self.step_hidden,
                frame_hidden=self.frame_hiddens[idx])
        m_arr = m.data[0].astype(np.float32)
        r = compute_reward(m_arr, self.target, self.model.featnet, self.reward_scale)
        self.t += 1
        done = self.t >= self.episode_len
        tr = Transition(s=self.state.copy(), a=a.data[0].astype(np.float32),
                        r=r, s_next=m_arr, done=done)
        if self.model.video:
            self.step_hidden = Tensor(step_h.data.copy()) if step_h is not None else None
            if frame_h is not None:
                self.frame_hiddens[idx] = Tensor(frame_h.data.copy())
        if done:
            self._reset_episode()
        else:
            self.state = m_arr.copy()
        return tr


def rollout_episode(model: Model, content: np.ndarray, episode_len: int,
                    rng: Rng, pool: Optional[ReplayPool] = None,
                    target: Optional[L.StyleTarget] = None,
                    reward_scale: float = 1e5,
                    frame_hiddens: Optional[list] = None):
    """Run one full episode from a content image; returns (transitions,
    frame_hiddens).

    The step-wise hidden threads across the T steps within this call. In
    video mode, frame_hiddens is a per-step-index list carried across calls:
    step t of this frame consumes the hidden that step t of the previous
    frame produced.
    """
    if episode_len < 1:
        raise ValueError("episode length must be >= 1")
    transitions = []
    state = np.asarray(content, dtype=np.float32)
    step_hidden = None
    new_frame_hiddens = list(frame_hiddens) if frame_hiddens is not None \
        else [None] * episode_len
    with ad.no_grad():
        for t in range(episode_len):
            m, a, _, step_hidden, fh = model.stylize_step(
                Tensor(state[None]), rng=rng, step_hidden=step_hidden,
                frame_hidden=new_frame_hiddens[t])
            m_arr = m.data[0].astype(np.float32)
            r = (compute_reward(m_arr, target, model.featnet, reward_scale)
                 if target is not None else 0.0)
            tr = Transition(s=state.copy(), a=a.data[0].astype(np.float32), r=r,
                            s_next=m_arr, done=(t == episode_len - 1))
            transitions.append(tr)
            if pool is not None:
                pool.push(tr)
            state = m_arr
            if fh is not None:
                new_frame_hiddens[t] = Tensor(fh.data.copy())
    return transitions, new_frame_hiddens


# -- gradient updates ----------------------------------------------------------

def _sgd_step(registry, owner: str, lr: float):
    for _, p in registry.group(owner):
        if p.requires_grad and p.grad is not None:
            p.data -= (lr * p.grad).astype(p.data.dtype)


def style_update(batch_states: Sequence[np.ndarray], model: Model,
                 weights: L.LossWeights, target: L.StyleTarget, cfg: TrainConfig,
                 rng: Rng) -> dict:
    """One descent step of the combined style objective on actor + stylizer."""
    if not batch_states:
        raise ValueError("empty batch")
    states = np.stack([np.asarray(s, dtype=np.float32) for s in batch_states])
    n = states.shape[0]
    with ad.tape():
        s = Tensor(states)
        out = model.actor(s)
        eps = rng.normal(out.mu.shape).astype(np.float32)
        a = out.mu + out.log_sigma.exp() * Tensor(eps)
        m, _ = model.stylizer(a, out.skips)
        video_ctx = None
        if cfg.mode == "video":
            h, w = states.shape[2], states.shape[3]
            flow = L.synth_motion(h, w, rng)
            delta = L.draw_noise(states.shape, rng)
            video_ctx = {"model": model, "s": s, "flow": flow,
                         "delta": delta, "eps": eps}
        loss, parts = L.combined_loss(m, Tensor(states), target, weights,
                                      model.featnet, mode=cfg.mode,
                                      video_ctx=video_ctx)
        value = loss.item()
        ad.backward(loss)
        _sgd_step(model.registry, "actor", cfg.eta)
        _sgd_step(model.registry, "stylizer", cfg.eta)
        model.registry.zero_grads()
    parts["L"] = value
    return parts


def critic_update(batch: Sequence[Transition], model: Model, cfg: TrainConfig,
                  rng: Rng) -> float:
    """Soft Bellman residual step on the critic; the target is a constant."""
    if not batch:
        raise ValueError("empty batch")
    s = Tensor(np.stack([t.s for t in batch]))
    a = Tensor(np.stack([t.a for t in batch]))
    r = np.array([t.r for t in batch], dtype=np.float32)
    s_next = Tensor(np.stack([t.s_next for t in batch]))
    alpha = model.alpha
    with ad.no_grad():
        out_next = model.actor(s_next)
        a_next, logp_next = sample_action(out_next, rng)
        q_next = model.target_critic(s_next, a_next)
        # episodes truncate rather than terminate, so the bootstrap stays on
        y = r + cfg.gamma * (q_next.data - alpha * logp_next.data)
    with ad.tape():
        q = model.critic(s, a)
        resid = q - Tensor(y.astype(np.float32))
        j_q = (resid.square() * 0.5).mean()
        value = j_q.item()
        ad.backward(j_q)
        _sgd_step(model.registry, "critic", cfg.eta_q)
        model.registry.zero_grads()
    return value


def target_update(model: Model, tau: float):
    """theta_bar <- tau * theta + (1 - tau) * theta_bar."""
    critic = model.registry.group("critic")
    target = model.registry.group("target_critic")
    if len(critic) != len(target):
        raise ValueError("critic and target registries disagree")
    for (cn, cp), (tn, tp) in zip(critic, target):
        if cp.shape != tp.shape:
            raise ValueError(f"shape mismatch {cn} vs {tn}")
        if tau == 1.0:
            tp.data = cp.data.copy()
        elif tau != 0.0:
            tp.data = (tau * cp.data + (1.0 - tau) * tp.data).astype(tp.data.dtype)


def policy_update(batch: Sequence[Transition], model: Model, cfg: TrainConfig,
                  rng: Rng) -> tuple[float, float]:
    """Reparameterized policy objective: mean(alpha * log pi - Q).

    Steps only the actor; the critic is frozen for the duration. Returns
    (objective value, mean log prob) so the temperature update can reuse the
    batch statistics.
    """
    if not batch:
        raise ValueError("empty batch")
    s = Tensor(np.stack([t.s for t in batch]))
    alpha = model.alpha
    critic_params = [p for _, p in model.registry.group("critic")]
    flags = [p.requires_grad for p in critic_params]
    for p in critic_params:
        p.requires_grad = False
    try:
        with ad.tape():
            out = model.actor(s)
            a, log_prob = sample_action(out, rng)
            q = model.critic(s, a)
            j_pi = (alpha * log_prob - q).mean()
            value = j_pi.item()
            mean_logp = float(log_prob.data.mean())
            ad.backward(j_pi)
            _sgd_step(model.registry, "actor", cfg.eta_phi)
            model.registry.zero_grads()
    finally:
        for p, f in zip(critic_params, flags):
            p.requires_grad = f
    return value, mean_logp


def alpha_update(mean_log_prob: float, model: Model, cfg: TrainConfig,
                 lr: Optional[float] = None):
    """Adjust the temperature so policy entropy tracks the target.

    Gradient step on log alpha of J(alpha) = -alpha * (log_prob + target_H),
    keeping alpha positive by construction.
    """
    target_h = cfg.target_entropy
    if target_h is None:
        raise ValueError("target_entropy is unset")
    lr = cfg.eta_phi if lr is None else lr
    alpha = float(np.exp(model.log_alpha.data[0]))
    grad_log_alpha = -alpha * (mean_log_prob + target_h)
    model.log_alpha.data = (model.log_alpha.data
                            - lr * np.float32(grad_log_alpha)).astype(np.float32)


# -- joint loop ----------------------------------------------------------------

CSV_HEADER = "iter,L,Lco,Lst,Ltv,Lct,Jq,Jpi,alpha,reward_mean"


@dataclass
class TrainResult:
    rows: List[dict] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)


def train(cfg: TrainConfig, model: Model, contents: Sequence[np.ndarray],
          style_image: np.ndarray, weights: Optional[L.LossWeights] = None,
          on_iteration: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Alternate environment steps and gradient steps for cfg.iterations.

    Each iteration performs one environment step (one action of the current
    episode) and one gradient pass: style, critic, policy, alpha, target.
    Emits one metrics row per iteration; raises DivergenceError on NaN.
    """
    weights = weights or L.LossWeights()
    target = L.StyleTarget.from_image(np.asarray(style_image, dtype=np.float32),
                                      model.featnet)
    rng = Rng(cfg.seed)
    env_rng = rng.derive("env")
    grad_rng = rng.derive("grad")
    sample_rng = rng.derive("sample")
    if cfg.target_entropy is None:
        h, w = contents[0].shape[1] // 4, contents[0].shape[2] // 4
        cfg.target_entropy = -float(h * w)
    model.log_alpha.data = np.array([math.log(cfg.alpha_init)], dtype=np.float32)

    pool = ReplayPool(cfg.replay_capacity)
    env = Env(model, contents, target, cfg.episode_len, env_rng,
              reward_scale=cfg.reward_scale)
    result = TrainResult()

    for it in range(1, cfg.iterations + 1):
        pool.push(env.step())
        batch = pool.sample(min(cfg.batch_size, len(pool)), sample_rng)

        parts = style_update([t.s for t in batch], model, weights, target,
                             cfg, grad_rng)
        j_q = critic_update(batch, model, cfg, grad_rng)
        j_pi, mean_logp = policy_update(batch, model, cfg, grad_rng)
        alpha_update(mean_logp, model, cfg)
        target_update(model, cfg.tau)

        row = {
            "iter": it,
            "L": parts["L"],
            "Lco": parts["Lco"],
            "Lst": parts["Lst"],
            "Ltv": parts["Ltv"],
            "Lct": parts.get("Lct"),
            "Jq": j_q,
            "Jpi": j_pi,
            "alpha": model.alpha,
            "reward_mean": float(np.mean([t.r for t in batch])),
        }
        if not math.isfinite(row["L"]) or not math.isfinite(row["Jq"]):
            raise DivergenceError(it, row["L"])
        result.rows.append(row)
        if on_iteration is not None:
            on_iteration(it, row)
    return result


def format_csv(rows: Sequence[dict]) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lct = "" if r["Lct"] is None else repr(float(r["Lct"]))
        lines.append(",".join([
            str(r["iter"]), repr(float(r["L"])), repr(float(r["Lco"])),
            repr(float(r["Lst"])), repr(float(r["Ltv"])), lct,
            repr(float(r["Jq"])), repr(float(r["Jpi"])),
            repr(float(r["alpha"])), repr(float(r["reward_mean"])),
        ]))
    return "\n".join(lines) + "\n"
