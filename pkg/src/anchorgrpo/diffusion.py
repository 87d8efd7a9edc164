"""Anchored truncated diffusion generator.

Trajectories are normalized per axis by dataset-level scales before entering
the diffusion process; anchors are kept in meters on the :class:`Generator`
and normalized on use.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import DenseNet, TrainingDivergence
from .trajectory import DT, AnchorSet, Trajectory

EXPLORATION_STD_FLOOR = 0.04
LIKELIHOOD_STD_FLOOR = 0.1
TIME_EMB_DIM = 16
NOISE_TYPES = ("multiplicative", "additive")


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray       # (T + 1,), betas[0] = 0
    alpha_bar: np.ndarray   # (T + 1,), alpha_bar[0] = 1
    alpha: np.ndarray       # (T + 1,), alpha[0] = 1

    def to_dict(self):
        return {"T": self.T, "beta_lo": float(self.betas[1]), "beta_hi": float(self.betas[-1])}


def make_schedule(T_trunc, beta_lo, beta_hi):
    if not (0 < beta_lo <= beta_hi < 1):
        raise ValueError(f"need 0 < beta_lo <= beta_hi < 1, got {beta_lo}, {beta_hi}")
    if T_trunc < 1:
        raise ValueError("T_trunc must be >= 1")
    betas = np.concatenate([[0.0], np.linspace(beta_lo, beta_hi, T_trunc)])
    alpha = 1.0 - betas
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(int(T_trunc), betas, alpha_bar, alpha)


def forward_diffuse(anchor, t, schedule, eps):
    """``sqrt(ab_t) * anchor + sqrt(1 - ab_t) * eps`` elementwise; ``t`` may be an array."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    ab = schedule.alpha_bar[t_arr]
    anchor = np.asarray(anchor, dtype=np.float64)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (anchor.ndim - np.ndim(ab))) if np.ndim(ab) else ab
    return np.sqrt(ab) * anchor + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def timestep_embedding(t, dim=TIME_EMB_DIM):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def ddim_coefficients(schedule, t, t_prev):
    """``(c_x0, c_xt)`` with ``mean = c_x0 * x0_hat + c_xt * x_t`` for the eta = 0 update."""
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    c_xt = np.sqrt((1.0 - ab_p) / (1.0 - ab_t))
    c_x0 = np.sqrt(ab_p) - c_xt * np.sqrt(ab_t)
    return c_x0, c_xt


def squash(logit):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(logit, dtype=np.float64)))


@dataclass(eq=False)
class Generator:
    """Denoiser network plus everything needed to run it: schedule, scales, anchors."""

    net: DenseNet
    schedule: NoiseSchedule
    scales: np.ndarray          # (2,) meters per normalized unit for x and y
    anchors: np.ndarray         # (K, N_f, 2) meters
    feature_dim: int
    dt: float = DT
    meta: dict = field(default_factory=dict)
    basis: np.ndarray = None    # (2 N_f, m) offset directions; None -> time ramp on every coordinate

    @property
    def n_anchor(self):
        return self.anchors.shape[0]

    @property
    def n_f(self):
        return self.anchors.shape[1]

    @property
    def traj_dim(self):
        return 2 * self.n_f

    @classmethod
    def create(cls, anchors, scales, schedule, feature_dim, hidden=(128, 128), seed=0, dt=DT, basis=None):
        anchors = anchors.anchors if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
        d = 2 * anchors.shape[1]
        basis = None if basis is None else np.asarray(basis, dtype=np.float64)
        if basis is not None and basis.shape[0] != d:
            raise ValueError(f"offset basis needs {d} rows, got {basis.shape[0]}")
        m = d if basis is None else basis.shape[1]
        dims = [feature_dim + 2 * d + TIME_EMB_DIM, *hidden, m + 1]
        net = DenseNet(dims, seed=seed)
        # start from "predict the anchor": zero offset, neutral score
        net.weights[-1][:] = 0.0
        return cls(net, schedule, np.asarray(scales, dtype=np.float64), anchors, int(feature_dim), dt, basis=basis)

    def normalize(self, pts):
        return np.asarray(pts, dtype=np.float64) / self.scales

    def denormalize(self, pts):
        return np.asarray(pts, dtype=np.float64) * self.scales

    @property
    def offset_basis(self):
        """(2 N_f, m) map from the network's offset coefficients to a normalized trajectory offset."""
        if self.basis is not None:
            return self.basis
        return np.diag(np.repeat(np.arange(1, self.n_f + 1) / self.n_f, 2))

    def anchors_norm(self):
        return self.normalize(self.anchors).reshape(self.n_anchor, -1)

    def net_input(self, features, anchor_flat, tau_flat, t):
        return np.concatenate([features, anchor_flat, tau_flat, timestep_embedding(t)], axis=1)

    def predict(self, features, anchor_flat, tau_flat, t, return_cache=False):
        """Batched ``(x0_hat, score_logit)`` in normalized units."""
        x = self.net_input(features, anchor_flat, tau_flat, t)
        out, cache = self.net.forward(x, return_cache=True)
        if not np.all(np.isfinite(out)):
            raise TrainingDivergence("non-finite denoiser output")
        x0_hat = anchor_flat + out[:, :-1] @ self.offset_basis.T
        if return_cache:
            return x0_hat, out[:, -1], cache
        return x0_hat, out[:, -1]

    def backward(self, cache, grad_x0, grad_logit):
        """Parameter gradients given dL/dx0_hat (B, D) and dL/dlogit (B,)."""
        g = np.concatenate([grad_x0 @ self.offset_basis, np.asarray(grad_logit).reshape(-1, 1)], axis=1)
        grads, _ = self.net.backward(None, g, cache)
        return grads

    # -- persistence ---------------------------------------------------------
    def header(self):
        return {
            "kind": "generator",
            "schedule": self.schedule.to_dict(),
            "scales": self.scales.tolist(),
            "anchors": [float(v) for v in self.anchors.ravel()],
            "n_anchor": self.n_anchor,
            "n_f": self.n_f,
            "dt": self.dt,
            "feature_dim": self.feature_dim,
            "basis": None if self.basis is None else [float(v) for v in self.basis.ravel()],
            "meta": self.meta,
        }

    def save(self, path):
        self.net.save(path, extra=self.header())

    @classmethod
    def load(cls, path):
        net, h = DenseNet.load(path)
        if h.get("kind") != "generator":
            raise ValueError(f"{path} is not a generator checkpoint")
        sch = h["schedule"]
        schedule = make_schedule(sch["T"], sch["beta_lo"], sch["beta_hi"])
        anchors = np.asarray(h["anchors"], dtype=np.float64).reshape(h["n_anchor"], h["n_f"], 2)
        expected_in = h["feature_dim"] + 4 * h["n_f"] + TIME_EMB_DIM
        if net.layer_dims[0] != expected_in:
            raise ValueError("generator checkpoint: network input width does not match its header")
        basis = h.get("basis")
        if basis is not None:
            basis = np.asarray(basis, dtype=np.float64).reshape(2 * h["n_f"], -1)
        m = 2 * h["n_f"] if basis is None else basis.shape[1]
        if net.layer_dims[-1] != m + 1:
            raise ValueError("generator checkpoint: network output width does not match its offset basis")
        return cls(net, schedule, np.asarray(h["scales"]), anchors, h["feature_dim"], h["dt"], h.get("meta", {}),
                   basis)


def exploration_std(schedule, t, eta=1.0, floor=EXPLORATION_STD_FLOOR):
    return np.maximum(np.sqrt(eta * (1.0 - schedule.alpha[t])), floor)


def likelihood_std(schedule, t, eta=1.0, floor=LIKELIHOOD_STD_FLOOR):
    return np.maximum(np.sqrt(eta * (1.0 - schedule.alpha[np.asarray(t)])), floor)


def exploration_noise(mean, std, rng, noise_type):
    """Noise added to a step mean: per-coordinate Gaussian, or two per-trajectory
    scale factors (longitudinal, lateral) applied to the mean itself."""
    mean = np.asarray(mean)
    if noise_type == "additive":
        return rng.standard_normal(mean.shape) * std
    if noise_type == "multiplicative":
        pts = mean.reshape(*mean.shape[:-1], -1, 2)
        eps = np.maximum(rng.standard_normal(pts.shape[:-2] + (1, 2)) * std, -0.99)
        return (pts * eps).reshape(mean.shape)
    raise ValueError(f"noise_type must be one of {NOISE_TYPES}")


def denoise_step(gen, features, anchor_index, tau_t, t, eta=0.0, rng=None, t_prev=None,
                 noise_type="additive", floor=EXPLORATION_STD_FLOOR):
    """One reverse step for a single trajectory (normalized units).

    Returns ``(tau_prev, step_mean, step_std, score_logit)``; ``step_std`` is the
    sampling std (0 when ``eta == 0``).
    """
    if eta not in (0, 1):
        raise ValueError("eta must be 0 or 1")
    t_prev = t - 1 if t_prev is None else t_prev
    feats = np.asarray(features, dtype=np.float64)[None]
    a = gen.anchors_norm()[anchor_index][None]
    x = np.asarray(tau_t, dtype=np.float64).reshape(1, -1)
    x0, logit = gen.predict(feats, a, x, np.array([t]))
    c0, ct = ddim_coefficients(gen.schedule, t, t_prev)
    mean = c0 * x0 + ct * x
    if eta == 0:
        return mean[0], mean[0], 0.0, float(logit[0])
    rng = rng if rng is not None else np.random.default_rng()
    std = float(exploration_std(gen.schedule, t, eta, floor))
    out = mean + exploration_noise(mean, std, rng, noise_type)
    return out[0], mean[0], std, float(logit[0])


def step_log_likelihood(tau_prev, mean, std, floor=LIKELIHOOD_STD_FLOOR):
    """Isotropic Gaussian log-density summed over the last axis, std floored."""
    std = np.maximum(np.asarray(std, dtype=np.float64), floor)
    if np.any(std <= 0):
        raise ValueError("non-positive likelihood std")
    diff = np.asarray(tau_prev, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    d = diff.shape[-1]
    return -0.5 * (diff ** 2).sum(-1) / std ** 2 - d * np.log(std) - 0.5 * d * math.log(2 * math.pi)


@dataclass
class DenoiseChain:
    anchor_index: int
    t: np.ndarray          # (T,) timesteps T..1
    inputs: np.ndarray     # (T, D) tau_t
    means: np.ndarray      # (T, D)
    stds: np.ndarray       # (T,)
    outputs: np.ndarray    # (T, D) tau_{t-1}
    final: Trajectory      # meters


@dataclass
class ChainBatch:
    """Vectorized rollouts: C chains over the full truncated schedule.

    Chains are ordered scene-major, then anchor, then replicate.
    """
    anchor_index: np.ndarray   # (C,)
    scene_index: np.ndarray    # (C,)
    t: np.ndarray              # (T,) T..1
    inputs: np.ndarray         # (T, C, D)
    means: np.ndarray          # (T, C, D)
    stds: np.ndarray           # (T,)
    outputs: np.ndarray        # (T, C, D)
    final: np.ndarray          # (C, N_f, 2) meters
    logits: np.ndarray         # (C,)

    def chains(self, dt=DT):
        out = []
        for c in range(len(self.anchor_index)):
            n_f = self.final.shape[1]
            out.append(DenoiseChain(int(self.anchor_index[c]), self.t, self.inputs[:, c], self.means[:, c],
                                    self.stds, self.outputs[:, c], Trajectory(self.final[c].reshape(n_f, 2), dt)))
        return out


def rollout(gen, features, G, rng, eta=1, noise_type="multiplicative", init_std=0.1,
            floor=EXPLORATION_STD_FLOOR):
    """Stochastic chains for every (scene, anchor, replicate).

    ``features``: (S, F). The initial noised input of each chain receives one
    exploration perturbation (multiplicative or energy-matched additive) with
    std ``max(init_std, floor)``; every reverse step then samples with
    ``exploration_noise`` of the same type.
    """
    features = np.atleast_2d(features)
    S, K, D = features.shape[0], gen.n_anchor, gen.traj_dim
    sched = gen.schedule
    T = sched.T
    scene_idx = np.repeat(np.arange(S), K * G)
    anchor_idx = np.tile(np.repeat(np.arange(K), G), S)
    a = gen.anchors_norm()[anchor_idx]
    feats = features[scene_idx]
    x = forward_diffuse(a, T, sched, rng.standard_normal(a.shape))
    if eta:
        s0 = max(init_std, floor)
        if noise_type == "multiplicative":
            x = x + exploration_noise(x, s0, rng, "multiplicative")
        else:
            pts = x.reshape(len(x), -1, 2)
            add_std = s0 * np.sqrt((pts ** 2).sum(axis=(1, 2)) / D)
            x = x + rng.standard_normal(x.shape) * add_std[:, None]
    C = len(anchor_idx)
    ts = np.arange(T, 0, -1)
    inputs = np.empty((T, C, D))
    means = np.empty((T, C, D))
    outputs = np.empty((T, C, D))
    stds = np.zeros(T)
    logits = np.zeros(C)
    for i, t in enumerate(ts):
        x0, logits = gen.predict(feats, a, x, np.full(C, t))
        c0, ct = ddim_coefficients(sched, t, t - 1)
        mean = c0 * x0 + ct * x
        inputs[i] = x
        means[i] = mean
        if eta:
            stds[i] = exploration_std(sched, t, eta, floor)
            x = mean + exploration_noise(mean, stds[i], rng, noise_type)
        else:
            x = mean
        outputs[i] = x
    final = gen.denormalize(x.reshape(C, -1, 2))
    return ChainBatch(anchor_idx, scene_idx, ts, inputs, means, stds, outputs, final, logits)


def sample_group(gen, features, G, seed, noise_type="multiplicative", init_std=0.1, eta=1):
    """N_anchor x G stochastic denoising chains for one scene."""
    if G < 2:
        raise ValueError("group size G must be >= 2")
    rng = np.random.default_rng(seed)
    return rollout(gen, np.asarray(features)[None], G, rng, eta=eta, noise_type=noise_type,
                   init_std=init_std).chains(gen.dt)


def inference_timesteps(T, n_steps):
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in [1, {T}], got {n_steps}")
    return np.unique(np.round(np.linspace(T, 0, n_steps + 1)).astype(int))[::-1]


def infer_batch(gen, features, n_steps=2, replicates=1, seed=0, return_evals=False):
    """Deterministic (eta = 0) candidates for each scene.

    Returns ``(trajs (S, R*K, N_f, 2), logits (S, R*K))`` ordered replicate-major,
    so the first K candidates of a scene are replicate 0 of every anchor.
    """
    features = np.atleast_2d(features)
    S, K = features.shape[0], gen.n_anchor
    sched = gen.schedule
    steps = inference_timesteps(sched.T, n_steps)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((replicates, K, gen.traj_dim))
    a = np.tile(gen.anchors_norm(), (S * replicates, 1))
    x = forward_diffuse(a, sched.T, sched, np.tile(eps.reshape(-1, gen.traj_dim), (S, 1)))
    feats = np.repeat(features, replicates * K, axis=0)
    n_evals = 0
    logits = np.zeros(len(x))
    for t, t_prev in zip(steps[:-1], steps[1:]):
        x0, logits = gen.predict(feats, a, x, np.full(len(x), t))
        n_evals += 1
        c0, ct = ddim_coefficients(sched, t, t_prev)
        x = c0 * x0 + ct * x
    trajs = gen.denormalize(x.reshape(S, replicates * K, -1, 2))
    logits = logits.reshape(S, replicates * K)
    if return_evals:
        return trajs, logits, n_evals
    return trajs, logits


def infer(gen, features, n_steps=2, seed=0):
    """One deterministic candidate per anchor: list of ``(Trajectory, score_logit)``."""
    trajs, logits = infer_batch(gen, features, n_steps=n_steps, seed=seed)
    return [(Trajectory(trajs[0, k], gen.dt), float(logits[0, k])) for k in range(gen.n_anchor)]


def poly_basis(n_f, degree):
    """Per-axis powers ``(n / N_f) ** p``, p = 1..degree: offsets vanish at the ego start."""
    t = np.arange(1, n_f + 1) / n_f
    cols = []
    for axis in range(2):
        for p in range(1, degree + 1):
            c = np.zeros((n_f, 2))
            c[:, axis] = t ** p
            cols.append(c.ravel())
    return np.stack(cols, axis=1)


def fit_scales(expert_trajs):
    pts = np.stack([t.wp if isinstance(t, Trajectory) else t for t in expert_trajs])
    return np.maximum(np.abs(pts).reshape(-1, 2).max(axis=0), 1e-6)


def generator_summary(gen):
    return json.dumps({"layer_dims": gen.net.layer_dims, **gen.schedule.to_dict(),
                       "n_anchor": gen.n_anchor})
