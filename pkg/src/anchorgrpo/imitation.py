"""Imitation pre-training: positive-anchor assignment, reconstruction + BCE loss."""
from __future__ import annotations

import logging

import numpy as np

from .diffusion import Generator, fit_scales, forward_diffuse, make_schedule, poly_basis
from .nn import OptimizerState, TrainingDivergence, optimizer_step
from .scene import FEATURE_DIM, scene_features
from .trajectory import Trajectory, kmeans_anchors

log = logging.getLogger(__name__)


def _pts(t):
    return t.wp if isinstance(t, Trajectory) else np.asarray(t, dtype=np.float64)


def anchor_distances(anchors, experts):
    """Mean waypoint L2 distance, shape (B, K)."""
    a = np.asarray(anchors.anchors if hasattr(anchors, "anchors") else anchors)
    e = np.atleast_3d(np.asarray(experts))
    if e.ndim == 2:
        e = e[None]
    return np.linalg.norm(e[:, None] - a[None], axis=-1).mean(axis=-1)


def assign_positive(anchors, expert):
    """Index of the anchor closest to ``expert``; ties go to the lowest index."""
    d = anchor_distances(anchors, _pts(expert)[None])[0]
    if d.size == 0:
        raise ValueError("empty anchor set")
    return int(np.argmin(d))


def bce_with_logits(logits, labels):
    """Elementwise stable binary cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = 0.5 * (1.0 + np.tanh(0.5 * z)) - y
    return loss, grad


def il_loss(x0_hat, logits, positive, target):
    """Batch-mean of ``L_rec(positive) + sum_k BCE_k``.

    ``x0_hat``: (B, K, D); ``logits``: (B, K); ``positive``: (B,); ``target``: (B, D),
    all in normalized units. Returns ``(total, l_rec, l_bce, grad_x0, grad_logits)``.
    """
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    B, K, D = x0_hat.shape
    if np.shape(logits) != (B, K):
        raise ValueError("a score logit is required for every anchor")
    positive = np.asarray(positive)
    labels = np.zeros((B, K))
    labels[np.arange(B), positive] = 1.0
    diff = x0_hat[np.arange(B), positive] - target
    l_rec = (diff ** 2).mean(axis=1)
    bce, g_logit = bce_with_logits(logits, labels)
    l_bce = bce.sum(axis=1)
    grad_x0 = np.zeros_like(x0_hat)
    grad_x0[np.arange(B), positive] = 2.0 * diff / (D * B)
    total = float((l_rec + l_bce).mean())
    return total, float(l_rec.mean()), float(l_bce.mean()), grad_x0, g_logit / B


def il_gradients(gen, feats, targets, positive, rng, t=None):
    """IL loss and parameter gradients on a batch, one random timestep per scene."""
    B, K, D = len(feats), gen.n_anchor, gen.traj_dim
    if t is None:
        t = rng.integers(1, gen.schedule.T + 1, size=B)
    a = np.tile(gen.anchors_norm(), (B, 1))
    x = forward_diffuse(a, np.repeat(t, K), gen.schedule, rng.standard_normal(a.shape))
    x0, logit, cache = gen.predict(np.repeat(feats, K, axis=0), a, x, np.repeat(t, K), return_cache=True)
    total, l_rec, l_bce, g_x0, g_logit = il_loss(x0.reshape(B, K, D), logit.reshape(B, K), positive, targets)
    grads = gen.backward(cache, g_x0.reshape(B * K, D), g_logit.reshape(-1))
    return {"total": total, "l_rec": l_rec, "l_bce": l_bce}, grads


class ILData:
    """Features, normalized expert targets and positive anchors for a scene list."""

    def __init__(self, gen, scenes):
        self.feats = np.stack([scene_features(s) for s in scenes])
        experts = np.stack([s.expert.wp for s in scenes])
        self.targets = gen.normalize(experts).reshape(len(scenes), -1)
        self.positive = anchor_distances(gen.anchors, experts).argmin(axis=1)

    def __len__(self):
        return len(self.feats)


def build_generator(scenes, model_cfg, seed=0, vanilla_cfg=None):
    """Anchors (K-means on experts), axis scales and a freshly initialised generator.

    With ``vanilla_cfg`` the generator has a single all-zero anchor and the full
    (untruncated) schedule.
    """
    experts = [s.expert for s in scenes]
    scales = fit_scales(experts)
    if vanilla_cfg is not None:
        anchors = np.zeros((1,) + experts[0].wp.shape)
        schedule = make_schedule(vanilla_cfg.T, vanilla_cfg.beta_lo, vanilla_cfg.beta_hi)
    else:
        anchors = kmeans_anchors(experts, model_cfg.n_anchor, seed=seed).anchors
        schedule = make_schedule(model_cfg.T_trunc, model_cfg.beta_lo, model_cfg.beta_hi)
    basis = None
    kind = model_cfg.offset_basis
    if kind == "poly":
        basis = poly_basis(anchors.shape[1], model_cfg.offset_rank)
    elif kind != "ramp":
        raise ValueError(f"unknown offset basis {kind!r}")
    gen = Generator.create(anchors, scales, schedule, FEATURE_DIM, hidden=tuple(model_cfg.hidden), seed=seed,
                           dt=experts[0].dt, basis=basis)
    gen.meta = {"vanilla": vanilla_cfg is not None}
    return gen


def train_il(gen, scenes, cfg, seed=0, log_every=0):
    """Seeded mini-batch IL training in place; returns the loss curve as a list of dicts."""
    data = ILData(gen, scenes)
    if len(data) == 0:
        raise ValueError("empty IL dataset")
    rng = np.random.default_rng(seed)
    params = gen.net.params()
    opt = OptimizerState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                                    warmup_ratio=cfg.warmup_ratio, total_steps=cfg.steps)
    curve = []
    last_good = [p.copy() for p in params]
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
        parts, grads = il_gradients(gen, data.feats[idx], data.targets[idx], data.positive[idx], rng)
        if not np.isfinite(parts["total"]):
            for p, q in zip(params, last_good):
                p[:] = q
            raise TrainingDivergence(f"non-finite IL loss at step {step}; parameters restored to last good state")
        optimizer_step(opt, params, grads)
        curve.append({"step": step, **parts})
        if step % 100 == 0:
            last_good = [p.copy() for p in params]
        if log_every and step % log_every == 0:
            log.info("il step %d total %.4f rec %.5f bce %.4f", step, parts["total"], parts["l_rec"], parts["l_bce"])
    return curve
