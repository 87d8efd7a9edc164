"""Anchored truncated GRPO: group-relative advantages over denoising chains.

Advantages are standardized within each anchor's group of G samples
(intra-anchor), then negatives are clipped to zero and colliding chains are
forced to -1 (inter-anchor truncation). The policy-gradient loss weights each
denoising step by ``gamma ** (t - 1)``, where t = 1 is the final (cleanest)
step, and applies one trajectory-level advantage to every step of its chain.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import RLConfig, validate_rl
from .diffusion import ChainBatch, ddim_coefficients, likelihood_std, rollout, step_log_likelihood
from .imitation import ILData, il_gradients
from .nn import OptimizerState, TrainingDivergence, optimizer_step
from .scene import score_batch
from .trajectory import diversity

log = logging.getLogger(__name__)


def intra_anchor_advantage(rewards, eps_stab=1e-8):
    """Standardize along the last axis (population std)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape[-1] < 2:
        raise ValueError("group size must be >= 2")
    mean = r.mean(axis=-1, keepdims=True)
    std = r.std(axis=-1, keepdims=True)
    return (r - mean) / (std + eps_stab)


def pooled_advantage(rewards, eps_stab=1e-8):
    """Standardize over all anchors and replicates of a scene: (..., K, G) -> same shape."""
    r = np.asarray(rewards, dtype=np.float64)
    flat = r.reshape(*r.shape[:-2], -1)
    return intra_anchor_advantage(flat, eps_stab).reshape(r.shape)


def truncate_advantages(advantages, collided):
    a = np.asarray(advantages, dtype=np.float64)
    c = np.asarray(collided, dtype=bool)
    if a.shape != c.shape:
        raise ValueError("advantages and collision flags must align")
    return np.where(c, -1.0, np.maximum(a, 0.0))


def group_advantages(rewards, collided, intra_anchor=True, inter_trunc=True, eps_stab=1e-8):
    """rewards, collided: (S, K, G) -> advantages (S, K, G)."""
    adv = intra_anchor_advantage(rewards, eps_stab) if intra_anchor else pooled_advantage(rewards, eps_stab)
    return truncate_advantages(adv, collided) if inter_trunc else adv


def step_weights(ts, gamma):
    """Discount per step for timesteps ``ts``: ``gamma ** (t - 1)``."""
    return gamma ** (np.asarray(ts, dtype=np.float64) - 1.0)


@dataclass
class GroupRollout:
    chains: ChainBatch
    rewards: np.ndarray     # (S, K, G)
    collided: np.ndarray    # (S, K, G)
    advantages: np.ndarray  # (S, K, G) standardized (intra or pooled)
    truncated: np.ndarray   # (S, K, G) after the truncation rule (or a copy when disabled)


def rl_loss(gen, chains, features, advantages, gamma, likelihood_floor=0.1, eta=1.0, n_groups=None):
    """Discounted REINFORCE loss over the chains and its parameter gradients.

    ``advantages``: (C,) one value per chain. The sampled ``outputs`` and
    ``inputs`` are constants; only the step means depend on the parameters.
    The loss is averaged over chains and steps (``n_groups`` overrides the
    chain count used in the average).
    """
    adv = np.asarray(advantages, dtype=np.float64)
    T, C, D = chains.inputs.shape
    denom = float(n_groups if n_groups is not None else C) * T
    feats = np.asarray(features)[chains.scene_index]
    a = gen.anchors_norm()[chains.anchor_index]
    ts = chains.t
    w = step_weights(ts, gamma)
    sig = likelihood_std(gen.schedule, ts, eta, likelihood_floor)
    if not np.any(adv):
        return 0.0, [np.zeros_like(p) for p in gen.net.params()]

    x_in = chains.inputs.reshape(T * C, D)
    t_all = np.repeat(ts, C)
    x0, logit, cache = gen.predict(np.tile(feats, (T, 1)), np.tile(a, (T, 1)), x_in, t_all, return_cache=True)
    c0, ct = ddim_coefficients(gen.schedule, t_all, t_all - 1)
    mean = c0[:, None] * x0 + ct[:, None] * x_in
    out = chains.outputs.reshape(T * C, D)
    sig_all = np.repeat(sig, C)
    logp = step_log_likelihood(out, mean, sig_all, floor=likelihood_floor)
    coef = np.repeat(w, C) * np.tile(adv, T) / denom
    loss = float(-(coef * logp).sum())
    g_mean = -coef[:, None] * (out - mean) / sig_all[:, None] ** 2
    grads = gen.backward(cache, c0[:, None] * g_mean, np.zeros(T * C))
    return loss, grads


def combined_loss(rl, il, lambda_il):
    """``L_RL + lambda * L_IL`` for ``(loss, grads)`` pairs (or plain scalars)."""
    if isinstance(rl, tuple):
        (l_rl, g_rl), (l_il, g_il) = rl, il
        return l_rl + lambda_il * l_il, [a + lambda_il * b for a, b in zip(g_rl, g_il)]
    return rl + lambda_il * il


def collect_rollout(gen, scenes, features, cfg, rng):
    """Sample groups for a batch of scenes, score them and compute advantages."""
    K, G = gen.n_anchor, cfg.G
    chains = rollout(gen, features, G, rng, eta=1, noise_type=cfg.noise_type,
                     init_std=cfg.init_noise_std, floor=cfg.exploration_floor)
    S = len(scenes)
    finals = chains.final.reshape(S, K * G, gen.n_f, 2)
    rewards = np.zeros((S, K * G))
    collided = np.zeros((S, K * G), dtype=bool)
    valid = np.ones(S, dtype=bool)
    for i, sc in enumerate(scenes):
        try:
            r = score_batch(sc, finals[i], gen.dt)
        except Exception as exc:  # reward engine failure: skip the scene
            log.warning("skipping scene %s/%s: %s", sc.tag, sc.seed, exc)
            valid[i] = False
            continue
        rewards[i], collided[i] = r["pdms"], r["collided"]
    rewards = rewards.reshape(S, K, G)
    collided = collided.reshape(S, K, G)
    adv = (intra_anchor_advantage(rewards, cfg.eps_stab) if cfg.intra_anchor
           else pooled_advantage(rewards, cfg.eps_stab))
    trunc = truncate_advantages(adv, collided) if cfg.inter_trunc else adv.copy()
    trunc[~valid] = 0.0
    return GroupRollout(chains, rewards, collided, adv, trunc), valid


def train_rl(gen, scenes, cfg: RLConfig, seed=0, ablation=False, log_every=0, callback=None):
    """On-policy GRPO fine-tuning in place; returns the per-iteration metrics log."""
    validate_rl(cfg, ablation=ablation)
    il_data = ILData(gen, scenes)
    n = len(scenes)
    per_epoch = int(np.ceil(n / cfg.batch_size))
    total = cfg.epochs * per_epoch
    params = gen.net.params()
    opt = OptimizerState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                                    warmup_ratio=cfg.warmup_ratio, total_steps=total)
    rng = np.random.default_rng(seed)
    K, G = gen.n_anchor, cfg.G
    metrics = []
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = [scenes[i] for i in idx]
            feats = il_data.feats[idx]
            ro, valid = collect_rollout(gen, batch, feats, cfg, rng)
            l_rl, g_rl = rl_loss(gen, ro.chains, feats, ro.truncated.reshape(-1), cfg.gamma,
                                 cfg.likelihood_floor, n_groups=max(valid.sum(), 1) * K * G)
            il_parts, g_il = il_gradients(gen, il_data.feats[idx][valid], il_data.targets[idx][valid],
                                          il_data.positive[idx][valid], rng)
            loss, grads = combined_loss((l_rl, g_rl), (il_parts["total"], g_il), cfg.lambda_il)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite RL loss at iteration {it}")
            optimizer_step(opt, params, grads)
            finals = ro.chains.final.reshape(len(batch), K * G, gen.n_f, 2)
            div = float(np.mean([diversity(f) for f, v in zip(finals, valid) if v])) if valid.any() else 0.0
            per_anchor = ro.rewards[valid].mean(axis=(0, 2)) if valid.any() else np.zeros(K)
            row = {
                "iteration": it,
                "mean_reward": float(ro.rewards[valid].mean()) if valid.any() else 0.0,
                "collision_rate": float(ro.collided[valid].mean()) if valid.any() else 0.0,
                "diversity": div,
                "rl_loss": l_rl,
                "il_loss": il_parts["total"],
                "anchor_reward_spread": float(per_anchor.std()),
            }
            metrics.append(row)
            if callback is not None:
                callback(row, ro)
            if log_every and it % log_every == 0:
                log.info("rl it %d reward %.3f coll %.3f div %.3f", it, row["mean_reward"],
                         row["collision_rate"], div)
            it += 1
    return metrics
