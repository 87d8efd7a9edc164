"""Coarse-to-fine trajectory selector trained with BCE plus a margin-rank loss."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .imitation import bce_with_logits
from .nn import DenseNet, OptimizerState, optimizer_step
from .scene import scene_features, score_batch

log = logging.getLogger(__name__)

LABEL_TOL = 1e-6


def default_top_k(m, top_k=0):
    return int(top_k) if top_k else int(math.ceil(m / 2))


@dataclass(eq=False)
class SelectorNets:
    """Two scorers over ``features ++ normalized trajectory``.

    With ``single_stage`` only the fine scorer is used and it sees every candidate.
    """

    coarse: DenseNet
    fine: DenseNet
    scales: np.ndarray
    feature_dim: int
    n_f: int
    margin: float = 0.05
    top_k: int = 0
    single_stage: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, feature_dim, n_f, scales, hidden=(64, 64), seed=0, margin=0.05, top_k=0, single_stage=False):
        dims = [feature_dim + 2 * n_f, *hidden, 1]
        rng = np.random.default_rng(seed)
        s1, s2 = (int(v) for v in rng.integers(0, 2**31 - 1, size=2))
        return cls(DenseNet(dims, seed=s1), DenseNet(dims, seed=s2), np.asarray(scales, dtype=np.float64),
                   int(feature_dim), int(n_f), float(margin), int(top_k), bool(single_stage))

    def inputs(self, features, candidates):
        c = np.asarray(candidates, dtype=np.float64)
        flat = (c / self.scales).reshape(len(c), -1)
        return np.concatenate([np.broadcast_to(features, (len(c), len(features))), flat], axis=1)

    def k_for(self, m):
        return m if self.single_stage else min(m, default_top_k(m, self.top_k))

    def scores(self, features, candidates):
        x = self.inputs(features, candidates)
        return self.coarse.forward(x)[:, 0], self.fine.forward(x)[:, 0]

    # -- persistence ---------------------------------------------------------
    def save(self, path):
        head = {"kind": "selector", "margin": self.margin, "top_k": self.top_k, "single_stage": self.single_stage,
                "scales": self.scales.tolist(), "feature_dim": self.feature_dim, "n_f": self.n_f, "meta": self.meta}
        lines = [json.dumps(head)] + self.coarse.to_lines({"stage": "coarse"}) + self.fine.to_lines({"stage": "fine"})
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            lines = f.read().splitlines()
        head = json.loads(lines[0])
        if head.get("kind") != "selector":
            raise ValueError(f"{path} is not a selector checkpoint")
        coarse, _, n1 = DenseNet.from_lines(lines[1:])
        fine, _, _ = DenseNet.from_lines(lines[1 + n1:])
        expected = head["feature_dim"] + 2 * head["n_f"]
        if coarse.layer_dims[0] != expected or fine.layer_dims[0] != expected:
            raise ValueError("selector checkpoint: network input width does not match its header")
        return cls(coarse, fine, np.asarray(head["scales"]), head["feature_dim"], head["n_f"], head["margin"],
                   head["top_k"], head.get("single_stage", False), head.get("meta", {}))


def _top_k(scores, k):
    # stable sort on -score keeps the lower index first among ties
    return np.argsort(-np.asarray(scores), kind="stable")[:k]


def select(nets, features, candidates, k=None):
    """``(best index, coarse scores, fine scores)``; the fine scorer only ranks the coarse top-k."""
    m = len(candidates)
    if m == 0:
        raise ValueError("no candidates to select from")
    k = nets.k_for(m) if k is None else int(k)
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}], got {k}")
    coarse, fine = nets.scores(features, candidates)
    if m == 1:
        return 0, coarse, fine
    keep = np.sort(_top_k(coarse, k)) if k < m else np.arange(m)
    best = int(keep[np.argmax(fine[keep])])
    return best, coarse, fine


def selector_ranking(nets, features, candidates):
    """Full ordering: the coarse top-k by fine score, then the rest by coarse score."""
    m = len(candidates)
    coarse, fine = nets.scores(features, candidates)
    k = nets.k_for(m)
    order = _top_k(coarse, m)
    head = np.sort(order[:k])
    head = head[np.argsort(-fine[head], kind="stable")]
    return np.concatenate([head, order[k:]])


def rank_loss(pred, gt, margin, return_grad=False):
    """Mean hinge ``max(0, -sign(s_i - s_j)(p_i - p_j) + m)`` over ordered pairs with distinct quality."""
    p = np.asarray(pred, dtype=np.float64)
    s = np.asarray(gt, dtype=np.float64)
    if p.shape != s.shape:
        raise ValueError("predictions and qualities must align")
    sgn = np.sign(s[:, None] - s[None, :])
    mask = sgn != 0
    n = int(mask.sum())
    if n == 0:
        return (0.0, np.zeros_like(p)) if return_grad else 0.0
    h = -sgn * (p[:, None] - p[None, :]) + margin
    act = mask & (h > 0)
    loss = float(np.where(act, h, 0.0).sum() / n)
    if not return_grad:
        return loss
    w = np.where(act, -sgn, 0.0) / n
    grad = w.sum(axis=1) - w.sum(axis=0)
    return loss, grad


def binary_labels(quality, tol=LABEL_TOL):
    q = np.asarray(quality, dtype=np.float64)
    return (q >= q.max() - tol).astype(np.float64)


def stage_loss(net, x, quality, margin, use_rank=True):
    """Mean BCE against argmax labels (+ rank loss) for one candidate set; returns ``(loss, grads)``."""
    logits, cache = net.forward(x, return_cache=True)
    z = logits[:, 0]
    bce, g_bce = bce_with_logits(z, binary_labels(quality))
    loss = float(bce.mean())
    g = g_bce / len(z)
    if use_rank:
        l_r, g_r = rank_loss(z, quality, margin, return_grad=True)
        loss += l_r
        g = g + g_r
    grads, _ = net.backward(None, g[:, None], cache)
    return loss, grads


def augment_candidates(candidates, rng, n_aug=2, std_range=(0.1, 0.2)):
    """Each candidate followed by ``n_aug`` copies with per-axis multiplicative noise."""
    c = np.asarray(candidates, dtype=np.float64)
    out = []
    for tr in c:
        out.append(tr)
        for _ in range(n_aug):
            std = rng.uniform(*std_range, size=2)
            eps = np.maximum(rng.standard_normal(2) * std, -0.99)
            out.append(tr * (1.0 + eps))
    return np.stack(out)


def build_selector_data(gen, scenes, cfg, seed=0, n_candidates=20, n_steps=2):
    """Per scene: (features, candidates in meters, PDMS); degenerate scenes are dropped."""
    from .evaluation import generate_candidates
    rng = np.random.default_rng(seed)
    feats = np.stack([scene_features(s) for s in scenes])
    cands = generate_candidates(gen, feats, n_candidates, seed=seed, n_steps=n_steps)
    data = []
    for sc, f, c in zip(scenes, feats, cands):
        aug = augment_candidates(c, rng, cfg.n_aug, tuple(cfg.aug_std))
        q = score_batch(sc, aug, gen.dt)["pdms"]
        if not np.any(q > 0):
            log.warning("skipping scene %s/%s: every candidate scores 0", sc.tag, sc.seed)
            continue
        data.append((f, aug, q))
    return data


def train_selector(gen, scenes, cfg, seed=0, n_candidates=20, data=None):
    """Train a selector on the generator's candidates; returns ``(nets, loss curve)``."""
    if data is None:
        data = build_selector_data(gen, scenes, cfg, seed=seed, n_candidates=n_candidates)
    if not data:
        raise ValueError("no usable scenes for selector training")
    single = not cfg.coarse_to_fine
    nets = SelectorNets.create(gen.feature_dim, gen.n_f, gen.scales, tuple(cfg.hidden), seed=seed,
                               margin=cfg.margin, top_k=cfg.top_k, single_stage=single)
    per_epoch = int(math.ceil(len(data) / cfg.batch_size))
    total = cfg.epochs * per_epoch
    opts = {name: OptimizerState.for_params(getattr(nets, name).params(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                                            warmup_ratio=cfg.warmup_ratio, total_steps=total)
            for name in ("coarse", "fine")}
    rng = np.random.default_rng(seed + 1)
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            acc = {"coarse": None, "fine": None}
            losses = {"coarse": 0.0, "fine": 0.0}
            for i in idx:
                f, c, q = data[i]
                x = nets.inputs(f, c)
                if single:
                    parts = [("fine", x, q)]
                else:
                    parts = [("coarse", x, q)]
                    # the fine stage sees the current coarse top-k; no gradient reaches the coarse net
                    keep = np.sort(_top_k(nets.coarse.forward(x)[:, 0], nets.k_for(len(c))))
                    parts.append(("fine", x[keep], q[keep]))
                for name, xs, qs in parts:
                    l, g = stage_loss(getattr(nets, name), xs, qs, cfg.margin, cfg.rank_loss)
                    losses[name] += l / len(idx)
                    acc[name] = [gi / len(idx) for gi in g] if acc[name] is None else \
                        [a + gi / len(idx) for a, gi in zip(acc[name], g)]
            for name, g in acc.items():
                if g is not None:
                    optimizer_step(opts[name], getattr(nets, name).params(), g)
            step += 1
            curve.append({"step": step, "coarse_loss": losses["coarse"], "fine_loss": losses["fine"]})
    nets.meta = {"seed": seed, "coarse_to_fine": not single, "rank_loss": bool(cfg.rank_loss)}
    return nets, curve
