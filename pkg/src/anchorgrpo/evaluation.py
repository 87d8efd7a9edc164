"""Evaluation: candidate generation, Top-K quality, diversity, ablations and SVG rendering."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .diffusion import infer_batch
from .grpo import train_rl
from .imitation import build_generator, train_il
from .scene import TAGS, check_collision, scene_features, score_batch
from .selector import build_selector_data, selector_ranking, train_selector
from .trajectory import diversity

log = logging.getLogger(__name__)

ABLATIONS = {
    "noise_type": ("rl", "noise_type", ("multiplicative", "additive")),
    "intra_anchor": ("rl", "intra_anchor", (True, False)),
    "inter_trunc": ("rl", "inter_trunc", (True, False)),
    "selector_design": ("selector", None, ("coarse_to_fine+rank", "single_stage_bce")),
}


def generate_candidates(gen, features, n_candidates=20, seed=0, n_steps=2, return_logits=False):
    """Deterministic candidates ``(S, M, N_f, 2)``: every anchor once per replicate, replicate-major."""
    reps = int(math.ceil(n_candidates / gen.n_anchor))
    steps = min(n_steps, gen.schedule.T)
    trajs, logits = infer_batch(gen, features, n_steps=steps, replicates=reps, seed=seed)
    trajs, logits = trajs[:, :n_candidates], logits[:, :n_candidates]
    return (trajs, logits) if return_logits else trajs


@dataclass
class CandidateSet:
    scenes: list
    features: np.ndarray
    trajs: np.ndarray       # (S, M, N_f, 2)
    logits: np.ndarray      # (S, M)
    pdms: np.ndarray        # (S, M)
    collided: np.ndarray    # (S, M)


def score_candidates(gen, scenes, n_candidates=20, seed=0, n_steps=2):
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    feats = np.stack([scene_features(s) for s in scenes])
    trajs, logits = generate_candidates(gen, feats, n_candidates, seed, n_steps, return_logits=True)
    pdms = np.zeros(logits.shape)
    col = np.zeros(logits.shape, dtype=bool)
    for i, (sc, tr) in enumerate(zip(scenes, trajs)):
        r = score_batch(sc, tr, gen.dt)
        pdms[i], col[i] = r["pdms"], r["collided"]
    return CandidateSet(list(scenes), feats, trajs, logits, pdms, col)


@dataclass
class EvalReport:
    model: str
    ranking: str
    n_scenes: int
    n_candidates: int
    pdms_selected: float
    pdms_at: dict
    diversity: float
    diversity_defined: bool
    collision_rate: float
    per_tag: dict = field(default_factory=dict)

    def row(self):
        r = {"model": self.model, "ranking": self.ranking, "n_scenes": self.n_scenes,
             "n_candidates": self.n_candidates, "pdms_selected": self.pdms_selected}
        r.update({f"pdms_at_{k}": v for k, v in sorted(self.pdms_at.items())})
        r.update({"diversity": self.diversity, "diversity_defined": int(self.diversity_defined),
                  "collision_rate": self.collision_rate})
        for tag in TAGS:
            t = self.per_tag.get(tag)
            for key in ("pdms_selected", "collision_rate", "diversity"):
                r[f"{tag}_{key}"] = t[key] if t else float("nan")
        return r


def _aggregate(pdms, col, trajs, orders, k_values, eps):
    m = pdms.shape[1]
    sel = np.array([p[o[0]] for p, o in zip(pdms, orders)])
    at = {k: float(np.mean([p[o[:min(k, m)]].mean() for p, o in zip(pdms, orders)])) for k in k_values}
    div = float(np.mean([diversity(t, eps) for t in trajs])) if m >= 2 else 0.0
    return float(sel.mean()), at, div, float(col.mean())


def report_from(cset, model="model", selector=None, k_values=(1, 5, 10), div_eps=1e-6):
    """Rank every scene's candidates by ``selector`` (or by the generator's score logits) and aggregate."""
    if selector is not None:
        orders = [selector_ranking(selector, f, t) for f, t in zip(cset.features, cset.trajs)]
    else:
        orders = [np.argsort(-lg, kind="stable") for lg in cset.logits]
    sel, at, div, cr = _aggregate(cset.pdms, cset.collided, cset.trajs, orders, k_values, div_eps)
    per_tag = {}
    tags = np.array([s.tag for s in cset.scenes])
    for tag in TAGS:
        idx = np.nonzero(tags == tag)[0]
        if len(idx):
            s, _, d, c = _aggregate(cset.pdms[idx], cset.collided[idx], cset.trajs[idx],
                                    [orders[i] for i in idx], k_values, div_eps)
            per_tag[tag] = {"pdms_selected": s, "collision_rate": c, "diversity": d, "n": int(len(idx))}
    m = cset.pdms.shape[1]
    return EvalReport(model, "selector" if selector is not None else "generator", len(cset.scenes), m,
                      sel, at, div, m >= 2, cr, per_tag)


def evaluate(gen, scenes, n_candidates=20, selector=None, seed=0, n_steps=2, k_values=(1, 5, 10),
             div_eps=1e-6, model="model"):
    """EvalReports ranked by the generator's logits and, when a selector is given, by the selector."""
    if selector is not None and (selector.feature_dim != gen.feature_dim or selector.n_f != gen.n_f):
        raise ValueError("selector checkpoint does not match the generator's feature/trajectory layout")
    cset = score_candidates(gen, scenes, n_candidates, seed, n_steps)
    reports = [report_from(cset, model, None, k_values, div_eps)]
    if selector is not None:
        reports.append(report_from(cset, model, selector, k_values, div_eps))
    return reports


def write_csv(rows, path):
    rows = list(rows)
    keys = list(rows[0]) if rows else []
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in keys})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# ---------------------------------------------------------------------------
# experiment plumbing

class Lab:
    """Memoized training runs over fixed train/test scene sets, keyed by seed and switches."""

    def __init__(self, cfg: Config, train_scenes, test_scenes=None):
        self.cfg = cfg
        self.train = list(train_scenes)
        self.test = list(test_scenes) if test_scenes is not None else None
        self._cache = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def il(self, seed):
        def run():
            gen = build_generator(self.train, self.cfg.model, seed=seed)
            curve = train_il(gen, self.train, self.cfg.il, seed=seed)
            return gen, curve
        return self._memo(("il", seed), run)

    def vanilla(self, seed):
        def run():
            gen = build_generator(self.train, self.cfg.model, seed=seed, vanilla_cfg=self.cfg.vanilla)
            curve = train_il(gen, self.train, self.cfg.il, seed=seed)
            return gen, curve
        return self._memo(("vanilla", seed), run)

    def rl(self, seed, **switches):
        rl_cfg = copy.deepcopy(self.cfg.rl)
        for k, v in switches.items():
            setattr(rl_cfg, k, v)
        key = ("rl", seed, tuple(sorted((k, v) for k, v in vars(rl_cfg).items())))

        def run():
            gen = self.il(seed)[0]
            gen = copy.deepcopy(gen)
            metrics = train_rl(gen, self.train, rl_cfg, seed=seed)
            return gen, metrics
        return self._memo(key, run)

    def selector(self, gen_key, gen, seed, coarse_to_fine=True, rank_loss=True):
        scfg = copy.deepcopy(self.cfg.selector)
        scfg.coarse_to_fine, scfg.rank_loss = coarse_to_fine, rank_loss
        n = self.cfg.eval.n_candidates
        # every selector variant for one generator trains on the same augmented candidates
        data = self._memo(("selector_data", gen_key, seed),
                          lambda: build_selector_data(gen, self.train, scfg, seed=seed, n_candidates=n,
                                                      n_steps=self.cfg.model.n_infer_steps))
        key = ("selector", gen_key, seed, coarse_to_fine, rank_loss)
        return self._memo(key, lambda: train_selector(gen, self.train, scfg, seed=seed, n_candidates=n, data=data))

    def evaluate(self, gen, scenes=None, selector=None, model="model"):
        scenes = self.test if scenes is None else scenes
        e = self.cfg.eval
        return evaluate(gen, scenes, e.n_candidates, selector, seed=self.cfg.seed,
                        n_steps=self.cfg.model.n_infer_steps, k_values=tuple(e.k_values), div_eps=e.div_eps,
                        model=model)


def _median_row(rows, label):
    out = {"variant": label}
    for k in rows[0]:
        vals = [r[k] for r in rows]
        if all(isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool) for v in vals):
            out[k] = float(np.median(vals))
        elif k not in ("model",):
            out[k] = vals[0]
    out["n_seeds"] = len(rows)
    return out


def run_ablation(name, cfg: Config, seeds, train_scenes=None, test_scenes=None, lab=None):
    """Paired variants differing only in the ablated switch.

    Returns ``(two median rows, per-seed rows)``; each row holds the EvalReport columns.
    """
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; valid names: {', '.join(sorted(ABLATIONS))}")
    if lab is None:
        lab = Lab(cfg, train_scenes, test_scenes)
    stage, switch, values = ABLATIONS[name]
    per_seed = {v: [] for v in values}
    for seed in seeds:
        for v in values:
            if stage == "rl":
                gen, _ = lab.rl(seed, **{switch: v})
                rep = lab.evaluate(gen, model=f"{name}={v}")[0]
            else:
                gen, _ = lab.rl(seed)
                c2f = v == "coarse_to_fine+rank"
                nets, _ = lab.selector(("rl", seed), gen, seed, coarse_to_fine=c2f, rank_loss=c2f)
                rep = lab.evaluate(gen, selector=nets, model=f"{name}={v}")[1]
            per_seed[v].append({"seed": seed, **rep.row()})
    rows = [_median_row([{k: r[k] for k in r if k != "seed"} for r in per_seed[v]], f"{name}={v}")
            for v in values]
    return rows, per_seed


# ---------------------------------------------------------------------------
# rendering

_PALETTE = ("#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#ff7f0e")


def _pl(pts, sy):
    return " ".join(f"{x:.2f},{sy(y):.2f}" for x, y in pts)


def render_scene_svg(scene, candidates=(), highlights=(), scale=8.0):
    """Deterministic SVG of a scene with ranked candidates (index 0 = best ranked)."""
    cands = [np.asarray(c.wp if hasattr(c, "wp") else c, dtype=np.float64) for c in candidates]
    pts = [scene.drivable] + cands + [scene.expert.wp]
    allp = np.concatenate(pts, axis=0)
    lo, hi = allp.min(axis=0) - 3.0, allp.max(axis=0) + 3.0
    w, h = (hi - lo) * scale

    def sx(x):
        return (x - lo[0]) * scale

    def sy(y):
        return (hi[1] - y) * scale

    def poly(p):
        return " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.1f}" height="{h:.1f}" '
           f'viewBox="0 0 {w:.1f} {h:.1f}">',
           f'<rect width="{w:.1f}" height="{h:.1f}" fill="#ffffff"/>',
           f'<polygon class="drivable" points="{poly(scene.drivable)}" fill="#e8e8e8" stroke="#888888"/>',
           f'<polyline class="centerline" points="{poly(scene.centerline)}" fill="none" stroke="#bbbbbb" '
           'stroke-dasharray="4,4"/>']
    for a in scene.agents:
        cx, cy = sx(a.pos[0]), sy(a.pos[1])
        tx, ty = sx(a.pos[0] + a.vel[0]), sy(a.pos[1] + a.vel[1])
        out.append(f'<circle class="agent" cx="{cx:.2f}" cy="{cy:.2f}" r="{a.radius * scale:.2f}" '
                   'fill="#d62728" fill-opacity="0.6"/>')
        out.append(f'<line class="agent-vel" x1="{cx:.2f}" y1="{cy:.2f}" x2="{tx:.2f}" y2="{ty:.2f}" '
                   'stroke="#d62728"/>')
    ego = np.vstack([scene.ego_start, scene.expert.wp])
    out.append(f'<polyline class="expert" points="{poly(ego)}" fill="none" stroke="#000000" '
               'stroke-width="2.5" stroke-dasharray="6,3"/>')
    hl = set(int(i) for i in highlights)
    n = len(cands)
    for rank, c in enumerate(cands):
        op = 1.0 if n == 1 else 1.0 - 0.8 * rank / (n - 1)
        color = "#ff7f0e" if rank in hl else _PALETTE[rank % len(_PALETTE)]
        width = 3.0 if rank in hl else 1.5
        line = np.vstack([scene.ego_start, c])
        out.append(f'<polyline class="candidate" data-rank="{rank}" points="{poly(line)}" fill="none" '
                   f'stroke="{color}" stroke-width="{width}" stroke-opacity="{op:.3f}"/>')
        hit, idx = check_collision(scene, c)
        if hit:
            out.append(f'<circle class="collision" data-rank="{rank}" data-index="{idx}" '
                       f'cx="{sx(c[idx, 0]):.2f}" cy="{sy(c[idx, 1]):.2f}" r="{0.8 * scale:.2f}" '
                       'fill="none" stroke="#ff0000" stroke-width="2"/>')
    out.append(f'<circle class="ego" cx="{sx(scene.ego_start[0]):.2f}" cy="{sy(scene.ego_start[1]):.2f}" '
               f'r="{scene.ego_radius * scale:.2f}" fill="#1f77b4"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
