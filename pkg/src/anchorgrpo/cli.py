"""Command-line entry point: ``python -m anchorgrpo <subcommand> ...``.

Every subcommand takes ``--config`` (JSON, optional) and ``--seed`` and writes
into a run directory: a config snapshot, metric CSVs, checkpoints and SVGs.
Failures print a single JSON line ``{"error": ..., "message": ...}`` to stderr
and exit with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import Config
from .diffusion import Generator
from .evaluation import ABLATIONS, evaluate, generate_candidates, render_scene_svg, run_ablation, write_csv
from .grpo import train_rl
from .imitation import build_generator, train_il
from .scene import TAGS, TRAFFIC_MODES, generate_dataset, load_scenes, save_scenes, scene_features
from .selector import SelectorNets, selector_ranking, train_selector

log = logging.getLogger("anchorgrpo")


def scene_split(data_cfg, split, seed):
    """Train or test scenes: a ``dense_fraction`` share drawn with dense traffic, the rest per config."""
    n = data_cfg.n_train if split == "train" else data_cfg.n_test
    n_dense = int(round(n * data_cfg.dense_fraction))
    base = (1 if split == "train" else 2) * 100_000 + 1_000 * seed
    mix = tuple(data_cfg.mix)
    return (generate_dataset(n - n_dense, base, mix, traffic=data_cfg.traffic)
            + generate_dataset(n_dense, base + 1, mix, traffic="dense"))


def _load_config(args):
    cfg = Config.load(args.config) if args.config else Config()
    cfg.seed = args.seed
    return cfg


def _run_dir(args, name):
    path = args.run_dir or os.path.join("runs", f"{name}-seed{args.seed}")
    os.makedirs(path, exist_ok=True)
    return path


def _scenes(args, cfg, split):
    return load_scenes(args.data) if args.data else scene_split(cfg.data, split, args.seed)


def cmd_gen_data(args, cfg):
    mix = tuple(args.mix.split(",")) if args.mix else tuple(cfg.data.mix)
    bad = [t for t in mix if t not in TAGS]
    if bad:
        raise ValueError(f"unknown scene tags {bad}; valid: {list(TAGS)}")
    scenes = generate_dataset(args.count, args.seed, mix, traffic=args.traffic)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_scenes(scenes, args.out)
    return {"scenes": len(scenes), "out": args.out}


def cmd_train_il(args, cfg):
    rd = _run_dir(args, "train-il")
    cfg.save(os.path.join(rd, "config.json"))
    scenes = _scenes(args, cfg, "train")
    gen = build_generator(scenes, cfg.model, seed=args.seed)
    curve = train_il(gen, scenes, cfg.il, seed=args.seed)
    write_csv([{k: r[k] for k in ("step", "l_rec", "l_bce", "total")} for r in curve],
              os.path.join(rd, "il_loss.csv"))
    gen.save(os.path.join(rd, "generator.ckpt"))
    return {"run_dir": rd, "final_loss": curve[-1]["total"]}


def cmd_train_rl(args, cfg):
    gen = Generator.load(args.checkpoint)
    rd = _run_dir(args, "train-rl")
    cfg.save(os.path.join(rd, "config.json"))
    scenes = _scenes(args, cfg, "train")
    metrics = train_rl(gen, scenes, cfg.rl, seed=args.seed)
    write_csv(metrics, os.path.join(rd, "rl_metrics.csv"))
    gen.save(os.path.join(rd, "generator.ckpt"))
    return {"run_dir": rd, "iterations": len(metrics)}


def cmd_train_selector(args, cfg):
    gen = Generator.load(args.checkpoint)
    rd = _run_dir(args, "train-selector")
    cfg.save(os.path.join(rd, "config.json"))
    scenes = _scenes(args, cfg, "train")
    nets, curve = train_selector(gen, scenes, cfg.selector, seed=args.seed, n_candidates=cfg.eval.n_candidates)
    write_csv(curve, os.path.join(rd, "selector_loss.csv"))
    nets.save(os.path.join(rd, "selector.ckpt"))
    return {"run_dir": rd}


def cmd_eval(args, cfg):
    gen = Generator.load(args.checkpoint)
    nets = SelectorNets.load(args.selector) if args.selector else None
    rd = _run_dir(args, "eval")
    cfg.save(os.path.join(rd, "config.json"))
    scenes = _scenes(args, cfg, "test")
    reports = evaluate(gen, scenes, cfg.eval.n_candidates, nets, seed=args.seed, n_steps=cfg.model.n_infer_steps,
                       k_values=tuple(cfg.eval.k_values), div_eps=cfg.eval.div_eps,
                       model=os.path.basename(os.path.dirname(os.path.abspath(args.checkpoint))) or "model")
    write_csv([r.row() for r in reports], os.path.join(rd, "eval.csv"))
    _render_some(gen, nets, scenes[:args.n_render], cfg, args.seed, rd)
    return {"run_dir": rd, **{f"{r.ranking}_pdms_selected": r.pdms_selected for r in reports}}


def _render_some(gen, nets, scenes, cfg, seed, rd):
    if not scenes:
        return
    feats = np.stack([scene_features(s) for s in scenes])
    trajs, logits = generate_candidates(gen, feats, cfg.eval.n_candidates, seed=seed,
                                        n_steps=cfg.model.n_infer_steps, return_logits=True)
    for i, (sc, f, tr, lg) in enumerate(zip(scenes, feats, trajs, logits)):
        order = selector_ranking(nets, f, tr) if nets is not None else np.argsort(-lg, kind="stable")
        svg = render_scene_svg(sc, tr[order], highlights=[0])
        with open(os.path.join(rd, f"scene_{i:03d}_{sc.tag}.svg"), "w") as fh:
            fh.write(svg)


def cmd_ablate(args, cfg):
    if args.name not in ABLATIONS:
        raise ValueError(f"unknown ablation {args.name!r}; valid names: {', '.join(sorted(ABLATIONS))}")
    rd = _run_dir(args, f"ablate-{args.name}")
    cfg.save(os.path.join(rd, "config.json"))
    seeds = [int(s) for s in args.seeds.split(",")]
    rows, per_seed = run_ablation(args.name, cfg, seeds, scene_split(cfg.data, "train", args.seed),
                                  _scenes(args, cfg, "test"))
    write_csv(rows, os.path.join(rd, f"ablation_{args.name}.csv"))
    write_csv([r for v in per_seed.values() for r in v], os.path.join(rd, f"ablation_{args.name}_per_seed.csv"))
    return {"run_dir": rd}


def cmd_render(args, cfg):
    scenes = load_scenes(args.data) if args.data else scene_split(cfg.data, "test", args.seed)
    if not 0 <= args.index < len(scenes):
        raise IndexError(f"scene index {args.index} out of range [0, {len(scenes)})")
    sc = scenes[args.index]
    cands = []
    if args.checkpoint:
        gen = Generator.load(args.checkpoint)
        tr, lg = generate_candidates(gen, scene_features(sc)[None], cfg.eval.n_candidates, seed=args.seed,
                                     n_steps=cfg.model.n_infer_steps, return_logits=True)
        cands = tr[0][np.argsort(-lg[0], kind="stable")]
    out = args.out or os.path.join(_run_dir(args, "render"), f"scene_{args.index:03d}.svg")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w") as f:
        f.write(render_scene_svg(sc, cands, highlights=[0] if len(cands) else []))
    return {"out": out}


def build_parser():
    p = argparse.ArgumentParser(prog="anchorgrpo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--run-dir", help="output directory (default runs/<command>-seed<seed>)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic scene set (JSON lines)")
    sp.add_argument("--mix", help="comma-separated tags: " + ",".join(TAGS))
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--traffic", choices=TRAFFIC_MODES, default="random")
    sp.add_argument("--out", required=True)

    sp = add("train-il", cmd_train_il, "imitation pre-training of the anchored generator")
    sp.add_argument("--data", help="training scenes (JSON lines); generated from the config when omitted")

    sp = add("train-rl", cmd_train_rl, "GRPO fine-tuning of a generator checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")

    sp = add("train-selector", cmd_train_selector, "train the coarse-to-fine selector")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")

    sp = add("eval", cmd_eval, "evaluate a generator (and optional selector) on test scenes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--selector")
    sp.add_argument("--data")
    sp.add_argument("--n-render", type=int, default=3, help="number of scenes drawn as SVG")

    sp = add("ablate", cmd_ablate, "paired ablation over seeds: " + ", ".join(sorted(ABLATIONS)))
    sp.add_argument("--name", required=True)
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--data", help="test scenes (JSON lines)")

    sp = add("render", cmd_render, "draw one scene (with candidates when a checkpoint is given)")
    sp.add_argument("--data")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        result = args.fn(args, cfg)
    except Exception as exc:  # one machine-parsable line, nonzero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc).splitlines()[0] if str(exc) else ""}),
              file=sys.stderr)
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
