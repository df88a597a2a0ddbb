"""Command-line entry point: ``groundrl <subcommand> ...``.

Every subcommand takes ``--seed``, ``--config`` and ``--out``. ``--config``
is a JSON file with optional ``model``, ``task``, ``warmup``, ``grpo`` and
``eval`` sections; explicit flags override it. ``--out`` defaults to
``$GROUNDRL_OUT/<subcommand>`` (or ``runs/<subcommand>``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import TaskConfig, build_dataset, read_dataset, write_dataset
from .evaluation import (
    DEFAULT_FRACTIONS,
    evaluate_counterfactual,
    evaluate_faithfulness,
    evaluate_pointing,
    greedy_responses,
    holistic_maps,
)
from .grpo import Hyperparams, PolicyState, train
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .render import render_heatmap
from .saliency import SaliencyMap, save_map_json
from .warmup import WarmupConfig, warmup

OUT_ENV = "GROUNDRL_OUT"


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - {"model", "task", "warmup", "grpo", "eval"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def _overrides(args, names: dict[str, str]) -> dict:
    """Map set CLI flags (dest -> field) into a dict of overrides."""
    return {field: getattr(args, dest) for dest, field in names.items() if getattr(args, dest, None) is not None}


def _split(ds, args):
    samples = ds.split(args.split)
    if args.limit:
        samples = samples[: args.limit]
    if not samples:
        raise ValueError(f"split {args.split!r} is empty")
    return samples


# ------------------------------------------------------------- commands

def cmd_gen_data(args, conf) -> None:
    task = TaskConfig.from_dict(conf.get("task", {}))
    n_test = args.n_test if args.n_test is not None else min(500, args.n // 9)
    ds = build_dataset(task, args.n, n_test, args.seed)
    write_dataset(_out_dir(args), ds)


def cmd_warmup(args, conf) -> None:
    ds = read_dataset(args.data)
    mconf = {"grid": list(ds.task.grid), "patch_px": ds.task.patch_px, **conf.get("model", {})}
    cfg = ModelConfig.from_dict(mconf)
    params = load_checkpoint(args.init) if args.init else init_model(cfg, args.seed)
    wcfg = WarmupConfig(**{**conf.get("warmup", {}), "seed": args.seed, **_overrides(args, {"steps": "steps", "batch_size": "batch_size", "lr": "lr", "distractor_rate": "distractor_rate"})})
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    params, _ = warmup(params, ds.split("train"), wcfg, out / "warmup_log.jsonl")
    save_checkpoint(out / "checkpoint.json", params, {"stage": "warmup", "seed": args.seed})


def cmd_train_grpo(args, conf) -> None:
    ds = read_dataset(args.data)
    params = load_checkpoint(args.init)
    fields = {
        "steps": "steps",
        "group_size": "group_size",
        "eps_clip": "eps_clip",
        "beta": "beta",
        "lr": "lr",
        "temperature": "temperature",
        "max_new": "max_new",
        "ratio_level": "ratio_level",
        "checkpoint_every": "checkpoint_every",
        "max_grad_norm": "max_grad_norm",
    }
    hp = Hyperparams(**{**conf.get("grpo", {}), "seed": args.seed, **_overrides(args, fields)})
    if args.no_saliency_reward:
        hp = replace(hp, use_saliency_reward=False)
    hp.validate()
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    state = PolicyState.from_checkpoint(params, hp.lr)
    train(state, ds.split("train"), hp, out / "train_log.jsonl", out / "checkpoints")
    save_checkpoint(out / "checkpoint.json", state.theta, {"stage": "grpo", "seed": args.seed, "steps": hp.steps})


def cmd_eval_faithfulness(args, conf) -> None:
    ds = read_dataset(args.data)
    params = load_checkpoint(args.checkpoint)
    ev = conf.get("eval", {})
    fractions = args.fractions or ev.get("fractions", list(DEFAULT_FRACTIONS))
    max_new = args.max_new or ev.get("max_new", 16)
    rep = evaluate_faithfulness(params, _split(ds, args), fractions, max_new, random_seed=args.seed)
    rep.meta.update({"split": args.split, "seed": args.seed})
    rep.write(_out_dir(args))


def cmd_eval_pg(args, conf) -> None:
    ds = read_dataset(args.data)
    params = load_checkpoint(args.checkpoint)
    max_new = args.max_new or conf.get("eval", {}).get("max_new", 16)
    rep = evaluate_pointing(params, _split(ds, args), max_new)
    rep.meta.update({"split": args.split, "seed": args.seed})
    rep.write(_out_dir(args))


def cmd_eval_counterfactual(args, conf) -> None:
    ds = read_dataset(args.data)
    params = load_checkpoint(args.checkpoint)
    ev = conf.get("eval", {})
    sigmas = args.sigmas or ev.get("sigmas", [0.0, 0.1, 0.2, 0.3])
    max_new = args.max_new or ev.get("max_new", 16)
    rep = evaluate_counterfactual(params, _split(ds, args), sigmas, args.seed, args.regions, max_new)
    rep.meta.update({"split": args.split})
    rep.write(_out_dir(args))


def cmd_render(args, conf) -> None:
    ds = read_dataset(args.data)
    params = load_checkpoint(args.checkpoint)
    samples = _split(ds, args)
    images = np.stack([s.image for s in samples])
    seqs = greedy_responses(params, images, [s.question for s in samples], args.max_new or 16)
    maps = holistic_maps(params, images, seqs)
    out = _out_dir(args) / "heatmaps"
    out.mkdir(parents=True, exist_ok=True)
    for s, m in zip(samples, maps):
        m = m if m is not None else SaliencyMap(np.zeros(params.config.grid))
        render_heatmap(out / f"{s.id}.ppm", m, s.image, s.boxes, args.scale)
        save_map_json(out / f"{s.id}.json", m)


# --------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="groundrl", description="Saliency-grounded GRPO on a synthetic VQA task.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        p.add_argument("--config", help="JSON config with model/task/warmup/grpo/eval sections")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
        if data:
            p.add_argument("--data", required=True, help="dataset directory written by gen-data")

    def evalish(p, ckpt=True):
        if ckpt:
            p.add_argument("--checkpoint", required=True, help="model checkpoint (JSON)")
        p.add_argument("--split", default="test", choices=["train", "test"], help="dataset split (default test)")
        p.add_argument("--limit", type=int, default=0, help="evaluate only the first N samples (0 = all)")
        p.add_argument("--max-new", dest="max_new", type=int, help="generation budget per answer (default 16)")

    p = sub.add_parser("gen-data", help="generate a synthetic grounded VQA dataset")
    common(p, data=False)
    p.add_argument("--n", type=int, default=4500, help="total number of samples (default 4500)")
    p.add_argument("--n-test", dest="n_test", type=int, help="test split size (default min(500, n // 9))")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("warmup", help="supervised cold start on scripted responses")
    common(p)
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="examples per step")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--distractor-rate", dest="distractor_rate", type=float, help="share of scripted pointers aimed at wrong cells")
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("train-grpo", help="GRPO fine-tuning from a warm-up checkpoint")
    common(p)
    p.add_argument("--init", required=True, help="warm-up checkpoint; also the frozen reference policy")
    p.add_argument("--steps", type=int, help="training steps (one question per step)")
    p.add_argument("--group-size", dest="group_size", type=int, help="rollouts per question (G)")
    p.add_argument("--eps-clip", dest="eps_clip", type=float, help="ratio clip range")
    p.add_argument("--beta", type=float, help="KL coefficient")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--temperature", type=float, help="sampling temperature")
    p.add_argument("--max-new", dest="max_new", type=int, help="max generated tokens per rollout")
    p.add_argument("--ratio-level", dest="ratio_level", choices=["token", "sequence"], help="importance ratio granularity")
    p.add_argument("--max-grad-norm", dest="max_grad_norm", type=float, help="global gradient clip (0 disables)")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, help="write a checkpoint every K steps")
    p.add_argument("--no-saliency-reward", dest="no_saliency_reward", action="store_true", help="ablation: accuracy + format only")
    p.set_defaults(func=cmd_train_grpo)

    p = sub.add_parser("eval-faithfulness", help="deletion/insertion curves (report.json + report.csv)")
    common(p)
    evalish(p)
    p.add_argument("--fractions", type=float, nargs="+", help="perturbation fractions (default 0.05 0.15 0.30)")
    p.set_defaults(func=cmd_eval_faithfulness)

    p = sub.add_parser("eval-pg", help="pointing game and energy-PG (report.json + report.csv)")
    common(p)
    evalish(p)
    p.set_defaults(func=cmd_eval_pg)

    p = sub.add_parser("eval-counterfactual", help="accuracy under foreground/background Gaussian noise")
    common(p)
    evalish(p)
    p.add_argument("--sigmas", type=float, nargs="+", help="noise standard deviations in [0,1] pixel units")
    p.add_argument("--regions", nargs="+", default=["foreground", "background"], choices=["foreground", "background"], help="which regions to perturb (default both)")
    p.set_defaults(func=cmd_eval_counterfactual)

    p = sub.add_parser("render", help="write heatmap overlays to <out>/heatmaps/<id>.ppm")
    common(p)
    evalish(p)
    p.add_argument("--scale", type=int, default=8, help="nearest-neighbour upscaling factor (default 8)")
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # exits with status 2 on usage errors
    try:
        conf = _load_config(args.config)
        args.func(args, conf)
    except (OSError, ValueError, KeyError, RuntimeError, TypeError) as exc:
        print(f"groundrl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
