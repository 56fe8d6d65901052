"""Command-line driver: generate | train | eval | ablate."""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .autodiff import Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import generate_synthetic, write_domain_tsv
from .evaluation import evaluate
from .runconfig import RunConfig, effective_model_config, load_config, parse_config
from .train import ablation_csv, build_datasets, run_ablation, run_training, write_outputs


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def cmd_generate(args):
    cfg = _resolve_config(args)
    out = cfg.out_dir or "."
    os.makedirs(out, exist_ok=True)
    spec = cfg.synthetic
    result = generate_synthetic(spec)
    lines = [f"# synthetic manifest: sources={spec.num_source_domains} "
             f"items={spec.items_per_domain} users={spec.users_per_domain} "
             f"rho={spec.rho} seed={spec.seed}"]
    for ds in result.datasets:
        fname = f"{ds.domain_id}.tsv"
        write_domain_tsv(os.path.join(out, fname), ds.domain_id,
                         result.events[ds.domain_id])
        role = "target" if ds.domain_id == "target" else "source"
        lines.append(f"{ds.domain_id}\t{role}\t{fname}")
    manifest = os.path.join(out, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {len(result.datasets)} domains + manifest to {out}")
    return 0


def cmd_train(args):
    cfg = _resolve_config(args)
    out = cfg.out_dir or "run"
    result = run_training(cfg)
    csv_path, ckpt_path = write_outputs(result, cfg, out)
    print(f"variant={cfg.variant} best val ndcg@{cfg.k}="
          f"{result.best_ndcg:.4f} at iteration {result.best_iteration}")
    print(f"metrics: {csv_path}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args):
    try:
        tensors, config_text = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    cfg = parse_config(config_text)
    if args.config:
        cfg = load_config(args.config)
    k = args.k if args.k is not None else cfg.k
    sources, target = build_datasets(cfg)
    model_cfg = effective_model_config(cfg)
    params = {name: Tensor(arr) for name, arr in tensors.items()}
    expected = f"embed.{target.domain_id}"
    if expected not in params or params[expected].data.shape[1] != cfg.encoder.d_model:
        print(f"error: checkpoint shapes do not match config "
              f"(d_model={cfg.encoder.d_model})", file=sys.stderr)
        return 2
    res = evaluate(params, target, args.split, k, model_cfg)
    print(f"ndcg@{k}={res.ndcg_at_k:.6f}")
    print(f"recall@{k}={res.recall_at_k:.6f}")
    print(f"mrr={res.mrr:.6f}")
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "eval.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"metric,value\nndcg@{k},{res.ndcg_at_k!r}\n"
                 f"recall@{k},{res.recall_at_k!r}\nmrr,{res.mrr!r}\n")
    return 0


def cmd_ablate(args):
    cfg = _resolve_config(args)
    out = cfg.out_dir or "ablation"
    os.makedirs(out, exist_ok=True)
    results = run_ablation(cfg)
    table = ablation_csv(results, cfg)
    path = os.path.join(out, "ablation.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(table)
    for variant, (train_result, _) in results.items():
        save_checkpoint(os.path.join(out, f"{variant}.ckpt"),
                        train_result.best_params, train_result.config_text)
    print(table, end="")
    print(f"table: {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crossrec",
        description="Cross-domain sequential recommendation lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("generate", cmd_generate), ("train", cmd_train),
                     ("eval", cmd_eval), ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        p.add_argument("--config", default="", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="overrides config seed")
        p.add_argument("--out", default="", help="output directory")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--k", type=int, default=None, help="metric cutoff override")
            p.add_argument("--split", default="test", choices=("val", "test"))
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
