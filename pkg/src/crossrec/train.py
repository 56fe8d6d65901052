"""Training driver: dataset resolution, the iteration loop for every variant,
best-checkpoint tracking, metrics CSV rows, and the ablation harness.

Metrics CSV schema (stable; one header line, then data rows):
  type,iteration,loss,task_losses,mean_max_weight,ndcg,recall,mrr
"iter" rows fill loss / task_losses ('|'-joined) / mean_max_weight; "eval"
rows fill the three metric columns. Everything is reproducible from
(config, seed): reruns emit byte-identical CSVs and checkpoints.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from .backbone import init_parameters
from .checkpoint import save_checkpoint
from .data import build_domain_dataset, generate_synthetic, load_interactions
from .evaluation import evaluate
from .meta import joint_train_iteration, train_iteration
from .runconfig import VARIANTS, effective_model_config, serialize_config

CSV_HEADER = "type,iteration,loss,task_losses,mean_max_weight,ndcg,recall,mrr"


@dataclass
class TrainResult:
    best_params: dict
    best_ndcg: float
    best_iteration: int
    final_params: dict
    csv_rows: list
    reports: list = field(default_factory=list)
    config_text: str = ""


def load_manifest(path):
    """Manifest rows (domain, role, tsv path); paths resolve against the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            domain, role, rel = line.split("\t")
            rows.append((domain, role, os.path.join(base, rel)))
    return rows


def build_datasets(cfg):
    """(source datasets, target dataset) from manifest files or inline synthesis."""
    if cfg.data.manifest:
        sources, target = [], None
        for domain, role, path in load_manifest(cfg.data.manifest):
            events = load_interactions(path).get(domain, [])
            ds = build_domain_dataset(domain, events, cfg.k_core)
            if role == "target":
                target = ds
            else:
                sources.append(ds)
        if target is None:
            raise ValueError(f"manifest {cfg.data.manifest} has no target domain")
        return sources, target
    result = generate_synthetic(cfg.synthetic)
    return result.datasets[:-1], result.datasets[-1]


def _fmt(x):
    return repr(float(x))


def run_training(cfg, datasets=None):
    """Run the configured variant; returns a TrainResult.

    The checkpoint kept is the one with the best validation NDCG@10; a later
    equal score never replaces an earlier best.
    """
    sources, target = datasets if datasets is not None else build_datasets(cfg)
    model_cfg = effective_model_config(cfg)
    item_counts = {d.domain_id: d.item_count for d in sources + [target]}
    params = init_parameters(cfg.encoder, item_counts, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    rows = [CSV_HEADER]
    reports = []
    best_params = None
    best_ndcg = -1.0
    best_iter = -1
    for it in range(1, cfg.iterations + 1):
        if cfg.variant == "no_meta":
            params, loss = joint_train_iteration(
                params, sources, target, model_cfg, cfg.meta, rng)
            rows.append(f"iter,{it},{_fmt(loss)},,,,,")
            reports.append(None)
        else:
            params, report = train_iteration(
                params, sources, target, model_cfg, cfg.meta, rng,
                rescale=cfg.variant != "no_rescale",
                parallel=cfg.train.parallel)
            task_losses = "|".join(_fmt(t.meta_loss) for t in report.tasks)
            mmw = float(np.mean([max(w) for w in report.layer_weights.values()]))
            rows.append(f"iter,{it},{_fmt(report.overall_loss)},{task_losses},"
                        f"{_fmt(mmw)},,,")
            reports.append(report)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            res = evaluate(params, target, "val", cfg.k, model_cfg)
            rows.append(f"eval,{it},,,,{_fmt(res.ndcg_at_k)},"
                        f"{_fmt(res.recall_at_k)},{_fmt(res.mrr)}")
            if res.ndcg_at_k > best_ndcg:
                best_ndcg = res.ndcg_at_k
                best_iter = it
                best_params = {k: v.data.copy() for k, v in params.items()}
    if best_params is None:  # no eval fired (iterations == 0)
        best_params = {k: v.data.copy() for k, v in params.items()}
    return TrainResult(best_params=best_params, best_ndcg=best_ndcg,
                       best_iteration=best_iter, final_params=params,
                       csv_rows=rows, reports=reports,
                       config_text=serialize_config(cfg))


def write_outputs(result, cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(result.csv_rows) + "\n")
    ckpt_path = os.path.join(out_dir, "best.ckpt")
    save_checkpoint(ckpt_path, result.best_params, result.config_text)
    return csv_path, ckpt_path


def run_ablation(cfg, datasets=None):
    """Run all five variants on identical data and seed.

    Returns variant -> (TrainResult, test EvalResult).
    """
    shared = datasets if datasets is not None else build_datasets(cfg)
    out = {}
    for variant in VARIANTS:
        vcfg = dataclasses.replace(cfg, variant=variant)
        result = run_training(vcfg, datasets=shared)
        model_cfg = effective_model_config(vcfg)
        from .autodiff import Tensor
        best = {k: Tensor(v) for k, v in result.best_params.items()}
        res = evaluate(best, shared[1], "test", vcfg.k, model_cfg)
        out[variant] = (result, res)
    return out


def ablation_csv(results, cfg):
    lines = [f"# seed={cfg.seed} data_seed={cfg.synthetic.seed} "
             f"iterations={cfg.iterations}",
             "variant,ndcg@10,recall@10,mrr"]
    for variant in VARIANTS:
        _, res = results[variant]
        lines.append(f"{variant},{_fmt(res.ndcg_at_k)},"
                     f"{_fmt(res.recall_at_k)},{_fmt(res.mrr)}")
    return "\n".join(lines) + "\n"
