#!/usr/bin/env python3
"""Dump the multi-head codes assigned to every source item of a checkpoint.

Each output line is "domain item_id code_1 ... code_H". Useful for eyeballing
how source items share the target-aliased codebook.

Example:
    python3 scripts/inspect_codes.py run/best.ckpt
"""
import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from crossrec.autodiff import Tensor
from crossrec.checkpoint import load_checkpoint
from crossrec.runconfig import parse_config, effective_model_config
from crossrec.vq import make_codebook, quantize_domain_matrix, write_code_dump


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("checkpoint")
    parser.add_argument("--out", default="-", help="output path ('-' = stdout)")
    args = parser.parse_args()

    tensors, config_text = load_checkpoint(args.checkpoint)
    cfg = parse_config(config_text)
    model_cfg = effective_model_config(cfg)
    params = {name: Tensor(arr) for name, arr in tensors.items()}
    book = make_codebook(params, model_cfg.target_domain, model_cfg.vq.heads)
    fh = sys.stdout if args.out == "-" else open(args.out, "w")
    for name in sorted(params):
        if not name.startswith("embed.") or \
                name == f"embed.{model_cfg.target_domain}":
            continue
        domain = name.split(".", 1)[1]
        _, _, codes = quantize_domain_matrix(params, domain, book)
        write_code_dump(fh, domain, codes)
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
