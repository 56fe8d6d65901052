"""Minimal sequential recommender: per-domain embedding tables feeding a
causal gated linear-recurrent encoder, scored against the full item space.

Parameters live in a flat name -> Tensor map; one ``embed.<domain>`` table per
domain (with a trailing padding row) plus per-block encoder weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

RMS_EPS = 1e-8


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int
    num_blocks: int = 1
    max_len: int = 12


def embed_key(domain):
    return f"embed.{domain}"


def init_parameters(cfg, item_counts, seed):
    """Fresh parameter map for encoder plus one table per domain.

    ``item_counts`` maps domain id -> |I|; each table gets one extra padding
    row. Weights are uniform(-1/sqrt(d), 1/sqrt(d)); decay logits start at 2.0
    so the recurrence gate opens near 0.88.
    """
    d = cfg.d_model
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    params = {}
    for b in range(cfg.num_blocks):
        params[f"block{b}.w_in"] = Tensor(rng.uniform(-bound, bound, (d, d)))
        params[f"block{b}.decay"] = Tensor(np.full(d, 2.0))
        params[f"block{b}.ff_w1"] = Tensor(rng.uniform(-bound, bound, (d, d)))
        params[f"block{b}.ff_w2"] = Tensor(rng.uniform(-bound, bound, (d, d)))
        params[f"block{b}.norm_gain"] = Tensor(np.ones(d))
    for domain in sorted(item_counts):
        n = item_counts[domain]
        params[embed_key(domain)] = Tensor(rng.uniform(-bound, bound, (n + 1, d)))
    return params


def clone_detached(params):
    return {k: Tensor(v.data.copy()) for k, v in params.items()}


def checksum(params):
    return tuple((k, v.data.tobytes()) for k, v in sorted(params.items()))


def embed(params, domain, items):
    key = embed_key(domain)
    if key not in params:
        raise KeyError(f"unknown domain {domain!r}")
    return ad.gather(params[key], np.asarray(items, dtype=np.int64))


def _rms_norm(y, gain):
    n, d = y.data.shape
    ms = ad.mean(ad.square(y), axis=1, keepdims=True)
    r = ad.reciprocal(ad.sqrt(ad.add_scalar(ms, RMS_EPS)))
    g = ad.expand(ad.reshape(gain, (1, d)), (n, d))
    return ad.mul(ad.mul(y, ad.expand(r, (n, d))), g)


def encode_steps(params, cfg, steps):
    """Run the encoder over a list of per-position (B, d) tensors.

    Per block: h_t = sig(g) * h_{t-1} + (1 - sig(g)) * (W_in x_t), then a
    position-wise feed-forward with residual and RMS normalization. Output at
    position t depends only on inputs at positions <= t.
    """
    if len(steps) > cfg.max_len:
        raise ValueError(f"sequence length {len(steps)} exceeds max_len {cfg.max_len}")
    d = cfg.d_model
    x = list(steps)
    batch = x[0].data.shape[0]
    for b in range(cfg.num_blocks):
        gate = ad.sigmoid(params[f"block{b}.decay"])
        gate_e = ad.expand(ad.reshape(gate, (1, d)), (batch, d))
        inv_gate = ad.add_scalar(ad.scale(gate_e, -1.0), 1.0)
        w_in_t = ad.transpose(params[f"block{b}.w_in"])
        w1_t = ad.transpose(params[f"block{b}.ff_w1"])
        w2_t = ad.transpose(params[f"block{b}.ff_w2"])
        h = None
        hs = []
        for xt in x:
            drive = ad.mul(inv_gate, ad.matmul(xt, w_in_t))
            h = drive if h is None else ad.add(ad.mul(gate_e, h), drive)
            hs.append(h)
        stacked_h = ad.concat(hs, 0) if len(hs) > 1 else hs[0]
        stacked_x = ad.concat(x, 0) if len(x) > 1 else x[0]
        ff = ad.matmul(ad.relu(ad.matmul(stacked_h, w1_t)), w2_t)
        y = _rms_norm(ad.add(ff, stacked_x), params[f"block{b}.norm_gain"])
        x = [ad.slice_axis(y, 0, t * batch, (t + 1) * batch) for t in range(len(x))]
    return x


def encode(params, cfg, inputs):
    """Encode one (T, d_model) sequence; returns a (T, d_model) tensor."""
    t_len, d = inputs.data.shape
    if d != cfg.d_model:
        raise ValueError(f"encode: input width {d} != d_model {cfg.d_model}")
    steps = [ad.slice_axis(inputs, 0, t, t + 1) for t in range(t_len)]
    outs = encode_steps(params, cfg, steps)
    return ad.concat(outs, 0) if len(outs) > 1 else outs[0]


def score(hidden, item_matrix):
    """Inner-product logits of one hidden state against every candidate row."""
    if hidden.data.ndim != 1 or item_matrix.data.ndim != 2 \
            or item_matrix.data.shape[1] != hidden.data.shape[0]:
        raise ValueError(f"score: width mismatch {item_matrix.data.shape} "
                         f"vs {hidden.data.shape}")
    return ad.matmul(item_matrix, hidden)


def cross_entropy_loss(logits, target):
    """-log softmax(logits)[target] via the max-shift stable form."""
    n = logits.data.shape[0]
    target = int(target)
    if not 0 <= target < n:
        raise IndexError(f"cross_entropy_loss: target {target} out of range [0, {n})")
    z = ad.add_scalar(logits, -float(np.max(logits.data)))
    lse = ad.log(ad.sum(ad.exp(z)))
    return ad.sub(lse, ad.sum(ad.slice_axis(z, 0, target, target + 1)))


def cross_entropy_batch(logits, targets):
    """Mean cross-entropy over rows of a (B, |I|) logit matrix."""
    rows, cols = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= cols):
        raise IndexError(f"cross_entropy_batch: target out of range [0, {cols})")
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    z = ad.sub(logits, ad.expand(shift, (rows, cols)))
    lse = ad.log(ad.sum(ad.exp(z), axis=1))
    picked = ad.take_per_row(z, targets)
    return ad.scale(ad.sum(ad.sub(lse, picked)), 1.0 / rows)
