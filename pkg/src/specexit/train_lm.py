"""Plain-SGD next-token trainer for the toy transformer.

Backprop is written out by hand against the exact architecture in
model.py.  The trainer uses BLAS matmuls (training does not need the
strict-order kernels; only inference-path reproducibility does), but stays
in float32 and keeps a fixed, seed-derived batch order, so a given
(model, corpus, hyperparams) triple always yields the same weights.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .model import LN_EPS, TransformerModel, with_tensors


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    lr: float = 0.25
    batch_size: int = 16
    seq_len: int = 64
    seed: int = 0


def _ln_forward(x, g, b):
    mean = x.mean(axis=-1, keepdims=True, dtype=np.float32)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float32)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float32)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float32)
    dx = (dxhat - m1 - xhat * m2) * inv
    return dx.astype(np.float32), dg, db


def _split_heads(x, nh):
    b, s, d = x.shape
    return x.reshape(b, s, nh, d // nh).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, nh, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, nh * dh)


def _forward_backward(model: TransformerModel, tokens: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy and gradients for one batch.

    tokens, targets: (B, S) int arrays.  Returns (loss, grads dict).
    """
    cfg = model.config
    t = model.tensors
    nh = cfg.num_heads
    scale = np.float32(1.0 / math.sqrt(cfg.head_dim))
    b, s = tokens.shape
    mask = np.triu(np.full((s, s), -np.inf, dtype=np.float32), k=1)

    pe = model.pos_encoding[:s]
    x = t["embedding"][tokens] + pe
    caches = []
    for i in range(cfg.num_layers):
        p = f"layers.{i}"
        h, ln1c = _ln_forward(x, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"])
        q = h @ t[f"{p}.attn.wq"]
        k = h @ t[f"{p}.attn.wk"]
        v = h @ t[f"{p}.attn.wv"]
        qh, kh, vh = (_split_heads(a, nh) for a in (q, k, v))
        scores = qh @ kh.transpose(0, 1, 3, 2) * scale + mask
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True, dtype=np.float32)
        ctx = _merge_heads(probs @ vh)
        attn = ctx @ t[f"{p}.attn.wo"]
        x1 = x + attn
        h2, ln2c = _ln_forward(x1, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"])
        z = h2 @ t[f"{p}.ffn.w1"] + t[f"{p}.ffn.b1"]
        a = np.maximum(z, 0)
        x2 = x1 + a @ t[f"{p}.ffn.w2"] + t[f"{p}.ffn.b2"]
        caches.append((h, ln1c, qh, kh, vh, probs, ctx, x1, h2, ln2c, z, a))
        x = x2

    hf, lnfc = _ln_forward(x, t["final_norm.g"], t["final_norm.b"])
    logits = hf @ t["lm_head"]
    logits -= logits.max(axis=-1, keepdims=True)
    el = np.exp(logits)
    sm = el / el.sum(axis=-1, keepdims=True, dtype=np.float32)
    n = b * s
    ii, jj = np.meshgrid(np.arange(b), np.arange(s), indexing="ij")
    loss = float(-np.log(np.maximum(sm[ii, jj, targets], 1e-30)).mean())

    grads = {name: np.zeros_like(arr) for name, arr in t.items()}
    dlogits = sm.copy()
    dlogits[ii, jj, targets] -= 1.0
    dlogits /= np.float32(n)
    grads["lm_head"] = hf.reshape(n, -1).T @ dlogits.reshape(n, -1)
    dhf = dlogits @ t["lm_head"].T
    dx, dg, db = _ln_backward(dhf, t["final_norm.g"], lnfc)
    grads["final_norm.g"] = dg
    grads["final_norm.b"] = db

    for i in reversed(range(cfg.num_layers)):
        p = f"layers.{i}"
        h, ln1c, qh, kh, vh, probs, ctx, x1, h2, ln2c, z, a = caches[i]
        # FFN branch
        da = dx @ t[f"{p}.ffn.w2"].T
        grads[f"{p}.ffn.w2"] = a.reshape(-1, a.shape[-1]).T @ dx.reshape(-1, dx.shape[-1])
        grads[f"{p}.ffn.b2"] = dx.sum(axis=(0, 1))
        dz = da * (z > 0)
        grads[f"{p}.ffn.w1"] = h2.reshape(-1, h2.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
        grads[f"{p}.ffn.b1"] = dz.sum(axis=(0, 1))
        dh2 = dz @ t[f"{p}.ffn.w1"].T
        dx1, dg, db = _ln_backward(dh2, t[f"{p}.ln2.g"], ln2c)
        dx1 = dx1 + dx
        # attention branch
        dctx = dx1 @ t[f"{p}.attn.wo"].T
        grads[f"{p}.attn.wo"] = ctx.reshape(-1, ctx.shape[-1]).T @ dx1.reshape(-1, dx1.shape[-1])
        grads[f"{p}.ln2.g"] = dg
        grads[f"{p}.ln2.b"] = db
        dctxh = _split_heads(dctx, nh)
        dprobs = dctxh @ vh.transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctxh
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dqh = dscores @ kh * scale
        dkh = dscores.transpose(0, 1, 3, 2) @ qh * scale
        dq, dk, dv = (_merge_heads(a_) for a_ in (dqh, dkh, dvh))
        hf2 = h.reshape(-1, h.shape[-1])
        grads[f"{p}.attn.wq"] = hf2.T @ dq.reshape(-1, dq.shape[-1])
        grads[f"{p}.attn.wk"] = hf2.T @ dk.reshape(-1, dk.shape[-1])
        grads[f"{p}.attn.wv"] = hf2.T @ dv.reshape(-1, dv.shape[-1])
        dh = dq @ t[f"{p}.attn.wq"].T + dk @ t[f"{p}.attn.wk"].T + dv @ t[f"{p}.attn.wv"].T
        dxa, dg, db = _ln_backward(dh, t[f"{p}.ln1.g"], ln1c)
        grads[f"{p}.ln1.g"] = dg
        grads[f"{p}.ln1.b"] = db
        dx = dx1 + dxa

    np.add.at(grads["embedding"], tokens, dx)
    grads = {k_: v_.astype(np.float32) for k_, v_ in grads.items()}
    return loss, grads


def _make_sequences(corpus: bytes, seq_len: int) -> np.ndarray:
    data = np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)
    if data.size < 2:
        raise ValueError("corpus too short to form a training pair")
    window = min(seq_len + 1, data.size)
    starts = np.arange(0, data.size - window + 1, max(window - 1, 1))
    return np.stack([data[s : s + window] for s in starts])


def epoch_loss(model: TransformerModel, corpus: bytes, train_cfg: TrainConfig) -> float:
    """Mean cross-entropy of the model over the corpus, no updates."""
    seqs = _make_sequences(corpus, train_cfg.seq_len)
    total, count = 0.0, 0
    for start in range(0, len(seqs), train_cfg.batch_size):
        batch = seqs[start : start + train_cfg.batch_size]
        loss, _ = _forward_backward(model, batch[:, :-1], batch[:, 1:])
        total += loss * batch.shape[0]
        count += batch.shape[0]
    return total / count


def train_language_model(model: TransformerModel, corpus: bytes, train_cfg: TrainConfig):
    """Returns (trained model, per-epoch mean training loss history)."""
    if not corpus:
        raise ValueError("empty corpus")
    seqs = _make_sequences(corpus, train_cfg.seq_len)
    tensors = {k: v.copy() for k, v in model.tensors.items()}
    work = with_tensors(model, tensors)
    lr = np.float32(train_cfg.lr)
    history = []
    for epoch in range(train_cfg.epochs):
        order = np.argsort(rng.splitmix64(rng.derive(train_cfg.seed, epoch), len(seqs)), kind="stable")
        epoch_total = 0.0
        for start in range(0, len(seqs), train_cfg.batch_size):
            batch = seqs[order[start : start + train_cfg.batch_size]]
            loss, grads = _forward_backward(work, batch[:, :-1], batch[:, 1:])
            epoch_total += loss * batch.shape[0]
            for name in tensors:
                tensors[name] -= lr * grads[name]
        history.append(epoch_total / len(seqs))
    return with_tensors(model, tensors), history
