"""Shared test utilities: independent oracles and finite-difference checks."""

from __future__ import annotations

import numpy as np

from masquad import numeric


def loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference matmul, independent of numpy's dot path."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def central_difference_grads(loss_fn, params: dict, step: float = 1e-5) -> dict:
    """Numerical gradient of loss_fn() w.r.t. every entry of every param tensor.

    loss_fn must read the current .data of the tensors in `params` and return
    a python float.
    """
    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * step)
        grads[name] = g.reshape(p.data.shape)
    return grads


def max_relative_error(analytic: np.ndarray, numeric_g: np.ndarray,
                       floor: float = 1e-6) -> float:
    denom = np.maximum(np.abs(analytic), np.maximum(np.abs(numeric_g), floor))
    return float(np.max(np.abs(analytic - numeric_g) / denom))


def oracle_forward(pn: dict, cfg, token_states: np.ndarray, token_positions: np.ndarray,
                   allow: np.ndarray) -> np.ndarray:
    """Plain-numpy re-statement of the whole encoder forward, written
    independently of the Tensor code path (shares no helpers with it)."""

    def ln(x, gain, bias, eps=1e-5):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * gain + bias

    def softmax_masked(s, m):
        neg = np.where(m, s, -np.inf)
        e = np.where(m, np.exp(s - neg.max(-1, keepdims=True)), 0.0)
        return e / e.sum(-1, keepdims=True)

    def gelu_tanh(x):
        return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))

    h = token_states @ pn["embed.w"] + pn["embed.b"] + pn["pos.table"][token_positions]
    dh = cfg.d_hidden // cfg.n_heads
    for b in range(cfg.n_blocks):
        x = ln(h, pn[f"block{b}.ln1.gain"], pn[f"block{b}.ln1.bias"])
        q = x @ pn[f"block{b}.attn.wq"] + pn[f"block{b}.attn.bq"]
        k = x @ pn[f"block{b}.attn.wk"] + pn[f"block{b}.attn.bk"]
        v = x @ pn[f"block{b}.attn.wv"] + pn[f"block{b}.attn.bv"]
        parts = []
        for hd in range(cfg.n_heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            att = softmax_masked(q[:, sl] @ k[:, sl].T / np.sqrt(dh), allow)
            parts.append(att @ v[:, sl])
        h = h + np.concatenate(parts, -1) @ pn[f"block{b}.attn.wo"] + pn[f"block{b}.attn.bo"]
        x2 = ln(h, pn[f"block{b}.ln2.gain"], pn[f"block{b}.ln2.bias"])
        h = h + gelu_tanh(x2 @ pn[f"block{b}.ff.w1"] + pn[f"block{b}.ff.b1"]) \
            @ pn[f"block{b}.ff.w2"] + pn[f"block{b}.ff.b2"]
    return h


def gradcheck(build_loss, params: dict, step: float = 1e-5, tol: float = 1e-4) -> float:
    """Analytic-vs-central-difference check. build_loss() returns a scalar Tensor."""
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    numeric_g = central_difference_grads(lambda: float(build_loss().data), params, step)
    worst = max(max_relative_error(analytic[k], numeric_g[k]) for k in params)
    assert worst < tol, f"gradient check failed: max relative error {worst:.3e}"
    return worst
