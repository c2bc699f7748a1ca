import math

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def np_layernorm(x, w, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def np_gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def np_softmax_loop(scores):
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    tot = sum(e)
    return [v / tot for v in e]


def p(t):
    return t.detach().cpu().numpy().astype(np.float64)


def loop_attention(x_q, x_kv, wq, bq, wk, bk, wv, bv, heads):
    """Multi-head scaled dot-product attention written with explicit loops."""
    nq, d = x_q.shape
    nk = x_kv.shape[0]
    hd = d // heads
    q = x_q @ wq.T + bq
    k = x_kv @ wk.T + bk
    v = x_kv @ wv.T + bv
    out = np.zeros((nq, d))
    weights = np.zeros((heads, nq, nk))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(nq):
            scores = [sum(q[i, sl][c] * k[j, sl][c] for c in range(hd)) / math.sqrt(hd) for j in range(nk)]
            w = np_softmax_loop(scores)
            weights[h, i] = w
            for j in range(nk):
                out[i, sl] += w[j] * v[j, sl]
    return out, weights


def loop_block(x, blk):
    """Reference pre-norm transformer block from the block's parameters."""
    d = x.shape[1]
    qkv_w, qkv_b = p(blk.attn.qkv.weight), p(blk.attn.qkv.bias)
    h = np_layernorm(x, p(blk.norm1.weight), p(blk.norm1.bias))
    att, _ = loop_attention(h, h, qkv_w[:d], qkv_b[:d], qkv_w[d:2 * d], qkv_b[d:2 * d], qkv_w[2 * d:], qkv_b[2 * d:],
                            blk.attn.heads)
    x = x + att @ p(blk.attn.proj.weight).T + p(blk.attn.proj.bias)
    h = np_layernorm(x, p(blk.norm2.weight), p(blk.norm2.bias))
    h = np_gelu(h @ p(blk.mlp.fc1.weight).T + p(blk.mlp.fc1.bias))
    return x + h @ p(blk.mlp.fc2.weight).T + p(blk.mlp.fc2.bias)


def randomize(module, seed, scale=0.3):
    """Non-trivial float64 parameters (LayerNorm gains away from 1, non-zero biases)."""
    g = torch.Generator().manual_seed(seed)
    module.double()
    with torch.no_grad():
        for prm in module.parameters():
            prm.copy_(torch.randn(prm.shape, generator=g, dtype=torch.float64) * scale)
    return module


def fd_max_rel_error(fn, tensors, h=1e-4, seed=0):
    """Max relative error between autograd and central differences of a random projection of fn()."""
    out = fn()
    g = torch.Generator().manual_seed(seed)
    probe = torch.randn(out.shape, generator=g, dtype=out.dtype)
    for t in tensors:
        t.grad = None
    (out * probe).sum().backward()
    analytic = [t.grad.detach().clone().reshape(-1) for t in tensors]
    worst = 0.0
    with torch.no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = (fn() * probe).sum().item()
                flat[i] = orig - h
                down = (fn() * probe).sum().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                an = a[i].item()
                denom = max(abs(an), abs(num), 1e-6)
                worst = max(worst, abs(an - num) / denom)
    return worst
