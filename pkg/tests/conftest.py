"""Shared helpers: oracles and gradient-check plumbing used across test modules."""

import numpy as np
import pytest
from hypothesis import settings

from somnoflow.autodiff import Tensor, grad_check
from somnoflow.model import ModelConfig, SleepStager

settings.register_profile("deterministic", derandomize=True)
settings.load_profile("deterministic")


def naive_conv1d(x, w, bias, dilation, stride, padding):
    """Quintuple-loop reference convolution, straight from the definition."""
    c_in, length = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((c_in, length + 2 * padding))
    xp[:, padding:padding + length] = x
    span = dilation * (k - 1) + 1
    l_out = (xp.shape[1] - span) // stride + 1
    out = np.zeros((c_out, l_out))
    for o in range(c_out):
        for j in range(l_out):
            acc = 0.0 if bias is None else bias[o]
            for i in range(c_in):
                for t in range(k):
                    acc += w[o, i, t] * xp[i, j * stride + t * dilation]
            out[o, j] = acc
    return out


def naive_conv1d_grads(x, w, g_out, dilation, stride, padding):
    """Loop-derived gradients for input, kernel, and bias given upstream g_out."""
    c_in, length = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((c_in, length + 2 * padding))
    xp[:, padding:padding + length] = x
    l_out = g_out.shape[1]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    gb = np.zeros(c_out)
    for o in range(c_out):
        for j in range(l_out):
            g = g_out[o, j]
            gb[o] += g
            for i in range(c_in):
                for t in range(k):
                    pos = j * stride + t * dilation
                    gw[o, i, t] += g * xp[i, pos]
                    gxp[i, pos] += g * w[o, i, t]
    return gxp[:, padding:padding + length], gw, gb


def naive_attention(q, k, v):
    """Scalar-loop evaluation of softmax(Q K^T / sqrt(d_k)) V."""
    lq, d_k = q.shape
    lk = k.shape[0]
    scores = np.zeros((lq, lk))
    for i in range(lq):
        for j in range(lk):
            s = 0.0
            for m in range(d_k):
                s += q[i, m] * k[j, m]
            scores[i, j] = s / np.sqrt(d_k)
    att = np.zeros_like(scores)
    for i in range(lq):
        row = np.exp(scores[i] - scores[i].max())
        att[i] = row / row.sum()
    out = np.zeros((lq, v.shape[1]))
    for i in range(lq):
        for n in range(v.shape[1]):
            for j in range(lk):
                out[i, n] += att[i, j] * v[j, n]
    return out, att


def param_grad_check(stager: SleepStager, name: str, loss_fn, eps: float = 1e-5) -> float:
    """Gradient-check one named parameter of a model against ``loss_fn``.

    Swaps a probe tensor into the parameter map so the probe joins the
    recorded graph, then restores the original.
    """
    original = stager.params.tensors[name]

    def f(t: Tensor):
        stager.params.tensors[name] = t
        try:
            return loss_fn()
        finally:
            stager.params.tensors[name] = original

    return grad_check(f, original, eps=eps)


@pytest.fixture
def tiny_config():
    """Toy architecture: d_model 16, 2 heads, 1 encoder layer."""
    return ModelConfig(
        d_model=16,
        n_heads=2,
        d_ffn=32,
        n_encoder_layers=1,
        channels=(2, 4, 8, 16),
        dropout=0.0,
        l_max=64,
    )
