"""Latent cross-sectional graph learned by scaled dot-product self-attention.

Each input window produces its own row-stochastic adjacency matrix; the
spectral machinery downstream consumes a symmetrized copy.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from . import autodiff as ad

DEFAULT_ATTENTION_DIM = 32


def init_attention(store: ad.ParamStore, t_in: int, dim: int, rng: np.random.Generator) -> None:
    s = 1.0 / math.sqrt(t_in)
    store.add("theta/attn/q", rng.normal(0.0, s, size=(t_in, dim)))
    store.add("theta/attn/k", rng.normal(0.0, s, size=(t_in, dim)))


def build_adjacency(window: ad.Tensor, proj_q: ad.Tensor, proj_k: ad.Tensor) -> ad.Tensor:
    """Row-softmax of (X Q)(X K)^T / sqrt(d) for windows (..., N, T_in)."""
    if proj_q.shape != proj_k.shape:
        raise ad.ShapeError(f"attention projections differ: {proj_q.shape} vs {proj_k.shape}")
    if window.shape[-1] != proj_q.shape[0]:
        raise ad.ShapeError(
            f"window length {window.shape[-1]} does not match projection input {proj_q.shape[0]}")
    d = proj_q.shape[1]
    q = ad.matmul(window, proj_q)
    k = ad.matmul(window, proj_k)
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    return ad.softmax_rows(logits)


def symmetrize(adj: ad.Tensor) -> ad.Tensor:
    return ad.scale(ad.add(adj, ad.transpose(adj)), 0.5)


def normalized_laplacian(adj_sym: ad.Tensor) -> ad.Tensor:
    """I - D^{-1/2} A D^{-1/2} of a symmetrized adjacency, exactly symmetric.

    The scaling is applied elementwise through the outer product of the
    degree roots so float rounding cannot break symmetry before sym_eig.
    """
    n = adj_sym.shape[-1]
    deg = ad.sum_axis(adj_sym, axis=-1, keepdims=True)          # (..., N, 1)
    droot = _rsqrt(deg)
    weight = ad.matmul(droot, ad.transpose(droot))              # (..., N, N), w_ij = d_i^-1/2 d_j^-1/2
    eye = ad.constant(np.eye(n))
    return ad.sub(eye, ad.mul(adj_sym, weight))


def _rsqrt(a: ad.Tensor) -> ad.Tensor:
    data = 1.0 / np.sqrt(a.data)

    def backward(g):
        a.accumulate(-0.5 * g * data / a.data, own=True)

    return ad._make(data, (a,), backward)


def adjacency_to_csv(weights: np.ndarray, symbols: list[str], path) -> None:
    """Export an N x N adjacency with a symbol header row."""
    weights = np.asarray(weights)
    if weights.shape != (len(symbols), len(symbols)):
        raise ValueError(f"adjacency {weights.shape} does not match {len(symbols)} symbols")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["symbol"] + list(symbols))
        for sym, row in zip(symbols, weights):
            writer.writerow([sym] + [repr(float(v)) for v in row])


def adjacency_from_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "symbol":
            raise ValueError(f"{path}: not an adjacency export")
        symbols = header[1:]
        rows = [[float(v) for v in row[1:]] for row in reader]
    weights = np.array(rows)
    if weights.shape != (len(symbols), len(symbols)):
        raise ValueError(f"{path}: malformed adjacency matrix")
    return weights, symbols
