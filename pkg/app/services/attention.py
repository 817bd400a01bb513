import logging
import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from ..models import InvalidArgumentError, ShapeError
from .kernels import Tensor, _result, add, add_constant, bias_add, concat, conv2d, parameter, reshape

logger = logging.getLogger(__name__)

LINEAR_DEN_FLOOR = 1e-30


def _as_batch(op: str, *tensors: Tensor):
    """Promote (C, H, W) inputs to a batch of one; returns (tensors, squeezed)."""
    ndim = tensors[0].ndim
    for t in tensors:
        if t.ndim not in (3, 4) or t.ndim != ndim:
            raise ShapeError(op, tensors[0].shape, t.shape)
    if ndim == 4:
        return tensors, False
    return tuple(reshape(t, (1,) + t.shape) for t in tensors), True


def _squeeze(t: Tensor, squeezed: bool) -> Tensor:
    return reshape(t, t.shape[1:]) if squeezed else t


def _softmax(logits: np.ndarray, axis) -> np.ndarray:
    peak = np.max(logits, axis=axis, keepdims=True)
    e = np.exp(logits - peak)
    return e / e.sum(axis=axis, keepdims=True)


# --- Global cross-attention ---

def gca_weights(f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """Softmax weights (N, L, L): row i is query location i of f1 over all of f2."""
    n, c, h, w = f1.shape
    q = f1.reshape(n, c, h * w).transpose(0, 2, 1)
    k = f2.reshape(n, c, h * w)
    return _softmax(q @ k / math.sqrt(c), axis=-1)


def cross_attend_global(f1: Tensor, f2: Tensor) -> Tensor:
    """
    a(x, y) = sum_j softmax_j(<f1(x, y), f2(j)> / sqrt(C)) f2(j) over every
    location j of f2. Raw features serve as queries, keys and values.
    """
    if f1.shape != f2.shape or f1.ndim != 4:
        raise ShapeError("global_cross_attention", f1.shape, f2.shape)
    n, c, h, w = f1.shape
    scale = 1.0 / math.sqrt(c)
    q = f1.data.reshape(n, c, h * w).transpose(0, 2, 1)     # (N, L, C)
    kv = f2.data.reshape(n, c, h * w).transpose(0, 2, 1)    # (N, L, C)
    p = _softmax(q @ kv.transpose(0, 2, 1) * scale, axis=-1)
    a = p @ kv
    out = _result(np.ascontiguousarray(a.transpose(0, 2, 1).reshape(n, c, h, w)), (f1, f2), "gca")

    def _backward():
        da = out.grad.reshape(n, c, h * w).transpose(0, 2, 1)
        dp = da @ kv.transpose(0, 2, 1)
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
        dq = ds @ kv
        dkv = p.transpose(0, 2, 1) @ da + ds.transpose(0, 2, 1) @ q
        f1._accumulate(dq.transpose(0, 2, 1).reshape(n, c, h, w))
        f2._accumulate(dkv.transpose(0, 2, 1).reshape(n, c, h, w))

    out._backward = _backward
    return out


def global_cross_attention(f1: Tensor, f2: Tensor) -> Tensor:
    """concat(f1, GCA(f1, f2)) along channels; accepts (C, H, W) or (N, C, H, W)."""
    (b1, b2), squeezed = _as_batch("global_cross_attention", f1, f2)
    return _squeeze(concat([b1, cross_attend_global(b1, b2)], axis=1), squeezed)


# --- Local cross-attention ---

def effective_window(window: int, h: int, w: int) -> int:
    if window < 1 or window % 2 == 0:
        raise InvalidArgumentError(f"window must be a positive odd integer, got {window}")
    return min(window, 2 * max(h, w) - 1)


def _neighbourhoods(f2: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    padded = np.pad(f2, ((0, 0), (0, 0), (r, r), (r, r)))
    return np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))   # (N, C, H, W, k, k)


def _valid_offsets(h: int, w: int, k: int) -> np.ndarray:
    """(H, W, k, k) mask of window cells that fall inside the map."""
    r = k // 2
    rows = np.arange(h)[:, None] + np.arange(-r, r + 1)[None, :]
    cols = np.arange(w)[:, None] + np.arange(-r, r + 1)[None, :]
    row_ok = (rows >= 0) & (rows < h)
    col_ok = (cols >= 0) & (cols < w)
    return row_ok[:, None, :, None] & col_ok[None, :, None, :]


def lca_weights(f1: np.ndarray, f2: np.ndarray, window: int) -> np.ndarray:
    """Softmax weights (N, H, W, k, k) over each query's clipped window; 0 outside the map."""
    n, c, h, w = f1.shape
    k = effective_window(window, h, w)
    nb = _neighbourhoods(f2, k)
    logits = np.einsum("nchw,nchwij->nhwij", f1, nb) / math.sqrt(c)
    logits = np.where(_valid_offsets(h, w, k)[None], logits, -np.inf)
    return _softmax(logits, axis=(-2, -1))


def cross_attend_local(f1: Tensor, f2: Tensor, window: int) -> Tensor:
    """Cross-attention restricted to the window x window neighbourhood of each query, clipped at borders."""
    if f1.shape != f2.shape or f1.ndim != 4:
        raise ShapeError("local_cross_attention", f1.shape, f2.shape)
    n, c, h, w = f1.shape
    k = effective_window(window, h, w)
    r = k // 2
    scale = 1.0 / math.sqrt(c)

    nb = _neighbourhoods(f2.data, k)
    valid = _valid_offsets(h, w, k)[None]
    logits = np.where(valid, np.einsum("nchw,nchwij->nhwij", f1.data, nb) * scale, -np.inf)
    p = _softmax(logits, axis=(-2, -1))
    a = np.einsum("nhwij,nchwij->nchw", p, nb)
    out = _result(a, (f1, f2), "lca")

    def _backward():
        g = out.grad
        dp = np.einsum("nchw,nchwij->nhwij", g, nb)
        ds = p * (dp - np.sum(dp * p, axis=(-2, -1), keepdims=True)) * scale
        f1._accumulate(np.einsum("nhwij,nchwij->nchw", ds, nb))
        if f2.requires_grad:
            dnb = p[:, None] * g[..., None, None] + ds[:, None] * f1.data[..., None, None]
            dpad = np.zeros((n, c, h + 2 * r, w + 2 * r), dtype=f2.dtype)
            for i in range(k):
                for j in range(k):
                    dpad[:, :, i:i + h, j:j + w] += dnb[..., i, j]
            f2._accumulate(dpad[:, :, r:r + h, r:r + w])

    out._backward = _backward
    return out


def local_cross_attention(f1: Tensor, f2: Tensor, window: int) -> Tensor:
    """concat(f1, LCA(f1, f2)); windows at least 2 * max(H, W) - 1 cover the whole map."""
    (b1, b2), squeezed = _as_batch("local_cross_attention", f1, f2)
    return _squeeze(concat([b1, cross_attend_local(b1, b2, window)], axis=1), squeezed)


# --- Linear self-attention ---

def elu_feature(u: np.ndarray) -> np.ndarray:
    """elu(u) + 1, strictly positive."""
    return np.where(u >= 0, u + 1.0, np.exp(np.minimum(u, 0.0)))


def _elu_feature_grad(u: np.ndarray) -> np.ndarray:
    return np.where(u >= 0, 1.0, np.exp(np.minimum(u, 0.0)))


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, heads, c // heads, h * w).transpose(0, 1, 3, 2)   # (N, heads, L, d)


def _merge_heads(x: np.ndarray, h: int, w: int) -> np.ndarray:
    n, heads, length, d = x.shape
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2).reshape(n, heads * d, h, w))


def linear_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """
    Kernelised attention per head: out_i = phi(Q_i) (sum_j phi(K_j)^T V_j) /
    phi(Q_i) (sum_j phi(K_j)^T), phi(u) = elu(u) + 1. Cost is linear in H * W.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError("linear_attention", q.shape, v.shape)
    n, c, h, w = q.shape
    if heads < 1 or c % heads:
        raise InvalidArgumentError(f"heads ({heads}) must divide the channel count ({c})")

    qs, ks, vs = (_split_heads(t.data, heads) for t in (q, k, v))
    qp, kp = elu_feature(qs), elu_feature(ks)
    kv = kp.transpose(0, 1, 3, 2) @ vs                     # (N, heads, d, d)
    ksum = kp.sum(axis=2)                                  # (N, heads, d)
    num = qp @ kv
    den = np.maximum(np.einsum("nhld,nhd->nhl", qp, ksum), LINEAR_DEN_FLOOR)
    att = num / den[..., None]
    out = _result(_merge_heads(att, h, w), (q, k, v), "linear_attention")

    def _backward():
        g = _split_heads(out.grad, heads)
        d_num = g / den[..., None]
        d_den = -np.sum(g * att, axis=-1) / den
        d_qp = d_num @ kv.transpose(0, 1, 3, 2) + d_den[..., None] * ksum[:, :, None, :]
        d_kv = qp.transpose(0, 1, 3, 2) @ d_num
        d_ksum = np.einsum("nhl,nhld->nhd", d_den, qp)
        d_kp = vs @ d_kv.transpose(0, 1, 3, 2) + d_ksum[:, :, None, :]
        d_v = kp @ d_kv
        q._accumulate(_merge_heads(d_qp * _elu_feature_grad(qs), h, w))
        k._accumulate(_merge_heads(d_kp * _elu_feature_grad(ks), h, w))
        v._accumulate(_merge_heads(d_v, h, w))

    out._backward = _backward
    return out


def positional_encoding_2d(channels: int, h: int, w: int, dtype=np.float64) -> np.ndarray:
    """
    Sinusoidal encoding (C, H, W): C/4 frequency bands each for sin(x), cos(x),
    sin(y), cos(y).
    """
    if channels % 4:
        raise InvalidArgumentError(f"positional encoding needs channels divisible by 4, got {channels}")
    bands = channels // 4
    freq = 1.0 / (10000.0 ** (np.arange(bands) / bands))
    xs = np.arange(w)[None, :] * freq[:, None]     # (bands, W)
    ys = np.arange(h)[None, :] * freq[:, None]     # (bands, H)
    pe = np.empty((channels, h, w), dtype=dtype)
    pe[0 * bands:1 * bands] = np.sin(xs)[:, None, :]
    pe[1 * bands:2 * bands] = np.cos(xs)[:, None, :]
    pe[2 * bands:3 * bands] = np.sin(ys)[:, :, None]
    pe[3 * bands:4 * bands] = np.cos(ys)[:, :, None]
    return pe


@dataclass
class SelfAttentionParams:
    """1x1 projections for query, key, value and the head merge."""
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, dtype=np.float32) -> "SelfAttentionParams":
        std = math.sqrt(1.0 / channels)
        tensors = {}
        for name in ("q", "k", "v", "o"):
            tensors[f"w{name}"] = parameter(rng.normal(0.0, std, size=(channels, channels, 1, 1)).astype(dtype))
            tensors[f"b{name}"] = parameter(np.zeros(channels, dtype=dtype))
        return cls(**tensors)

    def named(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def linear_self_attention(f: Tensor, params: SelfAttentionParams, heads: int,
                          with_positional_encoding: bool = True) -> Tensor:
    """f + W_o(LinearAttention(Q, K, V)), Q/K/V projected from f (+ positional encoding)."""
    (x,), squeezed = _as_batch("linear_self_attention", f)
    n, c, h, w = x.shape
    if heads < 1 or c % heads:
        raise InvalidArgumentError(f"heads ({heads}) must divide the channel count ({c})")
    src = add_constant(x, positional_encoding_2d(c, h, w, x.dtype)[None]) if with_positional_encoding else x
    q = bias_add(conv2d(src, params.wq), params.bq)
    k = bias_add(conv2d(src, params.wk), params.bk)
    v = bias_add(conv2d(src, params.wv), params.bv)
    merged = bias_add(conv2d(linear_attention(q, k, v, heads), params.wo), params.bo)
    return _squeeze(add(x, merged), squeezed)


# --- Brute-force references ---

def gca_reference(f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """Double loop over queries and keys for one (C, H, W) pair."""
    c, h, w = f1.shape
    keys = f2.reshape(c, h * w)
    out = np.zeros_like(f1)
    for y in range(h):
        for x in range(w):
            logits = np.array([f1[:, y, x] @ keys[:, j] for j in range(h * w)]) / math.sqrt(c)
            e = np.exp(logits - logits.max())
            weights = e / e.sum()
            acc = np.zeros(c)
            for j in range(h * w):
                acc += weights[j] * keys[:, j]
            out[:, y, x] = acc
    return np.concatenate([f1, out], axis=0)


def linear_attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    """Explicit N x N kernel matrix phi(Q_i) . phi(K_j), normalised by row sums, for one (C, H, W) map."""
    c, h, w = q.shape
    d = c // heads
    out = np.zeros_like(q)
    for head in range(heads):
        sl = slice(head * d, (head + 1) * d)
        qp = elu_feature(q[sl].reshape(d, h * w).T)
        kp = elu_feature(k[sl].reshape(d, h * w).T)
        vv = v[sl].reshape(d, h * w).T
        weights = qp @ kp.T
        weights /= weights.sum(axis=1, keepdims=True)
        out[sl] = (weights @ vv).T.reshape(d, h, w)
    return out
