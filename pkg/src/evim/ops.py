"""Dense tensor kernels: matmul, convolutions, normalizations, activations.

All kernels are pure functions over numpy arrays in channels-last layout:
feature maps are (..., H, W, C) and token sequences are (..., L, D), with
optional leading batch axes. Reductions use a fixed evaluation order, so a
kernel called twice on identical inputs returns bit-identical results for a
given dtype. f32 is the working precision for inference and benchmarks; the
verification oracles run everything in f64.
"""

from __future__ import annotations

import os

import numpy as np

F32 = np.float32
F64 = np.float64

LN_EPS = 1e-6
BN_EPS = 1e-5


class ContractError(ValueError):
    """An operation was called with inputs violating its shape/value contract."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractError(msg)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with strict inner-extent and dtype checks.

    Supports stacked leading axes with numpy broadcasting semantics. The
    reduction order is the backend's fixed loop nest, so repeated calls are
    bit-stable.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _require(a.ndim >= 1 and b.ndim >= 1, "matmul requires arrays, got scalars")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    _require(
        inner_a == inner_b,
        f"matmul inner extents differ: {a.shape} x {b.shape}",
    )
    _require(
        a.dtype == b.dtype,
        f"matmul dtype mismatch: {a.dtype} x {b.dtype}",
    )
    return a @ b


def pwconv(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Pointwise (1x1) convolution: a per-pixel linear map on the channel axis.

    Identical to flattening the spatial grid to tokens and multiplying by w.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    _require(w.ndim == 2, f"pwconv weight must be Cin x Cout, got {w.shape}")
    _require(
        x.shape[-1] == w.shape[0],
        f"pwconv channel mismatch: input {x.shape} vs weight {w.shape}",
    )
    y = x @ w
    if bias is not None:
        y = y + bias
    return y


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    width = [(0, 0)] * (x.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    return np.pad(x, width)


def dwconv3x3(
    x: np.ndarray,
    k: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
) -> np.ndarray:
    """Depthwise 3x3 correlation with zero padding 1; channels never mix.

    x is (..., H, W, C), k is (3, 3, C). stride 1 preserves the grid; stride 2
    yields (ceil(H/2), ceil(W/2)) and is used by stem/downsampling layers.
    The nine taps accumulate in a fixed order for bit-stable outputs.
    """
    x = np.asarray(x)
    k = np.asarray(k)
    _require(k.shape[:2] == (3, 3), f"kernel must be 3x3xC, got {k.shape}")
    _require(
        x.shape[-1] == k.shape[-1],
        f"dwconv3x3 channel mismatch: input {x.shape} vs kernel {k.shape}",
    )
    _require(stride in (1, 2), f"unsupported stride {stride}")
    h, w = x.shape[-3], x.shape[-2]
    ho = h if stride == 1 else (h + 1) // 2
    wo = w if stride == 1 else (w + 1) // 2
    xp = _pad_hw(x, 1)
    out = np.zeros(x.shape[:-3] + (ho, wo, x.shape[-1]), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            window = xp[
                ...,
                di : di + stride * (ho - 1) + 1 : stride,
                dj : dj + stride * (wo - 1) + 1 : stride,
                :,
            ]
            out += window * k[di, dj]
    if bias is not None:
        out = out + bias
    return out


def conv3x3(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
) -> np.ndarray:
    """Dense 3x3 convolution (pad 1), expressed as nine shifted pointwise maps.

    w is (3, 3, Cin, Cout). Needed only by the stem; everything else is
    depthwise or pointwise.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    _require(w.ndim == 4 and w.shape[:2] == (3, 3), f"weight must be 3x3xCinxCout, got {w.shape}")
    _require(
        x.shape[-1] == w.shape[2],
        f"conv3x3 channel mismatch: input {x.shape} vs weight {w.shape}",
    )
    _require(stride in (1, 2), f"unsupported stride {stride}")
    h, hw = x.shape[-3], x.shape[-2]
    ho = h if stride == 1 else (h + 1) // 2
    wo = hw if stride == 1 else (hw + 1) // 2
    xp = _pad_hw(x, 1)
    out = np.zeros(x.shape[:-3] + (ho, wo, w.shape[3]), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            window = xp[
                ...,
                di : di + stride * (ho - 1) + 1 : stride,
                dj : dj + stride * (wo - 1) + 1 : stride,
                :,
            ]
            out += window @ w[di, dj]
    if bias is not None:
        out = out + bias
    return out


# ---------------------------------------------------------------------------
# normalization


def layer_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = LN_EPS,
) -> np.ndarray:
    """Per-token normalization over the last axis, then per-channel affine."""
    _require(eps > 0, f"layer_norm eps must be positive, got {eps}")
    x = np.asarray(x)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def batch_norm_infer(
    x: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = BN_EPS,
) -> np.ndarray:
    """Inference-mode batch norm: per-channel affine with frozen statistics.

    eps = 0 is allowed (identity-statistics case); var + eps must stay positive.
    """
    _require(eps >= 0, f"batch_norm eps must be non-negative, got {eps}")
    var = np.asarray(var)
    _require(bool(np.all(var >= 0)), "batch_norm variance must be non-negative")
    return (np.asarray(x) - mean) / np.sqrt(var + eps) * gamma + beta


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, overflow-safe on both tails."""
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x * sigmoid(x)


def relu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, np.zeros((), dtype=x.dtype))


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) computed as logaddexp(0, x) to avoid overflow."""
    x = np.asarray(x)
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Probability-normalized exponentials with max-subtraction for stability."""
    v = np.asarray(v)
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# execution environment

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "BLIS_NUM_THREADS",
)


def blas_thread_count() -> int:
    """Worst-case thread count the matmul backend may use right now."""
    try:
        from threadpoolctl import threadpool_info
    except ImportError:  # pragma: no cover - threadpoolctl is a hard dep
        counts = [int(os.environ.get(v, "0") or 0) for v in _THREAD_ENV_VARS]
        return max([c for c in counts if c > 0] or [os.cpu_count() or 1])
    info = threadpool_info()
    if not info:
        return 1
    return max(entry.get("num_threads", 1) for entry in info)


def single_thread_limit():
    """Context manager clamping the tensor backend to one thread.

    The benchmark harness runs every measurement inside this context so that
    per-phase attribution is unambiguous.
    """
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)
