"""Convolution, pooling and STFT ops with hand-written backward rules."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, as_tensor, make_node, pad1d


def _same_padding(kernel_size: int, dilation: int) -> tuple[int, int]:
    total = dilation * (kernel_size - 1)
    return total // 2, total - total // 2


def _conv_matmul(cols: np.ndarray, w: np.ndarray, groups: int) -> np.ndarray:
    # cols: [B, Cin, K, T]  w: [Cout, Cin/groups, K]
    B, Cin, K, T = cols.shape
    Cout = w.shape[0]
    if groups == 1:
        return np.matmul(w.reshape(Cout, -1), cols.reshape(B, Cin * K, T))
    cg = cols.reshape(B, groups, (Cin // groups) * K, T)
    wg = w.reshape(groups, Cout // groups, -1)
    return np.matmul(wg[None], cg).reshape(B, Cout, T)


def _conv_backward(g: np.ndarray, cols: np.ndarray, w: np.ndarray, groups: int,
                   need_input: bool = True):
    """Gradients w.r.t. the im2col buffer (None unless ``need_input``) and the kernel."""
    B, Cin, K, T = cols.shape
    Cout = w.shape[0]
    gcols = None
    if groups == 1:
        c2 = cols.reshape(B, Cin * K, T)
        w2 = w.reshape(Cout, -1)
        gw = np.matmul(g, np.swapaxes(c2, 1, 2)).sum(axis=0).reshape(w.shape)
        if need_input:
            gcols = np.matmul(w2.T, g).reshape(B, Cin, K, T)
        return gcols, gw
    cg = cols.reshape(B, groups, (Cin // groups) * K, T)
    wg = w.reshape(groups, Cout // groups, -1)
    gg = g.reshape(B, groups, Cout // groups, T)
    gw = np.matmul(gg, np.swapaxes(cg, 2, 3)).sum(axis=0).reshape(w.shape)
    if need_input:
        gcols = np.matmul(np.swapaxes(wg, 1, 2)[None], gg).reshape(B, Cin, K, T)
    return gcols, gw


def conv1d(x, w, b=None, stride: int = 1, padding="same", dilation: int = 1,
           groups: int = 1) -> Tensor:
    """1-D cross-correlation over ``[B, Cin, T]`` with kernel ``[Cout, Cin/groups, K]``.

    ``padding`` is ``"same"`` (symmetric zero padding, output length equals
    input length for stride 1), an int applied to both sides, or a
    ``(left, right)`` pair.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d expects 3-D input and kernel, got {x.shape} and {w.shape}")
    B, Cin, T = x.shape
    Cout, cin_g, K = w.shape
    if Cin % groups or Cout % groups or cin_g * groups != Cin:
        raise ValueError(f"channel mismatch: input {Cin}, kernel {w.shape}, groups {groups}")
    if padding == "same":
        left, right = _same_padding(K, dilation)
    elif isinstance(padding, int):
        left = right = padding
    else:
        left, right = padding
    xd = x.data
    if left or right:
        xd = np.pad(xd, ((0, 0), (0, 0), (left, right)))
    Tp = xd.shape[-1]
    Tout = (Tp - dilation * (K - 1) - 1) // stride + 1
    if Tout <= 0:
        raise ValueError("input too short for kernel")
    span = stride * (Tout - 1) + 1
    if K == 1 and stride == 1:
        cols = xd[:, :, None, :]
    else:
        cols = np.empty((B, Cin, K, Tout), dtype=xd.dtype)
        for k in range(K):
            cols[:, :, k, :] = xd[:, :, k * dilation:k * dilation + span:stride]
    out = _conv_matmul(cols, w.data, groups)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
    wd = w.data

    def backward(g):
        gcols, gw = _conv_backward(g, cols, wd, groups, x.requires_grad)
        gx = None
        if x.requires_grad:
            gxp = np.zeros((B, Cin, Tp), dtype=g.dtype)
            for k in range(K):
                gxp[:, :, k * dilation:k * dilation + span:stride] += gcols[:, :, k, :]
            gx = gxp[:, :, left:left + T]
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward, "conv1d")


def _gather_matrix(idx: np.ndarray, valid: np.ndarray, T: int) -> sp.csr_matrix:
    rows = np.nonzero(valid)[0]
    data = np.ones(len(rows))
    return sp.csr_matrix((data, (rows, idx[rows])), shape=(T, T))


def pdconv1d(x, w, b, dilations) -> Tensor:
    """Convolution whose dilation varies per output sample.

    Tap ``k`` of output sample ``t`` reads ``x[t + (k - (K-1)/2) * d_t]``, zero
    outside the signal. ``dilations`` is an integer array ``[B, T]`` (or
    ``[T]``, shared across the batch) with entries >= 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    B, Cin, T = x.shape
    Cout, cin_w, K = w.shape
    if cin_w != Cin:
        raise ValueError(f"channel mismatch: input {Cin}, kernel {w.shape}")
    if K % 2 != 1:
        raise ValueError("pitch-dependent convolution needs an odd kernel")
    d = np.asarray(dilations)
    if d.ndim == 1:
        d = np.broadcast_to(d, (B, T))
    if d.shape != (B, T):
        raise ValueError(f"dilations shape {d.shape} does not match input {(B, T)}")
    if np.any(d < 1):
        raise ValueError("dilations must be >= 1")
    d = d.astype(np.int64)
    half = (K - 1) // 2
    t = np.arange(T)
    xd = x.data
    cols = np.empty((B, Cin, K, T), dtype=xd.dtype)
    gathers = []
    for bi in range(B):
        row = []
        for k in range(K):
            j = k - half
            if j == 0:
                cols[bi, :, k, :] = xd[bi]
                row.append(None)
                continue
            idx = t + j * d[bi]
            valid = (idx >= 0) & (idx < T)
            m = _gather_matrix(idx, valid, T)
            cols[bi, :, k, :] = (m @ xd[bi].T).T
            row.append(m)
        gathers.append(row)
    out = _conv_matmul(cols, w.data, 1)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
    wd = w.data

    def backward(g):
        gcols, gw = _conv_backward(g, cols, wd, 1, x.requires_grad)
        gx = None
        if x.requires_grad:
            gx = np.zeros((B, Cin, T), dtype=g.dtype)
            for bi in range(B):
                for k in range(K):
                    m = gathers[bi][k]
                    if m is None:
                        gx[bi] += gcols[bi, :, k, :]
                    else:
                        gx[bi] += (m.T @ gcols[bi, :, k, :].T).T
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward, "pdconv1d")


def avg_pool1d(x, kernel_size: int, stride: int, padding: int = 0) -> Tensor:
    """Average pooling over the last axis with edge-replicated padding."""
    x = as_tensor(x)
    if padding:
        x = pad1d(x, padding, padding, "edge")
    T = x.shape[-1]
    n_out = (T - kernel_size) // stride + 1
    span = stride * (n_out - 1) + 1
    acc = None
    for k in range(kernel_size):
        piece = x[..., k:k + span:stride]
        acc = piece if acc is None else acc + piece
    return acc * (1.0 / kernel_size)


# ---------------------------------------------------------------------------
# STFT

def hann_window(win_length: int, fft_size: int) -> np.ndarray:
    """Periodic Hann window of ``win_length`` centred in ``fft_size`` samples."""
    n = np.arange(win_length)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    left = (fft_size - win_length) // 2
    out = np.zeros(fft_size)
    out[left:left + win_length] = win
    return out


def frame_count(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def _frame_index(n_frames: int, fft_size: int, hop: int) -> np.ndarray:
    return hop * np.arange(n_frames)[:, None] + np.arange(fft_size)[None, :]


def stft_magnitude(x, fft_size: int, hop: int, win_length: int | None = None) -> Tensor:
    """Amplitude STFT of ``[B, T]`` signals, centred frames, reflection padding.

    Returns ``[B, frames, fft_size // 2 + 1]`` with ``frames = 1 + T // hop``.
    """
    x = as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    T = x.shape[-1]
    if T < fft_size:
        raise ValueError("input too short")
    win_length = win_length or fft_size
    window = hann_window(win_length, fft_size).astype(x.dtype)
    xp = pad1d(x, fft_size // 2, fft_size // 2, "reflect")
    n_frames = frame_count(T, hop)
    idx = _frame_index(n_frames, fft_size, hop)
    frames = xp.data[:, idx] * window
    spec = np.fft.rfft(frames, axis=-1)
    mag = np.abs(spec)
    Tp = xp.shape[-1]

    def backward(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.where(mag > 0, g * spec / mag, 0.0)
        v[..., 1:-1] *= 0.5
        gframes = fft_size * np.fft.irfft(v, n=fft_size, axis=-1) * window
        gx = np.zeros((x.shape[0], Tp), dtype=g.dtype)
        for f in range(n_frames):
            gx[:, f * hop:f * hop + fft_size] += gframes[:, f]
        return (gx,)

    return make_node(mag.astype(x.dtype), (xp,), backward, "stft_magnitude")
