"""Differentiable region-to-frame upsampling.

Each temporal region k carries a class distribution ``a_k`` and a raw length
``l_k``. Lengths are turned into absolute frame counts with a softmax scaled by
T, and each region's distribution is stretched over its frames by backward
warping into a source made of J copies of ``a_k``, using a bilinear kernel and
a per-region affine index map.

The source is padded with one row of region k-1 in front and one row of
region k+1 behind (the first and last regions read themselves). With the
affine map evaluated at the integer lengths and starts, row 1 lands on the
first copy and row l_k on the last one, so the forward pass equals plain
repetition; the kernel's slope at the ends carries the length gradient
towards the neighbouring regions. A region's start is the sum of the lengths
before it, so its gradient also reaches every earlier length.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

J_DEFAULT = 100

LENGTH_MODES = ("straight_through", "smooth")


@dataclass
class AbsoluteLengths:
    """Real-valued (differentiable) and integerized region lengths."""

    lprime: ad.Tensor
    lint: np.ndarray

    @property
    def boundaries(self):
        """Exclusive end frame of each region."""
        return np.cumsum(self.lint)


def largest_remainder(lprime, T):
    """Round positive reals summing to T into integers >= 1 summing to T exactly.

    Start from the floors (at least 1), then hand out the missing frames by
    largest residual ``lprime - lint``, earlier regions first on ties. When
    the floor of one overshoots T, frames are taken back from the regions
    furthest above their real length.
    """
    lprime = np.asarray(lprime, dtype=np.float64)
    K = len(lprime)
    if T < K:
        raise ValueError(f"cannot give each of {K} regions a frame with only T={T}")
    lint = np.maximum(np.floor(lprime), 1).astype(np.int64)
    deficit = T - int(lint.sum())
    if deficit > 0:
        order = np.argsort(-(lprime - lint), kind="stable")
        lint[order[:deficit]] += 1
    for _ in range(-deficit):
        cand = np.flatnonzero(lint > 1)
        lint[cand[np.argmax(lint[cand] - lprime[cand])]] -= 1
    return lint


def normalize_lengths(L, T):
    """Project raw lengths (K,) to absolute lengths summing to T."""
    L = ad.tensor(L)
    if L.ndim != 1 or L.shape[0] < 1:
        raise ValueError(f"lengths must be a non-empty vector, got shape {L.shape}")
    K = L.shape[0]
    if T < K:
        raise ValueError(f"T={T} is smaller than the number of regions K={K}")
    lprime = ad.mul(ad.softmax(L, axis=0), float(T))
    return AbsoluteLengths(lprime=lprime, lint=largest_remainder(lprime.data, T))


def target_index(H):
    """Normalized target indices in [-1, 1] for rows 1..H."""
    if H == 1:
        return np.array([-1.0])
    return -1.0 + 2.0 * np.arange(H) / (H - 1)


def source_index(J=J_DEFAULT):
    """Normalized source indices in [-1, 1] for the J expanded source rows."""
    return -1.0 + 2.0 * np.arange(J) / (J - 1)


def affine_index(i_target, length, H, offset=0.0):
    """Map target indices so row 1 lands on -1 and row ``length`` on +1.

    ``offset`` is how far (in frames) the region's real start lies after the
    first row; it translates the map. Rows past ``length`` land beyond +1.
    A region of length <= 1 only maps its first row onto the source.
    """
    i_target = np.asarray(i_target, dtype=np.float64)
    if H == 1:
        return np.full_like(i_target, -1.0 - 2.0 * offset)
    if length <= 1.0:
        return np.where(i_target <= -1.0, -1.0, np.inf)
    return (H - 1) / (length - 1.0) * (i_target + 1.0) - 1.0 - 2.0 * offset / (length - 1.0)


def _pixel_coords(lengths, offsets, H, J):
    """Source coordinate u[k, h] in [-1, J] (0..J-1 is the region itself).

    Returns (u, du/dlength, du/doffset); derivatives vanish where u was clamped.
    """
    lengths = np.asarray(lengths, dtype=np.float64)[:, None]
    offsets = np.asarray(offsets, dtype=np.float64)[:, None]
    tau = np.arange(H, dtype=np.float64)[None, :] - offsets
    denom = lengths - 1.0
    ok = denom > 0
    safe = np.where(ok, denom, 1.0)
    raw = np.where(ok, tau * (J - 1) / safe, np.sign(tau) * (J + 1.0))
    du_dlen = np.where(ok, -raw / safe, 0.0)
    du_doff = np.where(ok, -(J - 1) / safe, 0.0) * np.ones_like(raw)
    clamped = (raw <= -1) | (raw >= J)
    u = np.clip(raw, -1.0, float(J))
    return u, np.where(clamped, 0.0, du_dlen), np.where(clamped, 0.0, du_doff)


def _kernel(u, J):
    """Bilinear weights over the J+2 source pixels; pixel p sits at coordinate p-1."""
    j = np.arange(-1, J + 1, dtype=np.float64)
    return np.maximum(0.0, 1.0 - np.abs(u[..., None] - j))


def _kernel_slope(u, J):
    """d w / d u: -1 on the pixel at floor(u), +1 on the next one, 0 elsewhere.

    This is the three-case derivative of the bilinear kernel with the shared
    kink assigned to the right-hand interval.
    """
    j = np.arange(-1, J + 1, dtype=np.float64)
    x0 = np.floor(u)[..., None]
    slope = np.where(j == x0, -1.0, 0.0) + np.where(j == x0 + 1, 1.0, 0.0)
    return np.where(u[..., None] >= J, 0.0, slope)


def _expanded_source(A, J):
    """(K, J+2, C) source: previous region's row, J copies of a_k, next region's row."""
    K, C = A.shape
    prev = np.concatenate([A[:1], A[:-1]], axis=0)
    nxt = np.concatenate([A[1:], A[-1:]], axis=0)
    src = np.empty((K, J + 2, C), dtype=A.dtype)
    src[:, 0] = prev
    src[:, 1:J + 1] = A[:, None, :]
    src[:, J + 1] = nxt
    return src


def temporal_sample(a_k, lint_k, H, J=J_DEFAULT, length=None, offset=0.0, a_prev=None, a_next=None):
    """Sample one region's distribution onto an (H, C) scratch block.

    Only rows ``0..lint_k-1`` are meaningful; the caller crops the rest.
    ``length`` is the real length in the affine map (defaults to ``lint_k``),
    ``offset`` the real start relative to the first row, and ``a_prev`` /
    ``a_next`` the distributions read before and after the region.
    """
    a_k = np.asarray(a_k, dtype=np.float64)
    if lint_k < 1:
        raise ValueError(f"region length must be >= 1, got {lint_k}")
    if lint_k > H:
        raise ValueError(f"region length {lint_k} exceeds scratch height {H}")
    length = lint_k if length is None else length
    a_prev = a_k if a_prev is None else np.asarray(a_prev, dtype=np.float64)
    a_next = a_k if a_next is None else np.asarray(a_next, dtype=np.float64)
    src = _expanded_source(np.stack([a_prev, a_k, a_next]), J)[1:2]
    u, _, _ = _pixel_coords([length], [offset], H, J)
    return np.einsum("khj,kjc->khc", _kernel(u, J), src)[0]


@dataclass
class SamplingPlan:
    """Everything the backward pass of ``upsample`` needs."""

    lint: np.ndarray
    lengths: np.ndarray
    offsets: np.ndarray
    H: int
    J: int
    u: np.ndarray
    du_dlength: np.ndarray
    du_doffset: np.ndarray
    weights: np.ndarray
    source: np.ndarray
    valid: np.ndarray

    @property
    def endpoints(self):
        """Affine-mapped normalized index of row 1 and row lint_k for every region."""
        i_t = target_index(self.H)
        first, last = [], []
        for length, n, off in zip(self.lengths, self.lint, self.offsets):
            first.append(affine_index(i_t[0], length, self.H, off))
            last.append(affine_index(i_t[n - 1], length, self.H, off))
        return np.array(first), np.array(last)


def sampling_plan(A, lint, lengths, offsets=None, J=J_DEFAULT):
    A = np.asarray(A)
    lint = np.asarray(lint, dtype=np.int64)
    if np.any(lint < 1):
        raise ValueError("every region needs at least one frame")
    offsets = np.zeros(len(lint)) if offsets is None else np.asarray(offsets, dtype=np.float64)
    H = int(lint.max())
    u, du_len, du_off = _pixel_coords(lengths, offsets, H, J)
    valid = np.arange(H)[None, :] < lint[:, None]
    return SamplingPlan(
        lint=lint, lengths=np.asarray(lengths, dtype=np.float64), offsets=offsets, H=H, J=J,
        u=u, du_dlength=du_len, du_doffset=du_off,
        weights=_kernel(u, J).astype(A.dtype), source=_expanded_source(A, J), valid=valid,
    )


def sample_backward(grad_out, plan):
    """Gradients of the cropped, concatenated output w.r.t. A (K, C) and the real lengths (K,).

    ``grad_out`` is (T, C) in frame order. Region k's start is the sum of the
    real lengths before it, so its offset gradient flows to all of those.
    """
    if plan is None or plan.weights is None:
        raise RuntimeError("sample_backward called without a saved sampling plan")
    K, H = plan.valid.shape
    J = plan.J
    g = np.zeros((K, H, grad_out.shape[1]), dtype=grad_out.dtype)
    g[plan.valid] = grad_out
    gsrc = np.einsum("khj,khc->kjc", plan.weights, g)
    gA = gsrc[:, 1:J + 1].sum(axis=1)
    gA[:-1] += gsrc[1:, 0]
    gA[0] += gsrc[0, 0]
    gA[1:] += gsrc[:-1, J + 1]
    gA[-1] += gsrc[-1, J + 1]
    slope = _kernel_slope(plan.u, J).astype(grad_out.dtype)
    dout_du = np.einsum("khj,kjc->khc", slope, plan.source)
    g_u = np.einsum("khc,khc->kh", g, dout_du)
    g_len = (g_u * plan.du_dlength).sum(axis=1)
    g_off = (g_u * plan.du_doffset).sum(axis=1)
    # offset_k = sum_{i<k} lprime_i - integer start_k
    suffix = np.concatenate([np.cumsum(g_off[::-1])[::-1][1:], [0.0]])
    return gA, g_len + suffix


def upsample(A, lengths, T=None, J=J_DEFAULT, mode="straight_through", renormalize=True,
             return_plan=False):
    """Upsample region posteriors A (K, C) to frame posteriors Y (T, C).

    In ``straight_through`` mode the affine maps use the integer lengths and
    starts, so the forward pass is exact repetition, and the gradient
    evaluated there is passed to the real lengths. In ``smooth`` mode the real
    lengths and real starts enter the affine maps (crop still by the integer
    lengths), which makes Y an ordinary piecewise-linear function of L.
    """
    if mode not in LENGTH_MODES:
        raise ValueError(f"unknown length mode {mode!r}, expected one of {LENGTH_MODES}")
    lint = np.asarray(lengths.lint)
    if T is not None and int(lint.sum()) != T:
        raise ValueError(f"integer lengths sum to {int(lint.sum())}, expected T={T}")
    if A.shape[0] != len(lint):
        raise ValueError(f"{A.shape[0]} regions but {len(lint)} lengths")
    if mode == "smooth":
        real = np.asarray(lengths.lprime.data, dtype=np.float64)
        offsets = np.concatenate([[0.0], np.cumsum(real)[:-1]]) - np.concatenate([[0], np.cumsum(lint)[:-1]])
    else:
        real, offsets = lint.astype(np.float64), np.zeros(len(lint))
    plan = sampling_plan(A.data, lint, real, offsets, J)
    Y = np.einsum("khj,kjc->khc", plan.weights, plan.source)[plan.valid]

    def backward(g):
        gA, g_len = sample_backward(g, plan)
        return gA.astype(g.dtype), g_len.astype(g.dtype)

    out = ad._make(Y, (A, lengths.lprime), backward, "upsample")
    if renormalize:
        out = ad.div(out, ad.reshape(ad.sum(out, axis=1), (-1, 1)))
    return (out, plan) if return_plan else out
