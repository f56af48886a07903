"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The public functions take an optional ``backend`` argument ("numba" or
"numpy"); by default the backend comes from :func:`ksvqe._accel.numba_enabled`.
Both paths consume the same inputs (noise is always drawn by the caller), so
they agree to floating-point rounding.
"""

from functools import lru_cache

import numpy as np

from ._accel import njit, resolve_backend

# ---------------------------------------------------------------------------
# perturbed top-k statistics
# ---------------------------------------------------------------------------


def _topk_mask_numpy(values, k):
    # stable sort on the negated values: ties resolve to the lowest index
    order = np.argsort(-values, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(values.shape, dtype=np.float64)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def _perturbed_topk_numpy(scores, noise, k, sigma):
    perturbed = scores[:, None, :] + sigma * noise
    hits = _topk_mask_numpy(perturbed, k)  # (B, n, M)
    indicator = hits.mean(axis=1)
    if sigma > 0:
        n = noise.shape[1]
        jac = np.einsum("bni,bnj->bij", hits, noise) / n
        # baseline: subtract mean(Y) * mean(Z), zero in expectation but cuts the variance
        jac = (jac - indicator[:, :, None] * noise.mean(axis=1)[:, None, :]) / sigma
    else:
        jac = np.zeros(scores.shape + scores.shape[-1:])
    return indicator, jac


@njit
def _perturbed_topk_numba(scores, noise, k, sigma):
    b, n, m = noise.shape
    indicator = np.zeros((b, m))
    jac = np.zeros((b, m, m))
    zbar = np.zeros((b, m))
    buf = np.empty(m)
    for bi in range(b):
        for s in range(n):
            for j in range(m):
                buf[j] = -(scores[bi, j] + sigma * noise[bi, s, j])
                zbar[bi, j] += noise[bi, s, j]
            order = np.argsort(buf, kind="mergesort")
            for r in range(k):
                i = order[r]
                indicator[bi, i] += 1.0
                if sigma > 0:
                    for j in range(m):
                        jac[bi, i, j] += noise[bi, s, j]
    indicator /= n
    zbar /= n
    if sigma > 0:
        for bi in range(b):
            for i in range(m):
                for j in range(m):
                    jac[bi, i, j] = (jac[bi, i, j] / n - indicator[bi, i] * zbar[bi, j]) / sigma
    return indicator, jac


def perturbed_topk_stats(scores, noise, k, sigma, backend=None):
    """Monte-Carlo mean of perturbed K-hot argmax indicators and its Jacobian.

    scores: (B, M); noise: (B, n, M) standard normal draws.
    Returns ``(indicator (B, M), jacobian (B, M, M))`` where
    ``jacobian[b, i, j] = (mean_s Y_i(s) Z_j(s) - mean_s Y_i(s) * mean_s Z_j(s)) / sigma``,
    the perturbed-maximum estimate of d E[Y_i] / d scores_j with a mean baseline.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    noise = np.ascontiguousarray(noise, dtype=np.float64)
    if resolve_backend(backend) == "numba":
        return _perturbed_topk_numba(scores, noise, int(k), float(sigma))
    return _perturbed_topk_numpy(scores, noise, int(k), float(sigma))


# ---------------------------------------------------------------------------
# window sums over a square score grid
# ---------------------------------------------------------------------------


def _window_means_numpy(grid, w, stride):
    view = np.lib.stride_tricks.sliding_window_view(grid, (w, w), axis=(-2, -1))
    view = view[..., ::stride, ::stride, :, :]
    return view.mean(axis=(-2, -1))


@njit
def _window_means_numba(grid, w, stride):
    b, s, _ = grid.shape
    n = (s - w) // stride + 1
    out = np.zeros((b, n, n))
    for bi in range(b):
        for r in range(n):
            for c in range(n):
                acc = 0.0
                for y in range(r * stride, r * stride + w):
                    for x in range(c * stride, c * stride + w):
                        acc += grid[bi, y, x]
                out[bi, r, c] = acc / (w * w)
    return out


def window_means(grid, w, stride=1, backend=None):
    """Mean of every ``w x w`` window (anchors every ``stride``) of a (B, S, S) grid."""
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    squeeze = grid.ndim == 2
    if squeeze:
        grid = grid[None]
    if resolve_backend(backend) == "numba":
        out = _window_means_numba(grid, int(w), int(stride))
    else:
        out = _window_means_numpy(grid, int(w), int(stride))
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# block-DCT quantization (compression surrogate)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    return mat


def _block_quantize_numpy(frames, block, qstep, dct):
    t, h, w, c = frames.shape
    hb, wb = h // block, w // block
    out = frames.copy()
    core = frames[:, : hb * block, : wb * block, :]
    blocks = core.reshape(t, hb, block, wb, block, c).transpose(0, 1, 3, 5, 2, 4)
    coef = dct @ blocks @ dct.T
    coef = np.round(coef / qstep) * qstep
    rec = dct.T @ coef @ dct
    out[:, : hb * block, : wb * block, :] = rec.transpose(0, 1, 4, 2, 5, 3).reshape(t, hb * block, wb * block, c)
    return out


@njit
def _block_quantize_numba(frames, block, qstep, dct):
    t, h, w, c = frames.shape
    out = frames.copy()
    tmp = np.empty((block, block))
    coef = np.empty((block, block))
    for ti in range(t):
        for by in range(h // block):
            for bx in range(w // block):
                for ch in range(c):
                    y0 = by * block
                    x0 = bx * block
                    # coef = D X D^T
                    for u in range(block):
                        for x in range(block):
                            acc = 0.0
                            for y in range(block):
                                acc += dct[u, y] * frames[ti, y0 + y, x0 + x, ch]
                            tmp[u, x] = acc
                    for u in range(block):
                        for v in range(block):
                            acc = 0.0
                            for x in range(block):
                                acc += tmp[u, x] * dct[v, x]
                            coef[u, v] = np.round(acc / qstep) * qstep
                    # X = D^T C D
                    for y in range(block):
                        for v in range(block):
                            acc = 0.0
                            for u in range(block):
                                acc += dct[u, y] * coef[u, v]
                            tmp[y, v] = acc
                    for y in range(block):
                        for x in range(block):
                            acc = 0.0
                            for v in range(block):
                                acc += tmp[y, v] * dct[v, x]
                            out[ti, y0 + y, x0 + x, ch] = acc
    return out


def block_dct_quantize(frames, block, qstep, backend=None):
    """Quantize every full ``block x block`` DCT block of (T, H, W, C) frames with a uniform step.

    Pixels in a partial trailing block are passed through. ``qstep <= 0`` is the identity.
    """
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if qstep <= 0:
        return frames.copy()
    dct = dct_matrix(int(block))
    if resolve_backend(backend) == "numba":
        return _block_quantize_numba(frames, int(block), float(qstep), dct)
    return _block_quantize_numpy(frames, int(block), float(qstep), dct)


# ---------------------------------------------------------------------------
# blockiness of full frames with known block alignment
# ---------------------------------------------------------------------------


def blockiness(frames, block) -> float:
    """Mean squared neighbour difference across block boundaries minus the same inside blocks.

    Works on (T, H, W, C) frames whose block grid starts at pixel (0, 0).
    """
    frames = np.asarray(frames, dtype=np.float64)
    dx = np.diff(frames, axis=2) ** 2
    dy = np.diff(frames, axis=1) ** 2
    bx = (np.arange(dx.shape[2]) % block) == block - 1
    by = (np.arange(dy.shape[1]) % block) == block - 1
    boundary = np.concatenate([dx[:, :, bx].ravel(), dy[:, by].ravel()]).mean()
    interior = np.concatenate([dx[:, :, ~bx].ravel(), dy[:, ~by].ravel()]).mean()
    return float(boundary - interior)


# ---------------------------------------------------------------------------
# per-fragment degradation statistics (toy distortion extractor)
# ---------------------------------------------------------------------------

FRAGMENT_STAT_NAMES = (
    "variance",
    "grad_x_energy",
    "grad_y_energy",
    "laplacian_energy",
    "temporal_energy",
    "block_x_energy",
    "block_y_energy",
    "block_x_contrast",
    "block_y_contrast",
    "mean_r",
    "mean_g",
    "mean_b",
    "std_r",
    "std_g",
    "std_b",
    "abs_mean",
    "dct_active_fraction",
    "dct_ac_energy",
)

DCT_ZERO_TOL = 0.01


def _fragment_stats_numpy(frag, block, dct):
    # frag: (N, T, h, w, C)
    n, t, h, w, c = frag.shape
    stats = np.zeros((n, len(FRAGMENT_STAT_NAMES)))
    flat = frag.reshape(n, -1)
    stats[:, 0] = flat.var(axis=1)
    dx = np.diff(frag, axis=3) ** 2
    dy = np.diff(frag, axis=2) ** 2
    stats[:, 1] = dx.reshape(n, -1).mean(axis=1)
    stats[:, 2] = dy.reshape(n, -1).mean(axis=1)
    lap = (
        frag[:, :, 1:-1, 1:-1] * 4.0
        - frag[:, :, :-2, 1:-1]
        - frag[:, :, 2:, 1:-1]
        - frag[:, :, 1:-1, :-2]
        - frag[:, :, 1:-1, 2:]
    )
    stats[:, 3] = (lap**2).reshape(n, -1).mean(axis=1) if lap.size else 0.0
    if t > 1:
        stats[:, 4] = (np.diff(frag, axis=1) ** 2).reshape(n, -1).mean(axis=1)
    # phase-blind block energy: for each phase, the mean squared difference on
    # boundary columns; report the max over phases and its excess over the mean
    col_e = dx.mean(axis=(1, 2, 4))  # (N, w-1)
    row_e = dy.mean(axis=(1, 3, 4))  # (N, h-1)
    for k, e in ((0, col_e), (1, row_e)):
        per_phase = np.zeros((n, block))
        cnt = np.zeros(block)
        for pos in range(e.shape[1]):
            per_phase[:, pos % block] += e[:, pos]
            cnt[pos % block] += 1
        valid = cnt > 0
        per_phase = per_phase[:, valid] / cnt[valid]
        peak = per_phase.max(axis=1)
        stats[:, 5 + k] = peak
        stats[:, 7 + k] = peak - per_phase.mean(axis=1)
    cm = frag.mean(axis=(1, 2, 3))
    cs = frag.std(axis=(1, 2, 3))
    cc = min(c, 3)
    stats[:, 9 : 9 + cc] = cm[:, :cc]
    stats[:, 12 : 12 + cc] = cs[:, :cc]
    stats[:, 15] = np.abs(flat).mean(axis=1)
    # quantization footprint: over every block placement, the share of AC coefficients
    # above tolerance (min over placements) and the AC energy (mean over placements)
    if h >= block and w >= block:
        ac = np.ones((block, block), dtype=bool)
        ac[0, 0] = False
        zero, energy = [], []
        for py in range(h - block + 1):
            for px in range(w - block + 1):
                x = frag[:, :, py : py + block, px : px + block, :].transpose(0, 1, 4, 2, 3)
                coef = (dct @ x @ dct.T)[..., ac]  # (N, T, C, block*block-1)
                zero.append((np.abs(coef) < DCT_ZERO_TOL).reshape(n, -1).mean(axis=1))
                energy.append((coef**2).reshape(n, -1).mean(axis=1))
        stats[:, 16] = 1.0 - np.max(zero, axis=0)
        stats[:, 17] = np.mean(energy, axis=0)
    return stats


@njit
def _fragment_stats_numba(frag, block, dct):
    n, t, h, w, c = frag.shape
    out = np.zeros((n, 18))
    tmp = np.empty((block, block))
    per_phase = np.zeros(block)
    cnt = np.zeros(block)
    for i in range(n):
        f = frag[i]
        size = t * h * w * c
        s1 = 0.0
        s2 = 0.0
        sa = 0.0
        for a in range(t):
            for y in range(h):
                for x in range(w):
                    for ch in range(c):
                        v = f[a, y, x, ch]
                        s1 += v
                        sa += abs(v)
        mean = s1 / size
        for a in range(t):
            for y in range(h):
                for x in range(w):
                    for ch in range(c):
                        d = f[a, y, x, ch] - mean
                        s2 += d * d
        out[i, 0] = s2 / size
        out[i, 15] = sa / size
        # gradients
        gx = 0.0
        for a in range(t):
            for y in range(h):
                for x in range(w - 1):
                    for ch in range(c):
                        d = f[a, y, x + 1, ch] - f[a, y, x, ch]
                        gx += d * d
        gy = 0.0
        for a in range(t):
            for y in range(h - 1):
                for x in range(w):
                    for ch in range(c):
                        d = f[a, y + 1, x, ch] - f[a, y, x, ch]
                        gy += d * d
        if w > 1:
            out[i, 1] = gx / (t * h * (w - 1) * c)
        if h > 1:
            out[i, 2] = gy / (t * (h - 1) * w * c)
        if h > 2 and w > 2:
            lp = 0.0
            for a in range(t):
                for y in range(1, h - 1):
                    for x in range(1, w - 1):
                        for ch in range(c):
                            d = (
                                4.0 * f[a, y, x, ch]
                                - f[a, y - 1, x, ch]
                                - f[a, y + 1, x, ch]
                                - f[a, y, x - 1, ch]
                                - f[a, y, x + 1, ch]
                            )
                            lp += d * d
            out[i, 3] = lp / (t * (h - 2) * (w - 2) * c)
        if t > 1:
            te = 0.0
            for a in range(t - 1):
                for y in range(h):
                    for x in range(w):
                        for ch in range(c):
                            d = f[a + 1, y, x, ch] - f[a, y, x, ch]
                            te += d * d
            out[i, 4] = te / ((t - 1) * h * w * c)
        # column-boundary energy by phase
        for k in range(2):
            length = w - 1 if k == 0 else h - 1
            per_phase[:] = 0.0
            cnt[:] = 0.0
            for pos in range(length):
                e = 0.0
                for a in range(t):
                    for o in range(h if k == 0 else w):
                        for ch in range(c):
                            if k == 0:
                                d = f[a, o, pos + 1, ch] - f[a, o, pos, ch]
                            else:
                                d = f[a, pos + 1, o, ch] - f[a, pos, o, ch]
                            e += d * d
                e /= t * (h if k == 0 else w) * c
                per_phase[pos % block] += e
                cnt[pos % block] += 1.0
            peak = -1.0
            tot = 0.0
            nv = 0
            for p in range(block):
                if cnt[p] > 0:
                    v = per_phase[p] / cnt[p]
                    tot += v
                    nv += 1
                    if v > peak:
                        peak = v
            if nv > 0:
                out[i, 5 + k] = peak
                out[i, 7 + k] = peak - tot / nv
        for ch in range(min(c, 3)):
            m = 0.0
            for a in range(t):
                for y in range(h):
                    for x in range(w):
                        m += f[a, y, x, ch]
            m /= t * h * w
            v2 = 0.0
            for a in range(t):
                for y in range(h):
                    for x in range(w):
                        d = f[a, y, x, ch] - m
                        v2 += d * d
            out[i, 9 + ch] = m
            out[i, 12 + ch] = np.sqrt(v2 / (t * h * w))
        if h >= block and w >= block:
            best = 0.0
            etot = 0.0
            n_place = 0
            n_ac = t * c * (block * block - 1)
            for py in range(h - block + 1):
                for px in range(w - block + 1):
                    zeros = 0
                    e = 0.0
                    for a in range(t):
                        for ch in range(c):
                            for u in range(block):
                                for x in range(block):
                                    acc = 0.0
                                    for y in range(block):
                                        acc += dct[u, y] * f[a, py + y, px + x, ch]
                                    tmp[u, x] = acc
                            for u in range(block):
                                for v in range(block):
                                    if u == 0 and v == 0:
                                        continue
                                    acc = 0.0
                                    for x in range(block):
                                        acc += tmp[u, x] * dct[v, x]
                                    if abs(acc) < DCT_ZERO_TOL:
                                        zeros += 1
                                    e += acc * acc
                    frac = zeros / n_ac
                    if frac > best:
                        best = frac
                    etot += e / n_ac
                    n_place += 1
            out[i, 16] = 1.0 - best
            out[i, 17] = etot / n_place
    return out


def fragment_stats(fragments, block=4, backend=None):
    """Degradation statistics per fragment; fragments are (N, T, h, w, C)."""
    fragments = np.ascontiguousarray(fragments, dtype=np.float64)
    dct = dct_matrix(int(block))
    if resolve_backend(backend) == "numba":
        return _fragment_stats_numba(fragments, int(block), dct)
    return _fragment_stats_numpy(fragments, int(block), dct)


# ---------------------------------------------------------------------------
# BT.500 exceedance counts
# ---------------------------------------------------------------------------


def _bt500_counts_numpy(scores, mask, mean, std, alpha, valid, strict):
    hi = mean + alpha * std
    lo = (mean + alpha * std) if strict else (mean - alpha * std)
    use = mask & valid[None, :]
    p = ((scores >= hi[None, :]) & use).sum(axis=1)
    q = ((scores <= lo[None, :]) & use).sum(axis=1)
    return p.astype(np.int64), q.astype(np.int64)


@njit
def _bt500_counts_numba(scores, mask, mean, std, alpha, valid, strict):
    o, v = scores.shape
    p = np.zeros(o, dtype=np.int64)
    q = np.zeros(o, dtype=np.int64)
    for j in range(v):
        if not valid[j]:
            continue
        hi = mean[j] + alpha[j] * std[j]
        lo = hi if strict else mean[j] - alpha[j] * std[j]
        for i in range(o):
            if not mask[i, j]:
                continue
            u = scores[i, j]
            if u >= hi:
                p[i] += 1
            if u <= lo:
                q[i] += 1
    return p, q


def bt500_counts(scores, mask, mean, std, alpha, valid, strict=False, backend=None):
    """Per-observer counts of ratings at or beyond ``mean +/- alpha * std`` (P above, Q below).

    With ``strict`` the lower test uses ``mean + alpha * std`` exactly as printed in the source
    procedure.
    """
    scores = np.ascontiguousarray(np.nan_to_num(scores), dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    args = (
        scores,
        mask,
        np.ascontiguousarray(mean, dtype=np.float64),
        np.ascontiguousarray(std, dtype=np.float64),
        np.ascontiguousarray(alpha, dtype=np.float64),
        np.ascontiguousarray(valid, dtype=np.bool_),
        bool(strict),
    )
    if resolve_backend(backend) == "numba":
        return _bt500_counts_numba(*args)
    return _bt500_counts_numpy(*args)
