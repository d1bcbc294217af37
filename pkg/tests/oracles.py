"""Independent brute-force reference implementations used by the tests."""

import numpy as np


def sq_dist_loop(means):
    n = len(means)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = sum((means[i][c] - means[j][c]) ** 2 for c in range(len(means[i])))
    return out


def sq_dist_dense(means):
    """All pairs, coordinate terms added in order x, y, z."""
    m = np.asarray(means, dtype=np.float64)
    dx = m[:, None, 0] - m[None, :, 0]
    dy = m[:, None, 1] - m[None, :, 1]
    dz = m[:, None, 2] - m[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def rank_oracle(keys, width):
    """Row-wise order: self first, then ascending key, then ascending id."""
    n = keys.shape[0]
    out = np.empty((n, width), dtype=np.int64)
    ids = np.arange(keys.shape[1])
    for i in range(n):
        others = ids[ids != i]
        order = np.lexsort((others, keys[i, others]))
        out[i] = np.concatenate([[i], others[order]])[:width]
    return out


def knn_oracle(means, K):
    return rank_oracle(sq_dist_dense(means), K)


def cosine_oracle_sim(features, eps=1e-12, block=500):
    """Dense cosine matrix, each dot product summed over coordinates in order.

    Equal rows must give exactly equal similarities for the tie-break to be
    well defined, so no BLAS (whose rounding depends on position).
    """
    f = np.asarray(features, dtype=np.float64)
    sq = np.zeros(len(f))
    for c in range(f.shape[1]):
        sq = sq + f[:, c] * f[:, c]
    fn = f / np.maximum(np.sqrt(sq), eps)[:, None]
    out = np.empty((len(f), len(f)))
    for s in range(0, len(f), block):
        acc = np.zeros((min(block, len(f) - s), len(f)))
        for c in range(f.shape[1]):
            acc = acc + np.multiply.outer(fn[s:s + block, c], fn[:, c])
        out[s:s + block] = acc
    return out


def topM_oracle(features, M, eps=1e-12):
    return rank_oracle(-cosine_oracle_sim(features, eps), M)


def masked_dense_attention(X, W_Q, W_K, W_V, idx, mask=None):
    """Row-by-row attention over the unique valid neighbor set of each query."""
    q = X @ W_Q
    k = X @ W_K
    v = X @ W_V
    n = X.shape[0]
    dk = W_Q.shape[1]
    hidden = np.zeros((n, W_V.shape[1]))
    for a in range(n):
        valid = np.ones(idx.shape[1], bool) if mask is None else mask[a]
        nbrs = list(dict.fromkeys(idx[a][valid].tolist()))
        allowed = np.full(n, -np.inf)
        for j in nbrs:
            allowed[j] = 0.0
        logits = np.array([q[a] @ k[j] / np.sqrt(dk) for j in range(n)]) + allowed
        e = np.exp(logits - logits.max())
        w = e / e.sum()
        hidden[a] = w @ v
    return hidden


def splat_all_pairs(G, spec, cutoff_sigmas=3.0):
    """Every Gaussian against every voxel center with an explicit inverse covariance."""
    centers = spec.centers()
    acc = np.zeros((len(centers), G.d))
    for i in range(G.N):
        q = G.rotation[i] / np.linalg.norm(G.rotation[i])
        w, x, y, z = q
        R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        cov = R @ np.diag(G.scale[i] ** 2) @ R.T
        inv = np.linalg.inv(cov)
        diff = centers - G.mean[i]
        maha = np.einsum("pa,ab,pb->p", diff, inv, diff)
        e = np.exp(G.semantics[i] - G.semantics[i].max())
        p = e / e.sum()
        dens = np.where(maha <= cutoff_sigmas**2, np.exp(-0.5 * maha), 0.0)
        acc += G.opacity[i] * dens[:, None] * p[None, :]
    return acc


def confusion_loop(pred, gt, d):
    """Per-class TP/FP/FN by walking every voxel."""
    tp = [0] * d
    fp = [0] * d
    fn = [0] * d
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    return tp, fp, fn
