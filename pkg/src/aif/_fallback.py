"""Pure-numpy implementations of the compiled kernels.

Every function here produces bit-identical output to its counterpart in
``_kernels.pyx``; the accumulation order is the same sequential order over
the reduced axis.
"""
import numpy as np


def matmul_nt(a, bt):
    m, k = a.shape
    n = bt.shape[0]
    acc = np.zeros((m, n), dtype=np.float64)
    a64 = a.astype(np.float64)
    b64 = bt.astype(np.float64)
    # products of two float32 values are exact in float64, so only the add rounds
    for p in range(k):
        acc += a64[:, p : p + 1] * b64[:, p][None, :]
    return acc.astype(np.float32)


def similarity_matrix(a, b, lut, nbits, chunk=256):
    m, n = a.shape[0], b.shape[0]
    out = np.empty((m, n), dtype=np.float32)
    if m == 0 or n == 0:
        return out
    lut = lut.astype(np.int64)
    for start in range(0, m, chunk):
        block = a[start : start + chunk]
        xnor = 255 - (block[:, None, :] ^ b[None, :, :])
        counts = lut[xnor].sum(axis=2)
        out[start : start + chunk] = (counts.astype(np.float64) * (1.0 / nbits)).astype(np.float32)
    return out


def simtier_counts(sims, n_tiers):
    m, n = sims.shape
    out = np.zeros((m, n_tiers), dtype=np.int64)
    if m == 0 or n == 0:
        return out
    s = sims.astype(np.float64)
    nt = float(n_tiers)
    t = (s * nt).astype(np.int64)
    up = (t < n_tiers) & (s >= (t + 1) / nt)
    t = np.where(up, t + 1, t)
    down = (t > 0) & (s < t / nt)
    t = np.where(down, t - 1, t)
    t = np.minimum(t, n_tiers - 1)
    rows = np.repeat(np.arange(m), n)
    np.add.at(out, (rows, t.ravel()), 1)
    return out
