"""Pure-Python reference kernels (fallback for the compiled ``_ckernels``)."""

import numpy as np


def fire_walk(alpha, acc0=0.0, u0=0, threshold=1.0, tol=1e-9):
    """Integrate-and-fire accumulator walk over one weight sequence.

    Returns ``(seg_ids, fire_frames, acc)``: the open-segment index of every
    frame, the frame index of each fire in order, and the carried residue.
    Frames after the last fire carry the id of the still-open segment.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    seg = np.empty(alpha.shape[0], dtype=np.int64)
    fires = []
    acc = float(acc0)
    u = int(u0)
    for t in range(alpha.shape[0]):
        seg[t] = u
        acc += alpha[t]
        while acc >= threshold - tol:
            fires.append(t)
            acc -= threshold
            u += 1
    return seg, np.asarray(fires, dtype=np.int64), acc


def fire_walk_batch(alpha, lengths, threshold=1.0, tol=1e-9):
    """Row-wise :func:`fire_walk`; padded frames get segment id -1.

    Returns ``(seg_ids, counts, residues, fire_frames)`` where ``fire_frames``
    is ``(B, cap)`` padded with -1.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    b, t_max = alpha.shape
    seg = np.full((b, t_max), -1, dtype=np.int64)
    counts = np.zeros(b, dtype=np.int64)
    residues = np.zeros(b, dtype=np.float64)
    rows = []
    for i in range(b):
        n = int(lengths[i])
        s, f, acc = fire_walk(alpha[i, :n], 0.0, 0, threshold, tol)
        seg[i, :n] = s
        counts[i] = len(f)
        residues[i] = acc
        rows.append(f)
    cap = max([len(f) for f in rows] + [1])
    fires = np.full((b, cap), -1, dtype=np.int64)
    for i, f in enumerate(rows):
        fires[i, :len(f)] = f
    return seg, counts, residues, fires


def lagging(delays, total, ref_len):
    """AL, AP and DAL of one delay vector (source-time units)."""
    n = len(delays)
    rate = total / ref_len
    tau = n
    for i in range(n):
        if delays[i] == total:
            tau = i + 1
            break
    al = 0.0
    for i in range(tau):
        al += delays[i] - i * rate
    al /= tau
    ap = 0.0
    dal = 0.0
    g = 0.0
    for i in range(n):
        ap += delays[i]
        g = delays[i] if i == 0 else max(delays[i], g + rate)
        dal += g - i * rate
    return al, ap / (total * n), dal / n
