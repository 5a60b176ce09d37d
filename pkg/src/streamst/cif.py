"""Continuous integrate-and-fire (CIF) alignment.

Frame-rate acoustic states are squeezed into token-rate vectors.  The last
channel of every state is a weight logit; the remaining channels are summed,
weighted, into one vector per fired segment.  Frames are never split at a
firing boundary: a frame belongs entirely to the segment that is open when
it arrives, and the accumulator carries ``acc - 1.0`` into the next segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import numerics as nx
from .numerics import Tensor

THRESHOLD = 1.0
TOLERANCE = 1e-9
TAIL_FIRE = 0.5


class DegenerateAlignmentError(ValueError):
    """Raised when the weights sum to zero and no alignment exists."""


@dataclass(frozen=True)
class AcousticStates:
    values: Tensor  # (T, d); channel d-1 holds the weight logit
    frame_ms: float = 40.0

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"acoustic states must be (T, d), got {self.values.shape}")
        if self.values.shape[0] < 1:
            raise ValueError("acoustic states need T >= 1")
        if self.values.shape[1] < 2:
            raise ValueError("acoustic states need d >= 2 (one channel is the weight logit)")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FiringSchedule:
    weights: np.ndarray          # raw alpha per frame
    scaled_weights: np.ndarray   # alpha actually integrated
    n_hat: float
    segments: tuple[range, ...]
    fire_frames: tuple[int, ...]
    residue: float = 0.0

    @property
    def fired_count(self) -> int:
        return len(self.segments)


@dataclass
class IntegratedSequence:
    embeddings: Tensor           # (U, d-1)
    schedule: FiringSchedule
    projected: Tensor | None = field(default=None)

    @property
    def U(self) -> int:
        return self.embeddings.shape[0]


def compute_weights(states: AcousticStates) -> Tensor:
    """alpha_t = sigmoid(logit channel), strictly inside (0, 1)."""
    return nx.sigmoid(states.values[:, -1])


def scale_weights(alpha: Tensor, n_star: int) -> tuple[Tensor, Tensor]:
    """Rescale so the weights sum to the target count; returns (alpha', n_hat)."""
    if n_star < 1:
        raise ValueError(f"n_star must be >= 1, got {n_star}")
    alpha = nx.as_tensor(alpha)
    n_hat = alpha.sum()
    if n_hat.item() <= 0.0:
        raise DegenerateAlignmentError("weights sum to zero; no alignment possible")
    return alpha * (float(n_star) / n_hat), n_hat


def inference_rescale(alpha: Tensor) -> Tensor:
    """Scale weights by round(n_hat)/n_hat so exactly round(n_hat) units fire.

    Rounding is half-up.  A sum that rounds to zero yields all-zero weights
    (nothing fires).
    """
    alpha = nx.as_tensor(alpha)
    n_hat = alpha.sum()
    target = math.floor(n_hat.item() + 0.5)
    if target == 0:
        return alpha * 0.0
    return alpha * (float(target) / n_hat)


def _segments_from_ids(seg_ids: np.ndarray, count: int) -> tuple[range, ...]:
    out = []
    for u in range(count):
        where = np.flatnonzero(seg_ids == u)
        out.append(range(int(where[0]), int(where[-1]) + 1) if where.size else range(0))
    return tuple(out)


def fire(alpha_eff: np.ndarray, tail: bool = False) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Run the accumulator walk; returns (seg_ids, fire_frames, count, residue).

    With ``tail`` set, a residue of at least 0.5 fires one last segment over
    the trailing frames (end-of-utterance rule for inference).
    """
    alpha_eff = np.ascontiguousarray(alpha_eff, dtype=np.float64)
    seg_ids, fires, acc = kernels.fire_walk(alpha_eff, 0.0, 0, THRESHOLD, TOLERANCE)
    count = len(fires)
    if tail and alpha_eff.size and acc >= TAIL_FIRE:
        fires = np.append(fires, alpha_eff.size - 1)
        count += 1
        acc = 0.0
    return seg_ids, fires, count, acc


def integrate_and_fire(states: AcousticStates, alpha_eff: Tensor,
                       tail: bool = False) -> tuple[IntegratedSequence, FiringSchedule]:
    alpha_eff = nx.as_tensor(alpha_eff)
    if alpha_eff.shape != (states.T,):
        raise ValueError(f"weights {alpha_eff.shape} do not match T={states.T}")
    seg_ids, fires, count, residue = fire(alpha_eff.data, tail)
    content = states.values[:, : states.d - 1]
    weighted = nx.scale_rows(content, alpha_eff)
    emb = nx.segment_sum(weighted, seg_ids, count)
    raw = nx.sigmoid(states.values.data[:, -1]).data
    schedule = FiringSchedule(
        weights=raw,
        scaled_weights=alpha_eff.data.copy(),
        n_hat=float(alpha_eff.data.sum()),
        segments=_segments_from_ids(seg_ids, count),
        fire_frames=tuple(int(f) for f in fires),
        residue=float(residue),
    )
    return IntegratedSequence(emb, schedule), schedule


def quantity_loss(n_hat, n_star) -> Tensor:
    """|n* - n_hat|; subgradient 0 at equality."""
    return nx.tabs(nx.as_tensor(n_hat) - Tensor(np.asarray(n_star, dtype=np.float64)))


def project(integrated: IntegratedSequence, weight: Tensor) -> Tensor:
    emb = integrated.embeddings
    if weight.shape[0] != emb.shape[1]:
        raise ValueError(f"projection expects {emb.shape[1]} input channels, got {weight.shape[0]}")
    if emb.shape[0] == 0:
        out = Tensor(np.zeros((0, weight.shape[1])))
    else:
        out = emb @ weight
    integrated.projected = out
    return out


# ---------------------------------------------------------------------------
# batched path used by the model
# ---------------------------------------------------------------------------

@dataclass
class BatchCIF:
    embeddings: Tensor      # (B, U_max, d-1), zero rows past each count
    counts: np.ndarray      # (B,) fired units per row
    n_hat: Tensor           # (B,) sum of raw weights over valid frames
    alpha: Tensor           # (B, T) raw weights, zero on padding
    fire_frames: np.ndarray  # (B, cap) state index of each fire, -1 padded


def integrate_batch(values: Tensor, lengths: np.ndarray, n_star: np.ndarray | None = None,
                    tail: bool = True) -> BatchCIF:
    """CIF over a padded batch of states ``(B, T, d)``.

    With ``n_star`` the weights are scaled to sum to it (training); without,
    they are rescaled by the rounded predicted count (offline inference).
    """
    b, t, d = values.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    valid = (np.arange(t)[None, :] < lengths[:, None]).astype(np.float64)
    alpha = nx.sigmoid(values[:, :, d - 1]) * valid
    n_hat = alpha.sum(axis=1)
    nh = n_hat.data
    if np.any(nh <= 0):
        raise DegenerateAlignmentError("a row of weights sums to zero")
    if n_star is not None:
        target = np.asarray(n_star, dtype=np.float64)
        use_tail = False
    else:
        target = np.floor(nh + 0.5)
        use_tail = tail
    alpha_eff = nx.scale_rows(alpha, Tensor(target) / n_hat)
    seg_ids, counts, residues, fires = kernels.fire_walk_batch(
        np.ascontiguousarray(alpha_eff.data), lengths, THRESHOLD, TOLERANCE)
    if use_tail:
        late = residues >= TAIL_FIRE
        if np.any(late):
            # trailing frames already carry id == count; promote them to a unit
            width = max(fires.shape[1], int((counts + late).max()))
            grown = np.full((b, width), -1, dtype=np.int64)
            grown[:, : fires.shape[1]] = fires
            for i in np.flatnonzero(late):
                grown[i, counts[i]] = lengths[i] - 1
            fires = grown
            counts = counts + late
    u_max = max(int(counts.max()), 1)
    seg_ids = np.where(seg_ids < counts[:, None], seg_ids, -1)
    weighted = nx.scale_rows(values[:, :, : d - 1], alpha_eff)
    emb = nx.segment_sum(weighted, seg_ids, u_max)
    return BatchCIF(emb, counts, n_hat, alpha, fires)


def boundary_hits(fire_states, gold_boundaries, stride: int, tolerance: int = 1) -> tuple[int, int]:
    """Count fires landing within ``tolerance`` frames of a gold boundary.

    A fire at state ``t`` is placed at frame ``stride * t``, the newest frame
    that state depends on.  Gold boundaries are exclusive token end frames
    (the last one equals the utterance length).  Returns ``(hits, fires)``.
    """
    gold = np.asarray(gold_boundaries, dtype=np.int64)
    pos = np.asarray(fire_states, dtype=np.int64) * stride
    if pos.size == 0:
        return 0, 0
    if gold.size == 0:
        return 0, int(pos.size)
    dist = np.abs(pos[:, None] - gold[None, :]).min(axis=1)
    return int((dist <= tolerance).sum()), int(pos.size)
