"""Adam with an inverse-square-root schedule, and the joint-loss training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import Utterance
from .model import Batch, Model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    peak_lr: float = 2e-3
    warmup: int = 300          # 4k updates in the full-scale recipe, scaled down
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 1.0     # 0 disables
    loss_weights: tuple[float, float, float] = (0.05, 1.0, 1.0)
    seed: int = 0
    log_every: int = 50
    speed_perturb: tuple[float, float] | None = None   # time-resampling factor range

    def __post_init__(self):
        if self.speed_perturb is not None:
            lo, hi = self.speed_perturb
            if not 0.5 <= lo <= hi:
                raise ValueError("speed_perturb needs 0.5 <= lo <= hi (slower rates could drop tokens)")
            self.speed_perturb = (float(lo), float(hi))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        if self.speed_perturb is not None:
            d["speed_perturb"] = list(self.speed_perturb)
        return d


def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, params: Sequence[nx.Tensor], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float, clip_norm: float = 0.0) -> float:
        """Apply one update; returns the pre-clipping global grad norm."""
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        scale = clip_norm / norm if clip_norm and norm > clip_norm else 1.0
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def speed_perturb(utt: Utterance, factor: float) -> Utterance:
    """Nearest-neighbour time resampling: ``factor`` > 1 plays the audio faster.

    Output frame i copies input frame floor(i * factor).  For factors up to 2
    no run of two or more identical frames can vanish, so the transcript
    stays valid; gold boundaries are remapped accordingly.
    """
    t = utt.frames.shape[0]
    n = max(1, math.ceil(t / factor - 1e-9))
    idx = np.minimum((np.arange(n) * factor).astype(np.int64), t - 1)
    bounds = None
    if utt.gold_boundaries is not None:
        bounds = [int(np.searchsorted(idx, b, side="left")) for b in utt.gold_boundaries]
        bounds[-1] = n
    return replace(utt, frames=utt.frames[idx], gold_boundaries=bounds)


def iterate_batches(utts: Sequence, batch_size: int, rng: np.random.Generator,
                    perturb: tuple[float, float] | None = None):
    """Endless shuffled batches; each epoch is a fresh permutation."""
    n = len(utts)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            chosen = [utts[j] for j in order[i:i + batch_size]]
            if perturb is not None:
                chosen = [speed_perturb(u, rng.uniform(*perturb)) for u in chosen]
            yield Batch.from_utterances(chosen)


def train(model: Model, utts: Sequence, cfg: TrainConfig,
          on_step: Callable[[int, dict], bool | None] | None = None) -> list[dict]:
    """Optimise the joint loss; returns one record per step.

    ``on_step(step, record)`` may return True to stop early.  A non-finite
    loss raises :class:`TrainingDiverged` carrying a diagnostic snapshot.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(list(model.parameters()), cfg.beta1, cfg.beta2, cfg.eps)
    batches = iterate_batches(utts, cfg.batch_size, rng, cfg.speed_perturb)
    curve = []
    for step in range(1, cfg.steps + 1):
        batch = next(batches)
        opt.zero_grad()
        losses = model.joint_loss(batch, cfg.loss_weights)
        vals = losses.values()
        if not all(math.isfinite(v) for v in vals.values()):
            raise TrainingDiverged(
                f"non-finite loss at step {step}",
                {"step": step, "losses": vals, "batch_ids": list(batch.ids)})
        losses.total.backward()
        lr = inverse_sqrt_lr(step, cfg.peak_lr, cfg.warmup)
        gnorm = opt.step(lr, cfg.clip_norm)
        record = {"step": step, **vals, "lr": lr, "grad_norm": gnorm}
        curve.append(record)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d total %.4f qua %.4f asr %.4f st %.4f", step,
                     vals["total"], vals["l_qua"], vals["l_asr"], vals["l_st"])
        if on_step is not None and on_step(step, record):
            break
    return curve
