"""End-to-end speech translation network.

Layout: causal strided convolution stack (acoustic encoder) -> CIF ->
linear projection -> N-layer transformer encoder (semantic encoder) ->
M-layer transformer decoder shared by transcription and translation, the
task chosen by the first (indicator) token of the decoder input.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import cif
from . import numerics as nx
from .numerics import Tensor

PAD, EOS, SRC, TGT = 0, 1, 2, 3
N_SPECIAL = 4
CHECKPOINT_VERSION = 1


class EmptySourceError(ValueError):
    """The utterance produced no integrated units, so there is nothing to encode."""


@dataclass
class ModelConfig:
    d_feat: int = 16
    d: int = 65
    d_model: int = 64
    n_heads: int = 4
    N: int = 2
    M: int = 2
    d_ff: int = 256
    vocab_size: int = 50
    max_len: int = 64
    conv_channels: int = 64
    kernel_size: int = 3
    strides: tuple[int, ...] = (2, 1)
    seed: int = 0

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size <= N_SPECIAL:
            raise ValueError(f"vocab_size must exceed the {N_SPECIAL} reserved ids")

    @classmethod
    def reference(cls, **overrides) -> ModelConfig:
        """Full-size transformer widths (768 wide, 4 heads, 8 enc / 6 dec layers)."""
        base = dict(d=769, d_model=768, n_heads=4, N=8, M=6, d_ff=3072, conv_channels=512)
        base.update(overrides)
        return cls(**base)

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["strides"] = list(self.strides)
        return out


@dataclass
class Batch:
    frames: np.ndarray          # (B, T, d_feat), zero padded
    frame_lengths: np.ndarray   # (B,)
    transcripts: np.ndarray     # (B, Lz): [SRC] z_1..z_n EOS PAD...
    translations: np.ndarray    # (B, Ly): [TGT] y_1..y_m EOS PAD...
    ids: list = field(default_factory=list)

    @property
    def n_star(self) -> np.ndarray:
        """Transcript unit counts (indicator and EOS excluded)."""
        return (self.transcripts != PAD).sum(axis=1) - 2

    @classmethod
    def from_utterances(cls, utts: Sequence) -> Batch:
        t_max = max(u.frames.shape[0] for u in utts)
        f = utts[0].frames.shape[1]
        frames = np.zeros((len(utts), t_max, f))
        for i, u in enumerate(utts):
            frames[i, : u.frames.shape[0]] = u.frames
        return cls(
            frames=frames,
            frame_lengths=np.array([u.frames.shape[0] for u in utts]),
            transcripts=pad_sequences([[SRC, *u.transcript, EOS] for u in utts]),
            translations=pad_sequences([[TGT, *u.translation, EOS] for u in utts]),
            ids=[u.id for u in utts],
        )


@dataclass
class LossBreakdown:
    l_qua: Tensor
    l_asr: Tensor
    l_st: Tensor
    total: Tensor
    weights: tuple[float, float, float] = (0.05, 1.0, 1.0)

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l_qua", "l_asr", "l_st", "total")}


def pad_sequences(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : dim - dim // 2]
    return pe


class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.meta: dict = {}
        self._rng = np.random.default_rng(config.seed)
        self._build()
        self._pe = sinusoidal_positions(max(config.max_len, 512), config.d_model)

    # -- parameters ------------------------------------------------------
    def _linear(self, name: str, n_in: int, n_out: int, bias: bool = True) -> None:
        limit = math.sqrt(6.0 / (n_in + n_out))
        self.params[f"{name}.w"] = Tensor(self._rng.uniform(-limit, limit, (n_in, n_out)), True)
        if bias:
            self.params[f"{name}.b"] = Tensor(np.zeros(n_out), True)

    def _norm(self, name: str, dim: int) -> None:
        self.params[f"{name}.g"] = Tensor(np.ones(dim), True)
        self.params[f"{name}.b"] = Tensor(np.zeros(dim), True)

    def _build(self) -> None:
        c = self.config
        ch_in = c.d_feat
        for i, _ in enumerate(c.strides):
            self._linear(f"conv{i}", c.kernel_size * ch_in, c.conv_channels)
            ch_in = c.conv_channels
        self._linear("acoustic_out", ch_in, c.d)
        self._linear("cif_proj", c.d - 1, c.d_model, bias=False)
        for i in range(c.N):
            self._attention(f"enc{i}.self", c.d_model)
            self._ffn(f"enc{i}.ffn")
            self._norm(f"enc{i}.ln1", c.d_model)
            self._norm(f"enc{i}.ln2", c.d_model)
        self._norm("enc_ln", c.d_model)
        self.params["embed"] = Tensor(
            self._rng.normal(0.0, c.d_model ** -0.5, (c.vocab_size, c.d_model)), True)
        for i in range(c.M):
            self._attention(f"dec{i}.self", c.d_model)
            self._attention(f"dec{i}.cross", c.d_model)
            self._ffn(f"dec{i}.ffn")
            for j in (1, 2, 3):
                self._norm(f"dec{i}.ln{j}", c.d_model)
        self._norm("dec_ln", c.d_model)
        self._linear("out", c.d_model, c.vocab_size)

    def _attention(self, name: str, dim: int) -> None:
        for part in ("q", "k", "v", "o"):
            self._linear(f"{name}.{part}", dim, dim)

    def _ffn(self, name: str) -> None:
        self._linear(f"{name}.1", self.config.d_model, self.config.d_ff)
        self._linear(f"{name}.2", self.config.d_ff, self.config.d_model)

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- building blocks -------------------------------------------------
    def _apply_linear(self, name: str, x: Tensor) -> Tensor:
        y = x @ self.params[f"{name}.w"]
        b = self.params.get(f"{name}.b")
        return y if b is None else y + b

    def _apply_norm(self, name: str, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _mha(self, name: str, q_in: Tensor, kv_in: Tensor, key_mask: np.ndarray,
             causal: bool = False) -> Tensor:
        b, lq, dm = q_in.shape
        lk = kv_in.shape[1]
        h = self.config.n_heads
        dh = dm // h
        q = self._apply_linear(f"{name}.q", q_in).reshape(b, lq, h, dh).transpose(0, 2, 1, 3)
        k = self._apply_linear(f"{name}.k", kv_in).reshape(b, lk, h, dh).transpose(0, 2, 3, 1)
        v = self._apply_linear(f"{name}.v", kv_in).reshape(b, lk, h, dh).transpose(0, 2, 1, 3)
        mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            mask = mask & np.tril(np.ones((lq, lk), dtype=bool))[None, None]
        attn = nx.softmax((q @ k) * (1.0 / math.sqrt(dh)), mask=mask)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, lq, dm)
        return self._apply_linear(f"{name}.o", out)

    def _apply_ffn(self, name: str, x: Tensor) -> Tensor:
        return self._apply_linear(f"{name}.2", nx.relu(self._apply_linear(f"{name}.1", x)))

    # -- acoustic encoder --------------------------------------------------
    def state_lengths(self, frame_lengths) -> np.ndarray:
        s = self.config.total_stride
        return -(-np.asarray(frame_lengths) // s)

    def _conv(self, layer: int, x, start: int, stop: int):
        """Causal conv rows ``[start, stop)``; row t sees inputs ``t*s-k+1 .. t*s``."""
        k = self.config.kernel_size
        s = self.config.strides[layer]
        idx = np.arange(start, stop)[:, None] * s + np.arange(k)[None, :]
        if isinstance(x, Tensor):
            zeros = Tensor(np.zeros((x.shape[0], k - 1, x.shape[2])))
            windows = nx.take(nx.concat([zeros, x], axis=1), idx, axis=1)
        else:
            padded = np.concatenate([np.zeros((x.shape[0], k - 1, x.shape[2])), x], axis=1)
            windows = Tensor(padded[:, idx, :])
        b, n, kk, ch = windows.shape
        return nx.relu(self._apply_linear(f"conv{layer}", windows.reshape(b, n, kk * ch)))

    def acoustic_encode(self, frames: np.ndarray) -> Tensor:
        """``(B, T, d_feat)`` frames -> ``(B, ceil(T / stride), d)`` states."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.shape[1] == 0:
            raise ValueError("no frames to encode")
        x = frames
        for layer, s in enumerate(self.config.strides):
            n_in = x.shape[1]
            x = self._conv(layer, x, 0, -(-n_in // s))
        return self._apply_linear("acoustic_out", x)

    # -- semantic encoder / decoder ----------------------------------------
    def semantic_encode(self, integrated: Tensor, counts: np.ndarray) -> Tensor:
        """Projected integrated units ``(B, U, d_model)`` -> h_SE."""
        counts = np.asarray(counts)
        if integrated.shape[1] == 0 or np.any(counts < 1):
            raise EmptySourceError("utterance produced no integrated units")
        b, u, dm = integrated.shape
        key_mask = np.arange(u)[None, :] < counts[:, None]
        x = integrated + Tensor(self._pe[:u])
        for i in range(self.config.N):
            y = self._apply_norm(f"enc{i}.ln1", x)
            x = x + self._mha(f"enc{i}.self", y, y, key_mask)
            x = x + self._apply_ffn(f"enc{i}.ffn", self._apply_norm(f"enc{i}.ln2", x))
        return self._apply_norm("enc_ln", x)

    def decode_logits(self, h_se: Tensor, src_mask: np.ndarray, dec_in: np.ndarray) -> Tensor:
        dec_in = np.asarray(dec_in)
        if dec_in.size and (dec_in.min() < 0 or dec_in.max() >= self.config.vocab_size):
            raise ValueError("unknown token id in decoder input")
        b, length = dec_in.shape
        self_mask = dec_in != PAD
        self_mask[:, 0] = True
        x = nx.embedding(self.params["embed"], dec_in) * math.sqrt(self.config.d_model)
        x = x + Tensor(self._pe[:length])
        for i in range(self.config.M):
            y = self._apply_norm(f"dec{i}.ln1", x)
            x = x + self._mha(f"dec{i}.self", y, y, self_mask, causal=True)
            y = self._apply_norm(f"dec{i}.ln2", x)
            x = x + self._mha(f"dec{i}.cross", y, h_se, src_mask)
            x = x + self._apply_ffn(f"dec{i}.ffn", self._apply_norm(f"dec{i}.ln3", x))
        return self._apply_linear("out", self._apply_norm("dec_ln", x))

    def decode_train(self, h_se: Tensor, src_mask: np.ndarray, targets: np.ndarray) -> Tensor:
        """Teacher-forced token-mean cross entropy of ``targets`` (indicator first)."""
        targets = np.asarray(targets)
        if not np.all(np.isin(targets[:, 0], (SRC, TGT))):
            raise ValueError("targets must start with a task indicator")
        if targets.max() >= self.config.vocab_size or targets.min() < 0:
            raise ValueError("unknown token id in targets")
        logits = self.decode_logits(h_se, src_mask, targets[:, :-1])
        gold = targets[:, 1:]
        return nx.cross_entropy(logits, gold, mask=gold != PAD)

    # -- full passes -------------------------------------------------------
    def encode(self, frames: np.ndarray, frame_lengths, n_star=None):
        """Frames -> (h_SE, src_mask, BatchCIF).  ``n_star`` selects training CIF."""
        states = self.acoustic_encode(frames)
        lengths = self.state_lengths(frame_lengths)
        fired = cif.integrate_batch(states, lengths, n_star)
        projected = fired.embeddings @ self.params["cif_proj.w"]
        h_se = self.semantic_encode(projected, fired.counts)
        src_mask = np.arange(h_se.shape[1])[None, :] < fired.counts[:, None]
        return h_se, src_mask, fired

    def joint_loss(self, batch: Batch, weights=(0.05, 1.0, 1.0)) -> LossBreakdown:
        n_star = batch.n_star
        h_se, src_mask, fired = self.encode(batch.frames, batch.frame_lengths, n_star)
        l_qua = cif.quantity_loss(fired.n_hat, n_star).mean()
        l_asr = self.decode_train(h_se, src_mask, batch.transcripts)
        l_st = self.decode_train(h_se, src_mask, batch.translations)
        a, b, g = weights
        total = l_qua * a + l_asr * b + l_st * g
        return LossBreakdown(l_qua, l_asr, l_st, total, tuple(weights))

    def integrated_from_states(self, states: Tensor, alpha_eff: np.ndarray,
                               seg_ids: np.ndarray, count: int) -> Tensor:
        """Project CIF units of one utterance given an explicit firing (streaming)."""
        d = self.config.d
        content = states[0, :, : d - 1]
        emb = nx.segment_sum(nx.scale_rows(content, Tensor(alpha_eff)), seg_ids, count)
        return (emb @ self.params["cif_proj.w"]).reshape(1, count, self.config.d_model)

    # -- decoding ------------------------------------------------------------
    def step_fn(self, h_se: Tensor, src_mask: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        """Next-token log-probabilities for a stack of prefixes of one source."""

        def step(prefixes: np.ndarray) -> np.ndarray:
            n = prefixes.shape[0]
            h = h_se if n == 1 else Tensor(np.repeat(h_se.data, n, axis=0))
            m = src_mask if n == 1 else np.repeat(src_mask, n, axis=0)
            with nx.no_grad():
                logits = self.decode_logits(h, m, prefixes).data[:, -1]
            z = logits - logits.max(axis=-1, keepdims=True)
            return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

        return step

    def encode_offline(self, frames: np.ndarray):
        """Single utterance, inference CIF (rounded count)."""
        frames = np.asarray(frames, dtype=np.float64)
        with nx.no_grad():
            return self.encode(frames[None], [frames.shape[0]])

    def greedy_decode(self, h_se: Tensor, src_mask: np.ndarray, indicator: int = TGT,
                      max_len: int | None = None) -> list[int]:
        return greedy_search(self.step_fn(h_se, src_mask), indicator,
                             max_len or self.config.max_len)

    def beam_decode(self, h_se: Tensor, src_mask: np.ndarray, indicator: int = TGT,
                    beam_size: int = 5, max_len: int | None = None) -> list[int]:
        return beam_search(self.step_fn(h_se, src_mask), indicator, beam_size,
                           max_len or self.config.max_len)

    def translate(self, frames: np.ndarray, indicator: int = TGT, beam_size: int = 1) -> list[int]:
        """Offline translation (or transcription with ``indicator=SRC``)."""
        try:
            h_se, mask, _ = self.encode_offline(frames)
        except EmptySourceError:
            return []
        if beam_size == 1:
            return self.greedy_decode(h_se, mask, indicator)
        return self.beam_decode(h_se, mask, indicator, beam_size)

    def greedy_decode_batch(self, frames_list: Sequence[np.ndarray], indicator: int = TGT,
                            max_len: int | None = None) -> list[list[int]]:
        """Batched greedy decoding for evaluation throughput."""
        max_len = max_len or self.config.max_len
        lengths = np.array([f.shape[0] for f in frames_list])
        frames = np.zeros((len(frames_list), lengths.max(), frames_list[0].shape[1]))
        for i, f in enumerate(frames_list):
            frames[i, : f.shape[0]] = f
        with nx.no_grad():
            states = self.acoustic_encode(frames)
            fired = cif.integrate_batch(states, self.state_lengths(lengths))
        out: list[list[int]] = [[] for _ in frames_list]
        live = np.flatnonzero(fired.counts > 0)
        if live.size == 0:
            return out
        with nx.no_grad():
            emb = Tensor(fired.embeddings.data[live]) @ self.params["cif_proj.w"]
            counts = fired.counts[live]
            h_se = self.semantic_encode(emb, counts)
            src_mask = np.arange(h_se.shape[1])[None, :] < counts[:, None]
            prefixes = np.full((live.size, 1), indicator, dtype=np.int64)
            done = np.zeros(live.size, dtype=bool)
            for _ in range(max_len):
                logits = self.decode_logits(h_se, src_mask, prefixes).data[:, -1]
                nxt = np.where(done, PAD, logits.argmax(axis=-1))
                prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        for row, i in enumerate(live):
            toks = []
            for t in prefixes[row, 1:]:
                if t in (EOS, PAD):
                    break
                toks.append(int(t))
            out[i] = toks
        return out

    # -- checkpoints ---------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        meta = {"format": "streamst-checkpoint", "version": CHECKPOINT_VERSION,
                "config": self.config.to_dict(), "extra": extra or {}}
        arrays = {name: p.data for name, p in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8),
                     **arrays)

    @classmethod
    def load(cls, path) -> Model:
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("format") != "streamst-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
            model = cls(ModelConfig(**meta["config"]))
            for name, p in model.params.items():
                if name not in z:
                    raise ValueError(f"{path}: missing parameter {name}")
                p.data = np.array(z[name], dtype=np.float64)
        model.meta = meta
        return model


def greedy_search(step: Callable[[np.ndarray], np.ndarray], bos: int, max_len: int,
                  eos: int = EOS) -> list[int]:
    prefix = [bos]
    for _ in range(max_len):
        tok = int(np.argmax(step(np.array([prefix]))[0]))
        if tok == eos:
            break
        prefix.append(tok)
    return prefix[1:]


def beam_search(step: Callable[[np.ndarray], np.ndarray], bos: int, beam_size: int,
                max_len: int, eos: int = EOS) -> list[int]:
    """Length-normalised beam search; with ``beam_size=1`` it is greedy search.

    Each step keeps the ``beam_size`` best expansions overall.  Expansions
    ending in EOS retire into the finished pool; search stops once the pool
    holds ``beam_size`` hypotheses or the length cap is hit.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    live: list[tuple[list[int], float]] = [([bos], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        logp = step(np.array([p for p, _ in live]))
        scores = np.array([s for _, s in live])[:, None] + logp
        flat = scores.ravel()
        order = np.argsort(-flat, kind="stable")[:beam_size]
        vocab = logp.shape[1]
        nxt = []
        for j in order:
            h, tok = divmod(int(j), vocab)
            seq = live[h][0] + [tok]
            if tok == eos:
                finished.append((seq, float(flat[j])))
            else:
                nxt.append((seq, float(flat[j])))
        live = nxt
        if len(finished) >= beam_size or not live:
            break
    pool = finished or live
    best = max(pool, key=lambda item: item[1] / (len(item[0]) - 1))
    seq = best[0][1:]
    return seq[:-1] if seq and seq[-1] == eos else seq


def gradient_check(model: Model, batch: Batch, weights=(0.05, 1.0, 1.0), h: float = 1e-6,
                   seed: int = 0) -> dict[str, float]:
    """Directional finite-difference check of the joint loss, per parameter.

    For each parameter a random direction ``v`` is drawn and ``grad . v`` is
    compared with the central difference of the loss along ``v``.  Returns
    the relative error per parameter name.
    """
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.grad = None
    model.joint_loss(batch, weights).total.backward()
    errors = {}
    for name, p in model.params.items():
        v = rng.normal(size=p.shape)
        analytic = float((p.grad * v).sum()) if p.grad is not None else 0.0
        orig = p.data.copy()
        with nx.no_grad():
            p.data = orig + h * v
            fp = model.joint_loss(batch, weights).total.item()
            p.data = orig - h * v
            fm = model.joint_loss(batch, weights).total.item()
        p.data = orig
        numeric = (fp - fm) / (2 * h)
        errors[name] = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
    return errors
