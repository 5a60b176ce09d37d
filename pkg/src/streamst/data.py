"""Synthetic speech-translation triples, preprocessing rules and manifest I/O.

Frames file layout (little-endian)::

    uint32 T | uint32 d_feat | T * d_feat float32, row-major

A manifest line is tab separated: ``id, frames, transcript, translation``
with an optional fifth ``boundaries`` column.  ``frames`` is either a path
(relative to the manifest) or ``hex:`` followed by the frames file bytes in
base 16.  Token columns are space-separated integer ids without indicator
or EOS.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .model import N_SPECIAL

MAX_TOKENS = 250
MIN_RATIO, MAX_RATIO = 2.0 / 3.0, 3.0 / 2.0


class ManifestError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass
class Utterance:
    id: str
    frames: np.ndarray           # (T, d_feat)
    transcript: list[int]
    translation: list[int]
    gold_boundaries: list[int] | None = None
    frame_ms: float = 40.0

    @property
    def duration_ms(self) -> float:
        return self.frames.shape[0] * self.frame_ms


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 50
    n_samples: int = 2500
    frames_per_token: tuple[int, int] = (2, 8)
    src_len: tuple[int, int] = (4, 12)
    d_feat: int = 16
    noise_std: float = 0.1
    reorder: bool = False
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    frame_ms: float = 40.0
    seed: int = 7

    def __post_init__(self):
        lo, hi = self.frames_per_token
        if lo < 1 or hi < lo:
            raise ValueError(f"frames_per_token must satisfy 1 <= lo <= hi, got {self.frames_per_token}")
        if self.src_len[0] < 1 or self.src_len[1] < self.src_len[0]:
            raise ValueError(f"bad src_len range {self.src_len}")
        if self.vocab_size - N_SPECIAL < 2:
            raise ValueError("need at least two content tokens")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


@dataclass
class Corpus:
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    spec: SyntheticSpec | None = None
    mapping: dict[int, int] = field(default_factory=dict)

    def splits(self) -> dict[str, list[Utterance]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


def token_mapping(spec: SyntheticSpec) -> dict[int, int]:
    """Deterministic bijection over content ids (source -> target)."""
    content = np.arange(N_SPECIAL, spec.vocab_size)
    perm = np.random.default_rng([spec.seed, 1]).permutation(content)
    return {int(s): int(t) for s, t in zip(content, perm)}


def token_embeddings(spec: SyntheticSpec) -> np.ndarray:
    """Fixed random unit vectors per vocab id used to render frames."""
    rng = np.random.default_rng([spec.seed, 2])
    emb = rng.normal(size=(spec.vocab_size, spec.d_feat))
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def _split_of(seed: int, tokens: list[int], split: tuple[float, ...]) -> int:
    key = f"{seed}|{' '.join(map(str, tokens))}".encode()
    x = int.from_bytes(hashlib.sha256(key).digest()[:8], "little") / 2.0 ** 64
    edges = np.cumsum(split)
    return int(min(np.searchsorted(edges, x, side="right"), len(split) - 1))


def _translate(tokens: list[int], mapping: dict[int, int], reorder: bool) -> list[int]:
    out = [mapping[t] for t in tokens]
    if reorder:
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
    return out


def generate_corpus(spec: SyntheticSpec) -> Corpus:
    """Render random token sequences as noisy frame runs.

    Consecutive source tokens always differ, otherwise a token boundary
    inside a run of identical frames would be unobservable.  Split
    membership is a hash of the source sequence, so identical sources never
    straddle two splits.
    """
    rng = np.random.default_rng([spec.seed, 0])
    mapping = token_mapping(spec)
    emb = token_embeddings(spec)
    quotas = [int(round(spec.n_samples * f)) for f in spec.split]
    quotas[0] = spec.n_samples - sum(quotas[1:])
    buckets: list[list[Utterance]] = [[], [], []]
    names = ("train", "dev", "test")
    n_content = spec.vocab_size - N_SPECIAL
    lo, hi = spec.frames_per_token
    attempts = 0
    while any(len(b) < q for b, q in zip(buckets, quotas)):
        attempts += 1
        if attempts > 100 * spec.n_samples + 1000:
            raise RuntimeError("could not fill the split quotas; widen src_len or vocab")
        length = int(rng.integers(spec.src_len[0], spec.src_len[1] + 1))
        tokens = [int(rng.integers(n_content)) + N_SPECIAL]
        while len(tokens) < length:
            # shift past the previous id to forbid immediate repeats
            nxt = int(rng.integers(n_content - 1)) + N_SPECIAL
            tokens.append(nxt + 1 if nxt >= tokens[-1] else nxt)
        runs = rng.integers(lo, hi + 1, size=length)
        frames = np.repeat(emb[tokens], runs, axis=0)
        frames = frames + rng.normal(0.0, spec.noise_std, frames.shape) if spec.noise_std else frames
        frames = frames.astype(np.float32).astype(np.float64)
        which = _split_of(spec.seed, tokens, spec.split)
        if len(buckets[which]) >= quotas[which]:
            continue
        buckets[which].append(Utterance(
            id=f"{names[which]}-{len(buckets[which]):05d}",
            frames=frames,
            transcript=tokens,
            translation=_translate(tokens, mapping, spec.reorder),
            gold_boundaries=[int(b) for b in np.cumsum(runs)],
            frame_ms=spec.frame_ms,
        ))
    return Corpus(*buckets, spec=spec, mapping=mapping)


def normalize_waveform(raw) -> np.ndarray:
    """16-bit PCM samples -> floats in [-1, 1)."""
    raw = np.asarray(raw)
    if raw.size and (raw.min() < -32768 or raw.max() > 32767):
        raise ValueError("samples outside the signed 16-bit range")
    return raw.astype(np.float64) / 32768.0


def filter_pair(src_tokens, tgt_tokens) -> bool:
    """Keep a pair unless a side exceeds 250 tokens or the length ratio leaves [2/3, 3/2]."""
    ns, nt = len(src_tokens), len(tgt_tokens)
    if ns > MAX_TOKENS or nt > MAX_TOKENS or ns == 0 or nt == 0:
        return False
    return MIN_RATIO <= ns / nt <= MAX_RATIO


def filter_corpus(utts: Iterable[Utterance]) -> list[Utterance]:
    return [u for u in utts if filter_pair(u.transcript, u.translation)]


# ---------------------------------------------------------------------------
# frames files and manifests
# ---------------------------------------------------------------------------

def encode_frames(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    t, d = frames.shape
    return struct.pack("<II", t, d) + frames.astype("<f4").tobytes()


def decode_frames(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise ValueError("frames blob shorter than its header")
    t, d = struct.unpack_from("<II", blob)
    body = blob[8:]
    if len(body) != 4 * t * d:
        raise ValueError(f"frames blob holds {len(body)} bytes, header says {t}x{d}")
    return np.frombuffer(body, dtype="<f4").reshape(t, d).astype(np.float64)


def write_frames(path, frames: np.ndarray) -> None:
    Path(path).write_bytes(encode_frames(frames))


def read_frames(path) -> np.ndarray:
    return decode_frames(Path(path).read_bytes())


def _fmt_tokens(tokens: Iterable[int]) -> str:
    return " ".join(str(int(t)) for t in tokens)


def write_manifest(path, utts: Iterable[Utterance], frames_dir=None, inline: bool = False,
                   header: dict | None = None) -> None:
    """Write utterances; frames go inline as hex or as files under ``frames_dir``."""
    path = Path(path)
    base = path.parent
    if not inline:
        frames_dir = Path(frames_dir) if frames_dir else base / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for u in utts:
            if inline:
                frames_field = "hex:" + encode_frames(u.frames).hex()
            else:
                fpath = frames_dir / f"{u.id}.f32"
                write_frames(fpath, u.frames)
                frames_field = os.path.relpath(fpath, base)
            cols = [u.id, frames_field, _fmt_tokens(u.transcript), _fmt_tokens(u.translation)]
            if u.gold_boundaries is not None:
                cols.append(_fmt_tokens(u.gold_boundaries))
            fh.write("\t".join(cols) + "\n")


def _parse_ids(text: str, path, lineno: int, what: str) -> list[int]:
    try:
        return [int(t) for t in text.split()]
    except ValueError:
        raise ManifestError(path, lineno, f"non-integer token in {what}") from None


def load_manifest(path, frame_ms: float = 40.0) -> Iterator[Utterance]:
    """Stream utterances from a manifest; errors carry the offending line number."""
    path = Path(path)
    base = path.parent
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (4, 5):
                raise ManifestError(path, lineno, f"expected 4 or 5 tab-separated fields, got {len(cols)}")
            uid, frames_field, src, tgt = cols[:4]
            if frames_field.startswith("hex:"):
                try:
                    frames = decode_frames(bytes.fromhex(frames_field[4:]))
                except ValueError as err:
                    raise ManifestError(path, lineno, f"bad inline frames: {err}") from None
            else:
                fpath = base / frames_field
                if not fpath.is_file():
                    raise ManifestError(path, lineno, f"frames file not found: {fpath}")
                try:
                    frames = read_frames(fpath)
                except ValueError as err:
                    raise ManifestError(path, lineno, f"{fpath}: {err}") from None
            bounds = _parse_ids(cols[4], path, lineno, "boundaries") if len(cols) == 5 else None
            yield Utterance(uid, frames, _parse_ids(src, path, lineno, "transcript"),
                            _parse_ids(tgt, path, lineno, "translation"), bounds, frame_ms)


def read_manifest_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("# "):
        try:
            return json.loads(first[2:])
        except json.JSONDecodeError:
            return {}
    return {}
