"""Translation quality (corpus BLEU) and computation-unaware latency.

Delays are measured in milliseconds of source audio consumed when each
target token was written.  With ``D`` the source duration, ``r = D /
ref_len`` the oracle emission rate and ``d_i`` the 1-based delays:

* AP  = sum(d_i) / (D * |hyp|)
* AL  = mean over i <= tau of (d_i - (i - 1) r), tau = first i with d_i == D
* DAL = mean over all i of (g_i - (i - 1) r), g_1 = d_1, g_i = max(d_i, g_{i-1} + r)
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import kernels

NGRAM_ORDER = 4


@dataclass(frozen=True)
class DelayVector:
    d: tuple[float, ...]
    D: float
    ref_len: int

    def __post_init__(self):
        object.__setattr__(self, "d", tuple(float(x) for x in self.d))
        if self.D <= 0:
            raise ValueError("source duration must be positive")
        prev = 0.0
        for x in self.d:
            if not 0 < x <= self.D:
                raise ValueError(f"delay {x} outside (0, {self.D}]")
            if x < prev:
                raise ValueError("delays must be non-decreasing")
            prev = x

    @property
    def hyp_len(self) -> int:
        return len(self.d)


@dataclass
class LatencyReport:
    AL: float | None
    AP: float | None
    DAL: float | None
    BLEU: float | None
    n_utterances: int
    n_missing: int = 0

    def as_row(self) -> dict:
        return {"BLEU": self.BLEU, "AL": self.AL, "AP": self.AP, "DAL": self.DAL}


def _latency(v: DelayVector) -> tuple[float, float, float] | None:
    if v.hyp_len == 0 or v.ref_len < 1:
        return None
    return kernels.lagging(list(v.d), float(v.D), float(v.ref_len))


def average_proportion(v: DelayVector) -> float | None:
    out = _latency(v)
    return None if out is None else out[1]


def average_lagging(v: DelayVector) -> float | None:
    out = _latency(v)
    return None if out is None else out[0]


def differentiable_average_lagging(v: DelayVector) -> float | None:
    out = _latency(v)
    return None if out is None else out[2]


def latency_triplet(v: DelayVector) -> tuple[float, float, float] | None:
    """``(AL, AP, DAL)`` in one pass, or None for an empty hypothesis."""
    return _latency(v)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else [str(t) for t in x]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BLEU:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    sys_len: int
    ref_len: int


def bleu_details(hypotheses: Sequence, references: Sequence) -> BLEU:
    """Corpus BLEU-4 with exponential smoothing, whitespace tokens, case-sensitive."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    correct = [0] * NGRAM_ORDER
    total = [0] * NGRAM_ORDER
    sys_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _tokens(hyp), _tokens(ref)
        sys_len += len(h)
        ref_len += len(r)
        for n in range(1, NGRAM_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    precisions = [0.0] * NGRAM_ORDER
    if not any(correct):
        # no overlap at all: report 0 rather than a smoothed floor
        return BLEU(0.0, tuple(precisions), 1.0, sys_len, ref_len)
    smooth = 1.0
    for n in range(NGRAM_ORDER):
        if total[n] == 0:
            break
        if correct[n] == 0:
            smooth *= 2
            precisions[n] = 100.0 / (smooth * total[n])
        else:
            precisions[n] = 100.0 * correct[n] / total[n]
    if sys_len < ref_len:
        bp = math.exp(1 - ref_len / sys_len) if sys_len > 0 else 0.0
    else:
        bp = 1.0
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / NGRAM_ORDER)
    return BLEU(score, tuple(precisions), bp, sys_len, ref_len)


def corpus_bleu(hypotheses: Sequence, references: Sequence) -> float:
    return bleu_details(hypotheses, references).score


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_accuracy(hypotheses: Iterable[Sequence], references: Iterable[Sequence]) -> float:
    """Position-wise matches over the longer of each hypothesis/reference pair."""
    ok = tot = 0
    for h, r in zip(hypotheses, references):
        tot += max(len(h), len(r))
        ok += sum(a == b for a, b in zip(h, r))
    return ok / tot if tot else 1.0


def mean_or_none(values: Iterable[float | None]) -> tuple[float | None, int]:
    vals = [v for v in values]
    kept = [v for v in vals if v is not None]
    return (sum(kept) / len(kept) if kept else None), len(vals) - len(kept)


# ---------------------------------------------------------------------------
# score table
# ---------------------------------------------------------------------------

TABLE_COLUMNS = ("policy", "k", "stride_ms", "BLEU", "AL", "AP", "DAL")


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(rows: Iterable[dict], header_comment: str | None = None) -> str:
    lines = []
    if header_comment:
        lines.append("# " + header_comment)
    lines.append("\t".join(TABLE_COLUMNS))
    for row in rows:
        lines.append("\t".join(_fmt(row.get(c)) for c in TABLE_COLUMNS))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> list[dict]:
    rows = []
    header = None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if header is None:
            header = cols
            continue
        row = {}
        for name, val in zip(header, cols):
            if name in ("policy", "k"):
                row[name] = val
            else:
                row[name] = None if val == "NA" else float(val)
        rows.append(row)
    return rows
