"""Simultaneous decoding: READ/WRITE policies over a growing audio prefix.

Three policies share one translator interface:

* ``prefix``   -- wait-k over fixed time strides: read k strides, then
  alternate one WRITE / one READ.
* ``adaptive`` -- incremental encoding-decoding: WRITE while the number of
  fired CIF units leads the emitted tokens by at least K, else READ.
* ``offline``  -- read everything, then write.

While audio remains, the CIF accumulator fires on the raw weights (the
utterance-level count is unknown online).  Once the source is exhausted the
translator switches to the offline rounded-count firing, which is what makes
a never-writing-early policy reproduce offline greedy decoding exactly.
A predicted EOS before the source is exhausted is not emitted; the policy
reads instead.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from . import cif, kernels
from . import numerics as nx
from .metrics import DelayVector
from .model import EOS, TGT, EmptySourceError, Model
from .numerics import Tensor

READ, WRITE = "READ", "WRITE"
EOS_TEXT = "</s>"
KINDS = ("prefix", "adaptive", "offline")


class PolicyError(ValueError):
    pass


@dataclass
class PolicyConfig:
    kind: str = "adaptive"
    k: int | None = 2           # None means unbounded lagging
    stride_ms: float = 280.0
    max_len: int = 64

    def validate(self, frame_ms: float) -> None:
        if self.kind not in KINDS:
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if self.kind != "offline" and self.k is not None and self.k < 1:
            raise PolicyError("k must be >= 1 for streaming policies")
        if self.stride_ms <= 0:
            raise PolicyError("stride_ms must be positive")
        ratio = self.stride_ms / frame_ms
        if abs(ratio - round(ratio)) > 1e-9:
            raise PolicyError(f"stride {self.stride_ms} ms is not a multiple of the {frame_ms} ms frame")

    def stride_frames(self, frame_ms: float) -> int:
        return int(round(self.stride_ms / frame_ms))

    @property
    def lagging(self) -> float:
        return math.inf if self.k is None else float(self.k)


@dataclass(frozen=True)
class Event:
    action: str
    consumed_ms: float
    token: int | None = None


@dataclass
class DecisionLog:
    utt_id: str
    total_source_ms: float
    reference: str = ""
    events: list[Event] = field(default_factory=list)
    finished: bool = False
    truncated: bool = False

    def writes(self) -> list[Event]:
        return [e for e in self.events if e.action == WRITE and e.token != EOS]

    def tokens(self) -> list[int]:
        return [e.token for e in self.writes()]

    def delays(self) -> list[float]:
        return [e.consumed_ms for e in self.writes()]

    def delay_vector(self, ref_len: int | None = None) -> DelayVector:
        if ref_len is None:
            ref_len = len(self.reference.split())
        return DelayVector(tuple(self.delays()), self.total_source_ms, ref_len)


# ---------------------------------------------------------------------------
# streaming state over the model
# ---------------------------------------------------------------------------

@dataclass
class StreamingState:
    source: np.ndarray                     # full utterance; only a prefix is visible
    frame_ms: float
    consumed_frames: int = 0
    emitted: list[int] = field(default_factory=list)
    layers: list = field(default_factory=list)   # per-conv-layer outputs so far
    states: np.ndarray | None = None             # (T', d) acoustic states so far
    alpha: np.ndarray | None = None              # raw weights per state
    seg_ids: np.ndarray | None = None
    acc: float = 0.0
    fired: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def total_frames(self) -> int:
        return self.source.shape[0]

    @property
    def consumed_ms(self) -> float:
        return self.consumed_frames * self.frame_ms

    @property
    def total_ms(self) -> float:
        return self.total_frames * self.frame_ms

    @property
    def finished_source(self) -> bool:
        return self.consumed_frames >= self.total_frames

    @property
    def integrated_len(self) -> int:
        return self.fired


class StreamingTranslator:
    """Incremental encoder / greedy decoder around a trained :class:`Model`."""

    def __init__(self, model: Model, indicator: int = TGT):
        self.model = model
        self.indicator = indicator

    def start(self, frames: np.ndarray, frame_ms: float) -> StreamingState:
        d = self.model.config.d
        n_layers = len(self.model.config.strides)
        return StreamingState(
            source=np.asarray(frames, dtype=np.float64), frame_ms=frame_ms,
            layers=[np.zeros((0, self.model.config.conv_channels)) for _ in range(n_layers)],
            states=np.zeros((0, d)), alpha=np.zeros(0), seg_ids=np.zeros(0, dtype=np.int64))

    def update(self, state: StreamingState, n_frames: int) -> StreamingState:
        new = state.source[state.consumed_frames: state.consumed_frames + n_frames]
        return self.incremental_update(state, new, start=state.consumed_frames)

    def incremental_update(self, state: StreamingState, new_segment: np.ndarray,
                           start: int | None = None) -> StreamingState:
        """Append frames and extend the encoder and CIF state without recomputation."""
        if start is not None and start != state.consumed_frames:
            raise PolicyError(f"segment starts at frame {start}, expected {state.consumed_frames}")
        new_segment = np.asarray(new_segment, dtype=np.float64)
        if new_segment.shape[0] == 0:
            return state
        end = state.consumed_frames + new_segment.shape[0]
        if end > state.total_frames or not np.array_equal(
                state.source[state.consumed_frames:end], new_segment):
            raise PolicyError("segment is not the continuation of the consumed prefix")
        m = self.model
        visible = state.source[None, :end]
        with nx.no_grad():
            x = visible
            for layer, s in enumerate(m.config.strides):
                n_in = x.shape[1]
                have = state.layers[layer].shape[0]
                want = -(-n_in // s)
                rows = m._conv(layer, x, have, want).data[0]
                state.layers[layer] = np.concatenate([state.layers[layer], rows])
                x = Tensor(state.layers[layer][None])
            have = state.states.shape[0]
            fresh = m._apply_linear("acoustic_out", Tensor(state.layers[-1][None, have:])).data[0]
        state.states = np.concatenate([state.states, fresh])
        alpha_new = nx.sigmoid(fresh[:, -1]).data
        seg, fires, acc = kernels.fire_walk(np.ascontiguousarray(alpha_new), state.acc, state.fired,
                                            cif.THRESHOLD, cif.TOLERANCE)
        state.alpha = np.concatenate([state.alpha, alpha_new])
        state.seg_ids = np.concatenate([state.seg_ids, seg])
        state.acc = acc
        state.fired += len(fires)
        state.consumed_frames = end
        state._cache.clear()
        return state

    def _encoded(self, state: StreamingState):
        key = ("final",) if state.finished_source else ("online", state.fired)
        if key in state._cache:
            return state._cache[key]
        m = self.model
        if state.finished_source:
            # One full-utterance pass: the incremental rows agree with it
            # mathematically, but BLAS may round blocked products differently
            # and the offline comparison must be bit-exact.
            try:
                h_se, mask, _ = m.encode_offline(state.source)
                out = (h_se, mask)
            except EmptySourceError:
                out = None
        elif state.fired == 0:
            out = None
        else:
            with nx.no_grad():
                states = Tensor(state.states[None])
                emb = m.integrated_from_states(states, state.alpha, state.seg_ids, state.fired)
                h_se = m.semantic_encode(emb, np.array([state.fired]))
            out = (h_se, np.ones((1, state.fired), dtype=bool))
        state._cache = {key: out}
        return out

    def predict(self, state: StreamingState) -> int | None:
        """Greedy next token, or None when no unit has fired yet."""
        enc = self._encoded(state)
        if enc is None:
            return EOS if state.finished_source else None
        h_se, mask = enc
        step = self.model.step_fn(h_se, mask)
        return int(np.argmax(step(np.array([[self.indicator, *state.emitted]]))[0]))


def _as_translator(model) -> StreamingTranslator:
    return StreamingTranslator(model) if isinstance(model, Model) else model


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class _Run:
    def __init__(self, translator, frames, cfg: PolicyConfig, frame_ms: float, utt_id, reference):
        cfg.validate(frame_ms)
        self.tr = translator
        self.cfg = cfg
        self.state = translator.start(frames, frame_ms)
        self.stride = cfg.stride_frames(frame_ms)
        self.log = DecisionLog(utt_id, self.state.total_ms, reference)

    def read(self, n_frames: int | None = None) -> None:
        self.tr.update(self.state, self.stride if n_frames is None else n_frames)
        self.log.events.append(Event(READ, self.state.consumed_ms))

    def write(self, token: int) -> None:
        self.state.emitted.append(token)
        self.log.events.append(Event(WRITE, self.state.consumed_ms, token))

    def next_token(self) -> int | None:
        """Model prediction, with early EOS suppressed while audio remains."""
        tok = self.tr.predict(self.state)
        if tok == EOS and not self.state.finished_source:
            return None
        return tok

    def done(self) -> tuple[list[int], DecisionLog]:
        self.log.finished = True
        return self.log.tokens(), self.log


def run_prefix_policy(model, frames, cfg: PolicyConfig, frame_ms: float = 40.0,
                      utt_id: str = "", reference: str = "") -> tuple[list[int], DecisionLog]:
    if cfg.kind != "prefix":
        raise PolicyError(f"run_prefix_policy got kind={cfg.kind!r}")
    run = _Run(_as_translator(model), frames, cfg, frame_ms, utt_id, reference)
    st = run.state
    lag = cfg.lagging
    n = 0
    while n < lag and not st.finished_source:
        run.read()
        n += 1
    while True:
        if len(st.emitted) >= cfg.max_len:
            run.log.truncated = True
            break
        tok = run.next_token()
        if tok is None:
            run.read()
            continue
        run.write(tok)
        if tok == EOS:
            break
        if not st.finished_source:
            run.read()
    return run.done()


def run_adaptive_policy(model, frames, cfg: PolicyConfig, frame_ms: float = 40.0,
                        utt_id: str = "", reference: str = "") -> tuple[list[int], DecisionLog]:
    if cfg.kind != "adaptive":
        raise PolicyError(f"run_adaptive_policy got kind={cfg.kind!r}")
    run = _Run(_as_translator(model), frames, cfg, frame_ms, utt_id, reference)
    st = run.state
    lag = cfg.lagging
    while True:
        if len(st.emitted) >= cfg.max_len:
            run.log.truncated = True
            break
        if st.finished_source:
            tok = run.next_token()
            run.write(tok)
            if tok == EOS:
                break
        elif st.integrated_len - len(st.emitted) < lag:
            run.read()
        else:
            tok = run.next_token()
            if tok is None:
                run.read()
            else:
                run.write(tok)
    return run.done()


def run_offline_policy(model, frames, cfg: PolicyConfig, frame_ms: float = 40.0,
                       utt_id: str = "", reference: str = "") -> tuple[list[int], DecisionLog]:
    run = _Run(_as_translator(model), frames, cfg, frame_ms, utt_id, reference)
    run.read(run.state.total_frames)
    while len(run.state.emitted) < cfg.max_len:
        tok = run.next_token()
        run.write(tok)
        if tok == EOS:
            break
    else:
        run.log.truncated = True
    return run.done()


POLICIES = {"prefix": run_prefix_policy, "adaptive": run_adaptive_policy,
            "offline": run_offline_policy}


def run_policy(model, frames, cfg: PolicyConfig, **kw) -> tuple[list[int], DecisionLog]:
    return POLICIES[cfg.kind](model, frames, cfg, **kw)


# ---------------------------------------------------------------------------
# decision-log serialisation
# ---------------------------------------------------------------------------

def _fmt_ms(x: float) -> str:
    return repr(float(x))


def serialize_log(log: DecisionLog) -> str:
    header = {"utt_id": log.utt_id, "total_source_ms": log.total_source_ms,
              "reference": log.reference, "truncated": log.truncated}
    lines = ["#utt\t" + json.dumps(header, sort_keys=True)]
    for e in log.events:
        if e.action == READ:
            lines.append(f"{READ}\t{_fmt_ms(e.consumed_ms)}")
        else:
            tok = EOS_TEXT if e.token == EOS else str(e.token)
            lines.append(f"{WRITE}\t{_fmt_ms(e.consumed_ms)}\t{tok}")
    return "\n".join(lines) + "\n"


def emit_decision_log(log: DecisionLog, sink: TextIO | None = None) -> str:
    """Serialise one finished log (optionally writing it to ``sink``)."""
    if not log.finished:
        raise PolicyError(f"decision log {log.utt_id!r} is unfinished")
    text = serialize_log(log)
    if sink is not None:
        sink.write(text)
    return text


def parse_logs(text: str | Iterable[str]) -> tuple[dict, list[DecisionLog]]:
    """Parse a log file into ``(file_header, logs)``; inverse of :func:`write_logs`."""
    lines = text.splitlines() if isinstance(text, str) else [l.rstrip("\n") for l in text]
    header: dict = {}
    logs: list[DecisionLog] = []
    cur: DecisionLog | None = None
    for lineno, line in enumerate(lines, 1):
        if not line:
            continue
        if line.startswith("##config\t"):
            header = json.loads(line.split("\t", 1)[1])
            continue
        cols = line.split("\t")
        if cols[0] == "#utt":
            h = json.loads(cols[1])
            cur = DecisionLog(h["utt_id"], float(h["total_source_ms"]), h.get("reference", ""),
                              finished=True, truncated=bool(h.get("truncated", False)))
            logs.append(cur)
        elif cur is None:
            raise PolicyError(f"line {lineno}: event before any #utt header")
        elif cols[0] == READ and len(cols) == 2:
            cur.events.append(Event(READ, float(cols[1])))
        elif cols[0] == WRITE and len(cols) == 3:
            tok = EOS if cols[2] == EOS_TEXT else int(cols[2])
            cur.events.append(Event(WRITE, float(cols[1]), tok))
        else:
            raise PolicyError(f"line {lineno}: malformed event {line!r}")
    return header, logs


def write_logs(logs: Iterable[DecisionLog], sink: TextIO, config: dict | None = None) -> None:
    if config is not None:
        sink.write("##config\t" + json.dumps(config, sort_keys=True) + "\n")
    for log in logs:
        emit_decision_log(log, sink)


def logs_to_string(logs: Iterable[DecisionLog], config: dict | None = None) -> str:
    buf = io.StringIO()
    write_logs(logs, buf, config)
    return buf.getvalue()
