import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamst import policy as P
from streamst.model import EOS, Model, ModelConfig
from streamst.policy import DecisionLog, Event, PolicyConfig, PolicyError, StreamingState


class ScriptedTranslator:
    """Model-free translator: fires one unit per ``frames_per_unit`` frames and
    emits ``n_out`` content tokens, then EOS."""

    def __init__(self, n_out, frames_per_unit=1, eos_early=False):
        self.n_out = n_out
        self.fpu = frames_per_unit
        self.eos_early = eos_early

    def start(self, frames, frame_ms):
        return StreamingState(source=np.asarray(frames), frame_ms=frame_ms)

    def update(self, state, n_frames):
        state.consumed_frames = min(state.total_frames, state.consumed_frames + n_frames)
        state.fired = state.consumed_frames // self.fpu
        return state

    def predict(self, state):
        if self.eos_early and not state.emitted:
            return EOS
        return 4 + len(state.emitted) if len(state.emitted) < self.n_out else EOS


def frames(n):
    return np.zeros((n, 2))


class TestPrefixPolicy:
    def test_first_write_after_k_strides(self):
        _, log = P.run_prefix_policy(ScriptedTranslator(5), frames(100), PolicyConfig("prefix", 5, 400))
        assert log.delays()[0] == 2000
        assert log.events[:5] == [Event("READ", 400.0 * i) for i in range(1, 6)]

    def test_single_stride_audio(self):
        toks, log = P.run_prefix_policy(ScriptedTranslator(3), frames(5), PolicyConfig("prefix", 1, 400))
        assert toks == [4, 5, 6]
        assert log.delays() == [200.0] * 3
        assert [e.action for e in log.events] == ["READ"] + ["WRITE"] * 4

    def test_unbounded_k_is_offline(self):
        _, log = P.run_prefix_policy(ScriptedTranslator(4), frames(30), PolicyConfig("prefix", None, 120))
        assert log.delays() == [1200.0] * 4

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 60), st.sampled_from([40, 80, 120, 200, 400]), st.integers(1, 8),
           st.integers(1, 12))
    def test_delay_formula(self, n_frames, s, k, n_out):
        D = n_frames * 40.0
        _, log = P.run_prefix_policy(ScriptedTranslator(n_out), frames(n_frames), PolicyConfig("prefix", k, s))
        assert log.delays() == [min(D, (k + i - 1) * s) for i in range(1, n_out + 1)]

    def test_early_eos_suppressed(self):
        toks, log = P.run_prefix_policy(ScriptedTranslator(0, eos_early=True), frames(20),
                                        PolicyConfig("prefix", 1, 200))
        assert toks == []
        assert log.events[-1] == Event("WRITE", 800.0, EOS)
        assert all(e.action == "READ" for e in log.events[:-1])


class TestAdaptivePolicy:
    def test_branch_structure(self):
        # one unit per 7 frames (280 ms); K=2 -> the first write needs 2 units
        _, log = P.run_adaptive_policy(ScriptedTranslator(3, frames_per_unit=7), frames(70),
                                       PolicyConfig("adaptive", 2, 280))
        assert log.delays() == [560.0, 840.0, 1120.0]

    def test_write_when_lead_reaches_k(self):
        tr = ScriptedTranslator(3, frames_per_unit=1)
        _, log = P.run_adaptive_policy(tr, frames(70), PolicyConfig("adaptive", 2, 120))
        # after one 3-frame read, |l_u| = 3 and 3 - 0 >= 2 -> write, then 3 - 1 >= 2 -> write
        assert log.delays()[:2] == [120.0, 120.0]

    def test_exhausted_source_writes_regardless(self):
        _, log = P.run_adaptive_policy(ScriptedTranslator(5, frames_per_unit=100), frames(10),
                                       PolicyConfig("adaptive", 3, 280))
        assert log.delays() == [400.0] * 5

    def test_max_len_truncates(self):
        _, log = P.run_adaptive_policy(ScriptedTranslator(100), frames(4),
                                       PolicyConfig("adaptive", 1, 40, max_len=6))
        assert log.truncated and len(log.tokens()) == 6


@pytest.mark.parametrize("kw", [dict(kind="nope"), dict(k=0), dict(stride_ms=0), dict(stride_ms=100)])
def test_invalid_config(kw):
    cfg = PolicyConfig(**{"kind": "prefix", "k": 2, "stride_ms": 400, **kw})
    with pytest.raises(PolicyError):
        cfg.validate(40.0)


def test_kind_mismatch():
    with pytest.raises(PolicyError):
        P.run_prefix_policy(ScriptedTranslator(1), frames(3), PolicyConfig("adaptive"))


class TestSerialisation:
    def _log(self):
        _, log = P.run_prefix_policy(ScriptedTranslator(3), frames(13), PolicyConfig("prefix", 2, 120),
                                     utt_id="u1", reference="7 8 9")
        return log

    def test_roundtrip(self):
        log = self._log()
        text = P.logs_to_string([log], {"policy": "prefix"})
        header, back = P.parse_logs(text)
        assert header == {"policy": "prefix"}
        assert back == [log]
        assert P.logs_to_string(back, {"policy": "prefix"}) == text

    def test_format(self):
        text = P.emit_decision_log(self._log())
        lines = text.splitlines()
        assert lines[0].startswith("#utt\t{")
        assert lines[1] == "READ\t120.0"
        assert lines[-1] == "WRITE\t520.0\t</s>"

    def test_unfinished_rejected(self):
        with pytest.raises(PolicyError):
            P.emit_decision_log(DecisionLog("x", 100.0))

    def test_malformed_rejected(self):
        with pytest.raises(PolicyError):
            P.parse_logs("READ\t40.0\n")
        with pytest.raises(PolicyError):
            P.parse_logs('#utt\t{"utt_id": "a", "total_source_ms": 40}\nWRITE\t40.0\n')

    def test_offline_delays(self):
        _, log = P.run_offline_policy(ScriptedTranslator(3), frames(25), PolicyConfig("offline"))
        assert log.delays() == [1000.0] * 3
        sink = io.StringIO()
        P.emit_decision_log(log, sink)
        assert sink.getvalue().count("WRITE\t1000.0") == 4


# ---------------------------------------------------------------------------
# with a real (untrained) model
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def model():
    m = Model(ModelConfig(d_model=16, n_heads=2, N=1, M=1, d_ff=32, conv_channels=16, d=9, seed=4))
    # bias the weight logit upwards so units fire on short inputs
    m.params["acoustic_out.b"].data[-1] = 0.5
    return m


def test_incremental_encoding_matches_full_pass(model):
    x = np.random.default_rng(0).normal(size=(23, model.config.d_feat))
    tr = P.StreamingTranslator(model)
    a = tr.start(x, 40.0)
    for n in (3, 4, 1, 7, 8):
        tr.update(a, n)
    b = tr.start(x, 40.0)
    tr.update(b, 23)
    full = model.acoustic_encode(x).data[0]
    # row blocking inside BLAS may differ in the last ulp
    np.testing.assert_allclose(a.states, full, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.states, full, rtol=0, atol=1e-12)
    assert a.fired == b.fired
    np.testing.assert_array_equal(a.seg_ids, b.seg_ids)


def test_incremental_update_validation(model):
    x = np.random.default_rng(1).normal(size=(10, model.config.d_feat))
    tr = P.StreamingTranslator(model)
    st_ = tr.start(x, 40.0)
    before = st_.consumed_frames
    tr.incremental_update(st_, x[:0])
    assert st_.consumed_frames == before
    with pytest.raises(PolicyError):
        tr.incremental_update(st_, x[2:4], start=2)
    with pytest.raises(PolicyError):
        tr.incremental_update(st_, x[1:3])


def test_adaptive_unbounded_matches_offline(model):
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.normal(size=(int(rng.integers(4, 30)), model.config.d_feat))
        toks, _ = P.run_adaptive_policy(model, x, PolicyConfig("adaptive", None, 280, max_len=12))
        assert toks == model.translate(x)[:12]


@pytest.mark.parametrize("kind,k", [("prefix", 2), ("adaptive", 1), ("offline", None)])
def test_delays_monotone_and_append_only(model, kind, k):
    x = np.random.default_rng(3).normal(size=(30, model.config.d_feat))
    toks, log = P.run_policy(model, x, PolicyConfig(kind, k, 120, max_len=10))
    d = log.delays()
    assert d == sorted(d)
    assert log.tokens() == toks
