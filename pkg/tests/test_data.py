import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamst import data
from streamst.data import ManifestError, SyntheticSpec, Utterance
from streamst.model import N_SPECIAL

SMALL = SyntheticSpec(n_samples=60, seed=3)


@pytest.fixture(scope="module")
def corpus():
    return data.generate_corpus(SMALL)


def test_deterministic(corpus):
    again = data.generate_corpus(SMALL)
    for a, b in zip(corpus.train + corpus.dev + corpus.test, again.train + again.dev + again.test):
        assert a.id == b.id and a.transcript == b.transcript
        assert data.encode_frames(a.frames) == data.encode_frames(b.frames)


def test_split_quotas_and_disjointness(corpus):
    assert (len(corpus.train), len(corpus.dev), len(corpus.test)) == (48, 6, 6)
    sources = [{tuple(u.transcript) for u in s} for s in (corpus.train, corpus.dev, corpus.test)]
    assert not (sources[0] & sources[1]) and not (sources[0] & sources[2]) and not (sources[1] & sources[2])


def test_boundaries_and_mapping(corpus):
    for u in corpus.train:
        assert len(u.gold_boundaries) == len(u.transcript)
        assert np.all(np.diff(u.gold_boundaries) > 0)
        assert u.gold_boundaries[-1] == u.frames.shape[0]
        runs = np.diff([0] + u.gold_boundaries)
        assert runs.min() >= 2 and runs.max() <= 8
        assert u.translation == [corpus.mapping[t] for t in u.transcript]
        assert all(a != b for a, b in zip(u.transcript, u.transcript[1:]))
        assert min(u.transcript) >= N_SPECIAL


def test_mapping_is_a_bijection_over_content():
    m = data.token_mapping(SMALL)
    content = set(range(N_SPECIAL, SMALL.vocab_size))
    assert set(m) == content and set(m.values()) == content


def test_noise_free_single_frame_rendering():
    spec = SyntheticSpec(n_samples=10, frames_per_token=(1, 1), noise_std=0.0, seed=1)
    c = data.generate_corpus(spec)
    emb = data.token_embeddings(spec).astype(np.float32).astype(np.float64)
    for u in c.train:
        assert u.frames.shape[0] == len(u.transcript)
        np.testing.assert_array_equal(u.frames, emb[u.transcript])


def test_generation_replay_three_tokens():
    spec = SyntheticSpec(n_samples=40, src_len=(3, 3), seed=5)
    for u in data.generate_corpus(spec).train:
        assert 6 <= u.frames.shape[0] <= 24
        assert u.gold_boundaries[-1] == u.frames.shape[0]


def test_reorder_swaps_adjacent_pairs():
    spec = dataclasses.replace(SMALL, reorder=True)
    c = data.generate_corpus(spec)
    u = c.train[0]
    mapped = [c.mapping[t] for t in u.transcript]
    assert sorted(u.translation) == sorted(mapped)
    assert u.translation[:2] == mapped[1::-1]


@pytest.mark.parametrize("kw", [dict(frames_per_token=(0, 2)), dict(frames_per_token=(3, 2)),
                                dict(vocab_size=5), dict(split=(0.5, 0.2, 0.2))])
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw)


def test_normalize_waveform():
    out = data.normalize_waveform(np.array([-32768, 0, 32767], dtype=np.int16))
    assert out.tolist() == [-1.0, 0.0, 0.999969482421875]
    with pytest.raises(ValueError):
        data.normalize_waveform(np.array([40000]))


@pytest.mark.parametrize("ns, nt, keep", [(9, 4, False), (10, 10, True), (251, 200, False),
                                          (3, 2, True), (2, 3, True), (0, 1, False)])
def test_filter_pair(ns, nt, keep):
    assert data.filter_pair([4] * ns, [4] * nt) is keep


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), max_size=20))
def test_filter_idempotent(lengths):
    utts = [Utterance(str(i), np.zeros((1, 2)), [4] * a, [5] * b) for i, (a, b) in enumerate(lengths)]
    once = data.filter_corpus(utts)
    assert data.filter_corpus(once) == once


def test_frames_format_is_bit_exact(tmp_path):
    frames = np.array([[1.0, -2.5], [0.25, 3.0], [0.0, 1.5]])
    blob = data.encode_frames(frames)
    assert blob[:8] == bytes([3, 0, 0, 0, 2, 0, 0, 0])
    assert blob[8:12] == np.float32(1.0).tobytes()
    np.testing.assert_array_equal(data.decode_frames(blob), frames)
    with pytest.raises(ValueError):
        data.decode_frames(blob[:-1])


@pytest.mark.parametrize("inline", [False, True])
def test_manifest_roundtrip(tmp_path, corpus, inline):
    path = tmp_path / "m.tsv"
    data.write_manifest(path, corpus.dev, inline=inline, header={"seed": 3})
    back = list(data.load_manifest(path))
    assert data.read_manifest_header(path) == {"seed": 3}
    assert len(back) == len(corpus.dev)
    for a, b in zip(corpus.dev, back):
        assert (a.id, a.transcript, a.translation, a.gold_boundaries) == (b.id, b.transcript, b.translation,
                                                                          b.gold_boundaries)
        np.testing.assert_array_equal(a.frames, b.frames)


def test_empty_manifest(tmp_path):
    p = tmp_path / "e.tsv"
    p.write_text("")
    assert list(data.load_manifest(p)) == []


def test_manifest_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.tsv"
    good = "u1\thex:" + data.encode_frames(np.zeros((1, 2))).hex() + "\t4 5\t6 7\n"
    p.write_text("# comment\n" + good + "u2\tx\t4 5\n")
    with pytest.raises(ManifestError) as err:
        list(data.load_manifest(p))
    assert err.value.lineno == 3

    p.write_text(good + "u3\tmissing.f32\t4\t5\n")
    with pytest.raises(ManifestError, match="missing.f32") as err:
        list(data.load_manifest(p))
    assert err.value.lineno == 2

    p.write_text("u4\thex:zz\t4\t5\n")
    with pytest.raises(ManifestError):
        list(data.load_manifest(p))

    p.write_text(good.replace("4 5", "4 x"))
    with pytest.raises(ManifestError, match="non-integer"):
        list(data.load_manifest(p))
