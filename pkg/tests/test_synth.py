import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import piecewise_linear
from thfem.errors import InputError
from thfem.synth import (CANONICAL_EXPRESSIONS, EXPRESSION_JITTER, Corpus, FaceParams, Warp, make_corpus,
                         make_paired, mouth_box, random_warp, read_correspondence, render_face, synth_utterance,
                         write_correspondence)

BASE = FaceParams((0.5, 0.5, 0.5, 0.5), (0.0, 0.0, 0.0), 0.3, (0.0, 0.0, 0.0))


def frame_rms(utt):
    spf = int(utt.audio.sample_rate / utt.fps)
    x = utt.audio.samples
    out = []
    for i in range(len(utt.video)):
        lo, hi = max(i * spf - spf // 2, 0), min(i * spf + spf // 2, len(x))
        out.append(math.sqrt(float(np.mean(x[lo:hi] ** 2))))
    return np.array(out)


# ---------------------------------------------------------------- renderer

def test_render_is_deterministic():
    assert np.array_equal(render_face(BASE).pixels, render_face(BASE).pixels)


def test_mouth_open_changes_only_mouth_box():
    closed = render_face(BASE.replace(mouth_open=0.0)).gray()
    opened = render_face(BASE.replace(mouth_open=1.0)).gray()
    x0, x1, y0, y1 = mouth_box(32)
    mask = np.zeros((32, 32), bool)
    mask[math.floor(16 + y0):math.ceil(16 + y1), math.floor(16 + x0):math.ceil(16 + x1)] = True
    diff = np.abs(opened - closed) > 0
    assert diff.any()
    assert not np.any(diff & ~mask)


def test_pose_translation_shifts_pixels():
    a = render_face(BASE).gray()
    b = render_face(BASE.replace(pose=(2.0, 0.0, 0.0))).gray()
    assert np.allclose(b[:, 2:], a[:, :-2], atol=1e-6)


def test_params_validated():
    with pytest.raises(InputError):
        BASE.replace(mouth_open=1.2)
    with pytest.raises(InputError):
        BASE.replace(expression=(0.0, 2.0, 0.0))


# ---------------------------------------------------------------- utterances

def test_synth_is_deterministic():
    a, b = synth_utterance(1.0, "happy", seed=7), synth_utterance(1.0, "happy", seed=7)
    assert np.array_equal(a.audio.samples, b.audio.samples)
    assert np.array_equal(a.video.as_array(), b.video.as_array())
    assert a.params_track == b.params_track


@pytest.mark.parametrize("seed", range(8))
def test_loud_frames_have_open_mouths(seed):
    utt = synth_utterance(2.0, "neutral", seed=seed)
    rms = frame_rms(utt)
    open_ = utt.mouth_track > np.median(utt.mouth_track)
    loud = rms > np.median(rms)
    assert np.mean(open_ == loud) >= 0.9


def test_neutral_expression_within_jitter():
    utt = synth_utterance(1.0, "neutral", seed=2)
    assert np.all(np.abs(np.array(utt.params_track[0].expression)) <= EXPRESSION_JITTER)


def test_emotion_expression_near_canonical():
    utt = synth_utterance(1.0, "happy", seed=2)
    assert np.allclose(utt.params_track[0].expression, CANONICAL_EXPRESSIONS["happy"], atol=EXPRESSION_JITTER)


def test_short_duration_rejected():
    with pytest.raises(InputError):
        synth_utterance(0.3)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_ground_truth_round_trip(seed):
    utt = synth_utterance(0.6, "sad", seed=seed)
    for p, f in zip(utt.params_track, utt.video.frames):
        assert np.array_equal(render_face(p).pixels, f.pixels)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["neutral", "angry", "happy", "surprised"]))
def test_envelope_fidelity(seed, emotion):
    utt = synth_utterance(2.0, emotion, seed=seed)
    r = np.corrcoef(frame_rms(utt), utt.mouth_track)[0, 1]
    assert r > 0.9


# ---------------------------------------------------------------- pairs

def test_identity_warp_gives_identity_correspondence():
    src = synth_utterance(2.0, "neutral", seed=5)
    pair = make_paired(src, "happy", [(0.0, 0.0), (2.0, 2.0)], seed=1)
    assert np.array_equal(pair.true_correspondence, np.arange(50))


def test_uniform_slowdown():
    src = synth_utterance(2.0, "neutral", seed=5)
    pair = make_paired(src, "sad", [(0.0, 0.0), (2.0, 4.0)], seed=1)
    assert len(pair.target.video) == 100
    assert np.array_equal(pair.true_correspondence, np.minimum(2 * np.arange(50), 99))


def test_piecewise_warp_matches_analytic():
    knots = [(0.0, 0.0), (0.6, 0.4), (1.4, 1.5), (2.0, 2.2)]
    src = synth_utterance(2.0, "neutral", seed=9)
    pair = make_paired(src, "angry", knots, seed=2)
    n_t = len(pair.target.video)
    expected = [min(math.floor(piecewise_linear(knots, i / 25.0) * 25.0 + 0.5), n_t - 1) for i in range(50)]
    assert pair.true_correspondence.tolist() == expected


def test_non_monotone_warp_rejected():
    src = synth_utterance(1.0, "neutral", seed=1)
    with pytest.raises(InputError):
        make_paired(src, "happy", [(0.0, 0.0), (0.5, 0.7), (1.0, 0.6)], seed=0)
    with pytest.raises(InputError):
        make_paired(src, "happy", [(0.0, 0.0), (0.8, 0.8)], seed=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_paired_content_preservation(seed):
    rng = np.random.default_rng(seed)
    src = synth_utterance(2.0, "neutral", seed=seed)
    warp = random_warp(rng, 2.0)
    pair = make_paired(src, "happy", warp, seed=seed)
    t = np.arange(len(pair.target.video)) / 25.0
    expected = src.curves.envelope(warp.inverse(t))
    assert np.max(np.abs(pair.target.mouth_track - expected)) < 0.02
    c = pair.true_correspondence
    assert np.all(np.diff(c) >= 0) and len(c) == len(src.video)


def test_warp_requires_origin_and_increase():
    with pytest.raises(InputError):
        Warp(((0.1, 0.0), (1.0, 1.0)))
    with pytest.raises(InputError):
        Warp(((0.0, 0.0), (1.0, 1.0), (1.0, 2.0)))


# ---------------------------------------------------------------- corpus

def test_corpus_counts_and_determinism(tmp_path):
    emos = ["neutral", "angry", "disgusted", "fear", "happy", "sad", "surprised"]
    m1 = make_corpus(2, 3, emos, seed=4, out_dir=tmp_path / "a", duration=0.5)
    m2 = make_corpus(2, 3, emos, seed=4, out_dir=tmp_path / "b", duration=0.5)
    recs = [json.loads(line) for line in m1.read_text().splitlines()]
    assert sum(r["kind"] == "source" for r in recs) == 6
    assert sum(r["kind"] == "target" for r in recs) == 42
    assert m1.read_bytes() == m2.read_bytes()
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_corpus_without_emotions(tmp_path):
    m = make_corpus(2, 1, [], seed=0, out_dir=tmp_path, duration=0.5)
    c = Corpus.load(m)
    assert len(c.sources()) == 2 and not c.targets()


def test_corpus_pairs_load(small_corpus):
    rec, pair = next(iter(small_corpus.pairs()))
    assert pair.source.emotion_label == "neutral"
    assert pair.target.emotion_label == rec["emotion"]
    assert len(pair.true_correspondence) == len(pair.source.video)


def test_correspondence_file_round_trip(tmp_path):
    m = np.array([0, 0, 1, 3, 4], dtype=np.int64)
    write_correspondence(tmp_path / "c.corr", m)
    raw = (tmp_path / "c.corr").read_bytes()
    assert len(raw) == 12 + 4 * len(m)
    assert np.array_equal(read_correspondence(tmp_path / "c.corr"), m)
