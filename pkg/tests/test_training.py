import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from thfem.alignment import build_paired_dataset
from thfem.errors import CapabilityError, InputError, TrainingDivergedError
from thfem.fem import LossyFEM, OracleFEM
from thfem.losses import LossWeights
from thfem.media import AudioClip, Frame, FrameSequence
from thfem.models import SyncConfig, SyncExpert, ThgConfig, ThgModel
from thfem.synth import Corpus, make_corpus, synth_utterance
from thfem.training import (LossHistory, SyncWindows, contrastive_sync_loss, infer_video, new_model,
                            sync_separation, train_adjacent, train_sync_expert)


@pytest.fixture(scope="module")
def overfit_dataset(tmp_path_factory):
    """One identity: a neutral source and four emotional renditions, five utterances in all."""
    root = tmp_path_factory.mktemp("overfit")
    make_corpus(1, 1, ("angry", "happy", "sad", "surprised"), seed=7, out_dir=root, duration=2.0)
    corpus = Corpus.load(root)
    assert len(corpus.records) == 5
    return build_paired_dataset(corpus, LossyFEM(0.5), 5)


@pytest.fixture(scope="module")
def frozen_expert():
    torch.manual_seed(0)
    ex = SyncExpert(SyncConfig()).eval()
    for p in ex.parameters():
        p.requires_grad_(False)
    return ex


@pytest.fixture(scope="module")
def utterance():
    return synth_utterance(2.04, "neutral", seed=12)


# ---------------------------------------------------------------- chunked inference

def test_fifty_one_frames_in_chunks_of_five(utterance):
    video = utterance.video
    assert len(video) == 51
    log = []
    out = infer_video(new_model(), video, utterance.audio, 5, reference_log=log)
    assert len(out) == 51
    assert log == list(range(0, 50, 5))
    assert np.array_equal(out[0].pixels, video[0].pixels)
    assert [f.index for f in out.frames] == list(range(51))


def test_window_of_length_minus_one_is_single_chunk(utterance):
    log = []
    out = infer_video(new_model(), utterance.video, utterance.audio, 50, reference_log=log)
    assert log == [0] and len(out) == 51


def test_chunk_references_are_fem_frames(utterance):
    # a model that copies its reference makes every chunk a replay of the FEM frame it started from
    model = new_model()
    with torch.no_grad():
        model.generator.out.weight.zero_()
        model.generator.out.bias.zero_()
    out = infer_video(model, utterance.video, utterance.audio, 5).as_array()
    fem = utterance.video.as_array()
    for k in range(10):
        ref = np.clip(fem[5 * k], 1e-3, 1 - 1e-3)
        for j in range(1, 6):
            assert np.allclose(out[5 * k + j], ref, atol=1e-5)


def test_single_frame_video_passes_through(utterance):
    one = FrameSequence([utterance.video[0]], fps=25.0)
    clip = AudioClip(utterance.audio.samples[:640], utterance.audio.sample_rate)
    out = infer_video(new_model(), one, clip, 5)
    assert len(out) == 1


def test_short_audio_rejected(utterance):
    clip = AudioClip(utterance.audio.samples[:16000], utterance.audio.sample_rate)
    with pytest.raises(InputError):
        infer_video(new_model(), utterance.video, clip, 5)


def test_missing_pose_needs_explicit_poses(utterance):
    bare = FrameSequence([Frame(f.pixels, i, 25.0) for i, f in enumerate(utterance.video.frames)], fps=25.0)
    with pytest.raises(CapabilityError):
        infer_video(new_model(), bare, utterance.audio, 5)
    out = infer_video(new_model(), bare, utterance.audio, 5, poses=utterance.pose_track)
    assert len(out) == 51


_TINY = ThgModel(ThgConfig(width=4))
_LONG = synth_utterance(2.4, "sad", seed=40)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 60), st.integers(1, 50))
def test_length_law(length, n):
    video = FrameSequence(_LONG.video.frames[:length], fps=25.0)
    audio = AudioClip(_LONG.audio.samples[:length * 640], 16000)
    out = infer_video(_TINY, video, audio, n)
    assert len(out) == length
    assert out.as_array().min() >= 0.0 and out.as_array().max() <= 1.0


# ---------------------------------------------------------------- sync expert

def test_contrastive_loss_form():
    t = lambda *rows: torch.tensor(rows, dtype=torch.float64)  # noqa: E731
    v = t([1.0, 0.0])
    # the orthogonal negative sits on the similarity floor
    loss = contrastive_sync_loss(v, t([1.0, 0.0]), t([0.0, 1.0]))
    assert float(loss) == pytest.approx(-np.log(1 - 1e-6), rel=1e-9)
    loss = contrastive_sync_loss(v, t([0.6, 0.8]), t([0.6, 0.8]))
    assert float(loss) == pytest.approx(-np.log(0.6) - np.log(0.4), rel=1e-9)


def test_sync_windows_negatives_are_far(small_corpus):
    wins = SyncWindows.from_utterances([small_corpus.utterance(r) for r in small_corpus.records])
    rng = np.random.default_rng(0)
    for u, s in wins.index[::7]:
        ns = wins.negative_start(rng, int(u), int(s))
        assert abs(ns - s) >= 5
    assert wins.mel_at(0, 0).shape == (80, 16)


def test_sync_expert_same_seed_same_weights(small_corpus):
    a = train_sync_expert(small_corpus, epochs=1, seed=3)
    b = train_sync_expert(small_corpus, epochs=1, seed=3)
    sa, sb = a.state_dict(), b.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not any(p.requires_grad for p in a.parameters()) and not a.training


def test_sync_expert_needs_data():
    with pytest.raises(InputError):
        train_sync_expert([], epochs=1)


def test_trained_expert_separates_held_out(trained_expert, heldout_corpus):
    wins = SyncWindows.from_utterances([heldout_corpus.utterance(r) for r in heldout_corpus.records])
    assert sync_separation(trained_expert, wins) > 0.3


# ---------------------------------------------------------------- adjacent-frame training

def test_history_length_and_columns(overfit_dataset, frozen_expert, tmp_path):
    state = train_adjacent(new_model(width=8), overfit_dataset, frozen_expert, max_steps=6, seed=1)
    h = state.history
    assert len(h) == 6 and h.disc_steps == 6
    assert list(h.column("step")) == list(range(6))
    assert np.allclose(h.column("total"),
                       0.5 * h.column("sync") + 10 * h.column("pixel") + h.column("perceptual")
                       + 0.1 * h.column("adversarial"), rtol=1e-5)
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "step,sync,pixel,perceptual,adversarial,total"
    assert LossHistory.from_csv(tmp_path / "h.csv").rows == h.rows


def test_no_discriminator_updates_without_adversarial_weight(overfit_dataset, frozen_expert):
    w = LossWeights().without("adversarial")
    torch.manual_seed(0)
    from thfem.models import Discriminator

    disc = Discriminator()
    before = {k: v.clone() for k, v in disc.state_dict().items()}
    state = train_adjacent(new_model(width=8), overfit_dataset, frozen_expert, w, max_steps=4, discriminator=disc)
    assert state.history.disc_steps == 0
    assert all(torch.equal(before[k], v) for k, v in disc.state_dict().items())
    assert np.all(state.history.column("adversarial") > 0)


def test_removed_term_logged_but_not_in_total(overfit_dataset, frozen_expert):
    w = LossWeights().without("pixel")
    h = train_adjacent(new_model(width=8), overfit_dataset, frozen_expert, w, max_steps=3).history
    assert np.all(h.column("pixel") > 0)
    expected = 0.5 * h.column("sync") + h.column("perceptual") + 0.1 * h.column("adversarial")
    assert np.allclose(h.column("total"), expected, rtol=1e-5)


def test_same_seed_same_history(overfit_dataset, frozen_expert):
    runs = [train_adjacent(new_model(width=8, seed=2), overfit_dataset, frozen_expert, max_steps=5, seed=4).history
            for _ in range(2)]
    assert runs[0].rows == runs[1].rows


def test_nan_aborts_with_diagnostic(overfit_dataset, frozen_expert):
    model = new_model(width=8)
    with torch.no_grad():
        model.generator.out.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as info:
        train_adjacent(model, overfit_dataset, frozen_expert, max_steps=3)
    assert info.value.step == 0
    assert "pixel" in info.value.terms


def test_sync_term_zero_below_expert_window(tmp_path_factory, frozen_expert):
    root = tmp_path_factory.mktemp("n3")
    make_corpus(1, 1, ("happy",), seed=2, out_dir=root, duration=1.0)
    ds = build_paired_dataset(Corpus.load(root), OracleFEM(), 3)
    h = train_adjacent(new_model(width=4), ds, frozen_expert, max_steps=2).history
    assert np.all(h.column("sync") == 0.0)


def _epoch_means(values, steps_per_epoch):
    k = len(values) // steps_per_epoch
    return values[:k * steps_per_epoch].reshape(k, steps_per_epoch).mean(1)


def test_pixel_loss_falls_on_overfit_set(overfit_dataset, frozen_expert):
    # fixed batch order, so each epoch mean is taken over the same batches
    h = train_adjacent(new_model(seed=0), overfit_dataset, frozen_expert, LossWeights().without("sync"),
                       max_steps=100, seed=0, shuffle=False).history
    means = _epoch_means(h.column("pixel"), 12)
    assert len(means) == 8
    assert np.all(np.diff(means) < 0), means


def test_full_objective_trades_pixels_for_sync_early(overfit_dataset, trained_expert):
    h = train_adjacent(new_model(seed=0), overfit_dataset, trained_expert, max_steps=100, seed=0,
                       shuffle=False).history
    sync = _epoch_means(h.column("sync"), 12)
    assert sync[-1] < sync[0]
