import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import filter_containing
from thfem.errors import ConfigurationError, InputError, OutOfRangeError
from thfem.media import (AudioClip, Frame, FrameSequence, MelConfig, audio_window, compute_mel,
                         mel_filterbank, mel_span, mel_window, read_png, read_sequence, read_wav, write_png,
                         write_sequence, write_wav)

SR = 16000


def tone(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(SR * seconds)) / SR
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), SR)


# ---------------------------------------------------------------- types

def test_frame_rejects_out_of_range_pixels():
    with pytest.raises(InputError):
        Frame(np.full((4, 4), 1.5))
    with pytest.raises(InputError):
        Frame(np.zeros((4, 4, 2)))


def test_frame_timestamp_and_gray():
    f = Frame(np.full((4, 4, 3), 0.25), index=10, fps=25.0)
    assert f.timestamp == pytest.approx(0.4)
    assert f.gray().shape == (4, 4)


def test_sequence_requires_consecutive_indices_and_equal_shapes():
    a = Frame(np.zeros((4, 4)), 0)
    with pytest.raises(InputError):
        FrameSequence([a, Frame(np.zeros((4, 4)), 2)])
    with pytest.raises(InputError):
        FrameSequence([a, Frame(np.zeros((5, 4)), 1)])


def test_melconfig_invariants():
    with pytest.raises(ConfigurationError):
        MelConfig(hop=900)
    with pytest.raises(ConfigurationError):
        MelConfig(fmax=9000)
    with pytest.raises(ConfigurationError):
        MelConfig(n_mels=0)


# ---------------------------------------------------------------- compute_mel

def test_silence_is_floor():
    mel = compute_mel(AudioClip(np.zeros(SR), SR))
    assert mel.n_cols == 80
    assert np.all(mel.columns == -100.0)


def test_column_count_for_one_second():
    assert compute_mel(tone(300)).n_cols == 80


def test_tone_peaks_in_the_filter_containing_it():
    cfg = MelConfig()
    mel = compute_mel(tone(440.0), cfg)
    expected = filter_containing(440.0, cfg.n_mels, cfg.fmin, cfg.fmax)
    peaks = mel.columns[:, 2:-2].argmax(axis=0)
    assert np.all(peaks == peaks[0])
    assert peaks[0] == expected


def test_filterbank_is_unit_peak_triangles():
    fb = mel_filterbank(MelConfig())
    assert fb.shape == (80, 401)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) <= 1.0 + 1e-9)


def test_compute_mel_errors():
    with pytest.raises(ConfigurationError):
        compute_mel(AudioClip(np.zeros(8000), 8000))
    with pytest.raises(InputError):
        compute_mel(AudioClip(np.zeros(799), SR))


def test_compute_mel_is_pure():
    clip = tone(523.0, 0.5)
    assert np.array_equal(compute_mel(clip).columns, compute_mel(clip).columns)


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=800, max_value=20000))
def test_column_count_law(length):
    rng = np.random.default_rng(length)
    clip = AudioClip(rng.uniform(-0.5, 0.5, length), SR)
    mel = compute_mel(clip)
    assert mel.n_cols == math.ceil(length / 200)
    assert np.all(mel.columns >= -100.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.01, 4.0))
def test_energy_monotonicity(seed, alpha):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.2, 0.2, 4000)
    base = compute_mel(AudioClip(x, SR)).columns
    louder = compute_mel(AudioClip(alpha * x, SR)).columns
    assert np.all(louder >= base)


# ---------------------------------------------------------------- windows

def test_audio_window_first_chunk():
    clip = AudioClip(np.zeros(SR * 2), SR)
    w = audio_window(clip, 0, 5, 25.0)
    assert len(w) == 3200
    marked = AudioClip(np.arange(SR * 2) / (SR * 2), SR)
    assert audio_window(marked, 0, 5, 25.0).samples[0] == pytest.approx(640 / (SR * 2))


def test_audio_window_single_frame_and_boundary():
    clip = AudioClip(np.zeros(SR * 2), SR)
    assert len(audio_window(clip, 3, 1, 25.0)) == 640
    with pytest.raises(OutOfRangeError):
        audio_window(clip, 49, 5, 25.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(-1, 30), st.integers(1, 10))
def test_audio_windows_tile(i, n):
    clip = AudioClip(np.arange(SR * 4, dtype=np.float64) / (SR * 4), SR)
    a = audio_window(clip, i, n, 25.0)
    b = audio_window(clip, i + n, n, 25.0)
    spf = SR // 25
    assert a.samples[-1] + 1 / (SR * 4) == pytest.approx(b.samples[0])
    assert len(a) == len(b) == n * spf


def test_mel_window_width_and_start():
    assert mel_span(MelConfig(), 0, 5, 25.0) == (3, 16)
    mel = compute_mel(tone(300, 2.0))
    w = mel_window(mel, 0, 5, 25.0)
    assert w.n_cols == 16
    assert np.array_equal(w.columns, mel.columns[:, 3:19])


def test_mel_window_of_silence_and_out_of_range():
    mel = compute_mel(AudioClip(np.zeros(SR * 2), SR))
    assert np.all(mel_window(mel, 10, 5, 25.0).columns == -100.0)
    with pytest.raises(OutOfRangeError):
        mel_window(mel, 49, 5, 25.0)


# ---------------------------------------------------------------- I/O

def test_wav_round_trip(tmp_path):
    clip = tone(200.0, 0.3)
    write_wav(tmp_path / "a.wav", clip)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == SR
    assert np.array_equal(back.samples, clip.samples)
    assert (tmp_path / "a.wav").read_bytes()[:4] == b"RIFF"


def test_png_round_trip(tmp_path):
    px = np.random.default_rng(0).uniform(0, 1, (8, 8)).astype(np.float32)
    write_png(tmp_path / "f.png", Frame(px))
    back = read_png(tmp_path / "f.png")
    assert np.max(np.abs(back.gray() - px)) <= 1 / 65535 + 1e-7


def test_sequence_round_trip_and_layout(tmp_path):
    arr = np.random.default_rng(1).uniform(0, 1, (3, 4, 5, 1)).astype(np.float32)
    seq = FrameSequence.from_array(arr, fps=25.0)
    write_sequence(tmp_path / "s.f32seq", seq)
    raw = (tmp_path / "s.f32seq").read_bytes()
    assert raw[:8] == b"THFSEQ01"
    payload = np.frombuffer(raw[-arr.size * 4:], dtype="<f4").reshape(arr.shape)
    assert np.array_equal(payload, arr)
    back = read_sequence(tmp_path / "s.f32seq")
    assert back.fps == 25.0
    assert np.array_equal(back.as_array(), arr)
