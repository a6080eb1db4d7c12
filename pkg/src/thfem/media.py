"""Media primitives: frames, audio clips, log-mel features and window slicing.

Column ``t`` of a mel spectrogram is centred on the hop interval
``[t * hop, (t + 1) * hop)`` so a clip of ``L`` samples always yields
``ceil(L / hop)`` columns.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.io import wavfile

from .errors import ConfigurationError, InputError, OutOfRangeError


@dataclass
class Frame:
    """A single raster image with intensities in [0, 1].

    ``params`` optionally holds the ground-truth face parameters the frame was
    rendered from; generated frames leave it as ``None``.
    """

    pixels: np.ndarray
    index: int = 0
    fps: float = 25.0
    params: Optional[Any] = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3) or px.shape[0] == 0 or px.shape[1] == 0:
            raise InputError(f"frame pixels must be HxW or HxWx{{1,3}}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise InputError("frame pixels must lie in [0, 1]")
        self.pixels = px

    @property
    def timestamp(self) -> float:
        return self.index / self.fps

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    def gray(self) -> np.ndarray:
        """Single-channel HxW view (luma average for colour frames)."""
        return self.pixels.mean(axis=2) if self.pixels.shape[2] == 3 else self.pixels[:, :, 0]


@dataclass
class FrameSequence:
    frames: list[Frame]
    fps: float = 25.0

    def __post_init__(self) -> None:
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise InputError(f"frames have mixed shapes: {sorted(shapes)}")
        for i, f in enumerate(self.frames):
            if f.index != i:
                raise InputError(f"frame indices must be consecutive from 0; frame {i} has index {f.index}")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Frame:
        return self.frames[i]

    @property
    def duration(self) -> float:
        return len(self.frames) / self.fps

    def as_array(self) -> np.ndarray:
        """Stack into a (T, H, W, C) float32 array."""
        if not self.frames:
            return np.zeros((0, 0, 0, 0), dtype=np.float32)
        return np.stack([f.pixels for f in self.frames])

    @classmethod
    def from_array(cls, arr: np.ndarray, fps: float = 25.0, params: Optional[Sequence[Any]] = None) -> "FrameSequence":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[..., None]
        frames = [
            Frame(arr[i], index=i, fps=fps, params=None if params is None else params[i])
            for i in range(arr.shape[0])
        ]
        return cls(frames, fps=fps)


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ConfigurationError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 800
    hop: int = 200
    n_mels: int = 80
    fmin: float = 55.0
    fmax: float = 7600.0
    db_floor: float = -100.0

    def __post_init__(self) -> None:
        if self.hop <= 0 or self.hop > self.n_fft:
            raise ConfigurationError(f"need 0 < hop <= n_fft, got hop={self.hop}, n_fft={self.n_fft}")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ConfigurationError("need fmin < fmax <= sample_rate / 2")
        if self.n_mels < 1:
            raise ConfigurationError("n_mels must be >= 1")

    def cols_per_frame(self, fps: float) -> float:
        return self.sample_rate / (self.hop * fps)


@dataclass
class MelSpectrogram:
    columns: np.ndarray  # (n_mels, T) in dB
    config: MelConfig = field(default_factory=MelConfig)

    @property
    def n_cols(self) -> int:
        return self.columns.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-style filters with unit peak, shape (n_mels, n_fft // 2 + 1)."""
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    return np.clip(np.minimum(up, down), 0.0, None)


_FB_CACHE: dict[MelConfig, np.ndarray] = {}


def _cached_filterbank(cfg: MelConfig) -> np.ndarray:
    fb = _FB_CACHE.get(cfg)
    if fb is None:
        fb = mel_filterbank(cfg)
        fb.setflags(write=False)
        _FB_CACHE[cfg] = fb
    return fb


def compute_mel(audio: AudioClip, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    if audio.sample_rate != cfg.sample_rate:
        raise ConfigurationError(f"audio sample rate {audio.sample_rate} != mel config {cfg.sample_rate}")
    x = audio.samples.astype(np.float64)
    if len(x) < cfg.n_fft:
        raise InputError(f"clip of {len(x)} samples is shorter than one window ({cfg.n_fft})")
    n_cols = math.ceil(len(x) / cfg.hop)
    left = (cfg.n_fft - cfg.hop) // 2
    right = n_cols * cfg.hop - len(x) + (cfg.n_fft - cfg.hop - left)
    padded = np.pad(x, (left, right))
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(n_cols)[:, None]
    window = np.hanning(cfg.n_fft + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(padded[idx] * window, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = _cached_filterbank(cfg) @ power.T
    db = 10.0 * np.log10(mel + 1e-10)
    return MelSpectrogram(np.maximum(db, cfg.db_floor).astype(np.float32), cfg)


def _check_window(frame_index: int, n: int) -> None:
    if n < 1:
        raise InputError("window length n must be >= 1")
    if frame_index < -1:
        raise OutOfRangeError(f"frame index {frame_index} is negative")


def audio_window(audio: AudioClip, frame_index: int, n: int, fps: float) -> AudioClip:
    """Samples covering video frames ``frame_index + 1 .. frame_index + n``."""
    _check_window(frame_index, n)
    spf = audio.sample_rate / fps
    start = int(round((frame_index + 1) * spf))
    stop = int(round((frame_index + 1 + n) * spf))
    if stop > len(audio.samples):
        raise OutOfRangeError(
            f"window for frames {frame_index + 1}..{frame_index + n} ends at sample {stop}, "
            f"clip has {len(audio.samples)}"
        )
    return AudioClip(audio.samples[start:stop], audio.sample_rate)


def mel_span(cfg: MelConfig, frame_index: int, n: int, fps: float) -> tuple[int, int]:
    """(start, width) in columns for frames ``frame_index + 1 .. frame_index + n``."""
    denom = cfg.hop * fps
    if float(denom).is_integer():
        denom = int(denom)
        start = ((frame_index + 1) * cfg.sample_rate) // denom
        width = (n * cfg.sample_rate) // denom
    else:
        start = int(math.floor((frame_index + 1) * cfg.sample_rate / denom))
        width = int(math.floor(n * cfg.sample_rate / denom))
    return int(start), max(int(width), 1)


def mel_window(mel: MelSpectrogram, frame_index: int, n: int, fps: float) -> MelSpectrogram:
    _check_window(frame_index, n)
    start, width = mel_span(mel.config, frame_index, n, fps)
    if start + width > mel.n_cols:
        raise OutOfRangeError(f"mel window [{start}, {start + width}) exceeds {mel.n_cols} columns")
    return MelSpectrogram(mel.columns[:, start:start + width], mel.config)


# --------------------------------------------------------------------------- I/O

def write_wav(path: Path | str, audio: AudioClip) -> None:
    """32-bit float PCM RIFF/WAVE."""
    wavfile.write(str(path), audio.sample_rate, audio.samples.astype(np.float32))


def read_wav(path: Path | str) -> AudioClip:
    sr, data = wavfile.read(str(path))
    if data.dtype != np.float32:
        raise InputError(f"{path}: expected float32 PCM, got {data.dtype}")
    return AudioClip(data, int(sr))


def write_png(path: Path | str, frame: Frame) -> None:
    px = np.round(frame.pixels * 65535.0).astype(np.uint16)
    if px.shape[2] == 1:
        Image.fromarray(px[:, :, 0]).save(str(path))
    else:
        # Pillow cannot write 16-bit RGB; fall back to 8 bits per channel.
        Image.fromarray((frame.pixels * 255.0 + 0.5).astype(np.uint8)).save(str(path))


def read_png(path: Path | str, index: int = 0, fps: float = 25.0) -> Frame:
    img = np.asarray(Image.open(str(path)))
    scale = 65535.0 if img.dtype in (np.uint16, np.int32) else 255.0
    return Frame(img.astype(np.float32) / scale, index=index, fps=fps)


SEQ_MAGIC = b"THFSEQ01"
_SEQ_HEADER = struct.Struct("<8sIIIIf")  # magic, count, height, width, channels, fps


def write_sequence(path: Path | str, seq: FrameSequence) -> None:
    """Packed little-endian float32 frames behind a fixed header.

    Header: magic ``THFSEQ01``, uint32 count, height, width, channels, float32 fps.
    Payload: count*height*width*channels float32 values in (T, H, W, C) order.
    """
    arr = seq.as_array()
    t = len(seq)
    h, w, c = (arr.shape[1:] if t else (0, 0, 0))
    with open(path, "wb") as fh:
        fh.write(_SEQ_HEADER.pack(SEQ_MAGIC, t, h, w, c, float(seq.fps)))
        fh.write(arr.astype("<f4").tobytes())


def read_sequence(path: Path | str, params: Optional[Sequence[Any]] = None) -> FrameSequence:
    raw = Path(path).read_bytes()
    magic, t, h, w, c, fps = _SEQ_HEADER.unpack_from(raw)
    if magic != SEQ_MAGIC:
        raise InputError(f"{path}: not a packed frame sequence")
    arr = np.frombuffer(raw, dtype="<f4", offset=_SEQ_HEADER.size).reshape(t, h, w, c)
    return FrameSequence.from_array(arr.copy(), fps=float(fps), params=params)
