"""Procedural talking-head world with exact ground truth.

Faces are drawn from a handful of parameters, audio is a voiced carrier whose
amplitude envelope *is* the mouth-openness track, and emotional twins of an
utterance are produced by re-timing that envelope through a known monotone warp.

Geometry is expressed in "face units": pixels of a 32x32 render. Larger
resolutions scale every constant by ``resolution / 32``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import InputError, ThfemError
from .media import AudioClip, Frame, FrameSequence, read_sequence, read_wav, write_sequence, write_wav

log = logging.getLogger(__name__)

EMOTIONS = ("neutral", "angry", "disgusted", "fear", "happy", "sad", "surprised")

# (brow raise, mouth-corner curvature, eye openness)
CANONICAL_EXPRESSIONS = {
    "neutral": (0.0, 0.0, 0.0),
    "angry": (-1.0, -0.6, -0.2),
    "disgusted": (-0.6, -0.8, -0.5),
    "fear": (0.8, -0.4, 0.8),
    "happy": (0.3, 1.0, 0.0),
    "sad": (0.6, -0.9, -0.4),
    "surprised": (1.0, 0.2, 1.0),
}

# Base pitch of the harmonic carrier per emotion, Hz.
BASE_PITCH = {
    "neutral": 140.0,
    "angry": 155.0,
    "disgusted": 134.0,
    "fear": 161.0,
    "happy": 152.0,
    "sad": 128.0,
    "surprised": 164.0,
}
HARMONIC_WEIGHTS = (0.6, 0.3, 0.1)
# Share of the carrier that is harmonic; the rest is envelope-modulated noise.
# Noise fills the pitch-dependent valleys between harmonics so that mel
# distances track loudness rather than pitch.
VOICING = 0.5

EXPRESSION_JITTER = 0.05
ENVELOPE_KNOT_SPACING = 0.12  # s
POSE_KNOT_SPACING = 0.5  # s
POSE_SHIFT_RANGE = 1.5  # px
POSE_ROT_RANGE = 0.06  # rad

DEFAULT_FPS = 25.0
DEFAULT_SAMPLE_RATE = 16000
DEFAULT_RESOLUTION = 32

# ---------------------------------------------------------------- renderer geometry (face units)
SUPERSAMPLE = 4
BACKGROUND = 0.12
HEAD_CENTER = (0.0, 0.5)
EYE_Y = -3.0
EYE_HALF_WIDTH = 1.8
BROW_Y = -6.2
BROW_RAISE = 1.2
BROW_HALF = (2.0, 0.45)
MOUTH_CENTER = (0.0, 6.0)
MOUTH_HALF_WIDTH = 3.0
MOUTH_MIN_HALF_HEIGHT = 0.35
MOUTH_OPEN_GAIN = 2.0
CORNER_INNER_X = 4.0
CORNER_OUTER_X = 6.0
CORNER_LIFT = 1.6
CORNER_HALF_THICKNESS = 0.45


def mouth_box(resolution: int = DEFAULT_RESOLUTION) -> tuple[float, float, float, float]:
    """(x0, x1, y0, y1) image-centred pixel bounds of the mouth opening at full opening, zero pose."""
    s = resolution / DEFAULT_RESOLUTION
    half_h = MOUTH_MIN_HALF_HEIGHT + MOUTH_OPEN_GAIN
    cx, cy = MOUTH_CENTER
    return ((cx - MOUTH_HALF_WIDTH) * s, (cx + MOUTH_HALF_WIDTH) * s, (cy - half_h) * s, (cy + half_h) * s)


@dataclass(frozen=True)
class FaceParams:
    identity: tuple[float, float, float, float]  # head aspect, eye spacing, skin tone, nose length
    expression: tuple[float, float, float]
    mouth_open: float
    pose: tuple[float, float, float]  # dx px, dy px, rotation rad

    def __post_init__(self) -> None:
        ident = tuple(float(v) for v in self.identity)
        expr = tuple(float(v) for v in self.expression)
        pose = tuple(float(v) for v in self.pose)
        if len(ident) != 4 or any(not 0.0 <= v <= 1.0 for v in ident):
            raise InputError(f"identity must be 4 values in [0,1], got {ident}")
        if len(expr) != 3 or any(not -1.0 <= v <= 1.0 for v in expr):
            raise InputError(f"expression must be 3 values in [-1,1], got {expr}")
        if not 0.0 <= float(self.mouth_open) <= 1.0:
            raise InputError(f"mouth_open must lie in [0,1], got {self.mouth_open}")
        if len(pose) != 3 or not np.all(np.isfinite(pose)):
            raise InputError(f"pose must be 3 finite values, got {pose}")
        object.__setattr__(self, "identity", ident)
        object.__setattr__(self, "expression", expr)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "mouth_open", float(self.mouth_open))

    def replace(self, **kw) -> "FaceParams":
        d = dict(identity=self.identity, expression=self.expression, mouth_open=self.mouth_open, pose=self.pose)
        d.update(kw)
        return FaceParams(**d)

    def to_dict(self) -> dict:
        return {
            "identity": list(self.identity),
            "expression": list(self.expression),
            "mouth_open": self.mouth_open,
            "pose": list(self.pose),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaceParams":
        return cls(tuple(d["identity"]), tuple(d["expression"]), d["mouth_open"], tuple(d["pose"]))


def _ellipse(u, v, cx, cy, ax, ay):
    return ((u - cx) / ax) ** 2 + ((v - cy) / ay) ** 2 <= 1.0


def _rect(u, v, cx, cy, hx, hy):
    return (np.abs(u - cx) <= hx) & (np.abs(v - cy) <= hy)


def _capsule(u, v, p0, p1, r):
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((u - x0) * dx + (v - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return (u - x0 - t * dx) ** 2 + (v - y0 - t * dy) ** 2 <= r * r


def render_face(params: FaceParams, resolution: int = DEFAULT_RESOLUTION, index: int = 0,
                fps: float = DEFAULT_FPS) -> Frame:
    """Rasterise ``params`` into a grayscale frame with 4x4 supersampled coverage."""
    n = resolution * SUPERSAMPLE
    s = resolution / DEFAULT_RESOLUTION
    off = (np.arange(n) + 0.5) / SUPERSAMPLE - resolution / 2.0
    y, x = np.meshgrid(off, off, indexing="ij")
    dx, dy, rot = params.pose
    xr, yr = x - dx, y - dy
    c, sn = np.cos(rot), np.sin(rot)
    u = (c * xr + sn * yr) / s
    v = (-sn * xr + c * yr) / s

    ident, expr = params.identity, params.expression
    skin = 0.5 + 0.3 * ident[2]
    img = np.full((n, n), BACKGROUND, dtype=np.float64)

    head_ax, head_ay = 9.5 + 2.0 * ident[0], 13.5 - 1.5 * ident[0]
    img[_ellipse(u, v, HEAD_CENTER[0], HEAD_CENTER[1], head_ax, head_ay)] = skin

    img[_rect(u, v, 0.0, 0.1 + 0.65 * ident[3], 0.6, 1.1 + 0.65 * ident[3])] = skin - 0.15

    eye_x = 3.5 + 1.5 * ident[1]
    eye_h = 0.3 + 1.1 * (1.0 + expr[2]) / 2.0
    brow_y = BROW_Y - BROW_RAISE * expr[0]
    for side in (-1.0, 1.0):
        img[_ellipse(u, v, side * eye_x, EYE_Y, EYE_HALF_WIDTH, eye_h)] = 0.05
        img[_rect(u, v, side * eye_x, brow_y, *BROW_HALF)] = 0.2

    mcx, mcy = MOUTH_CENTER
    mouth_h = MOUTH_MIN_HALF_HEIGHT + MOUTH_OPEN_GAIN * params.mouth_open
    img[_ellipse(u, v, mcx, mcy, MOUTH_HALF_WIDTH, mouth_h)] = 0.02
    lift = CORNER_LIFT * expr[1]
    for side in (-1.0, 1.0):
        p0 = (mcx + side * CORNER_INNER_X, mcy)
        p1 = (mcx + side * CORNER_OUTER_X, mcy - lift)
        img[_capsule(u, v, p0, p1, CORNER_HALF_THICKNESS)] = 0.1

    img = img.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(1, 3))
    return Frame(np.clip(img, 0.0, 1.0).astype(np.float32), index=index, fps=fps, params=params)


def render_track(track: Sequence[FaceParams], resolution: int = DEFAULT_RESOLUTION,
                 fps: float = DEFAULT_FPS) -> FrameSequence:
    return FrameSequence([render_face(p, resolution, i, fps) for i, p in enumerate(track)], fps=fps)


# ---------------------------------------------------------------- curves and warps

@dataclass(frozen=True)
class Warp:
    """Monotone map from source time to target time through ``(src, tgt)`` knots."""

    knots: tuple[tuple[float, float], ...]
    interp: str = "linear"

    def __post_init__(self) -> None:
        k = np.asarray(self.knots, dtype=np.float64)
        if k.ndim != 2 or k.shape[1] != 2 or len(k) < 2:
            raise InputError("warp needs at least two (source, target) knots")
        if np.any(np.diff(k[:, 0]) <= 0) or np.any(np.diff(k[:, 1]) <= 0):
            raise InputError("warp knots must be strictly increasing in both coordinates")
        if abs(k[0, 0]) > 1e-12 or abs(k[0, 1]) > 1e-12:
            raise InputError("warp must start at (0, 0)")
        if self.interp not in ("linear", "pchip"):
            raise InputError(f"unknown warp interpolation {self.interp!r}")
        object.__setattr__(self, "knots", tuple((float(a), float(b)) for a, b in k))

    @property
    def source_end(self) -> float:
        return self.knots[-1][0]

    @property
    def target_end(self) -> float:
        return self.knots[-1][1]

    def _arrays(self):
        k = np.asarray(self.knots)
        return k[:, 0], k[:, 1]

    def __call__(self, t):
        src, tgt = self._arrays()
        t = np.clip(np.asarray(t, dtype=np.float64), 0.0, src[-1])
        if self.interp == "linear":
            return np.interp(t, src, tgt)
        return PchipInterpolator(src, tgt)(t)

    def inverse(self, u):
        src, tgt = self._arrays()
        u = np.clip(np.asarray(u, dtype=np.float64), 0.0, tgt[-1])
        if self.interp == "linear":
            return np.interp(u, tgt, src)
        grid = np.linspace(0.0, src[-1], 20001)
        return np.interp(u, self(grid), grid)


@dataclass
class UtteranceCurves:
    """Continuous-time generators behind an utterance's per-frame tracks."""

    env_times: np.ndarray
    env_values: np.ndarray
    pose_times: np.ndarray
    pose_values: np.ndarray  # (K, 3)
    time_map: Optional[Warp] = None  # maps this utterance's time back through ``inverse``

    def _local(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.time_map.inverse(t) if self.time_map is not None else t

    def envelope(self, t) -> np.ndarray:
        return np.clip(PchipInterpolator(self.env_times, self.env_values)(self._local(t)), 0.0, 1.0)

    def pose(self, t) -> np.ndarray:
        return PchipInterpolator(self.pose_times, self.pose_values, axis=0)(self._local(t))

    def retimed(self, warp: Warp) -> "UtteranceCurves":
        if self.time_map is not None:
            raise InputError("cannot re-time an already warped utterance")
        return UtteranceCurves(self.env_times, self.env_values, self.pose_times, self.pose_values, warp)

    def to_dict(self) -> dict:
        return {
            "env_times": self.env_times.tolist(),
            "env_values": self.env_values.tolist(),
            "pose_times": self.pose_times.tolist(),
            "pose_values": self.pose_values.tolist(),
            "warp": None if self.time_map is None else {"knots": [list(k) for k in self.time_map.knots],
                                                       "interp": self.time_map.interp},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UtteranceCurves":
        w = d.get("warp")
        return cls(
            np.asarray(d["env_times"]), np.asarray(d["env_values"]),
            np.asarray(d["pose_times"]), np.asarray(d["pose_values"]),
            None if w is None else Warp(tuple(map(tuple, w["knots"])), w["interp"]),
        )


@dataclass
class Utterance:
    audio: AudioClip
    video: FrameSequence
    params_track: list[FaceParams]
    emotion_label: str
    seed: int = 0
    curves: Optional[UtteranceCurves] = None
    f0: float = 0.0

    def __post_init__(self) -> None:
        if self.emotion_label not in EMOTIONS:
            raise InputError(f"unknown emotion {self.emotion_label!r}")
        if len(self.params_track) != len(self.video):
            raise InputError("params_track and video lengths differ")
        if abs(self.audio.duration - self.video.duration) > 0.5 / self.video.fps:
            raise InputError("audio and video durations differ by more than half a frame")

    @property
    def fps(self) -> float:
        return self.video.fps

    @property
    def identity(self) -> tuple[float, ...]:
        return self.params_track[0].identity

    @property
    def mouth_track(self) -> np.ndarray:
        return np.array([p.mouth_open for p in self.params_track])

    @property
    def pose_track(self) -> np.ndarray:
        return np.array([p.pose for p in self.params_track])


@dataclass
class PairedUtterance:
    source: Utterance
    target: Utterance
    true_correspondence: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.true_correspondence)
        if len(c) != len(self.source.video) or np.any(np.diff(c) < 0):
            raise InputError("true_correspondence must be total on source frames and non-decreasing")


def harmonic_audio(envelope: np.ndarray, f0: float, sample_rate: int, phases: Sequence[float],
                   noise_seed: int = 0) -> np.ndarray:
    """Amplitude-modulated carrier: harmonic tone plus seeded aspiration noise."""
    t = np.arange(len(envelope)) / sample_rate
    tone = sum(w * np.sin(2 * np.pi * (h + 1) * f0 * t + ph)
               for h, (w, ph) in enumerate(zip(HARMONIC_WEIGHTS, phases)))
    noise = np.random.default_rng(noise_seed).standard_normal(len(t)) / 3.0
    carrier = VOICING * tone + (1.0 - VOICING) * noise
    return np.clip(0.9 * envelope * carrier, -1.0, 1.0).astype(np.float32)


def _expression_for(emotion: str, rng: np.random.Generator) -> tuple[float, float, float]:
    base = np.asarray(CANONICAL_EXPRESSIONS[emotion])
    jitter = rng.uniform(-EXPRESSION_JITTER, EXPRESSION_JITTER, size=3)
    return tuple(np.clip(base + jitter, -1.0, 1.0).tolist())


def _assemble(curves: UtteranceCurves, identity, expression, emotion: str, n_frames: int, fps: float,
              sample_rate: int, resolution: int, f0: float, phases, seed: int) -> Utterance:
    times = np.arange(n_frames) / fps
    mouth = curves.envelope(times)
    poses = curves.pose(times)
    track = [FaceParams(identity, expression, float(m), tuple(p)) for m, p in zip(mouth, poses)]
    n_samples = int(round(n_frames * sample_rate / fps))
    env = curves.envelope(np.arange(n_samples) / sample_rate)
    audio = AudioClip(harmonic_audio(env, f0, sample_rate, phases, seed), sample_rate)
    return Utterance(audio, render_track(track, resolution, fps), track, emotion, seed, curves, f0)


def synth_utterance(duration: float = 2.0, emotion: str = "neutral", seed: int = 0,
                    resolution: int = DEFAULT_RESOLUTION, identity: Optional[Sequence[float]] = None,
                    fps: float = DEFAULT_FPS, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Utterance:
    if duration < 0.5:
        raise InputError("duration must be at least 0.5 s")
    if emotion not in EMOTIONS:
        raise InputError(f"unknown emotion {emotion!r}")
    rng = np.random.default_rng(seed)
    ident = tuple(rng.uniform(0.0, 1.0, 4).tolist()) if identity is None else tuple(identity)
    n_frames = int(round(duration * fps))
    span = n_frames / fps

    env_t = np.arange(0.0, span + ENVELOPE_KNOT_SPACING, ENVELOPE_KNOT_SPACING)
    env_v = rng.uniform(0.0, 1.0, len(env_t))
    pose_t = np.arange(0.0, span + POSE_KNOT_SPACING, POSE_KNOT_SPACING)
    pose_v = np.column_stack([
        rng.uniform(-POSE_SHIFT_RANGE, POSE_SHIFT_RANGE, len(pose_t)),
        rng.uniform(-POSE_SHIFT_RANGE, POSE_SHIFT_RANGE, len(pose_t)),
        rng.uniform(-POSE_ROT_RANGE, POSE_ROT_RANGE, len(pose_t)),
    ])
    expression = _expression_for(emotion, rng)
    phases = rng.uniform(0, 2 * np.pi, len(HARMONIC_WEIGHTS))
    curves = UtteranceCurves(env_t, env_v, pose_t, pose_v)
    return _assemble(curves, ident, expression, emotion, n_frames, fps, sample_rate, resolution,
                     BASE_PITCH[emotion], phases, seed)


def _as_warp(warp_knots, interp: str) -> Warp:
    return warp_knots if isinstance(warp_knots, Warp) else Warp(tuple(map(tuple, warp_knots)), interp)


def make_paired(source: Utterance, emotion: str, warp_knots, seed: int, interp: str = "linear") -> PairedUtterance:
    """Emotional twin of ``source``: same envelope and head motion re-timed through the warp."""
    if source.curves is None:
        raise InputError("source utterance carries no generator curves; synthesize it first")
    if emotion not in EMOTIONS:
        raise InputError(f"unknown emotion {emotion!r}")
    warp = _as_warp(warp_knots, interp)
    if abs(warp.source_end - source.video.duration) > 1e-9:
        raise InputError(f"warp must end at the source duration {source.video.duration}, got {warp.source_end}")
    rng = np.random.default_rng(seed)
    fps = source.fps
    n_frames = max(int(round(warp.target_end * fps)), 1)
    expression = _expression_for(emotion, rng)
    phases = rng.uniform(0, 2 * np.pi, len(HARMONIC_WEIGHTS))
    resolution = source.video.frames[0].shape[0]
    target = _assemble(source.curves.retimed(warp), source.identity, expression, emotion, n_frames, fps,
                       source.audio.sample_rate, resolution, BASE_PITCH[emotion], phases, seed)
    src_times = np.arange(len(source.video)) / fps
    corr = np.floor(warp(src_times) * fps + 0.5).astype(np.int64)
    corr = np.clip(corr, 0, n_frames - 1)
    return PairedUtterance(source, target, corr)


def random_warp(rng: np.random.Generator, duration: float, n_knots: int = 4, max_stretch: float = 0.3) -> Warp:
    """Smooth (PCHIP) warp with local slopes in [1 - max_stretch, 1 + max_stretch]."""
    src = np.linspace(0.0, duration, n_knots + 2)
    slopes = rng.uniform(1.0 - max_stretch, 1.0 + max_stretch, n_knots + 1)
    tgt = np.concatenate([[0.0], np.cumsum(slopes * np.diff(src))])
    return Warp(tuple(zip(src.tolist(), tgt.tolist())), "pchip")


# ---------------------------------------------------------------- on-disk corpus

CORR_MAGIC = b"THFCOR01"


def write_correspondence(path: Path | str, mapping: np.ndarray) -> None:
    """int32 little-endian array behind an 8-byte magic and a uint32 count."""
    arr = np.asarray(mapping, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(CORR_MAGIC + struct.pack("<I", len(arr)))
        fh.write(arr.tobytes())


def read_correspondence(path: Path | str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != CORR_MAGIC:
        raise InputError(f"{path}: not a correspondence file")
    (count,) = struct.unpack_from("<I", raw, 8)
    return np.frombuffer(raw, dtype="<i4", count=count, offset=12).astype(np.int64)


def _write_utterance(root: Path, uid: str, utt: Utterance) -> dict:
    paths = {"audio": f"{uid}.wav", "video": f"{uid}.f32seq", "meta": f"{uid}.json"}
    try:
        write_wav(root / paths["audio"], utt.audio)
        write_sequence(root / paths["video"], utt.video)
        meta = {
            "emotion": utt.emotion_label,
            "seed": utt.seed,
            "f0": utt.f0,
            "params_track": [p.to_dict() for p in utt.params_track],
            "curves": None if utt.curves is None else utt.curves.to_dict(),
        }
        (root / paths["meta"]).write_text(json.dumps(meta, sort_keys=True))
    except OSError as exc:
        raise ThfemError(f"failed writing utterance {uid} under {root}: {exc}") from exc
    return paths


def load_utterance(root: Path | str, record: dict) -> Utterance:
    root = Path(root)
    try:
        meta = json.loads((root / record["meta"]).read_text())
        track = [FaceParams.from_dict(d) for d in meta["params_track"]]
        video = read_sequence(root / record["video"], params=track)
        audio = read_wav(root / record["audio"])
    except OSError as exc:
        raise ThfemError(f"failed reading utterance {record.get('id')} under {root}: {exc}") from exc
    curves = None if meta["curves"] is None else UtteranceCurves.from_dict(meta["curves"])
    return Utterance(audio, video, track, meta["emotion"], meta["seed"], curves, meta["f0"])


def make_corpus(num_ids: int, utterances_per_id: int, emotions: Iterable[str], seed: int,
                out_dir: Path | str, duration: float = 2.0, resolution: int = DEFAULT_RESOLUTION,
                fps: float = DEFAULT_FPS, max_stretch: float = 0.3) -> Path:
    """Write a paired corpus and return the path of its line-delimited JSON manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ThfemError(f"cannot create corpus directory {out}: {exc}") from exc
    wanted = set(emotions)
    unknown = wanted - set(EMOTIONS)
    if unknown:
        raise InputError(f"unknown emotions {sorted(unknown)}")
    ordered = [e for e in EMOTIONS if e in wanted]

    rng = np.random.default_rng(seed)
    records = []
    for pid in range(num_ids):
        identity = tuple(rng.uniform(0.0, 1.0, 4).tolist())
        for u in range(utterances_per_id):
            uid = f"id{pid:02d}_u{u:02d}"
            src_seed = int(rng.integers(0, 2**31 - 1))
            source = synth_utterance(duration, "neutral", src_seed, resolution, identity, fps)
            rec = {"id": uid, "kind": "source", "identity": pid, "emotion": "neutral", "seed": src_seed}
            rec.update(_write_utterance(out, uid, source))
            records.append(rec)
            for emo in ordered:
                tid = f"{uid}_{emo}"
                pair_seed = int(rng.integers(0, 2**31 - 1))
                warp = random_warp(np.random.default_rng(pair_seed), source.video.duration,
                                   max_stretch=max_stretch)
                pair = make_paired(source, emo, warp, pair_seed)
                trec = {"id": tid, "kind": "target", "source": uid, "identity": pid, "emotion": emo,
                        "seed": pair_seed, "correspondence": f"{tid}.corr"}
                trec.update(_write_utterance(out, tid, pair.target))
                write_correspondence(out / trec["correspondence"], pair.true_correspondence)
                records.append(trec)
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    log.info("wrote corpus with %d records to %s", len(records), out)
    return manifest


@dataclass
class Corpus:
    root: Path
    records: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, manifest: Path | str) -> "Corpus":
        manifest = Path(manifest)
        if manifest.is_dir():
            manifest = manifest / "manifest.jsonl"
        try:
            lines = manifest.read_text().splitlines()
        except OSError as exc:
            raise ThfemError(f"cannot read corpus manifest {manifest}: {exc}") from exc
        return cls(manifest.parent, [json.loads(line) for line in lines if line.strip()])

    def sources(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "source"]

    def targets(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "target"]

    def utterance(self, record: dict) -> Utterance:
        return load_utterance(self.root, record)

    def pair(self, target_record: dict) -> PairedUtterance:
        src = next(r for r in self.records if r["id"] == target_record["source"])
        corr = read_correspondence(self.root / target_record["correspondence"])
        return PairedUtterance(self.utterance(src), self.utterance(target_record), corr)

    def pairs(self) -> Iterable[tuple[dict, PairedUtterance]]:
        for rec in self.targets():
            yield rec, self.pair(rec)
