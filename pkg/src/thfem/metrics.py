"""Fréchet embedding distance, expression cosine similarity and lip-sync distance, plus report tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapabilityError, InputError, ThfemError
from .media import AudioClip, Frame, FrameSequence, compute_mel, mel_span
from .models import SyncExpert

log = logging.getLogger(__name__)

COV_RIDGE = 1e-6


# ---------------------------------------------------------------- Fréchet distance

@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = len(self.mean)
        if self.covariance.shape != (d, d):
            raise InputError(f"covariance shape {self.covariance.shape} does not match mean dimension {d}")
        if np.max(np.abs(self.covariance - self.covariance.T), initial=0.0) > 1e-10:
            raise InputError("covariance is not symmetric")
        if self.count < 2:
            raise InputError("Gaussian statistics need at least two samples")

    @property
    def dim(self) -> int:
        return len(self.mean)

    @classmethod
    def from_samples(cls, x: np.ndarray, ridge: float = COV_RIDGE) -> "GaussianStats":
        """Unbiased covariance of rows of ``x`` plus ``ridge * I``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise InputError("need a (count >= 2, dim) sample matrix")
        c = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
        c = 0.5 * (c + c.T) + ridge * np.eye(x.shape[1])
        return cls(x.mean(0), c, len(x))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the root is taken from the eigenvalues of the symmetric
    product ``S_a^(1/2) S_b S_a^(1/2)``, which shares its spectrum with
    ``S_a S_b``; negative eigenvalues from round-off are clipped to zero.
    """
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    ra = _psd_sqrt(a.covariance)
    m = ra @ b.covariance @ ra
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    tr_root = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    d = float(diff @ diff) + float(np.trace(a.covariance) + np.trace(b.covariance)) - 2.0 * tr_root
    return max(d, 0.0)


# ---------------------------------------------------------------- embedders

FrameLike = Union[Frame, FrameSequence, np.ndarray]


def _as_stack(x: FrameLike) -> np.ndarray:
    """Frames -> (T, H, W) float array."""
    if isinstance(x, Frame):
        return x.gray()[None]
    if isinstance(x, FrameSequence):
        return x.as_array().mean(-1)
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 4:
        return arr.mean(-1)
    return arr


class Embedder(Protocol):
    kind: str
    dim: int

    def embed(self, frames: FrameLike) -> np.ndarray: ...


class RandomProjectionEmbedder:
    """Seeded Gaussian projection of flattened frames."""

    kind = "face"

    def __init__(self, resolution: int, dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.resolution = resolution
        self.dim = dim
        self.weight = rng.standard_normal((resolution * resolution, dim)) / math.sqrt(resolution * resolution)

    def embed(self, frames: FrameLike) -> np.ndarray:
        x = _as_stack(frames)
        if x.shape[1:] != (self.resolution, self.resolution):
            raise InputError(f"embedder expects {self.resolution}px frames, got {x.shape[1:]}")
        return x.reshape(len(x), -1).astype(np.float64) @ self.weight


def homogeneous(expr: np.ndarray) -> np.ndarray:
    """Append a constant 1 so the neutral expression still has a direction."""
    expr = np.atleast_2d(np.asarray(expr, dtype=np.float64))
    return np.concatenate([expr, np.ones((len(expr), 1))], 1)


class OracleExpressionEmbedder:
    """Reads the ground-truth expression carried by rendered frames."""

    kind = "expression"
    dim = 4

    def embed(self, frames: FrameLike) -> np.ndarray:
        if isinstance(frames, Frame):
            frames = [frames]
        elif isinstance(frames, FrameSequence):
            frames = frames.frames
        else:
            raise CapabilityError("the oracle expression embedder needs frames carrying face parameters")
        out = []
        for f in frames:
            if f.params is None or not hasattr(f.params, "expression"):
                raise CapabilityError(f"frame {f.index} carries no face parameters")
            out.append(f.params.expression)
        return homogeneous(np.asarray(out))


class _ExpressionNet(nn.Module):
    def __init__(self, resolution: int, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Flatten(),
            nn.Linear(4 * width * (resolution // 8) ** 2, 64), nn.LeakyReLU(0.2),
            nn.Linear(64, 3),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.net(x))


def _random_face_batch(rng: np.random.Generator, count: int, resolution: int):
    from .synth import CANONICAL_EXPRESSIONS, FaceParams, render_face

    canon = np.array(list(CANONICAL_EXPRESSIONS.values()))
    imgs, exprs = [], []
    for _ in range(count):
        # half near the canonical emotions, half anywhere in the cube
        if rng.random() < 0.5:
            e = canon[rng.integers(len(canon))] + rng.normal(0.0, 0.1, 3)
        else:
            e = rng.uniform(-1.0, 1.0, 3)
        e = np.clip(e, -1.0, 1.0)
        p = FaceParams(
            identity=tuple(rng.uniform(0.0, 1.0, 4)),
            expression=tuple(e),
            mouth_open=float(rng.uniform(0.0, 1.0)),
            pose=(float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-0.06, 0.06))),
        )
        imgs.append(render_face(p, resolution).gray())
        exprs.append(e)
    return np.stack(imgs).astype(np.float32), np.stack(exprs).astype(np.float32)


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # blur of random strength plus pixel noise, so generated frames stay in-distribution
    k = torch.tensor([1.0, 2.0, 1.0]) / 4.0
    kernel = (k[:, None] * k[None, :])[None, None]
    blurred = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel)
    mix = torch.rand(len(x), 1, 1, 1, generator=gen)
    noise = torch.randn(x.shape, generator=gen) * 0.03 * torch.rand(len(x), 1, 1, 1, generator=gen)
    return (mix * blurred + (1 - mix) * x + noise).clamp(0.0, 1.0)


class PixelExpressionEmbedder:
    """Small CNN regressing the expression code from pixels, trained on seeded random renders.

    Used where frames carry no parameters, e.g. generated video.
    """

    kind = "expression"
    dim = 4

    def __init__(self, resolution: int = 32, seed: int = 0, samples: int = 4000, epochs: int = 12,
                 batch_size: int = 64, lr: float = 2e-3):
        self.resolution = resolution
        rng = np.random.default_rng(seed)
        imgs, exprs = _random_face_batch(rng, samples, resolution)
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        self.net = _ExpressionNet(resolution)
        opt = torch.optim.Adam(self.net.parameters(), lr=lr)
        x_all = torch.from_numpy(imgs)[:, None]
        y_all = torch.from_numpy(exprs)
        for _ in range(epochs):
            order = torch.randperm(len(x_all), generator=gen)
            for b in range(0, len(order), batch_size):
                idx = order[b:b + batch_size]
                loss = F.mse_loss(self.net(_augment(x_all[idx], gen)), y_all[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.net.eval()
        with torch.no_grad():
            self.train_error = float((self.net(x_all) - y_all).abs().mean())

    def predict(self, frames: FrameLike) -> np.ndarray:
        x = _as_stack(frames)
        if x.shape[1:] != (self.resolution, self.resolution):
            raise InputError(f"embedder expects {self.resolution}px frames, got {x.shape[1:]}")
        with torch.no_grad():
            return self.net(torch.from_numpy(x.astype(np.float32))[:, None]).numpy().astype(np.float64)

    def embed(self, frames: FrameLike) -> np.ndarray:
        return homogeneous(self.predict(frames))


# ---------------------------------------------------------------- CSIM

@dataclass
class CsimResult:
    value: float
    zero_norm: int = 0


def csim_embeddings(gen: np.ndarray, ref: np.ndarray) -> CsimResult:
    """Mean cosine similarity of matched rows; zero-norm rows count as 0."""
    gen = np.atleast_2d(np.asarray(gen, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    if gen.shape != ref.shape:
        raise InputError(f"embedding shapes differ: {gen.shape} vs {ref.shape}")
    ng = np.linalg.norm(gen, axis=1)
    nr = np.linalg.norm(ref, axis=1)
    ok = (ng > 0) & (nr > 0)
    cos = np.zeros(len(gen))
    cos[ok] = (gen[ok] * ref[ok]).sum(1) / (ng[ok] * nr[ok])
    zero = int((~ok).sum())
    if zero:
        log.warning("%d zero-norm expression embeddings scored as similarity 0", zero)
    return CsimResult(float(np.clip(cos.mean(), -1.0, 1.0)), zero)


def nearest_indices(n_gen: int, fps_gen: float, n_ref: int, fps_ref: float) -> np.ndarray:
    """Index of the reference frame nearest in time to each generated frame."""
    t = np.arange(n_gen) / fps_gen
    return np.clip(np.floor(t * fps_ref + 0.5).astype(np.int64), 0, n_ref - 1)


def csim(generated: FrameSequence, reference: FrameSequence, embedder: Embedder) -> float:
    return csim_detail(generated, reference, embedder).value


def csim_detail(generated: FrameSequence, reference: FrameSequence, embedder: Embedder) -> CsimResult:
    if len(generated) == 0 or len(reference) == 0:
        raise InputError("csim needs non-empty sequences")
    eg = embedder.embed(generated)
    er = embedder.embed(reference)
    idx = nearest_indices(len(generated), generated.fps, len(reference), reference.fps)
    return csim_embeddings(eg, er[idx])


# ---------------------------------------------------------------- LSE-D

def lse_d(video: FrameSequence, audio: AudioClip, expert: SyncExpert, n: Optional[int] = None) -> float:
    """Mean ``|v - s|`` over every n-frame window (stride 1) of unit expert embeddings."""
    n = expert.config.n if n is None else n
    if n != expert.config.n:
        raise InputError(f"the sync expert scores {expert.config.n}-frame windows, not {n}")
    if len(video) < n:
        raise InputError(f"video has {len(video)} frames, shorter than the {n}-frame window")
    fps = video.fps
    if abs(audio.duration - len(video) / fps) > 0.5 / fps:
        raise InputError(f"audio ({audio.duration:.3f}s) and video ({len(video) / fps:.3f}s) durations differ")
    cfg = expert.config.mel
    mel = compute_mel(audio, cfg).columns
    frames = video.as_array().mean(-1)
    starts = range(len(video) - n + 1)
    spans = [mel_span(cfg, s - 1, n, fps) for s in starts]
    need = max(c0 + w for c0, w in spans)
    if need > mel.shape[1]:
        mel = np.concatenate([mel, np.full((mel.shape[0], need - mel.shape[1]), cfg.db_floor, np.float32)], 1)
    vids = np.stack([frames[s:s + n] for s in starts]).astype(np.float32)
    mels = np.stack([mel[:, c0:c0 + w] for c0, w in spans]).astype(np.float32)
    expert.eval()
    with torch.no_grad():
        v = expert.embed_video(torch.from_numpy(vids))
        s = expert.embed_audio(torch.from_numpy(mels))
    return float((v - s).norm(dim=-1).mean())


# ---------------------------------------------------------------- reports

METRIC_COLUMNS = ("emotion", "FAD", "LSE-D", "CSIM")


@dataclass
class MetricRow:
    emotion: str
    fad: float
    lse_d: float
    csim: float
    present: bool = True

    def values(self) -> tuple[float, float, float]:
        return (self.fad, self.lse_d, self.csim)


def _fmt(x: float) -> str:
    return "" if not math.isfinite(x) else f"{x:.6f}"


@dataclass
class MetricReport:
    setting: str
    rows: list[MetricRow]
    average: MetricRow = field(init=False)

    def __post_init__(self) -> None:
        present = [r for r in self.rows if r.present]
        if not present:
            raise InputError("report has no emotion rows with data")
        means = np.mean([r.values() for r in present], axis=0)
        self.average = MetricRow("Avg.", *map(float, means))

    @property
    def all_rows(self) -> list[MetricRow]:
        return [*self.rows, self.average]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.all_rows:
            w.writerow([r.emotion, *(_fmt(v) if r.present else "absent" for v in r.values())])
        return buf.getvalue()

    def to_json(self) -> str:
        def row(r: MetricRow) -> dict:
            vals = {k: (round(v, 6) if r.present and math.isfinite(v) else None)
                    for k, v in zip(METRIC_COLUMNS[1:], r.values())}
            return {"emotion": r.emotion, "present": r.present, **vals}
        return json.dumps({"setting": self.setting, "rows": [row(r) for r in self.all_rows]},
                          indent=1, sort_keys=True) + "\n"

    def write(self, out_dir: Path | str, stem: Optional[str] = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        stem = stem or f"report_{self.setting}"
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{stem}.csv").write_text(self.to_csv())
            (out / f"{stem}.json").write_text(self.to_json())
        except OSError as exc:
            raise ThfemError(f"cannot write report to {out}: {exc}") from exc
        return out / f"{stem}.csv", out / f"{stem}.json"

    @classmethod
    def from_csv(cls, text: str, setting: str) -> "MetricReport":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            if r["emotion"] == "Avg.":
                continue
            present = r["FAD"] != "absent"
            vals = [float(r[k]) if present else math.nan for k in METRIC_COLUMNS[1:]]
            rows.append(MetricRow(r["emotion"], *vals, present=present))
        return cls(setting, rows)


@dataclass
class EvalItem:
    """One evaluated video: generated frames, the emotional reference video,
    the real frames it is compared against for FAD, and the driving audio."""

    generated: FrameSequence
    reference: FrameSequence
    real: FrameSequence
    audio: AudioClip


def evaluate(outputs: dict[str, Sequence[EvalItem]], emotions: Sequence[str], face_embedder: Embedder,
             expression_embedder: Embedder, expert: SyncExpert, setting: str) -> MetricReport:
    """Per-emotion FAD over pooled frames, mean LSE-D and mean CSIM over videos."""
    rows = []
    for emo in emotions:
        items = list(outputs.get(emo, ()))
        if not items:
            log.warning("emotion %s has no outputs; row marked absent", emo)
            rows.append(MetricRow(emo, math.nan, math.nan, math.nan, present=False))
            continue
        gen = np.concatenate([face_embedder.embed(it.generated) for it in items])
        real = np.concatenate([face_embedder.embed(it.real) for it in items])
        fad = frechet_distance(GaussianStats.from_samples(gen), GaussianStats.from_samples(real))
        sync = float(np.mean([lse_d(it.generated, it.audio, expert) for it in items]))
        sim = float(np.mean([csim(it.generated, it.reference, expression_embedder) for it in items]))
        rows.append(MetricRow(emo, fad, sync, sim))
    return MetricReport(setting, rows)
