"""Sync-expert and adjacent-frame generator training, windowed generation and chunked inference."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .alignment import PairedDataset
from .errors import CapabilityError, InputError, ThfemError, TrainingDivergedError
from .losses import (TERMS, LossWeights, PerceptualExtractor, SyncEpsilon, adversarial_from_probs,
                     perceptual_loss, pixel_loss, sync_cosine, sync_loss, weighted_objective)
from .media import AudioClip, Frame, FrameSequence, MelConfig, MelSpectrogram, compute_mel, mel_span
from .models import Discriminator, DiscConfig, SyncConfig, SyncExpert, ThgConfig, ThgModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdjacentWindowConfig:
    n: int = 5
    fps: float = 25.0
    mel: MelConfig = MelConfig()

    def __post_init__(self) -> None:
        if self.n < 1:
            raise InputError("window length n must be >= 1")

    @property
    def mel_cols(self) -> int:
        return mel_span(self.mel, 0, self.n, self.fps)[1]


@contextlib.contextmanager
def single_thread():
    """Pin torch to one intra-op thread for bitwise-reproducible training."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


# ---------------------------------------------------------------- generation

def _to_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def generate_n(model: ThgModel, reference: Frame, mel_win: MelSpectrogram, pose_win, n: int) -> FrameSequence:
    """n frames following ``reference``, driven by the mel window and poses of those frames."""
    pose = np.asarray(pose_win, dtype=np.float32)
    if pose.shape != (n, 3):
        raise InputError(f"pose window must be ({n}, 3), got {pose.shape}")
    if reference.shape[:2] != (model.config.resolution, model.config.resolution):
        raise InputError(f"model generates {model.config.resolution}px frames, reference is {reference.shape[:2]}")
    model.eval()
    with torch.no_grad():
        out = model(_to_tensor(reference.gray())[None, None], _to_tensor(mel_win.columns)[None], _to_tensor(pose)[None])
    frames = out[0, :, 0].numpy()
    return FrameSequence([Frame(f, k, reference.fps) for k, f in enumerate(frames)], fps=reference.fps)


def _frame_pose(frame: Frame) -> np.ndarray:
    if frame.params is None or not hasattr(frame.params, "pose"):
        raise CapabilityError(f"frame {frame.index} carries no pose; pass poses explicitly")
    return np.asarray(frame.params.pose, dtype=np.float32)


def infer_video(model: ThgModel, fem_frames: FrameSequence, audio: AudioClip, n: int,
                poses: Optional[np.ndarray] = None, reference_log: Optional[list] = None,
                batch_size: int = 32) -> FrameSequence:
    """Chunked generation: chunk k takes FEM frame k*n and emits frames k*n+1 .. k*n+n.

    Output frame 0 is the FEM frame itself. The last chunk is generated at full
    length and truncated; its mel and pose windows are padded past the end of
    the clip (mel with the floor value, pose by repeating the last pose).
    """
    length = len(fem_frames)
    if length < 1:
        raise InputError("need at least one FEM frame")
    if n < 1:
        raise InputError("n must be >= 1")
    fps = fem_frames.fps
    if audio.duration < length / fps - 0.5 / fps:
        raise InputError(f"audio ({audio.duration:.3f}s) is shorter than the video ({length / fps:.3f}s)")
    cfg = model.config.mel
    if poses is None:
        poses = np.stack([_frame_pose(f) for f in fem_frames.frames])
    poses = np.asarray(poses, dtype=np.float32)
    if len(poses) != length:
        raise InputError("poses must have one row per frame")

    n_chunks = math.ceil((length - 1) / n)
    if n_chunks == 0:
        return FrameSequence([fem_frames[0]], fps=fps)
    mel = compute_mel(audio, cfg).columns
    _, width = mel_span(cfg, 0, n, fps)
    last_start = mel_span(cfg, (n_chunks - 1) * n, n, fps)[0] if n_chunks else 0
    pad_cols = max(0, last_start + width - mel.shape[1])
    if pad_cols:
        mel = np.concatenate([mel, np.full((mel.shape[0], pad_cols), cfg.db_floor, np.float32)], 1)
    pose_pad = np.concatenate([poses, np.repeat(poses[-1:], n, 0)], 0)

    refs, mels, pws = [], [], []
    for k in range(n_chunks):
        i = k * n
        if reference_log is not None:
            reference_log.append(i)
        start, _ = mel_span(cfg, i, n, fps)
        refs.append(fem_frames[i].gray())
        mels.append(mel[:, start:start + width])
        pws.append(pose_pad[i + 1:i + 1 + n])

    generated = []
    model.eval()
    with torch.no_grad():
        for b in range(0, n_chunks, batch_size):
            out = model(_to_tensor(np.stack(refs[b:b + batch_size]))[:, None],
                        _to_tensor(np.stack(mels[b:b + batch_size])),
                        _to_tensor(np.stack(pws[b:b + batch_size])))
            generated.append(out[:, :, 0].reshape(-1, *out.shape[-2:]).numpy())
    frames = [fem_frames[0]]
    if generated:
        flat = np.concatenate(generated)[:length - 1]
        frames += [Frame(f, idx + 1, fps) for idx, f in enumerate(flat)]
    return FrameSequence(frames, fps=fps)


# ---------------------------------------------------------------- sync expert

@dataclass
class SyncWindows:
    """Per-utterance grayscale frames and mel columns, indexed by window start frame."""

    frames: list[np.ndarray]
    mels: list[np.ndarray]
    n: int
    fps: float
    mel_config: MelConfig
    index: np.ndarray = field(init=False)  # (K, 2): utterance, start frame

    def __post_init__(self) -> None:
        start_cols = lambda s: mel_span(self.mel_config, s - 1, self.n, self.fps)  # noqa: E731
        idx = []
        for u, (fr, me) in enumerate(zip(self.frames, self.mels)):
            for s in range(len(fr) - self.n + 1):
                c0, w = start_cols(s)
                if c0 + w <= me.shape[1]:
                    idx.append((u, s))
        self.index = np.asarray(idx, dtype=np.int64).reshape(-1, 2)

    @classmethod
    def from_utterances(cls, utterances: Iterable, n: int = 5, mel_config: MelConfig = MelConfig()) -> "SyncWindows":
        frames, mels, fps = [], [], 25.0
        for utt in utterances:
            fps = utt.fps
            frames.append(utt.video.as_array()[..., 0])
            mels.append(compute_mel(utt.audio, mel_config).columns)
        return cls(frames, mels, n, fps, mel_config)

    def __len__(self) -> int:
        return len(self.index)

    def mel_at(self, u: int, s: int) -> np.ndarray:
        c0, w = mel_span(self.mel_config, s - 1, self.n, self.fps)
        return self.mels[u][:, c0:c0 + w]

    def video_at(self, u: int, s: int) -> np.ndarray:
        return self.frames[u][s:s + self.n]

    def negative_start(self, rng: np.random.Generator, u: int, s: int) -> Optional[int]:
        """A start frame of the same utterance shifted by at least n frames."""
        starts = self.index[self.index[:, 0] == u, 1]
        far = starts[np.abs(starts - s) >= self.n]
        if len(far) == 0:
            return None
        return int(rng.choice(far))

    def batch(self, rows: np.ndarray, rng: np.random.Generator):
        video, pos, neg = [], [], []
        for u, s in self.index[rows]:
            ns = self.negative_start(rng, int(u), int(s))
            if ns is None:
                continue
            video.append(self.video_at(u, s))
            pos.append(self.mel_at(u, s))
            neg.append(self.mel_at(u, ns))
        if not video:
            raise InputError("utterances too short for negatives shifted by n frames")
        return _to_tensor(np.stack(video)), _to_tensor(np.stack(pos)), _to_tensor(np.stack(neg))


def _utterances_of(corpus) -> list:
    if hasattr(corpus, "records"):
        return [corpus.utterance(r) for r in corpus.records]
    return list(corpus)


def contrastive_sync_loss(v: torch.Tensor, s_pos: torch.Tensor, s_neg: torch.Tensor,
                          eps: SyncEpsilon = SyncEpsilon()) -> torch.Tensor:
    pos = sync_cosine(v, s_pos, eps)
    neg = sync_cosine(v, s_neg, eps)
    return -torch.log(pos).mean() - torch.log(torch.clamp(1.0 - neg, min=eps.ratio)).mean()


def sync_separation(expert: SyncExpert, windows: SyncWindows, seed: int = 0) -> float:
    """Mean positive cosine minus mean negative cosine over every window."""
    rng = np.random.default_rng(seed)
    expert.eval()
    pos_c, neg_c = [], []
    with torch.no_grad():
        for b in range(0, len(windows), 256):
            video, pos, neg = windows.batch(np.arange(b, min(b + 256, len(windows))), rng)
            v = expert.embed_video(video)
            pos_c.append((v * expert.embed_audio(pos)).sum(-1))
            neg_c.append((v * expert.embed_audio(neg)).sum(-1))
    return float(torch.cat(pos_c).mean() - torch.cat(neg_c).mean())


def train_sync_expert(corpus, epochs: int = 6, seed: int = 0, n: int = 5, batch_size: int = 64,
                      lr: float = 1e-3, config: Optional[SyncConfig] = None,
                      windows: Optional[SyncWindows] = None) -> SyncExpert:
    """Contrastive training: true mel windows are positives, same-utterance shifts of >= n frames negatives."""
    cfg = config or SyncConfig(n=n)
    if windows is None:
        windows = SyncWindows.from_utterances(_utterances_of(corpus), cfg.n, cfg.mel)
    if len(windows) < 2:
        raise InputError(f"corpus yields {len(windows)} sync windows; need at least 2")
    if windows.frames[0].shape[-1] != cfg.resolution:
        cfg = SyncConfig(**{**cfg.__dict__, "resolution": windows.frames[0].shape[-1]})
    torch.manual_seed(seed)
    expert = SyncExpert(cfg)
    opt = torch.optim.Adam(expert.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    expert.train()
    for epoch in range(epochs):
        order = rng.permutation(len(windows))
        total, count = 0.0, 0
        for b in range(0, len(order), batch_size):
            video, pos, neg = windows.batch(order[b:b + batch_size], rng)
            v = expert.embed_video(video)
            loss = contrastive_sync_loss(v, expert.embed_audio(pos), expert.embed_audio(neg))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, {"sync_expert": float(loss)})
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            count += 1
        log.info("sync expert epoch %d loss %.4f", epoch, total / max(count, 1))
    expert.eval()
    for p in expert.parameters():
        p.requires_grad_(False)
    return expert


# ---------------------------------------------------------------- adjacent-frame training

HISTORY_COLUMNS = ("step", *TERMS, "total")


@dataclass
class LossHistory:
    rows: list[dict] = field(default_factory=list)
    disc_steps: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, step: int, terms: dict[str, float], total: float) -> None:
        self.rows.append({"step": step, **{k: float(terms[k]) for k in TERMS}, "total": float(total)})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path: Path | str) -> None:
        try:
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
                w.writeheader()
                for r in self.rows:
                    w.writerow({k: (r[k] if k == "step" else repr(r[k])) for k in HISTORY_COLUMNS})
        except OSError as exc:
            raise ThfemError(f"cannot write loss history {path}: {exc}") from exc

    @classmethod
    def from_csv(cls, path: Path | str) -> "LossHistory":
        with open(path, newline="") as fh:
            rows = [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
        return cls(rows)


def _expert_chunks(n: int, n_expert: int) -> list[int]:
    return [k * n_expert for k in range(n // n_expert)]


def _sync_term(expert: SyncExpert, fake: torch.Tensor, mel: torch.Tensor, origin_idx: np.ndarray,
               window: AdjacentWindowConfig) -> torch.Tensor:
    """Sync loss over every complete expert window inside the generated n frames."""
    ne = expert.config.n
    chunks = _expert_chunks(window.n, ne)
    if not chunks:
        return fake.new_zeros(())
    ew = expert.mel_width
    vids, mels = [], []
    for off in chunks:
        vids.append(fake[:, off:off + ne, 0])
        rows = []
        for b, i in enumerate(origin_idx):
            base = mel_span(window.mel, int(i), window.n, window.fps)[0]
            c0 = mel_span(window.mel, int(i) + off, ne, window.fps)[0] - base
            c0 = min(c0, mel.shape[-1] - ew)
            rows.append(mel[b, :, c0:c0 + ew])
        mels.append(torch.stack(rows))
    v = expert.embed_video(torch.cat(vids))
    s = expert.embed_audio(torch.cat(mels))
    return sync_loss(v, s)


@dataclass
class TrainState:
    model: ThgModel
    history: LossHistory
    discriminator: Optional[Discriminator] = None


def train_adjacent(model: ThgModel, dataset: PairedDataset, expert: SyncExpert,
                   weights: LossWeights = LossWeights(), epochs: int = 1, seed: int = 0,
                   batch_size: int = 16, lr: float = 1e-4, disc_lr: Optional[float] = None,
                   grad_clip: float = 1.0, max_steps: Optional[int] = None,
                   perceptual: Optional[PerceptualExtractor] = None,
                   discriminator: Optional[Discriminator] = None,
                   shuffle: bool = True) -> TrainState:
    """Alternating discriminator / generator updates on the paired dataset.

    One discriminator step precedes every generator step; it is skipped
    entirely when the adversarial weight is zero. Every generator step records
    all four loss terms, including those whose weight is zero.
    """
    if len(dataset) == 0:
        raise InputError("empty paired dataset")
    window = AdjacentWindowConfig(dataset.n, dataset.fps, dataset.mel_config)
    if model.mel_width(window.n) != dataset.mel.shape[-1]:
        raise InputError("dataset mel windows do not match the model's mel configuration")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    perceptual = perceptual or PerceptualExtractor(seed=0)
    disc = discriminator or Discriminator(DiscConfig(resolution=model.config.resolution))
    expert.eval()
    for p in expert.parameters():
        p.requires_grad_(False)
    g_opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.5, 0.999))
    d_opt = torch.optim.Adam(disc.parameters(), lr=disc_lr or lr, betas=(0.5, 0.999))
    use_adv = weights.adversarial > 0
    history = LossHistory()

    inputs = _to_tensor(dataset.inputs)[:, None]
    targets = _to_tensor(dataset.targets)[:, :, None]
    mels = _to_tensor(dataset.mel)
    poses = _to_tensor(dataset.pose)
    origin = dataset.origin[:, 1]

    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total_steps = epochs * steps_per_epoch if max_steps is None else max_steps
    step = 0
    model.train()
    disc.train()
    while step < total_steps:
        order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
        for b in range(0, len(order), batch_size):
            if step >= total_steps:
                break
            idx = order[b:b + batch_size]
            ref, tgt, mel, pose = inputs[idx], targets[idx], mels[idx], poses[idx]
            fake = model(ref, mel, pose)
            real_flat = tgt.reshape(-1, *tgt.shape[2:])
            fake_flat = fake.reshape(-1, *fake.shape[2:])

            if use_adv:
                d_loss, _ = adversarial_from_probs(disc(real_flat), disc(fake_flat.detach()))
                d_opt.zero_grad()
                d_loss.backward()
                torch.nn.utils.clip_grad_norm_(disc.parameters(), grad_clip)
                d_opt.step()
                history.disc_steps += 1
                g_adv = -torch.log(disc(fake_flat)).mean()
            else:
                with torch.no_grad():
                    g_adv = -torch.log(disc(fake_flat)).mean()

            terms = {
                "sync": _sync_term(expert, fake, mel, origin[idx], window),
                "pixel": pixel_loss(fake, tgt),
                "perceptual": perceptual_loss(fake_flat, real_flat, perceptual),
                "adversarial": g_adv,
            }
            values = {k: float(v.detach()) for k, v in terms.items()}
            total = weighted_objective(terms, weights)
            if not all(math.isfinite(v) for v in values.values()) or not math.isfinite(float(total.detach())):
                raise TrainingDivergedError(step, {**values, "total": float(total.detach())})
            g_opt.zero_grad()
            if total.requires_grad:
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
                g_opt.step()
            history.append(step, values, float(total.detach()))
            step += 1
        if step and step % steps_per_epoch == 0:
            r = history.rows[-1]
            log.info("step %d total %.4f pixel %.4f sync %.4f", step, r["total"], r["pixel"], r["sync"])
    model.eval()
    return TrainState(model, history, disc)


def new_model(resolution: int = 32, width: int = 16, fps: float = 25.0, mel: MelConfig = MelConfig(),
              seed: int = 0) -> ThgModel:
    torch.manual_seed(seed)
    return ThgModel(ThgConfig(resolution=resolution, width=width, fps=fps, mel=mel))
