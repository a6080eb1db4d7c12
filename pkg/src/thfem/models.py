"""Networks of the talking-head stage and their checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, ThfemError
from .media import MelConfig, mel_span

POSE_SCALE = (1.5, 1.5, 0.06)
REF_CLAMP = 1e-3


def normalize_mel(db: torch.Tensor, db_floor: float) -> torch.Tensor:
    return (db - db_floor) / (-db_floor)


def mouth_crop(frames: torch.Tensor) -> torch.Tensor:
    """Lower half of each frame: (..., H, W) -> (..., H // 2, W)."""
    h = frames.shape[-2]
    return frames[..., h // 2:, :]


@dataclass
class ThgConfig:
    resolution: int = 32
    width: int = 16
    audio_dim: int = 32
    pose_dim: int = 16
    audio_hidden: int = 64
    fps: float = 25.0
    mel: MelConfig = field(default_factory=MelConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mel"] = asdict(self.mel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ThgConfig":
        d = dict(d)
        d["mel"] = MelConfig(**d["mel"])
        return cls(**d)


def _act() -> nn.Module:
    return nn.LeakyReLU(0.2)


class AudioEncoder(nn.Module):
    """Mel window (B, n_mels, W) -> per-frame features (B, n, audio_dim)."""

    def __init__(self, n_mels: int, hidden: int, out_dim: int, db_floor: float):
        super().__init__()
        self.db_floor = db_floor
        self.net = nn.Sequential(
            nn.Conv1d(n_mels, hidden, 3, padding=1), _act(),
            nn.Conv1d(hidden, hidden, 3, padding=1), _act(),
        )
        self.proj = nn.Linear(hidden, out_dim)

    def forward(self, mel: torch.Tensor, n: int) -> torch.Tensor:
        h = self.net(normalize_mel(mel, self.db_floor))
        h = F.adaptive_avg_pool1d(h, n)  # n contiguous column groups
        return self.proj(h.transpose(1, 2))


class PoseEncoder(nn.Module):
    def __init__(self, out_dim: int):
        super().__init__()
        self.register_buffer("scale", torch.tensor(POSE_SCALE))
        self.net = nn.Sequential(nn.Linear(3, out_dim), _act(), nn.Linear(out_dim, out_dim))

    def forward(self, pose: torch.Tensor) -> torch.Tensor:
        return self.net(pose / self.scale)


class ImageEncoder(nn.Module):
    """Reference frame -> skip features at full, 1/2, 1/4 and 1/8 resolution."""

    def __init__(self, w: int):
        super().__init__()
        self.e1 = nn.Sequential(nn.Conv2d(1, w, 3, 1, 1), _act())
        self.e2 = nn.Sequential(nn.Conv2d(w, 2 * w, 4, 2, 1), _act())
        self.e3 = nn.Sequential(nn.Conv2d(2 * w, 4 * w, 4, 2, 1), _act())
        self.e4 = nn.Sequential(nn.Conv2d(4 * w, 4 * w, 4, 2, 1), _act())

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        f1 = self.e1(x)
        f2 = self.e2(f1)
        f3 = self.e3(f2)
        return [f1, f2, f3, self.e4(f3)]


class Generator(nn.Module):
    """U-Net decoder; the per-frame audio/pose code is broadcast into every scale."""

    def __init__(self, w: int, cond: int):
        super().__init__()
        self.d4 = nn.Sequential(nn.Conv2d(4 * w + cond, 4 * w, 3, 1, 1), _act())
        self.u3 = nn.ConvTranspose2d(4 * w, 4 * w, 4, 2, 1)
        self.d3 = nn.Sequential(nn.Conv2d(8 * w + cond, 2 * w, 3, 1, 1), _act())
        self.u2 = nn.ConvTranspose2d(2 * w, 2 * w, 4, 2, 1)
        self.d2 = nn.Sequential(nn.Conv2d(4 * w + cond, w, 3, 1, 1), _act())
        self.u1 = nn.ConvTranspose2d(w, w, 4, 2, 1)
        self.d1 = nn.Sequential(nn.Conv2d(2 * w + cond, w, 3, 1, 1), _act())
        self.out = nn.Conv2d(w, 1, 3, 1, 1)

    @staticmethod
    def _with(x: torch.Tensor, *extra: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        c = cond[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        return torch.cat([x, *extra, c], 1)

    def forward(self, feats: list[torch.Tensor], cond: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
        """``base`` holds reference logits; the decoder predicts a correction to them."""
        f1, f2, f3, f4 = feats
        h = self.d4(self._with(f4, cond=cond))
        h = self.d3(self._with(self.u3(h), f3, cond=cond))
        h = self.d2(self._with(self.u2(h), f2, cond=cond))
        h = self.d1(self._with(self.u1(h), f1, cond=cond))
        return torch.sigmoid(base + self.out(h))


class ThgModel(nn.Module):
    """Reference frame + n frames of audio and pose -> n frames.

    Output is ``sigmoid(logit(reference) + correction)``, bounded in [0, 1].
    """

    kind = "thg"

    def __init__(self, config: Optional[ThgConfig] = None):
        super().__init__()
        self.config = cfg = config or ThgConfig()
        if cfg.resolution % 8:
            raise InputError("resolution must be a multiple of 8")
        self.audio_encoder = AudioEncoder(cfg.mel.n_mels, cfg.audio_hidden, cfg.audio_dim, cfg.mel.db_floor)
        self.pose_encoder = PoseEncoder(cfg.pose_dim)
        self.image_encoder = ImageEncoder(cfg.width)
        self.generator = Generator(cfg.width, cfg.audio_dim + cfg.pose_dim)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def mel_width(self, n: int) -> int:
        return mel_span(self.config.mel, 0, n, self.config.fps)[1]

    def forward(self, reference: torch.Tensor, mel: torch.Tensor, pose: torch.Tensor) -> torch.Tensor:
        """reference (B, 1, H, W), mel (B, n_mels, W_mel), pose (B, n, 3) -> (B, n, 1, H, W)."""
        b, n = pose.shape[0], pose.shape[1]
        if reference.shape[0] != b or mel.shape[0] != b:
            raise InputError("batch sizes of reference, mel and pose differ")
        if mel.shape[2] != self.mel_width(n):
            raise InputError(f"mel window has {mel.shape[2]} columns, {n} frames need {self.mel_width(n)}")
        cond = torch.cat([self.audio_encoder(mel, n), self.pose_encoder(pose)], -1)  # (B, n, C)
        feats = [f.repeat_interleave(n, 0) for f in self.image_encoder(reference)]
        base = torch.logit(reference.clamp(REF_CLAMP, 1.0 - REF_CLAMP)).repeat_interleave(n, 0)
        out = self.generator(feats, cond.reshape(b * n, -1), base)
        return out.reshape(b, n, *out.shape[1:])

    def example_inputs(self, n: int = 5, batch: int = 1):
        r = self.config.resolution
        return (torch.zeros(batch, 1, r, r),
                torch.full((batch, self.config.mel.n_mels, self.mel_width(n)), self.config.mel.db_floor),
                torch.zeros(batch, n, 3))


@dataclass
class SyncConfig:
    n: int = 5
    resolution: int = 32
    dim: int = 64
    width: int = 32
    fps: float = 25.0
    mel: MelConfig = field(default_factory=MelConfig)

    to_dict = ThgConfig.to_dict

    @classmethod
    def from_dict(cls, d: dict) -> "SyncConfig":
        d = dict(d)
        d["mel"] = MelConfig(**d["mel"])
        return cls(**d)


class SyncExpert(nn.Module):
    """Two towers mapping an n-frame mouth crop and its mel window to unit vectors.

    Batch normalisation keeps the contrastive objective from collapsing onto a
    constant embedding; evaluate in ``eval()`` mode.
    """

    kind = "sync"

    def __init__(self, config: Optional[SyncConfig] = None):
        super().__init__()
        self.config = cfg = config or SyncConfig()
        w = cfg.width
        r = cfg.resolution
        self.video_net = nn.Sequential(
            *_bn_block(2 * cfg.n, w, 1), *_bn_block(w, 2 * w, 2), *_bn_block(2 * w, 2 * w, 2),
            nn.Flatten(),
            nn.Linear(2 * w * (r // 8) * (r // 4), cfg.dim),
        )
        width = self.mel_width
        self.audio_net = nn.Sequential(
            *_bn_block(1, w, 1), *_bn_block(w, 2 * w, 2), *_bn_block(2 * w, 2 * w, 2),
            nn.Flatten(),
            nn.Linear(2 * w * _down2(_down2(cfg.mel.n_mels)) * _down2(_down2(width)), cfg.dim),
        )

    @property
    def mel_width(self) -> int:
        return mel_span(self.config.mel, 0, self.config.n, self.config.fps)[1]

    def embed_video(self, frames: torch.Tensor) -> torch.Tensor:
        """frames (B, n, H, W) full frames; the mouth crop is taken here."""
        if frames.shape[1] != self.config.n:
            raise InputError(f"sync expert takes {self.config.n} frames, got {frames.shape[1]}")
        crops = mouth_crop(frames)
        # absolute crops plus their motion about the window mean
        crops = torch.cat([crops, crops - crops.mean(1, keepdim=True)], 1)
        return F.normalize(F.softplus(self.video_net(crops)), dim=-1)

    def embed_audio(self, mel: torch.Tensor) -> torch.Tensor:
        """mel (B, n_mels, W) in dB."""
        if mel.shape[-1] != self.mel_width:
            raise InputError(f"sync expert takes {self.mel_width} mel columns, got {mel.shape[-1]}")
        x = normalize_mel(mel, self.config.mel.db_floor)[:, None]
        return F.normalize(F.softplus(self.audio_net(x)), dim=-1)

    def forward(self, frames: torch.Tensor, mel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.embed_video(frames), self.embed_audio(mel)


def _bn_block(c_in: int, c_out: int, stride: int) -> list[nn.Module]:
    return [nn.Conv2d(c_in, c_out, 3, stride, 1), nn.BatchNorm2d(c_out), _act()]


def _down2(x: int) -> int:
    return (x - 1) // 2 + 1


@dataclass
class DiscConfig:
    resolution: int = 32
    width: int = 16

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscConfig":
        return cls(**d)


class Discriminator(nn.Module):
    kind = "disc"

    def __init__(self, config: Optional[DiscConfig] = None):
        super().__init__()
        self.config = cfg = config or DiscConfig()
        w = cfg.width
        self.net = nn.Sequential(
            nn.Conv2d(1, w, 4, 2, 1), _act(),
            nn.Conv2d(w, 2 * w, 4, 2, 1), _act(),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1), _act(),
            nn.Flatten(),
            nn.Linear(4 * w * (cfg.resolution // 8) ** 2, 1),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) -> probability of being real, (B,), kept inside the open unit interval."""
        p = torch.sigmoid(self.net(frames).squeeze(-1))
        return torch.clamp(p, 1e-7, 1.0 - 1e-7)


# ---------------------------------------------------------------- complexity

def count_complexity(model: nn.Module, example_inputs=None) -> tuple[int, int]:
    """(parameter count, multiply-accumulate estimate for one forward pass).

    MACs are counted for Conv, ConvTranspose and Linear layers from the shapes
    seen in a forward pass. Without example inputs, a bare ``nn.Linear`` is
    costed for a single input row; models exposing ``example_inputs()`` are run
    on those.
    """
    params = sum(p.numel() for p in model.parameters())
    if example_inputs is None and hasattr(model, "example_inputs"):
        example_inputs = model.example_inputs()
    if example_inputs is None:
        macs = sum(m.in_features * m.out_features for m in model.modules() if isinstance(m, nn.Linear))
        return params, macs

    total = 0

    def hook(mod, inp, out):
        nonlocal total
        if isinstance(mod, nn.Linear):
            total += out.numel() * mod.in_features
        elif isinstance(mod, (nn.Conv1d, nn.Conv2d)):
            k = int(np.prod(mod.kernel_size)) * (mod.in_channels // mod.groups)
            total += out.numel() * k
        elif isinstance(mod, nn.ConvTranspose2d):
            k = int(np.prod(mod.kernel_size)) * (mod.out_channels // mod.groups)
            total += inp[0].numel() * k

    handles = [m.register_forward_hook(hook) for m in model.modules()
               if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d, nn.ConvTranspose2d))]
    try:
        with torch.no_grad():
            if isinstance(example_inputs, tuple):
                model(*example_inputs)
            else:
                model(example_inputs)
    finally:
        for h in handles:
            h.remove()
    return params, total


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"THFCKPT1"
CKPT_VERSION = 1
_KINDS = {"thg": (ThgModel, ThgConfig), "sync": (SyncExpert, SyncConfig), "disc": (Discriminator, DiscConfig)}


def save_checkpoint(model: nn.Module, path: Path | str, meta: Optional[dict] = None) -> None:
    """Single file: magic, uint32 version, uint32 header length, JSON header, float32 LE tensors.

    The header maps each tensor name to its shape and byte offset in the payload.
    """
    state = model.state_dict()
    tensors, offset = [], 0
    blobs = []
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "tensors": tensors,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)))
            fh.write(hbytes)
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise ThfemError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: Path | str) -> nn.Module:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ThfemError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CKPT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    cls, cfg_cls = _KINDS[header["kind"]]
    model = cls(cfg_cls.from_dict(header["config"]))
    base = 16 + hlen
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=base + t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.checkpoint_meta = header["meta"]
    return model
