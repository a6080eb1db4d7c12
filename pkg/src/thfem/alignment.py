"""DTW alignment of paired utterances and construction of frame-aligned training samples."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, InputError, ThfemError
from .media import Frame, FrameSequence, MelConfig, MelSpectrogram, compute_mel, mel_window

log = logging.getLogger(__name__)


@dataclass
class AlignmentPath:
    steps: np.ndarray  # (K, 2) int
    total_cost: float

    def __post_init__(self) -> None:
        self.steps = np.asarray(self.steps, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.steps)

    def is_valid(self, t_a: int, t_b: int) -> bool:
        s = self.steps
        if len(s) == 0 or tuple(s[0]) != (0, 0) or tuple(s[-1]) != (t_a - 1, t_b - 1):
            return False
        d = np.diff(s, axis=0)
        return bool(np.all((d >= 0) & (d <= 1)) and np.all(d.sum(axis=1) >= 1))


@dataclass
class FrameCorrespondence:
    mapping: np.ndarray

    def __post_init__(self) -> None:
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        if np.any(np.diff(self.mapping) < 0):
            raise InputError("frame correspondence must be non-decreasing")

    def __len__(self) -> int:
        return len(self.mapping)

    def __getitem__(self, i):
        return self.mapping[i]


def cost_matrix(a: np.ndarray, b: np.ndarray, cost: str = "euclidean") -> np.ndarray:
    """Pairwise column costs for (D, T_A) and (D, T_B) feature arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if cost == "euclidean":
        # direct differences, accumulated feature by feature: no cancellation and a fixed summation order
        sq = np.zeros((a.shape[1], b.shape[1]))
        for x, y in zip(a, b):
            d = x[:, None] - y[None, :]
            sq += d * d
        return np.sqrt(sq)
    if cost == "cosine":
        na = np.linalg.norm(a, axis=0)
        nb = np.linalg.norm(b, axis=0)
        denom = np.maximum(na[:, None] * nb[None, :], 1e-12)
        return 1.0 - (a.T @ b) / denom
    raise ConfigurationError(f"unknown DTW cost {cost!r}")


def dtw_from_cost(c: np.ndarray, band: Optional[int] = None) -> AlignmentPath:
    """Minimum-cost monotone path through a precomputed cost matrix."""
    t_a, t_b = c.shape
    if t_a < 1 or t_b < 1:
        raise InputError("DTW needs non-empty sequences")
    acc = np.full((t_a, t_b), np.inf)
    allowed = np.ones_like(c, dtype=bool)
    if band is not None:
        # band around the rescaled diagonal so unequal lengths stay feasible
        ii = np.arange(t_a)[:, None] * (t_b - 1) / max(t_a - 1, 1)
        allowed = np.abs(np.arange(t_b)[None, :] - ii) <= band
    cm = np.where(allowed, c, np.inf)

    acc[0] = np.cumsum(cm[0])
    for i in range(1, t_a):
        prev = acc[i - 1]
        best = np.minimum(prev, np.concatenate(([np.inf], prev[:-1])))
        row = cm[i] + best
        # horizontal moves within the row are sequential
        for j in range(1, t_b):
            h = cm[i, j] + row[j - 1]
            if h < row[j]:
                row[j] = h
        acc[i] = row
    if not np.isfinite(acc[-1, -1]):
        raise InputError("DTW band too narrow for these lengths")

    i, j = t_a - 1, t_b - 1
    steps = [(i, j)]
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            cands = ((acc[i - 1, j - 1], 0), (acc[i - 1, j], 1), (acc[i, j - 1], 2))
            _, move = min(cands)
            if move == 0:
                i, j = i - 1, j - 1
            elif move == 1:
                i -= 1
            else:
                j -= 1
        steps.append((i, j))
    steps.reverse()
    path = np.asarray(steps)
    return AlignmentPath(path, float(c[path[:, 0], path[:, 1]].sum()))


def dtw_align(mel_a: MelSpectrogram, mel_b: MelSpectrogram, cost: str = "euclidean",
              band: Optional[int] = None) -> AlignmentPath:
    if mel_a.config != mel_b.config:
        raise ConfigurationError("spectrograms were computed with different mel configurations")
    return dtw_from_cost(cost_matrix(mel_a.columns, mel_b.columns, cost), band)


def path_to_frames(path: AlignmentPath, cols_per_frame: float, n_source_frames: int,
                   n_target_frames: int) -> FrameCorrespondence:
    """Project a column path to frames: median target column per source frame, then running max.

    Column ``t`` is centred at ``t + 0.5`` hops. Frame ``i`` is sampled at
    ``i * cols_per_frame`` hops and owns the columns nearest to it, i.e.
    ``round((t + 0.5) / cols_per_frame)``.
    """
    if len(path) == 0:
        raise InputError("empty alignment path")
    if cols_per_frame <= 0:
        raise InputError("cols_per_frame must be positive")
    src_frame = np.floor((path.steps[:, 0] + 0.5) / cols_per_frame + 0.5).astype(np.int64)
    mapping = np.zeros(n_source_frames, dtype=np.int64)
    last = 0
    for i in range(n_source_frames):
        cols = path.steps[src_frame == i, 1]
        if len(cols):
            cols = np.sort(cols)
            med = cols[(len(cols) - 1) // 2]  # lower median on ties
            last = int(np.floor((med + 0.5) / cols_per_frame + 0.5))
        mapping[i] = last
    mapping = np.clip(np.maximum.accumulate(mapping), 0, n_target_frames - 1)
    return FrameCorrespondence(mapping)


# ---------------------------------------------------------------- paired training data

@dataclass
class PairedSample:
    source_frame: Frame
    target_frames: FrameSequence
    audio_mel: MelSpectrogram
    pose_window: np.ndarray  # (n, 3)
    n: int

    def __post_init__(self) -> None:
        if not (len(self.target_frames) == self.n == len(self.pose_window)):
            raise InputError("target frames, pose window and n disagree")


@dataclass
class PairedDataset:
    """Array-backed collection of paired samples.

    inputs (N, H, W), targets (N, n, H, W), mel (N, n_mels, W_mel), pose (N, n, 3),
    plus ``origin`` (N, 2): pair number and source frame index of each sample.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mel: np.ndarray
    pose: np.ndarray
    origin: np.ndarray
    n: int
    fps: float = 25.0
    mel_config: MelConfig = MelConfig()
    pair_ids: tuple[str, ...] = ()
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, k: int) -> PairedSample:
        src = Frame(self.inputs[k], index=0, fps=self.fps)
        tgt = FrameSequence.from_array(self.targets[k], fps=self.fps)
        return PairedSample(src, tgt, MelSpectrogram(self.mel[k], self.mel_config), self.pose[k], self.n)

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx)
        return PairedDataset(self.inputs[idx], self.targets[idx], self.mel[idx], self.pose[idx],
                             self.origin[idx], self.n, self.fps, self.mel_config, self.pair_ids, self.skipped)

    def save(self, out_dir: Path | str) -> Path:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            for name in ("inputs", "targets", "mel", "pose", "origin"):
                np.save(out / f"{name}.npy", np.ascontiguousarray(getattr(self, name)))
            meta = {
                "n": self.n, "fps": self.fps, "count": len(self), "skipped": self.skipped,
                "pair_ids": list(self.pair_ids),
                "mel_config": self.mel_config.__dict__,
            }
            (out / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
        except OSError as exc:
            raise ThfemError(f"failed writing dataset to {out}: {exc}") from exc
        return out

    @classmethod
    def load(cls, path: Path | str) -> "PairedDataset":
        root = Path(path)
        try:
            meta = json.loads((root / "dataset.json").read_text())
            arrays = {name: np.load(root / f"{name}.npy") for name in ("inputs", "targets", "mel", "pose", "origin")}
        except OSError as exc:
            raise ThfemError(f"failed reading dataset from {root}: {exc}") from exc
        return cls(n=meta["n"], fps=meta["fps"], mel_config=MelConfig(**meta["mel_config"]),
                   pair_ids=tuple(meta["pair_ids"]), skipped=meta["skipped"], **arrays)


def align_pair(source_mel: MelSpectrogram, target_mel: MelSpectrogram, n_source: int, n_target: int,
               fps: float, cost: str = "euclidean", band: Optional[int] = None) -> FrameCorrespondence:
    path = dtw_align(source_mel, target_mel, cost, band)
    return path_to_frames(path, source_mel.config.cols_per_frame(fps), n_source, n_target)


def pair_samples(pair, fem, n: int, mel_cfg: MelConfig = MelConfig(), cost: str = "euclidean",
                 band: Optional[int] = None):
    """Samples for one paired utterance; returns (arrays dict, correspondence, skipped count)."""
    src, tgt = pair.source, pair.target
    fps = src.fps
    mel_s = compute_mel(src.audio, mel_cfg)
    mel_t = compute_mel(tgt.audio, mel_cfg)
    corr = align_pair(mel_s, mel_t, len(src.video), len(tgt.video), fps, cost, band)
    poses = src.pose_track
    target_arr = tgt.video.as_array()[..., 0]
    inputs, targets, mels, pose_w, idx = [], [], [], [], []
    skipped = 0
    for i in range(len(src.video)):
        if i + n > len(src.video) - 1:
            skipped += 1
            continue
        try:
            mw = mel_window(mel_s, i, n, fps)
        except InputError:
            skipped += 1
            continue
        edited = fem.edit(src.video[i], tgt.video[int(corr[i])])
        inputs.append(edited.gray())
        targets.append(target_arr[corr.mapping[i + 1:i + n + 1]])
        mels.append(mw.columns)
        pose_w.append(poses[i + 1:i + n + 1])
        idx.append(i)
    return dict(inputs=inputs, targets=targets, mel=mels, pose=pose_w, index=idx), corr, skipped


def build_paired_dataset(corpus, fem, n: int, mel_cfg: MelConfig = MelConfig(), cost: str = "euclidean",
                         band: Optional[int] = None, correspondence_dir: Optional[Path] = None) -> PairedDataset:
    """FEM-edited source frames paired with DTW-aligned emotional supervision windows."""
    from .synth import write_correspondence

    if n < 1:
        raise InputError("n must be >= 1")
    parts = {k: [] for k in ("inputs", "targets", "mel", "pose")}
    origin, pair_ids = [], []
    skipped = 0
    fps = 25.0
    for p_num, (rec, pair) in enumerate(corpus.pairs()):
        fps = pair.source.fps
        arrays, corr, sk = pair_samples(pair, fem, n, mel_cfg, cost, band)
        skipped += sk
        pair_ids.append(rec["id"])
        if correspondence_dir is not None:
            Path(correspondence_dir).mkdir(parents=True, exist_ok=True)
            write_correspondence(Path(correspondence_dir) / f"{rec['id']}.dtw.corr", corr.mapping)
        for k in parts:
            parts[k].extend(arrays[k])
        origin.extend((p_num, i) for i in arrays["index"])
    if skipped:
        log.info("skipped %d source frames without a complete %d-frame window", skipped, n)
    if not parts["inputs"]:
        raise InputError(f"no source frame has a complete {n}-frame window")
    return PairedDataset(
        np.stack(parts["inputs"]).astype(np.float32),
        np.stack(parts["targets"]).astype(np.float32),
        np.stack(parts["mel"]).astype(np.float32),
        np.stack(parts["pose"]).astype(np.float32),
        np.asarray(origin, dtype=np.int64),
        n, fps, mel_cfg, tuple(pair_ids), skipped,
    )
