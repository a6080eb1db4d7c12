"""Run configuration and the command implementations behind the CLI."""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import subprocess
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import torch

from . import __version__
from .alignment import PairedDataset, build_paired_dataset
from .errors import ConfigurationError, InputError, ThfemError
from .fem import FemStage, make_fem
from .losses import TERMS, LossWeights
from .media import FrameSequence, MelConfig, write_sequence, write_wav
from .metrics import EvalItem, MetricReport, PixelExpressionEmbedder, RandomProjectionEmbedder, evaluate
from .models import (DiscConfig, Discriminator, SyncConfig, ThgConfig, ThgModel, count_complexity,
                     load_checkpoint, save_checkpoint)
from .synth import Corpus, Utterance, make_corpus
from .training import SyncWindows, infer_video, single_thread, sync_separation, train_adjacent, train_sync_expert

log = logging.getLogger(__name__)

ENV_OUT = "THFEM_OUT"
SETTINGS = ("intra", "cross")


def _default_root() -> str:
    return os.environ.get(ENV_OUT, "thfem_out")


@dataclass
class RunConfig:
    """Every hyperparameter of a run. Empty path fields resolve under ``out``."""

    seed: int = 0
    n: int = 5
    infer_n: int = 0  # 0: same as n
    resolution: int = 32
    fps: float = 25.0
    sample_rate: int = 16000
    duration: float = 2.0
    num_ids: int = 5
    utterances_per_id: int = 2
    emotions: str = "angry,happy,sad,surprised"
    max_stretch: float = 0.3
    heldout_seed: int = 1001
    heldout_ids: int = 2
    heldout_utterances: int = 1
    fem: str = "lossy"
    beta: float = 0.5
    dtw_cost: str = "euclidean"
    dtw_band: int = 0  # 0: unbanded
    w_sync: float = 0.5
    w_pixel: float = 10.0
    w_perceptual: float = 1.0
    w_adversarial: float = 0.1
    epochs: int = 1
    max_steps: int = 0  # 0: epochs decide
    batch_size: int = 16
    lr: float = 1e-4
    grad_clip: float = 1.0
    width: int = 16
    disc_width: int = 16
    sync_n: int = 5
    sync_epochs: int = 6
    sync_lr: float = 1e-3
    sync_batch: int = 64
    sync_dim: int = 64
    embed_dim: int = 64
    expr_samples: int = 4000
    expr_epochs: int = 12
    deterministic: bool = True
    out: str = field(default_factory=_default_root)
    corpus_dir: str = ""
    heldout_dir: str = ""
    pairs_dir: str = ""
    model_dir: str = ""
    output_dir: str = ""
    report_dir: str = ""

    def __post_init__(self) -> None:
        if self.n < 1 or self.infer_n < 0:
            raise ConfigurationError("n must be >= 1 and infer_n >= 0")
        if self.fem not in ("oracle", "lossy"):
            raise ConfigurationError(f"fem must be oracle or lossy, got {self.fem!r}")
        if self.resolution % 8:
            raise ConfigurationError("resolution must be a multiple of 8")
        _ = self.weights

    @property
    def weights(self) -> LossWeights:
        try:
            return LossWeights(self.w_sync, self.w_pixel, self.w_perceptual, self.w_adversarial)
        except InputError as exc:
            raise ConfigurationError(str(exc)) from exc

    @property
    def emotion_list(self) -> list[str]:
        return [e.strip() for e in self.emotions.split(",") if e.strip()]

    @property
    def inference_n(self) -> int:
        return self.infer_n or self.n

    def path(self, name: str) -> Path:
        explicit = getattr(self, f"{name}_dir")
        if explicit:
            return Path(explicit)
        sub = {"corpus": "corpus", "heldout": "heldout", "pairs": f"pairs_n{self.n}", "model": "models",
               "output": "outputs", "report": "reports"}[name]
        return Path(self.out) / sub

    def mel(self) -> MelConfig:
        return MelConfig(sample_rate=self.sample_rate)

    def make_fem(self) -> FemStage:
        return make_fem(self.fem, self.beta, self.resolution)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.to_dict().items())


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(kind: type, text: str):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {text!r}")
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {text!r} as {kind.__name__}") from exc


_FIELD_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def config_field_types() -> dict[str, type]:
    return {f.name: _FIELD_TYPES[f.type] for f in fields(RunConfig)}


def parse_overrides(pairs: dict[str, str]) -> dict[str, Any]:
    types = config_field_types()
    out = {}
    for k, v in pairs.items():
        if k not in types:
            raise ConfigurationError(f"unknown config key {k!r}")
        out[k] = _parse_value(types[k], v)
    return out


def read_config_file(path: Path | str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{num}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: Optional[Path | str] = None, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_overrides(read_config_file(path)))
    values.update(overrides or {})
    return RunConfig(**values)


# ---------------------------------------------------------------- manifests

def version_string() -> str:
    """``git describe``-style version of the package source, falling back to the release number."""
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            return f"{__version__}+g{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Config snapshot, version and timestamps written beside a command's outputs."""

    def __init__(self, command: str, cfg: RunConfig, out_dir: Path):
        self.command = command
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.started = _now()
        self.results: dict[str, Any] = {}

    def write(self) -> Path:
        doc = {
            "command": self.command,
            "config": self.cfg.to_dict(),
            "version": version_string(),
            "started": self.started,
            "finished": _now(),
            "results": self.results,
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"run_{self.command}.json"
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path


def _determinism(cfg: RunConfig):
    if cfg.deterministic:
        return single_thread()
    import contextlib
    return contextlib.nullcontext()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"{what} not found at {path}")
    return path


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig) -> dict[str, Path]:
    """Training corpus plus a held-out corpus drawn from a separate seed."""
    man = RunManifest("synth", cfg, cfg.path("corpus"))
    train = make_corpus(cfg.num_ids, cfg.utterances_per_id, cfg.emotion_list, cfg.seed, cfg.path("corpus"),
                        cfg.duration, cfg.resolution, cfg.fps, cfg.max_stretch)
    held = make_corpus(cfg.heldout_ids, cfg.heldout_utterances, cfg.emotion_list, cfg.heldout_seed,
                       cfg.path("heldout"), cfg.duration, cfg.resolution, cfg.fps, cfg.max_stretch)
    man.results = {"train_manifest": str(train), "heldout_manifest": str(held)}
    man.write()
    return {"train": train, "heldout": held}


def cmd_build_pairs(cfg: RunConfig) -> PairedDataset:
    corpus = Corpus.load(_require(cfg.path("corpus"), "training corpus"))
    out = cfg.path("pairs")
    ds = build_paired_dataset(corpus, cfg.make_fem(), cfg.n, cfg.mel(), cfg.dtw_cost, cfg.dtw_band or None,
                              correspondence_dir=out / "correspondence")
    ds.save(out)
    man = RunManifest("build-pairs", cfg, out)
    man.results = {"samples": len(ds), "skipped": ds.skipped, "pairs": len(ds.pair_ids)}
    man.write()
    return ds


def cmd_train_sync(cfg: RunConfig):
    corpus = Corpus.load(_require(cfg.path("corpus"), "training corpus"))
    sync_cfg = SyncConfig(n=cfg.sync_n, resolution=cfg.resolution, dim=cfg.sync_dim, fps=cfg.fps, mel=cfg.mel())
    utts = [corpus.utterance(r) for r in corpus.records]
    windows = SyncWindows.from_utterances(utts, cfg.sync_n, cfg.mel())
    with _determinism(cfg):
        expert = train_sync_expert(corpus, cfg.sync_epochs, cfg.seed, cfg.sync_n, cfg.sync_batch, cfg.sync_lr,
                                   sync_cfg, windows=windows)
    out = cfg.path("model")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(expert, out / "expert.ckpt", {"seed": cfg.seed})
    man = RunManifest("train-sync", cfg, out)
    man.results = {"train_separation": sync_separation(expert, windows, cfg.seed)}
    held = cfg.path("heldout")
    if held.exists():
        hc = Corpus.load(held)
        hw = SyncWindows.from_utterances([hc.utterance(r) for r in hc.records], cfg.sync_n, cfg.mel())
        man.results["heldout_separation"] = sync_separation(expert, hw, cfg.seed)
    man.write()
    return expert


def load_expert(cfg: RunConfig):
    return load_checkpoint(_require(cfg.path("model") / "expert.ckpt", "sync expert checkpoint (run train-sync)"))


def cmd_train(cfg: RunConfig):
    """Adjacent-frame training; writes thg.ckpt, disc.ckpt and loss_history.csv."""
    ds = PairedDataset.load(_require(cfg.path("pairs"), "paired dataset (run build-pairs)"))
    expert = load_expert(cfg)
    torch.manual_seed(cfg.seed)
    model = ThgModel(ThgConfig(resolution=cfg.resolution, width=cfg.width, fps=cfg.fps, mel=cfg.mel()))
    disc = Discriminator(DiscConfig(resolution=cfg.resolution, width=cfg.disc_width))
    with _determinism(cfg):
        state = train_adjacent(model, ds, expert, cfg.weights, cfg.epochs, cfg.seed, cfg.batch_size, cfg.lr,
                               grad_clip=cfg.grad_clip, max_steps=cfg.max_steps or None, discriminator=disc)
    out = cfg.path("model")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.model, out / "thg.ckpt", {"seed": cfg.seed, "n": cfg.n})
    save_checkpoint(state.discriminator, out / "disc.ckpt", {"seed": cfg.seed})
    state.history.to_csv(out / "loss_history.csv")
    man = RunManifest("train", cfg, out)
    man.results = {"steps": len(state.history), "disc_steps": state.history.disc_steps,
                   "final": state.history.rows[-1] if state.history.rows else None}
    man.write()
    return state


def load_thg(cfg: RunConfig) -> ThgModel:
    return load_checkpoint(_require(cfg.path("model") / "thg.ckpt", "talking-head checkpoint (run train)"))


def fem_frames(fem: FemStage, source: Utterance, reference: FrameSequence) -> FrameSequence:
    """FEM applied to every source frame, each taking the reference frame nearest in time."""
    from .metrics import nearest_indices

    idx = nearest_indices(len(source.video), source.fps, len(reference), reference.fps)
    return FrameSequence([fem.edit(f, reference[int(j)]) for f, j in zip(source.video.frames, idx)], source.fps)


def two_stage(model: ThgModel, fem: FemStage, source: Utterance, reference: FrameSequence, n: int,
              reference_log: Optional[list] = None) -> FrameSequence:
    return infer_video(model, fem_frames(fem, source, reference), source.audio, n, reference_log=reference_log)


def _find(corpus: Corpus, rid: str) -> dict:
    for r in corpus.records:
        if r["id"] == rid:
            return r
    raise InputError(f"no record {rid!r} in {corpus.root}")


def cmd_infer(cfg: RunConfig, source_id: str, reference: str, corpus_dir: Optional[Path] = None,
              out_path: Optional[Path] = None) -> FrameSequence:
    """``reference`` is a record id or an emotion (then the source's own target of that emotion is used)."""
    corpus = Corpus.load(_require(Path(corpus_dir) if corpus_dir else cfg.path("heldout"), "corpus"))
    src_rec = _find(corpus, source_id)
    if reference in cfg.emotion_list or reference in ("neutral",):
        cands = [r for r in corpus.targets() if r["source"] == source_id and r["emotion"] == reference]
        if not cands:
            raise InputError(f"no {reference} target for {source_id}")
        ref_rec = cands[0]
    else:
        ref_rec = _find(corpus, reference)
    source = corpus.utterance(src_rec)
    ref_video = corpus.utterance(ref_rec).video
    model = load_thg(cfg)
    out = two_stage(model, cfg.make_fem(), source, ref_video, cfg.inference_n)
    dest = Path(out_path) if out_path else cfg.path("output") / f"{source_id}__{ref_rec['id']}.f32seq"
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_sequence(dest, out)
    write_wav(dest.with_suffix(".wav"), source.audio)
    man = RunManifest("infer", cfg, dest.parent)
    man.results = {"source": source_id, "reference": ref_rec["id"], "frames": len(out), "output": str(dest)}
    man.write()
    return out


def _cross_reference(corpus: Corpus, rec: dict) -> dict:
    """Same emotion and utterance slot, next identity in cyclic order."""
    others = [r for r in corpus.targets() if r["emotion"] == rec["emotion"] and r["identity"] != rec["identity"]]
    if not others:
        raise InputError("cross-identity evaluation needs at least two identities")
    ids = sorted({r["identity"] for r in others})
    nxt = next((i for i in ids if i > rec["identity"]), ids[0])
    return sorted((r for r in others if r["identity"] == nxt), key=lambda r: r["id"])[0]


def eval_items(cfg: RunConfig, corpus: Corpus, setting: str, system: str,
               model: Optional[ThgModel] = None) -> dict[str, list[EvalItem]]:
    fem = cfg.make_fem()
    items: dict[str, list[EvalItem]] = {}
    for rec, pair in corpus.pairs():
        if rec["emotion"] not in cfg.emotion_list:
            continue
        ref_rec = rec if setting == "intra" else _cross_reference(corpus, rec)
        reference = pair.target.video if ref_rec is rec else corpus.utterance(ref_rec).video
        edited = fem_frames(fem, pair.source, reference)
        if system == "pipeline":
            generated = infer_video(model, edited, pair.source.audio, cfg.inference_n)
        elif system == "fem":
            generated = edited
        else:
            raise InputError(f"unknown system {system!r}")
        items.setdefault(rec["emotion"], []).append(EvalItem(generated, reference, pair.target.video,
                                                             pair.source.audio))
    return items


def make_embedders(cfg: RunConfig):
    face = RandomProjectionEmbedder(cfg.resolution, cfg.embed_dim, cfg.seed)
    with _determinism(cfg):
        expr = PixelExpressionEmbedder(cfg.resolution, cfg.seed, cfg.expr_samples, cfg.expr_epochs)
    return face, expr


def cmd_eval(cfg: RunConfig, settings: Sequence[str] = SETTINGS, system: str = "pipeline",
             embedders=None) -> dict[str, MetricReport]:
    for s in settings:
        if s not in SETTINGS:
            raise InputError(f"unknown setting {s!r}")
    corpus = Corpus.load(_require(cfg.path("heldout"), "held-out corpus (run synth)"))
    expert = load_expert(cfg)
    model = load_thg(cfg) if system == "pipeline" else None
    face, expr = embedders or make_embedders(cfg)
    reports = {}
    out = cfg.path("report")
    man = RunManifest("eval", cfg, out)
    with _determinism(cfg):
        for s in settings:
            items = eval_items(cfg, corpus, s, system, model)
            rep = evaluate(items, cfg.emotion_list, face, expr, expert, s)
            rep.write(out, f"{system}_{s}")
            reports[s] = rep
    man.results = {s: {"csv": f"{system}_{s}.csv", "json": f"{system}_{s}.json"} for s in settings}
    man.write()
    return reports


def cmd_complexity(cfg: RunConfig) -> list[dict]:
    rows = []
    thg = ThgModel(ThgConfig(resolution=cfg.resolution, width=cfg.width, fps=cfg.fps, mel=cfg.mel()))
    p, m = count_complexity(thg, thg.example_inputs(cfg.inference_n))
    rows.append({"model": f"thg(n={cfg.inference_n})", "parameters": p, "macs": m})
    disc = Discriminator(DiscConfig(resolution=cfg.resolution, width=cfg.disc_width))
    p, m = count_complexity(disc, torch.zeros(1, 1, cfg.resolution, cfg.resolution))
    rows.append({"model": "discriminator", "parameters": p, "macs": m})
    from .models import SyncExpert

    ex = SyncExpert(SyncConfig(n=cfg.sync_n, resolution=cfg.resolution, dim=cfg.sync_dim, fps=cfg.fps,
                               mel=cfg.mel()))
    ex.eval()
    p, m = count_complexity(ex, (torch.zeros(1, cfg.sync_n, cfg.resolution, cfg.resolution),
                                 torch.zeros(1, cfg.mel().n_mels, ex.mel_width)))
    rows.append({"model": "sync_expert", "parameters": p, "macs": m})
    out = cfg.path("report")
    _write_table(out / "complexity", ["model", "parameters", "macs"], rows)
    return rows


# ---------------------------------------------------------------- ablations

AXES = ("window_n", "loss_removal", "prior_on_off")


@dataclass
class AblationSpec:
    axis: str
    values: tuple = ()

    def __post_init__(self) -> None:
        if self.axis not in AXES:
            raise ConfigurationError(f"unknown ablation axis {self.axis!r}")
        if not self.values:
            self.values = {"window_n": (5, 20, 50), "loss_removal": ("full", "perceptual", "pixel", "sync"),
                           "prior_on_off": ("adjacent", "single")}[self.axis]
        self.values = tuple(self.values)
        if self.axis == "loss_removal":
            for v in self.values:
                if v == "adversarial":
                    raise ConfigurationError("the adversarial term is never removed")
                if v != "full" and v not in TERMS:
                    raise ConfigurationError(f"unknown loss term {v!r}")
        if self.axis == "window_n" and any(int(v) < 1 for v in self.values):
            raise ConfigurationError("window lengths must be >= 1")

    def label(self, value) -> str:
        if self.axis == "window_n":
            return f"n={value}"
        if self.axis == "loss_removal":
            return "full" if value == "full" else f"w/o {value}"
        return "w/ adjacent frame prior" if value == "adjacent" else "w/o adjacent frame prior"

    def configure(self, base: RunConfig, value, root: Path) -> RunConfig:
        slug = self.label(value).replace("w/o ", "without_").replace("w/ ", "with_").replace(" ", "_").replace("=", "")
        sub = root / slug
        paths = dict(model_dir=str(sub / "models"), report_dir=str(sub / "reports"), output_dir=str(sub / "outputs"))
        if self.axis == "window_n":
            kw = dict(n=int(value), infer_n=0)
        elif self.axis == "loss_removal":
            kw = {} if value == "full" else {f"w_{value}": 0.0}
        else:
            # single-frame supervision, still inferred in chunks of the base window
            kw = dict(n=base.n if value == "adjacent" else 1, infer_n=base.inference_n)
        cfg = base.replace(**kw, **paths)
        return cfg.replace(pairs_dir=str(root / f"pairs_n{cfg.n}"))


ABLATION_COLUMNS = ("setting", "seed", "FAD", "LSE-D", "CSIM")


def _write_table(stem: Path, columns: Sequence[str], rows: list[dict]) -> tuple[Path, Path]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    json_path.write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return csv_path, json_path


def cmd_ablate(cfg: RunConfig, spec: AblationSpec, setting: str = "intra") -> list[dict]:
    """One train + eval cycle per value; the sync expert is trained once and shared."""
    root = Path(cfg.out) / f"ablation_{spec.axis}"
    stem = cfg.path("report") / f"ablation_{spec.axis}"
    shared_models = root / "shared"
    if not (shared_models / "expert.ckpt").exists():
        cmd_train_sync(cfg.replace(model_dir=str(shared_models)))
    embedders = make_embedders(cfg)
    rows: list[dict] = []
    man = RunManifest("ablate", cfg, root)
    try:
        for value in spec.values:
            sub = spec.configure(cfg, value, root)
            Path(sub.model_dir).mkdir(parents=True, exist_ok=True)
            expert_dst = Path(sub.model_dir) / "expert.ckpt"
            expert_dst.write_bytes((shared_models / "expert.ckpt").read_bytes())
            if not (sub.path("pairs") / "dataset.json").exists():
                cmd_build_pairs(sub)
            cmd_train(sub)
            rep = cmd_eval(sub, (setting,), "pipeline", embedders)[setting]
            avg = rep.average
            rows.append({"setting": spec.label(value), "seed": cfg.seed, "FAD": f"{avg.fad:.6f}",
                         "LSE-D": f"{avg.lse_d:.6f}", "CSIM": f"{avg.csim:.6f}"})
            _write_table(stem, ABLATION_COLUMNS, rows)
    except ThfemError:
        _write_table(stem, ABLATION_COLUMNS, rows)
        man.results = {"rows": len(rows), "aborted": True}
        man.write()
        raise
    man.results = {"rows": len(rows), "table": str(stem.with_suffix(".csv"))}
    man.write()
    return rows
