"""One run configuration: every knob of every stage, with strict JSON loading.

A config file is a JSON object whose sections mirror the dataclasses below;
every field has a default, so `{}` is a valid config. Loading is strict —
unknown sections or fields are errors — and validation reports every violated
invariant at once rather than stopping at the first.

The config hash (sha256 over the canonical JSON form) plus the seed are
stamped into every artifact a command produces, which is what makes reruns
checkable for bitwise equality.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig
from .decoding import DecodeConfig
from .dsp import FeatureConfig
from .encoders import EncoderConfig
from .errors import ConfigError, InputError
from .losses import LossConfig
from .metrics import MetricsConfig
from .model import SedModel
from .optim import OptimConfig
from .scenes import ClassSpec, SceneSpec, default_scene_classes, load_manifest
from .vocab import Vocabulary


@dataclass
class DataConfig:
    """Where the dataset lives (manifest) and how to synthesize it (the rest)."""

    manifest: str = ""             # dataset for train/infer/evaluate
    pretrain_manifest: str = ""    # optional first-phase training dataset
    out_dir: str = "data/desk"     # where generate-data writes
    classes: list[dict] = field(
        default_factory=lambda: [dataclasses.asdict(c) for c in default_scene_classes()]
    )
    train_clips: int = 256
    val_clips: int = 64
    test_clips: int = 0
    sample_rate: int = 16000
    clip_seconds: float = 10.0
    events_per_clip: tuple[int, int] = (1, 4)
    event_seconds: tuple[float, float] = (0.5, 3.0)
    snr_db: tuple[float, float] = (6.0, 20.0)

    def __post_init__(self):
        for name in ("train_clips", "val_clips", "test_clips"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.classes:
            raise ConfigError("data.classes must name at least one class")
        for entry in self.classes:
            missing = {"name", "renderer", "base_hz"} - set(entry)
            if missing:
                raise ConfigError(f"class entry {entry} is missing {sorted(missing)}")
        self.events_per_clip = tuple(self.events_per_clip)
        self.event_seconds = tuple(self.event_seconds)
        self.snr_db = tuple(self.snr_db)

    def class_specs(self) -> list[ClassSpec]:
        return [ClassSpec(c["name"], c["renderer"], float(c["base_hz"])) for c in self.classes]

    def class_names(self) -> list[str]:
        return [c["name"] for c in self.classes]

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(
            classes=self.class_specs(),
            sample_rate=self.sample_rate,
            clip_seconds=self.clip_seconds,
            events_per_clip=self.events_per_clip,
            event_seconds=self.event_seconds,
            snr_db=self.snr_db,
            seed=seed,
        )

    def counts(self) -> dict[str, int]:
        wanted = {"train": self.train_clips, "val": self.val_clips, "test": self.test_clips}
        return {split: n for split, n in wanted.items() if n > 0}


@dataclass
class LoopConfig:
    """Epoch-loop shape; the per-step knobs live in OptimConfig."""

    epochs: int = 10
    pretrain_epochs: int = 0   # > 0 enables the first phase on pretrain_manifest
    augment: bool = False
    max_shift_seconds: float = 2.0
    patience: int = 0
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.pretrain_epochs < 0 or self.patience < 0:
            raise ConfigError("train.pretrain_epochs and train.patience must be >= 0")
        if self.max_shift_seconds < 0:
            raise ConfigError(f"train.max_shift_seconds must be >= 0, got {self.max_shift_seconds}")


_SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "features": FeatureConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "decode": DecodeConfig,
    "train": LoopConfig,
    "metrics": MetricsConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    train: LoopConfig = field(default_factory=LoopConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0
    out_dir: str = "runs/run"


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(to_dict(cfg), sort_keys=True).encode("utf-8")).hexdigest()


def _build_section(name: str, cls: type, raw: dict, errors: list[str]):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    for key in unknown:
        errors.append(f"{name}.{key}: unknown field (known: {sorted(known)})")
    kwargs = {k: v for k, v in raw.items() if k in known}
    # JSON has no tuples; coerce list values for tuple-typed fields
    for f in fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list) and "tuple" in str(f.type):
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        errors.append(f"{name}: {exc}")
        return cls()  # placeholder so cross-checks can still run


def validate(cfg: RunConfig) -> list[str]:
    """Cross-section invariants; returns every violation found."""
    problems: list[str] = []
    if cfg.encoder.model_dim != cfg.decoder.d_model:
        problems.append(
            f"encoder.model_dim {cfg.encoder.model_dim} must equal decoder.d_model {cfg.decoder.d_model}"
        )
    if cfg.decode.max_len > cfg.decoder.max_len:
        problems.append(
            f"decode.max_len {cfg.decode.max_len} exceeds decoder.max_len {cfg.decoder.max_len}"
        )
    if cfg.features.sample_rate != cfg.data.sample_rate:
        problems.append(
            f"features.sample_rate {cfg.features.sample_rate} != data.sample_rate {cfg.data.sample_rate}"
        )
    if cfg.features.clip_seconds != cfg.data.clip_seconds:
        problems.append(
            f"features.clip_seconds {cfg.features.clip_seconds} != data.clip_seconds {cfg.data.clip_seconds}"
        )
    if cfg.seed < 0:
        problems.append(f"seed must be >= 0, got {cfg.seed}")
    names = cfg.data.class_names()
    if len(set(names)) != len(names):
        problems.append(f"data.classes contains duplicates: {names}")
    return problems


def from_dict(raw: dict) -> RunConfig:
    """Strict construction; collects every violated invariant before failing."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(raw).__name__}")
    errors: list[str] = []
    top_known = set(_SECTIONS) | {"seed", "out_dir"}
    for key in sorted(set(raw) - top_known):
        errors.append(f"{key}: unknown config section (known: {sorted(top_known)})")
    sections = {}
    for name, cls in _SECTIONS.items():
        part = raw.get(name, {})
        if not isinstance(part, dict):
            errors.append(f"{name}: expected an object, got {type(part).__name__}")
            part = {}
        sections[name] = _build_section(name, cls, part, errors)
    cfg = RunConfig(seed=int(raw.get("seed", 0)), out_dir=str(raw.get("out_dir", "runs/run")), **sections)
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config file (or start from defaults) and apply overrides.

    Overrides use dotted keys ("decode.strategy", "seed") and take precedence
    over file values — the CLI flags funnel through here.
    """
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into non-object {part!r}")
        node[leaf] = value
    return from_dict(raw)


def save_config(cfg: RunConfig, path) -> None:
    """Resolved config + hash + seed; the provenance stamp for a run dir."""
    payload = {"config": to_dict(cfg), "config_hash": config_hash(cfg), "seed": cfg.seed}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def require_paths(cfg: RunConfig, *attrs: str) -> None:
    """Commands declare which configured paths they need to exist."""
    missing = []
    for attr in attrs:
        value = getattr(cfg.data, attr, "")
        if not value:
            missing.append(f"data.{attr} is not set")
        elif not Path(value).exists():
            missing.append(f"data.{attr} does not exist: {value}")
    if missing:
        raise InputError("; ".join(missing))


def build_vocab(manifest) -> Vocabulary:
    """Caption vocabulary implied by a dataset manifest (dict or path)."""
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    return Vocabulary(manifest["classes"], clip_seconds=float(manifest["clip_seconds"]))


def build_model(cfg: RunConfig, vocab: Vocabulary) -> SedModel:
    """Model whose class count and clip grid follow the dataset, built from
    a generator keyed only by the run seed (reruns are bit-identical)."""
    encoder_cfg = dataclasses.replace(
        cfg.encoder, num_classes=len(vocab.classes), clip_seconds=vocab.clip_seconds
    )
    return SedModel(
        vocab,
        encoder_cfg,
        cfg.decoder,
        np.random.default_rng(cfg.seed),
        dropout_seed=cfg.seed,
    )
