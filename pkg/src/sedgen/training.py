"""Joint training loop: contrastive + caption CE with gradient accumulation.

The unit of optimization is an accumulation window: `accumulation` micro-batches
are run forward/backward with each micro-batch loss divided by `accumulation`,
then a single AdamW step consumes the summed gradients. One JSON-lines record
is emitted per optimizer step: {"iter", "lr", "ce", "con", "total"}, where the
components are the window-level (accumulation-scaled) sums, so ce + con always
equals total at default loss weights.

Determinism contract: the same (dataset, seed, config) always replays the same
run — example shuffling is keyed by (seed, epoch), augmentation draws by
(seed, 7919, epoch) in raw dataset order, and dropout masks come from the
model's counter-keyed generator. Validation runs in eval mode and therefore
does not consume any training randomness.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .decoding import DecodeConfig, decode
from .dsp import AudioClip, FeatureConfig, MelSpectrogram, read_wav
from .errors import ConfigError, InputError
from .losses import LossConfig, TemperatureParam, ce_loss, contrastive_loss, total_loss
from .metrics import MetricsConfig, event_f1, parse_sequence, segment_f1
from .model import SedModel
from .optim import AdamW, OptimConfig, lr_at
from .scenes import load_manifest, manifest_events, shift_augment
from .tensor import Tape, Tensor, backward, mean, mul, stack
from .vocab import Event, TokenSequence, Vocabulary, events_to_tokens

logger = logging.getLogger("sedgen.training")


# ---------------------------------------------------------------------------
# dataset adapter: manifest clips -> (mel, token ids) examples


@dataclass
class TrainExample:
    clip_id: str
    mel: np.ndarray          # (T, n_mels) log-mel features
    ids: np.ndarray          # (L,) int64 caption token ids, BOS..EOS, no PAD
    events: list[Event]


class ClipDataset:
    """Manifest-backed clips with cached waveforms and log-mel features.

    Waveforms and canonical (un-augmented) mels are cached in RAM after first
    use; augmented examples are rendered on demand and never cached.
    """

    def __init__(self, manifest, vocab: Vocabulary, features: FeatureConfig | None = None,
                 max_text_len: int = 64):
        if isinstance(manifest, (str, Path)):
            self.root = Path(manifest).parent
            manifest = load_manifest(manifest)
        else:
            self.root = Path(".")
        self.manifest = manifest
        self.vocab = vocab
        self.max_text_len = max_text_len
        if features is None:
            features = FeatureConfig(
                sample_rate=int(manifest["sample_rate"]),
                clip_seconds=float(manifest["clip_seconds"]),
            )
        if features.sample_rate != int(manifest["sample_rate"]):
            raise ConfigError(
                f"feature sample rate {features.sample_rate} != manifest rate {manifest['sample_rate']}"
            )
        self.features = features
        self.frontend = MelSpectrogram(features)
        self.clip_seconds = float(manifest["clip_seconds"])
        self.rate = int(manifest["sample_rate"])
        self._waves: dict[str, np.ndarray] = {}
        self._mels: dict[str, np.ndarray] = {}
        self._by_split: dict[str, list[dict]] = {}
        for entry in manifest["clips"]:
            self._by_split.setdefault(entry["split"], []).append(entry)

    @property
    def splits(self) -> list[str]:
        return sorted(self._by_split)

    def clips(self, split: str) -> list[dict]:
        if split not in self._by_split:
            raise InputError(f"split {split!r} not in manifest (has {self.splits})")
        return self._by_split[split]

    def waveform(self, entry: dict) -> np.ndarray:
        cid = entry["id"]
        if cid not in self._waves:
            self._waves[cid] = read_wav(self.root / entry["wav_path"]).samples
        return self._waves[cid]

    def mel(self, entry: dict) -> np.ndarray:
        cid = entry["id"]
        if cid not in self._mels:
            self._mels[cid] = self.frontend(AudioClip(self.waveform(entry), self.rate))
        return self._mels[cid]

    def example(self, entry: dict) -> TrainExample:
        events = manifest_events(entry)
        ids = np.asarray(events_to_tokens(events, self.vocab, self.max_text_len).ids, dtype=np.int64)
        return TrainExample(entry["id"], self.mel(entry), ids, events)

    def augmented_example(self, entry: dict, max_shift: float, rng: np.random.Generator) -> TrainExample:
        samples, events = shift_augment(
            self.waveform(entry), manifest_events(entry), self.clip_seconds, self.rate, max_shift, rng
        )
        mel = self.frontend(AudioClip(samples, self.rate))
        ids = np.asarray(events_to_tokens(events, self.vocab, self.max_text_len).ids, dtype=np.int64)
        return TrainExample(entry["id"], mel, ids, events)

    def examples(self, split: str) -> list[TrainExample]:
        return [self.example(entry) for entry in self.clips(split)]


# ---------------------------------------------------------------------------
# loss evaluation over a micro-batch


def batch_losses(model: SedModel, batch: list[TrainExample], loss_cfg: LossConfig,
                 temperature=None) -> tuple[Tensor, Tensor]:
    """(ce, con) over one micro-batch.

    CE is the mean over clips of each clip's mean next-token NLL (clips weigh
    equally regardless of caption length); the contrastive term pairs each
    clip's pooled audio embedding with its own caption embedding across the
    batch. `temperature` is a float or a TemperatureParam (learnable).
    """
    if not batch:
        raise InputError("empty micro-batch")
    ce_terms, audio_rows, text_rows = [], [], []
    for ex in batch:
        audio = model.encode_audio(ex.mel)
        logits = model.decode_logits(ex.ids[:-1], audio)
        ce_terms.append(ce_loss(logits, ex.ids[1:], model.vocab.pad_id, loss_cfg.label_smoothing))
        audio_rows.append(audio.pooled)
        text_rows.append(model.embed_text(ex.ids))
    ce = ce_terms[0] if len(ce_terms) == 1 else mean(stack(ce_terms))
    if temperature is None:
        temperature = loss_cfg.temperature
    tau = temperature.value() if isinstance(temperature, TemperatureParam) else float(temperature)
    con = contrastive_loss(stack(audio_rows), stack(text_rows), tau)
    return ce, con


def accumulate_window(model: SedModel, micro_batches: list[list[TrainExample]], loss_cfg: LossConfig,
                      accumulation: int, temperature=None) -> dict[str, float]:
    """Forward/backward every micro-batch, each loss scaled by 1/accumulation.

    Gradients sum into the parameters' .grad buffers (the caller zeroes them);
    returns the window's accumulation-scaled loss components.
    """
    ce_sum = con_sum = tot_sum = 0.0
    scale = 1.0 / accumulation
    for batch in micro_batches:
        with Tape() as tape:
            ce, con = batch_losses(model, batch, loss_cfg, temperature)
            total = total_loss(ce, con, loss_cfg)
            backward(mul(total, scale), tape)
        ce_sum += ce.item() * scale
        con_sum += con.item() * scale
        tot_sum += total.item() * scale
    return {"ce": ce_sum, "con": con_sum, "total": tot_sum}


# ---------------------------------------------------------------------------
# one epoch


@dataclass
class TrainerConfig:
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 10
    seed: int = 0
    augment: bool = False
    max_shift_seconds: float = 2.0
    patience: int = 0              # epochs without val event-F1 gain; 0 disables
    freeze_encoder: bool = False
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(strategy="greedy", constrained=True))

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.max_shift_seconds < 0:
            raise ConfigError(f"max_shift_seconds must be >= 0, got {self.max_shift_seconds}")


def train_epoch(model: SedModel, data, cfg: TrainerConfig, *, optimizer: AdamW | None = None,
                epoch: int = 0, start_iter: int = 0, temperature=None,
                log_path=None) -> list[dict]:
    """One pass over `data` (a sequence of TrainExample); returns the step log.

    Examples are shuffled by a generator keyed on (cfg.seed, epoch), grouped
    into micro-batches of optim.batch_size, and optimized one accumulation
    window at a time. A trailing partial window still steps, with its losses
    scaled by the same 1/accumulation. Each log record is
    {"iter", "lr", "ce", "con", "total"} with iter counting optimizer steps
    from start_iter (1-based, matching the warmup schedule).
    """
    data = list(data)
    if not data:
        raise InputError("train_epoch needs at least one example")
    if optimizer is None:
        optimizer = AdamW(list(model.named_parameters()), cfg.optim)
    model.train()
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
    bs = cfg.optim.batch_size
    micro_batches = [[data[i] for i in order[lo:lo + bs]] for lo in range(0, len(data), bs)]
    accum = cfg.optim.accumulation
    records: list[dict] = []
    sink = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    try:
        for w, lo in enumerate(range(0, len(micro_batches), accum)):
            window = micro_batches[lo:lo + accum]
            optimizer.zero_grad()
            for p in model.parameters():  # params excluded from the optimizer too
                p.grad = None
            losses = accumulate_window(model, window, cfg.loss, accum, temperature)
            step_num = start_iter + w + 1
            lr = lr_at(step_num, cfg.optim)
            optimizer.step(lr)
            record = {"iter": step_num, "lr": lr, **losses}
            records.append(record)
            if sink is not None:
                sink.write(json.dumps(record) + "\n")
    finally:
        if sink is not None:
            sink.close()
    return records


# ---------------------------------------------------------------------------
# inference + scoring helpers (shared by the Trainer's val hook and the CLI)


def predict_events(model: SedModel, mel: np.ndarray, cfg: DecodeConfig,
                   clip_seconds: float | None = None) -> tuple[list[Event], TokenSequence]:
    """Decode one clip and parse the caption into events (total: never raises
    on model output; malformed fragments are simply dropped by the parser)."""
    seq = decode(model, mel, cfg)
    parsed = parse_sequence(seq, model.vocab, clip_seconds)
    return parsed.events, seq


def score_split(model: SedModel, dataset: ClipDataset, split: str, decode_cfg: DecodeConfig,
                metrics_cfg: MetricsConfig) -> dict:
    """Decode every clip in `split` and score against the manifest labels."""
    model.eval()
    refs: dict[str, list[Event]] = {}
    preds: dict[str, list[Event]] = {}
    texts: dict[str, str] = {}
    for entry in dataset.clips(split):
        refs[entry["id"]] = manifest_events(entry)
        events, seq = predict_events(model, dataset.mel(entry), decode_cfg, dataset.clip_seconds)
        preds[entry["id"]] = events
        texts[entry["id"]] = dataset.vocab.decode(seq.ids)
    ev = event_f1(refs, preds, metrics_cfg.collar, metrics_cfg.offset_ratio)
    seg = segment_f1(refs, preds, metrics_cfg.segment_seconds, dataset.clip_seconds)
    return {
        "event_f1": ev.micro.f1,
        "segment_f1": seg.micro.f1,
        "event_report": ev,
        "segment_report": seg,
        "predictions": preds,
        "texts": texts,
    }


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: SedModel, optimizer: AdamW | None = None,
                    temperature: TemperatureParam | None = None, meta: dict | None = None) -> None:
    """Write model (+ optimizer + learnable temperature) state with metadata.

    Model arrays are prefixed "model.", optimizer arrays keep their "adamw."
    prefix, and a learnable temperature is stored as "loss.log_tau". Metadata
    always records the vocabulary (classes + clip_seconds + full token list)
    so a loader can verify it rebuilds the same token ids.
    """
    named: dict[str, np.ndarray] = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        named.update(optimizer.state_arrays())
    if temperature is not None:
        named["loss.log_tau"] = temperature.log_tau.data
    meta = dict(meta or {})
    meta.setdefault("classes", list(model.vocab.classes))
    meta.setdefault("clip_seconds", model.vocab.clip_seconds)
    meta.setdefault("vocab_tokens", list(model.vocab.tokens))
    # the dropout draw counter makes a resumed run replay the exact masks
    meta.setdefault("dropout_counter", model.dropout_source.counter)
    save_tensors(path, named, meta)


def load_checkpoint(path, model: SedModel, optimizer: AdamW | None = None,
                    temperature: TemperatureParam | None = None) -> dict:
    """Restore state written by save_checkpoint into live objects; returns meta.

    The stored vocabulary token list must match the model's exactly — token
    ids are positional, so any drift silently scrambles captions otherwise.
    """
    arrays, meta = load_tensors(path)
    tokens = meta.get("vocab_tokens")
    if tokens is not None and list(tokens) != list(model.vocab.tokens):
        raise InputError(
            "checkpoint vocabulary does not match the model's "
            f"({len(tokens)} vs {len(model.vocab.tokens)} tokens or different order)"
        )
    model.load_state_dict({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    if "dropout_counter" in meta:
        model.dropout_source.reset(int(meta["dropout_counter"]))
    if optimizer is not None:
        adam = {k: v for k, v in arrays.items() if k.startswith("adamw.")}
        if not adam:
            raise InputError(f"checkpoint '{path}' holds no optimizer state")
        optimizer.load_state_arrays(adam)
    if temperature is not None:
        if "loss.log_tau" not in arrays:
            raise InputError(f"checkpoint '{path}' holds no learnable temperature")
        temperature.log_tau.data[...] = arrays["loss.log_tau"]
    return meta


# ---------------------------------------------------------------------------
# multi-epoch driver


class Trainer:
    """Epoch loop with a validation hook, checkpointing, and early stopping.

    Writes (when out_dir is given): training_log.jsonl (one record per
    optimizer step), history.csv (one row per epoch), last.ckpt every epoch,
    and best.ckpt whenever validation event-F1 (micro) improves.
    """

    def __init__(self, model: SedModel, dataset: ClipDataset, cfg: TrainerConfig,
                 out_dir=None, train_split: str = "train", val_split: str = "val",
                 meta: dict | None = None):
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.train_split = train_split
        self.val_split = val_split if val_split in dataset._by_split else None
        self.meta = dict(meta or {})
        # freezing works by exclusion from the optimizer, not by flipping
        # requires_grad: parameter enumeration (and thus state_dict) only sees
        # grad-bearing tensors, so a flipped flag would drop frozen weights
        # from every checkpoint written afterwards
        trainable = [
            (n, p) for n, p in model.named_parameters()
            if not (cfg.freeze_encoder and n.startswith("encoder."))
        ]
        self.temperature = TemperatureParam(cfg.loss.temperature) if cfg.loss.learnable_temperature else None
        if self.temperature is not None:
            trainable.append(("loss.log_tau", self.temperature.log_tau))
        self.optimizer = AdamW(trainable, cfg.optim)
        self.iteration = 0
        self.epoch = 0
        self.best_event_f1 = float("-inf")
        self.history: list[dict] = []
        self._canonical: list[TrainExample] | None = None

    # -- data ------------------------------------------------------------

    def epoch_examples(self, epoch: int) -> list[TrainExample]:
        if not self.cfg.augment:
            if self._canonical is None:
                self._canonical = self.dataset.examples(self.train_split)
            return self._canonical
        rng = np.random.default_rng([self.cfg.seed, 7919, epoch])
        return [
            self.dataset.augmented_example(entry, self.cfg.max_shift_seconds, rng)
            for entry in self.dataset.clips(self.train_split)
        ]

    # -- validation / checkpoints -----------------------------------------

    def validate(self) -> dict:
        if self.val_split is None:
            return {"event_f1": float("nan"), "segment_f1": float("nan")}
        temp = self.temperature.value().item() if self.temperature is not None else None
        scores = score_split(self.model, self.dataset, self.val_split, self.cfg.decode, self.cfg.metrics)
        if temp is not None:
            scores["temperature"] = temp
        return scores

    def _checkpoint_meta(self, val: dict) -> dict:
        meta = dict(self.meta)
        meta.update(
            epoch=self.epoch,
            iteration=self.iteration,
            val_event_f1=val.get("event_f1"),
            val_segment_f1=val.get("segment_f1"),
            seed=self.cfg.seed,
        )
        return meta

    def save(self, path, val: dict | None = None) -> None:
        save_checkpoint(path, self.model, self.optimizer, self.temperature,
                        self._checkpoint_meta(val or {}))

    # -- the loop ----------------------------------------------------------

    def run(self) -> dict:
        log_path = self.out_dir / "training_log.jsonl" if self.out_dir is not None else None
        csv_path = self.out_dir / "history.csv" if self.out_dir is not None else None
        if csv_path is not None and not csv_path.exists():
            with open(csv_path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(
                    ["epoch", "iteration", "lr", "train_ce", "train_con", "train_total",
                     "val_event_f1", "val_segment_f1"]
                )
        stale = 0
        for epoch in range(self.cfg.epochs):
            self.epoch = epoch
            records = train_epoch(
                self.model, self.epoch_examples(epoch), self.cfg,
                optimizer=self.optimizer, epoch=epoch, start_iter=self.iteration,
                temperature=self.temperature, log_path=log_path,
            )
            self.iteration = records[-1]["iter"]
            means = {k: float(np.mean([r[k] for r in records])) for k in ("ce", "con", "total")}
            val = self.validate()
            row = {
                "epoch": epoch,
                "iteration": self.iteration,
                "lr": records[-1]["lr"],
                "train_ce": means["ce"],
                "train_con": means["con"],
                "train_total": means["total"],
                "val_event_f1": val.get("event_f1"),
                "val_segment_f1": val.get("segment_f1"),
            }
            self.history.append(row)
            if csv_path is not None:
                with open(csv_path, "a", newline="", encoding="utf-8") as f:
                    csv.writer(f).writerow([row[k] for k in
                                            ("epoch", "iteration", "lr", "train_ce", "train_con",
                                             "train_total", "val_event_f1", "val_segment_f1")])
            logger.info(
                "epoch %d: iter=%d total=%.4f val_event_f1=%s val_segment_f1=%s",
                epoch, self.iteration, means["total"], row["val_event_f1"], row["val_segment_f1"],
            )
            if self.out_dir is not None:
                self.save(self.out_dir / "last.ckpt", val)
            if self.val_split is not None:
                if val["event_f1"] > self.best_event_f1:
                    self.best_event_f1 = val["event_f1"]
                    stale = 0
                    if self.out_dir is not None:
                        self.save(self.out_dir / "best.ckpt", val)
                else:
                    stale += 1
                    if self.cfg.patience and stale >= self.cfg.patience:
                        logger.info("early stop after %d stale epochs", stale)
                        break
        return {
            "epochs_run": len(self.history),
            "iterations": self.iteration,
            "best_val_event_f1": self.best_event_f1,
            "history": self.history,
        }
