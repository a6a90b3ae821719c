"""Training loop: accumulation linearity, logging, checkpoints, epoch driver."""

import json
import math

import numpy as np
import pytest

from sedgen.decoder import DecoderConfig
from sedgen.decoding import DecodeConfig
from sedgen.dsp import FeatureConfig
from sedgen.encoders import EncoderConfig
from sedgen.errors import ConfigError, InputError
from sedgen.losses import LossConfig, TemperatureParam, total_loss
from sedgen.model import SedModel
from sedgen.optim import AdamW, OptimConfig, lr_at
from sedgen.scenes import ClassSpec, SceneSpec, generate_dataset
from sedgen.tensor import Tape, backward
from sedgen.training import (
    ClipDataset,
    Trainer,
    TrainerConfig,
    accumulate_window,
    batch_losses,
    load_checkpoint,
    predict_events,
    save_checkpoint,
    score_split,
    train_epoch,
)
from sedgen.vocab import Vocabulary

CLASSES = ["Speech", "Dog"]
CLIP_SECONDS = 4.0
RATE = 4000


@pytest.fixture(scope="module")
def manifest_path(tmp_path_factory):
    spec = SceneSpec(
        classes=[ClassSpec("Speech", "sine", 220.0), ClassSpec("Dog", "chirp", 880.0)],
        sample_rate=RATE,
        clip_seconds=CLIP_SECONDS,
        events_per_clip=(1, 2),
        event_seconds=(0.4, 1.2),
        seed=3,
    )
    out = tmp_path_factory.mktemp("data")
    return generate_dataset(spec, out, {"train": 6, "val": 3})


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(CLASSES, clip_seconds=CLIP_SECONDS)


@pytest.fixture(scope="module")
def dataset(manifest_path, vocab):
    return ClipDataset(manifest_path, vocab)


def make_model(vocab, dropout=0.0, seed=0, dropout_seed=0):
    enc = EncoderConfig(kind="pann_lite", model_dim=16, heads=2, gru_hidden=8, out_frames=13, d_shared=8)
    dec = DecoderConfig(layers=1, heads=2, d_model=16, ffn_dim=32, dropout=dropout, max_len=64)
    return SedModel(vocab, enc, dec, np.random.default_rng(seed), dropout_seed=dropout_seed)


def make_cfg(**kw):
    optim = kw.pop("optim", None) or OptimConfig(
        batch_size=kw.pop("batch_size", 2),
        accumulation=kw.pop("accumulation", 1),
        warmup_iters=kw.pop("warmup_iters", 4),
        total_iters=kw.pop("total_iters", 100),
    )
    kw.setdefault("decode", DecodeConfig(strategy="greedy", constrained=True, max_len=32))
    return TrainerConfig(optim=optim, loss=kw.pop("loss", LossConfig()), **kw)


# ---------------------------------------------------------------------------
# dataset adapter


class TestClipDataset:
    def test_example_shapes_and_token_frame(self, dataset, vocab):
        examples = dataset.examples("train")
        assert len(examples) == 6
        for ex in examples:
            assert ex.mel.shape == (101, 64)  # floor(16000/160) + 1 at this rate/hop ratio
            assert ex.ids[0] == vocab.bos_id
            assert ex.ids[-1] == vocab.eos_id
            assert vocab.pad_id not in ex.ids
            assert ex.events  # generator guarantees at least one event

    def test_mel_and_waveform_cached(self, dataset):
        entry = dataset.clips("train")[0]
        assert dataset.mel(entry) is dataset.mel(entry)
        assert dataset.waveform(entry) is dataset.waveform(entry)

    def test_unknown_split_rejected(self, dataset):
        with pytest.raises(InputError):
            dataset.clips("test_time")

    def test_zero_shift_matches_canonical(self, dataset):
        entry = dataset.clips("train")[0]
        plain = dataset.example(entry)
        shifted = dataset.augmented_example(entry, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(plain.mel, shifted.mel)
        np.testing.assert_array_equal(plain.ids, shifted.ids)

    def test_augmentation_replays_per_seed(self, dataset):
        entry = dataset.clips("train")[1]
        a = dataset.augmented_example(entry, 1.0, np.random.default_rng(11))
        b = dataset.augmented_example(entry, 1.0, np.random.default_rng(11))
        c = dataset.augmented_example(entry, 1.0, np.random.default_rng(12))
        np.testing.assert_array_equal(a.mel, b.mel)
        assert not np.array_equal(a.mel, c.mel)

    def test_feature_rate_mismatch_rejected(self, manifest_path, vocab):
        with pytest.raises(ConfigError):
            ClipDataset(manifest_path, vocab, features=FeatureConfig(sample_rate=8000))


# ---------------------------------------------------------------------------
# micro-batch losses


class TestBatchLosses:
    def test_singleton_batch_contrastive_is_zero(self, dataset, vocab):
        model = make_model(vocab)
        ce, con = batch_losses(model, dataset.examples("train")[:1], LossConfig())
        assert con.item() == 0.0
        assert math.isfinite(ce.item())

    def test_random_init_ce_near_log_vocab(self, dataset, vocab):
        model = make_model(vocab, seed=17)
        ce, _ = batch_losses(model, dataset.examples("train")[:4], LossConfig())
        assert abs(ce.item() - math.log(vocab.size)) < 0.5

    def test_components_sum_exactly(self, dataset, vocab):
        model = make_model(vocab)
        cfg = LossConfig()
        ce, con = batch_losses(model, dataset.examples("train")[:2], cfg)
        assert abs(total_loss(ce, con, cfg).item() - (ce.item() + con.item())) <= 1e-12

    def test_learnable_temperature_receives_gradient(self, dataset, vocab):
        model = make_model(vocab)
        temp = TemperatureParam(0.07)
        cfg = LossConfig(learnable_temperature=True)
        with Tape() as tape:
            ce, con = batch_losses(model, dataset.examples("train")[:2], cfg, temperature=temp)
            backward(total_loss(ce, con, cfg), tape)
        assert temp.log_tau.grad is not None
        assert np.all(np.isfinite(temp.log_tau.grad))

    def test_empty_batch_rejected(self, vocab):
        with pytest.raises(InputError):
            batch_losses(make_model(vocab), [], LossConfig())


# ---------------------------------------------------------------------------
# gradient accumulation


class TestAccumulation:
    def test_accumulated_window_equals_single_batch_update(self, dataset, vocab):
        """Four copies of one micro-batch at accumulation=4 must produce the
        same optimizer step as the micro-batch alone at accumulation=1."""
        example = dataset.examples("train")[0]
        model_a = make_model(vocab, dropout=0.0, seed=5)
        model_b = make_model(vocab, dropout=0.0, seed=5)
        cfg_a = make_cfg(batch_size=1, accumulation=4)
        cfg_b = make_cfg(batch_size=1, accumulation=1)
        train_epoch(model_a, [example] * 4, cfg_a)
        train_epoch(model_b, [example], cfg_b)
        state_a, state_b = model_a.state_dict(), model_b.state_dict()
        assert state_a.keys() == state_b.keys()
        for name in state_a:
            np.testing.assert_allclose(state_a[name], state_b[name], rtol=0, atol=1e-10, err_msg=name)

    def test_window_gradients_are_mean_of_micro_gradients(self, dataset, vocab):
        model = make_model(vocab, dropout=0.0, seed=9)
        examples = dataset.examples("train")
        batches = [examples[0:2], examples[2:4], examples[4:6], examples[1:3]]
        loss_cfg = LossConfig()
        params = list(model.named_parameters())
        for _, p in params:
            p.grad = None
        accumulate_window(model, batches, loss_cfg, accumulation=len(batches))
        window_grads = {name: p.grad.copy() for name, p in params}
        manual = {name: np.zeros_like(p.data) for name, p in params}
        for batch in batches:
            for _, p in params:
                p.grad = None
            with Tape() as tape:
                ce, con = batch_losses(model, batch, loss_cfg)
                backward(total_loss(ce, con, loss_cfg), tape)
            for name, p in params:
                manual[name] += p.grad / len(batches)
        for name in manual:
            np.testing.assert_allclose(window_grads[name], manual[name], rtol=0, atol=1e-10, err_msg=name)

    def test_partial_trailing_window_still_steps(self, dataset, vocab):
        model = make_model(vocab, dropout=0.0)
        cfg = make_cfg(batch_size=1, accumulation=2)
        optimizer = AdamW(list(model.named_parameters()), cfg.optim)
        records = train_epoch(model, dataset.examples("train")[:3], cfg, optimizer=optimizer)
        assert len(records) == 2  # windows of 2 + 1 micro-batches
        assert optimizer.t == 2
        assert records[1]["total"] > 0.0


# ---------------------------------------------------------------------------
# epoch log contract


class TestTrainEpoch:
    def test_components_sum_to_total_in_every_record(self, dataset, vocab):
        model = make_model(vocab, dropout=0.2)
        records = train_epoch(model, dataset.examples("train"), make_cfg(batch_size=2, accumulation=2))
        assert records
        for r in records:
            assert abs(r["ce"] + r["con"] - r["total"]) <= 1e-12

    def test_iteration_numbering_and_lr(self, dataset, vocab):
        model = make_model(vocab)
        cfg = make_cfg(batch_size=2, accumulation=1)
        records = train_epoch(model, dataset.examples("train"), cfg, start_iter=5)
        assert [r["iter"] for r in records] == [6, 7, 8]
        for r in records:
            assert r["lr"] == lr_at(r["iter"], cfg.optim)
            assert r["lr"] > 0.0  # 1-based stepping never hits the zero-lr warmup origin

    def test_same_seed_runs_are_identical(self, dataset, vocab):
        logs = []
        for _ in range(2):
            model = make_model(vocab, dropout=0.2, seed=4, dropout_seed=21)
            cfg = make_cfg(batch_size=2, accumulation=2, seed=13)
            optimizer = AdamW(list(model.named_parameters()), cfg.optim)
            run = []
            for epoch in range(2):
                start = run[-1]["iter"] if run else 0
                run += train_epoch(model, dataset.examples("train"), cfg,
                                   optimizer=optimizer, epoch=epoch, start_iter=start)
            logs.append(run)
        assert logs[0] == logs[1]

    def test_epoch_key_changes_the_shuffle(self, dataset, vocab):
        losses = []
        for epoch in (0, 1):
            model = make_model(vocab, dropout=0.0, seed=4)
            records = train_epoch(model, dataset.examples("train"),
                                  make_cfg(batch_size=2, accumulation=1), epoch=epoch)
            losses.append([r["total"] for r in records])
        assert losses[0] != losses[1]  # different micro-batch composition

    def test_jsonl_sink_matches_returned_records(self, dataset, vocab, tmp_path):
        model = make_model(vocab)
        log_path = tmp_path / "log.jsonl"
        records = train_epoch(model, dataset.examples("train"),
                              make_cfg(batch_size=2, accumulation=2), log_path=log_path)
        lines = log_path.read_text().splitlines()
        assert [json.loads(line) for line in lines] == records
        assert set(records[0]) == {"iter", "lr", "ce", "con", "total"}

    def test_empty_data_rejected(self, vocab):
        with pytest.raises(InputError):
            train_epoch(make_model(vocab), [], make_cfg())


# ---------------------------------------------------------------------------
# checkpoints and exact resume


class TestCheckpoints:
    def test_round_trip_restores_bitwise_logits(self, dataset, vocab, tmp_path):
        model = make_model(vocab, dropout=0.1, seed=2)
        cfg = make_cfg(batch_size=2, accumulation=1)
        optimizer = AdamW(list(model.named_parameters()), cfg.optim)
        train_epoch(model, dataset.examples("train"), cfg, optimizer=optimizer)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, optimizer, meta={"config_hash": "abc", "seed": 0})
        clone = make_model(vocab, dropout=0.1, seed=99)  # different init, fully overwritten
        meta = load_checkpoint(path, clone, AdamW(list(clone.named_parameters()), cfg.optim))
        assert meta["config_hash"] == "abc"
        assert meta["classes"] == CLASSES
        ex = dataset.examples("val")[0]
        want = model.eval().decode_logits(ex.ids[:-1], model.encode_audio(ex.mel)).data
        got = clone.eval().decode_logits(ex.ids[:-1], clone.encode_audio(ex.mel)).data
        np.testing.assert_array_equal(want, got)

    def test_resume_replays_the_exact_run(self, dataset, vocab, tmp_path):
        """epoch 0 + checkpoint + epoch 1 in a fresh process-equivalent must
        match an uninterrupted two-epoch run bitwise (optimizer moments and
        dropout draws included)."""
        examples = dataset.examples("train")
        cfg = make_cfg(batch_size=2, accumulation=2, seed=8)

        straight = make_model(vocab, dropout=0.2, seed=6, dropout_seed=3)
        opt = AdamW(list(straight.named_parameters()), cfg.optim)
        rec0 = train_epoch(straight, examples, cfg, optimizer=opt, epoch=0, start_iter=0)
        rec1 = train_epoch(straight, examples, cfg, optimizer=opt, epoch=1, start_iter=rec0[-1]["iter"])

        first = make_model(vocab, dropout=0.2, seed=6, dropout_seed=3)
        opt_first = AdamW(list(first.named_parameters()), cfg.optim)
        rec0b = train_epoch(first, examples, cfg, optimizer=opt_first, epoch=0, start_iter=0)
        assert rec0b == rec0
        path = tmp_path / "resume.ckpt"
        save_checkpoint(path, first, opt_first, meta={"iteration": rec0b[-1]["iter"]})

        resumed = make_model(vocab, dropout=0.2, seed=41, dropout_seed=3)
        opt_resumed = AdamW(list(resumed.named_parameters()), cfg.optim)
        meta = load_checkpoint(path, resumed, opt_resumed)
        rec1b = train_epoch(resumed, examples, cfg, optimizer=opt_resumed, epoch=1,
                            start_iter=meta["iteration"])
        assert rec1b == rec1
        final_a, final_b = straight.state_dict(), resumed.state_dict()
        for name in final_a:
            np.testing.assert_array_equal(final_a[name], final_b[name], err_msg=name)

    def test_vocabulary_mismatch_rejected(self, dataset, vocab, tmp_path):
        model = make_model(vocab)
        path = tmp_path / "v.ckpt"
        save_checkpoint(path, model)
        other = make_model(Vocabulary(["Speech", "Cat"], clip_seconds=CLIP_SECONDS))
        with pytest.raises(InputError):
            load_checkpoint(path, other)

    def test_missing_optimizer_state_rejected(self, vocab, tmp_path):
        model = make_model(vocab)
        path = tmp_path / "bare.ckpt"
        save_checkpoint(path, model)  # no optimizer passed
        clone = make_model(vocab)
        with pytest.raises(InputError):
            load_checkpoint(path, clone, AdamW(list(clone.named_parameters()), OptimConfig()))

    def test_learnable_temperature_round_trip(self, vocab, tmp_path):
        model = make_model(vocab)
        temp = TemperatureParam(0.07)
        temp.log_tau.data[...] = np.log(0.2)
        path = tmp_path / "temp.ckpt"
        save_checkpoint(path, model, temperature=temp)
        restored = TemperatureParam(0.07)
        load_checkpoint(path, make_model(vocab), temperature=restored)
        assert restored.value().item() == pytest.approx(0.2, rel=1e-12)


# ---------------------------------------------------------------------------
# epoch driver


class TestTrainer:
    def test_run_writes_logs_history_and_checkpoints(self, dataset, vocab, tmp_path):
        model = make_model(vocab, dropout=0.1)
        cfg = make_cfg(batch_size=2, accumulation=1, epochs=2)
        trainer = Trainer(model, dataset, cfg, out_dir=tmp_path / "run")
        summary = trainer.run()
        assert summary["epochs_run"] == 2
        assert summary["iterations"] == 6  # 3 steps per epoch
        assert len(summary["history"]) == 2
        out = tmp_path / "run"
        for name in ("training_log.jsonl", "history.csv", "last.ckpt", "best.ckpt"):
            assert (out / name).exists(), name
        lines = (out / "training_log.jsonl").read_text().splitlines()
        assert len(lines) == 6
        rows = (out / "history.csv").read_text().splitlines()
        assert len(rows) == 3  # header + one row per epoch
        assert rows[0].startswith("epoch,iteration,lr,")
        _, meta = __import__("sedgen.checkpoint", fromlist=["load_tensors"]).load_tensors(out / "best.ckpt")
        assert "val_event_f1" in meta and "vocab_tokens" in meta

    def test_early_stopping_counts_stale_epochs(self, dataset, vocab):
        scripted = iter([0.5, 0.4, 0.4, 0.9, 0.9])

        class Scripted(Trainer):
            def validate(self):
                return {"event_f1": next(scripted), "segment_f1": 0.0}

        cfg = make_cfg(batch_size=2, accumulation=1, epochs=10, patience=2)
        trainer = Scripted(make_model(vocab), dataset, cfg)
        summary = trainer.run()
        assert summary["epochs_run"] == 3  # improvement, stale, stale -> stop
        assert summary["best_val_event_f1"] == 0.5

    def test_freeze_encoder_pins_encoder_parameters(self, dataset, vocab):
        model = make_model(vocab, dropout=0.0)
        before = {name: arr.copy() for name, arr in model.state_dict().items()}
        cfg = make_cfg(batch_size=2, accumulation=1, epochs=1, freeze_encoder=True)
        trainer = Trainer(model, dataset, cfg)
        assert all(not name.startswith("encoder.") for name, _ in trainer.optimizer.params)
        trainer.run()
        after = model.state_dict()
        frozen = [n for n in before if n.startswith("encoder.")]
        moved = [n for n in before if not n.startswith("encoder.")]
        assert frozen and moved
        for name in frozen:
            np.testing.assert_array_equal(before[name], after[name], err_msg=name)
        assert any(not np.array_equal(before[name], after[name]) for name in moved)

    def test_learnable_temperature_is_optimized(self, dataset, vocab):
        cfg = make_cfg(batch_size=2, accumulation=1, epochs=1,
                       loss=LossConfig(learnable_temperature=True))
        trainer = Trainer(make_model(vocab), dataset, cfg)
        start = trainer.temperature.value().item()
        trainer.run()
        assert trainer.temperature.value().item() != start

    def test_augmented_epochs_replay_and_vary(self, dataset, vocab):
        cfg = make_cfg(batch_size=2, accumulation=1, epochs=1, augment=True,
                       max_shift_seconds=0.5, seed=3)
        trainer = Trainer(make_model(vocab), dataset, cfg)
        first = trainer.epoch_examples(0)
        again = trainer.epoch_examples(0)
        other = trainer.epoch_examples(1)
        for a, b in zip(first, again):
            np.testing.assert_array_equal(a.mel, b.mel)
        assert any(not np.array_equal(a.mel, c.mel) for a, c in zip(first, other))


# ---------------------------------------------------------------------------
# scoring helpers


class TestScoring:
    def test_score_split_shapes(self, dataset, vocab):
        model = make_model(vocab, dropout=0.1)
        scores = score_split(model, dataset, "val", DecodeConfig(strategy="greedy", constrained=True,
                                                                 max_len=32),
                             make_cfg().metrics)
        assert 0.0 <= scores["event_f1"] <= 1.0
        assert 0.0 <= scores["segment_f1"] <= 1.0
        val_ids = {entry["id"] for entry in dataset.clips("val")}
        assert set(scores["predictions"]) == val_ids
        assert all(isinstance(t, str) for t in scores["texts"].values())

    def test_predict_events_total_on_untrained_model(self, dataset, vocab):
        model = make_model(vocab)
        mel = dataset.examples("val")[0].mel
        events, seq = predict_events(model, mel, DecodeConfig(strategy="greedy", constrained=True,
                                                              max_len=32), CLIP_SECONDS)
        assert seq.ids[0] == vocab.bos_id and seq.ids[-1] == vocab.eos_id
        for ev in events:
            assert 0.0 <= ev.onset < ev.offset <= CLIP_SECONDS
