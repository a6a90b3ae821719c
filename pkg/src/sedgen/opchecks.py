"""Registry of finite-difference checks covering every differentiable op.

Each entry names one op (or composite) and builds a deterministic scalar
closure plus the parameters to perturb. Structurally linear ops are held to
1e-6; nonlinear ones to 1e-4. The two `joint_loss_*` entries push the full
training objective — audio encoder, text encoder, and decoder on a two-clip
micro-batch — through the tape, subsampling entries per parameter to keep the
sweep fast.

Consumed by both the test suite and the `gradcheck` CLI command, so the CLI
report and the test gate can never drift apart.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig
from .encoders import EncoderConfig, build_encoder
from .losses import LossConfig, TemperatureParam, bce_logits_loss, ce_loss, contrastive_loss, total_loss
from .gradcheck import GradcheckReport, gradcheck
from .model import SedModel
from .nn import BiGRU, Conv2d, Dropout, DropoutSource, Embedding, GRUCell, LayerNorm, Linear, MultiHeadAttention, run_gru
from .tensor import Tensor
from .vocab import Vocabulary

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4


@dataclass
class OpCheck:
    name: str
    build: Callable[[], tuple[Callable[[], Tensor], list[tuple[str, Tensor]]]]
    tol: float
    eps: float = 1e-5
    max_entries: int | None = None

    def run(self) -> GradcheckReport:
        f, params = self.build()
        return gradcheck(f, params, eps=self.eps, tol=self.tol, max_entries=self.max_entries)


def _rand(shape, seed, scale=1.0, offset=0.0) -> Tensor:
    data = np.random.default_rng(seed).standard_normal(shape) * scale + offset
    return Tensor(data, requires_grad=True)


def _probe(x: Tensor, seed=1000) -> Tensor:
    """Fixed random projection to a scalar, so any op output is checkable."""
    w = np.random.default_rng(seed).standard_normal(x.shape)
    return T.sum_(T.mul(x, Tensor(w)))


def _unary(op, seed, tol, shape=(3, 4), scale=1.0, offset=0.0, **kw) -> OpCheck:
    def build():
        x = _rand(shape, seed, scale, offset)
        return (lambda: _probe(op(x, **kw))), [("x", x)]

    return OpCheck(op.__name__, build, tol)


def _binary(op, seed, tol, shape=(3, 4), offset=0.0) -> OpCheck:
    def build():
        a = _rand(shape, seed, offset=offset)
        b = _rand(shape, seed + 1, offset=offset)
        return (lambda: _probe(op(a, b))), [("a", a), ("b", b)]

    return OpCheck(op.__name__, build, tol)


# ---------------------------------------------------------------------------
# builders for the composite entries


def _tiny_encoder_cfg(kind: str) -> EncoderConfig:
    return EncoderConfig(kind=kind, model_dim=16, patch=2, window=2, stages=2, heads=2,
                         gru_hidden=6, out_frames=9, num_classes=2, d_shared=8)


def _tiny_model(kind: str, seed: int = 0) -> tuple[SedModel, Vocabulary]:
    vocab = Vocabulary(["Beep", "Chirp"])
    dec = DecoderConfig(layers=1, heads=2, d_model=16, ffn_dim=24, dropout=0.0, max_len=32)
    model = SedModel(vocab, _tiny_encoder_cfg(kind), dec, np.random.default_rng(seed))
    return model, vocab


def _boost_normalized_projections(*modules) -> None:
    """Scale up projections that feed l2_normalize.

    At the default tiny init the pre-normalization vector has near-zero norm,
    which puts the normalizer in a curvature regime where central differences
    are themselves wrong (the fd error term grows like 1/||v||^3). An O(1)
    norm checks the identical code path at a numerically valid point.
    """
    for module in modules:
        for _, p in module.named_parameters():
            p.data *= 20.0


def _encoder_check(kind: str) -> OpCheck:
    def build():
        encoder = build_encoder(_tiny_encoder_cfg(kind), np.random.default_rng(3))
        _boost_normalized_projections(encoder.pool)
        mel = np.random.default_rng(4).standard_normal((17, 64))

        def f():
            out = encoder(mel)
            return T.add(_probe(out.frames, 1001), _probe(out.pooled, 1002))

        return f, list(encoder.named_parameters())

    return OpCheck(f"encoder_{kind}", build, NONLINEAR_TOL, max_entries=4)


def _joint_loss_check(kind: str) -> OpCheck:
    """Eq-style joint objective on a 2-clip micro-batch, end to end."""

    def build():
        model, vocab = _tiny_model(kind)
        model.eval()
        _boost_normalized_projections(model.encoder.pool, model.text_encoder.proj)
        mels = [np.random.default_rng(10 + i).standard_normal((17, 64)) for i in range(2)]
        caps = [
            np.array([vocab.bos_id, vocab.class_ids["Beep"], vocab.heard_id, vocab.between_id,
                      vocab.time_id(12), vocab.and_id, vocab.time_id(30), vocab.seconds_id,
                      vocab.eos_id]),
            np.array([vocab.bos_id, vocab.class_ids["Chirp"], vocab.heard_id, vocab.between_id,
                      vocab.time_id(0), vocab.and_id, vocab.time_id(95), vocab.seconds_id,
                      vocab.eos_id]),
        ]
        cfg = LossConfig()

        def f():
            ce_terms, a_rows, t_rows = [], [], []
            for mel, ids in zip(mels, caps):
                audio = model.encode_audio(mel)
                logits = model.decode_logits(ids[:-1], audio)
                ce_terms.append(ce_loss(logits, ids[1:], vocab.pad_id))
                a_rows.append(audio.pooled)
                t_rows.append(model.embed_text(ids))
            ce = T.mean(T.stack(ce_terms))
            con = contrastive_loss(T.stack(a_rows), T.stack(t_rows), cfg.temperature)
            return total_loss(ce, con, cfg)

        return f, list(model.named_parameters())

    return OpCheck(f"joint_loss_{kind}", build, NONLINEAR_TOL, max_entries=3)


def _attention_check() -> OpCheck:
    def build():
        attn = MultiHeadAttention(8, 2, np.random.default_rng(5))
        x = _rand((5, 8), 6)
        mask = np.tril(np.ones((5, 5), dtype=bool))

        def f():
            return _probe(attn(x, x, x, mask=mask))

        return f, [("x", x)] + list(attn.named_parameters())

    return OpCheck("multi_head_attention", build, NONLINEAR_TOL)


def _gru_checks() -> list[OpCheck]:
    def build_cell():
        cell = GRUCell(5, 4, np.random.default_rng(7))
        x = _rand((6, 5), 8)

        def f():
            return _probe(run_gru(cell, x, reverse=True))

        return f, [("x", x)] + list(cell.named_parameters())

    def build_bigru():
        gru = BiGRU(5, 4, np.random.default_rng(9))
        x = _rand((6, 5), 10)
        return (lambda: _probe(gru(x))), [("x", x)] + list(gru.named_parameters())

    return [
        OpCheck("gru_cell", build_cell, NONLINEAR_TOL),
        OpCheck("bigru", build_bigru, NONLINEAR_TOL),
    ]


def _module_checks() -> list[OpCheck]:
    def build_linear():
        lin = Linear(4, 3, np.random.default_rng(11))
        x = _rand((5, 4), 12)
        return (lambda: _probe(lin(x))), [("x", x)] + list(lin.named_parameters())

    def build_layernorm():
        ln = LayerNorm(6)
        ln.gain.data[...] = np.random.default_rng(13).standard_normal(6)
        x = _rand((4, 6), 14)
        return (lambda: _probe(ln(x))), [("x", x)] + list(ln.named_parameters())

    def build_embedding():
        emb = Embedding(7, 4, np.random.default_rng(15))
        ids = np.array([0, 3, 3, 6, 1])
        return (lambda: _probe(emb(ids))), list(emb.named_parameters())

    def build_conv_module():
        conv = Conv2d(2, 3, 3, np.random.default_rng(16), stride=2, padding=1)
        x = _rand((2, 6, 8), 17)
        return (lambda: _probe(conv(x))), [("x", x)] + list(conv.named_parameters())

    def build_dropout():
        source = DropoutSource(23)
        drop = Dropout(0.4, source)
        drop.training = True
        x = _rand((6, 6), 18)

        def f():
            source.reset(0)  # same mask every call keeps the closure deterministic
            return _probe(drop(x))

        return f, [("x", x)]

    return [
        OpCheck("linear", build_linear, LINEAR_TOL),
        OpCheck("layernorm_module", build_layernorm, NONLINEAR_TOL),
        OpCheck("embedding_module", build_embedding, LINEAR_TOL),
        OpCheck("conv2d_module", build_conv_module, LINEAR_TOL),
        OpCheck("dropout_train_mode", build_dropout, LINEAR_TOL),
    ]


def _loss_checks() -> list[OpCheck]:
    def unit_rows(shape, seed):
        raw = np.random.default_rng(seed).standard_normal(shape)
        return Tensor(raw / np.linalg.norm(raw, axis=1, keepdims=True), requires_grad=True)

    def build_contrastive():
        a, t = unit_rows((3, 5), 19), unit_rows((3, 5), 20)

        def f():
            an = T.l2_normalize(a)  # re-normalize inside so perturbed inputs stay legal
            tn = T.l2_normalize(t)
            return contrastive_loss(an, tn, 0.07)

        return f, [("audio", a), ("text", t)]

    def build_contrastive_learnable():
        a, t = unit_rows((3, 5), 21), unit_rows((3, 5), 22)
        temp = TemperatureParam(0.07)

        def f():
            return contrastive_loss(T.l2_normalize(a), T.l2_normalize(t), temp.value())

        return f, [("audio", a), ("text", t), ("log_tau", temp.log_tau)]

    def build_ce(smoothing):
        logits = _rand((6, 9), 23)
        targets = np.array([1, 4, 0, 8, 0, 2])

        def f():
            return ce_loss(logits, targets, pad_id=0, label_smoothing=smoothing)

        return f, [("logits", logits)]

    def build_bce():
        logits = _rand((4, 3), 24)
        targets = (np.random.default_rng(25).random((4, 3)) > 0.5).astype(float)
        return (lambda: bce_logits_loss(logits, targets)), [("logits", logits)]

    return [
        OpCheck("contrastive_loss", lambda: build_contrastive(), NONLINEAR_TOL),
        OpCheck("contrastive_loss_learnable_tau", lambda: build_contrastive_learnable(), NONLINEAR_TOL),
        OpCheck("ce_loss", lambda: build_ce(0.0), NONLINEAR_TOL),
        OpCheck("ce_loss_smoothed", lambda: build_ce(0.1), NONLINEAR_TOL),
        OpCheck("bce_logits_loss", lambda: build_bce(), NONLINEAR_TOL),
    ]


def _text_and_decoder_checks() -> list[OpCheck]:
    def build_text():
        model, vocab = _tiny_model("pann_lite", seed=26)
        ids = np.array([vocab.bos_id, vocab.class_ids["Beep"], vocab.eos_id])
        return (lambda: _probe(model.embed_text(ids), 1003)), list(model.text_encoder.named_parameters())

    def build_decoder():
        model, vocab = _tiny_model("htsat_lite", seed=27)
        model.eval()
        mel = np.random.default_rng(28).standard_normal((17, 64))
        ids = np.array([vocab.bos_id, vocab.class_ids["Chirp"], vocab.heard_id])

        def f():
            return _probe(model.decode_logits(ids, model.encode_audio(mel)), 1004)

        return f, list(model.decoder.named_parameters())

    return [
        OpCheck("text_encoder", build_text, NONLINEAR_TOL, max_entries=6),
        OpCheck("caption_decoder", build_decoder, NONLINEAR_TOL, max_entries=6),
    ]


# ---------------------------------------------------------------------------
# the registry


def registry() -> list[OpCheck]:
    checks = [
        # elementwise arithmetic; data offset away from kinks/poles where needed
        _binary(T.add, 30, LINEAR_TOL),
        _binary(T.sub, 31, LINEAR_TOL),
        _binary(T.mul, 32, LINEAR_TOL),        # bilinear: linear in each input
        _binary(T.div, 33, NONLINEAR_TOL, offset=3.0),
        _unary(T.neg, 34, LINEAR_TOL),
        _unary(T.exp, 35, NONLINEAR_TOL, scale=0.5),
        _unary(T.log, 36, NONLINEAR_TOL, scale=0.25, offset=2.0),
        _unary(T.sqrt, 37, NONLINEAR_TOL, scale=0.25, offset=2.0),
        _unary(T.tanh, 38, NONLINEAR_TOL),
        _unary(T.sigmoid, 39, NONLINEAR_TOL),
        _unary(T.relu, 40, NONLINEAR_TOL, offset=0.5),  # keep entries off the kink
        _unary(T.gelu, 41, NONLINEAR_TOL),
        # shape and reduction ops
        _unary(T.transpose, 42, LINEAR_TOL),
        OpCheck("reshape", _build_reshape, LINEAR_TOL),
        _unary(T.flip, 44, LINEAR_TOL, axis=0),
        _unary(T.sum_, 45, LINEAR_TOL, axis=1),
        _unary(T.mean, 46, LINEAR_TOL, axis=0),
        # softmax family and normalizers
        _unary(T.softmax, 47, NONLINEAR_TOL, axis=-1),
        _unary(T.log_softmax, 48, NONLINEAR_TOL, axis=-1),
        _unary(T.l2_normalize, 49, NONLINEAR_TOL),
    ]
    return checks


def _build_reshape():
    x = _rand((3, 4), 43)
    return (lambda: _probe(T.reshape(x, (2, 6)), 1005)), [("x", x)]


def _shape_checks() -> list[OpCheck]:
    def build_matmul_2d():
        a, b = _rand((3, 4), 50), _rand((4, 2), 51)
        return (lambda: _probe(T.matmul(a, b))), [("a", a), ("b", b)]

    def build_matmul_batched():
        a, b = _rand((2, 3, 4), 52), _rand((2, 4, 2), 53)
        return (lambda: _probe(T.matmul(a, b))), [("a", a), ("b", b)]

    def build_concat():
        a, b = _rand((2, 4), 54), _rand((3, 4), 55)
        return (lambda: _probe(T.concat([a, b], axis=0))), [("a", a), ("b", b)]

    def build_stack():
        a, b = _rand((3, 4), 56), _rand((3, 4), 57)
        return (lambda: _probe(T.stack([a, b], axis=0))), [("a", a), ("b", b)]

    def build_slice():
        x = _rand((4, 6), 58)
        return (lambda: _probe(T.slice_(x, (slice(1, 3), slice(0, 5))))), [("x", x)]

    def build_layernorm_fn():
        x = _rand((3, 6), 59)
        gamma = _rand((6,), 60)
        beta = _rand((6,), 61)
        return (lambda: _probe(T.layernorm(x, gamma, beta))), [("x", x), ("g", gamma), ("b", beta)]

    def build_embedding_fn():
        table = _rand((7, 4), 62)
        ids = np.array([2, 2, 5, 0])
        return (lambda: _probe(T.embedding(table, ids))), [("table", table)]

    def build_conv2d_fn():
        x = _rand((2, 6, 8), 63)
        w = _rand((3, 2, 3, 3), 64)
        bias = _rand((3,), 65)
        return (lambda: _probe(T.conv2d(x, w, bias, stride=1, padding=1))), \
            [("x", x), ("w", w), ("bias", bias)]

    def build_avg_pool():
        x = _rand((2, 6, 8), 66)
        return (lambda: _probe(T.avg_pool2d(x, 2))), [("x", x)]

    def build_max_pool():
        # entries spread out so the eps-perturbation never flips a winner
        x = _rand((2, 6, 8), 67, scale=10.0)
        return (lambda: _probe(T.max_pool2d(x, 2))), [("x", x)]

    def build_dropout_fn():
        x = _rand((5, 5), 68)

        def f():
            return _probe(T.dropout(x, 0.4, np.random.default_rng(99)))

        return f, [("x", x)]

    return [
        OpCheck("matmul_2d", build_matmul_2d, LINEAR_TOL),
        OpCheck("matmul_batched", build_matmul_batched, NONLINEAR_TOL),
        OpCheck("concat", build_concat, LINEAR_TOL),
        OpCheck("stack", build_stack, LINEAR_TOL),
        OpCheck("slice", build_slice, LINEAR_TOL),
        OpCheck("layernorm", build_layernorm_fn, NONLINEAR_TOL),
        OpCheck("embedding", build_embedding_fn, LINEAR_TOL),
        OpCheck("conv2d", build_conv2d_fn, LINEAR_TOL),
        OpCheck("avg_pool2d", build_avg_pool, LINEAR_TOL),
        OpCheck("max_pool2d", build_max_pool, LINEAR_TOL),
        OpCheck("dropout", build_dropout_fn, LINEAR_TOL),
    ]


def full_registry() -> list[OpCheck]:
    """Every differentiable op, the nn modules over them, the losses, both
    encoders, and the two end-to-end joint-loss entries."""
    return (
        registry()
        + _shape_checks()
        + _module_checks()
        + [_attention_check()]
        + _gru_checks()
        + _loss_checks()
        + _text_and_decoder_checks()
        + [_encoder_check("pann_lite"), _encoder_check("htsat_lite")]
        + [_joint_loss_check("pann_lite"), _joint_loss_check("htsat_lite")]
    )


def run_registry(checks: list[OpCheck] | None = None) -> tuple[bool, str, list[tuple[OpCheck, GradcheckReport]]]:
    """Run every check; returns (all_ok, printable report, per-check results)."""
    checks = full_registry() if checks is None else checks
    results = []
    lines = []
    ok = True
    for check in checks:
        t0 = time.perf_counter()
        report = check.run()
        took = time.perf_counter() - t0
        results.append((check, report))
        good = report.ok
        ok = ok and good
        lines.append(
            f"[{'ok ' if good else 'FAIL'}] {check.name:34s} max rel err {report.max_rel_err:.3e} "
            f"(tol {check.tol:.0e}, {took:.2f}s)"
        )
    lines.append(f"gradcheck: {'all passed' if ok else 'FAILURES PRESENT'} ({len(checks)} checks)")
    return ok, "\n".join(lines), results
