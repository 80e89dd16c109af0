"""Named gradient checks covering every differentiable operation and the full model.

Model-level checks run on :func:`~icipnet.pipeline.tiny_config` with every
tensor (gates and biases included) redrawn by :func:`probe_model`, so no
gradient is structurally zero or vanishingly small.
"""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bif import (channel_mixer, correlation, bif_forward, lambda_v, modulate,
                  plain_cross_attention, token_mixer)
from .gradcheck import gradcheck
from .icip import icip_forward
from .pipeline import ICIPNet, ModelConfig, tiny_config
from .rng import Rng
from .training import LossConfig, cross_entropy, dice_loss, total_loss

PROBE_STD = 0.3
GATE_DAMPING = 0.1
# probed entries per tensor in model-level checks
MODEL_ENTRIES = 4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    def passed(self, tolerance: float) -> bool:
        return self.error < tolerance


def probe_model(cfg: ModelConfig | None = None, seed: int = 11, std: float = PROBE_STD) -> ICIPNet:
    """Model with every tensor redrawn so no gradient is structurally zero.

    Weight matrices get std ``1/sqrt(fan_in)`` (gates damped further) to keep
    activations of order one through all four stages; biases, prompts and
    embeddings get ``std``; the lambda vectors keep their training scale.
    """
    cfg = cfg or tiny_config()
    model = ICIPNet(cfg)
    rng = Rng(seed, 7)
    for k, (name, p) in enumerate(model.params.items()):
        if name.endswith("lambda.base"):
            continue
        if ".lambda." in name:
            scale = 0.1
        elif name.startswith("gate.") and name.endswith(".w"):
            # the fused features grow quadratically per stage; a damped gate
            # keeps four stacked stages from overflowing the finite differences
            scale = GATE_DAMPING * p.shape[0] ** -0.5
        elif name.rsplit(".", 1)[-1] in ("w", "w1", "w2"):
            scale = p.shape[0] ** -0.5
        else:
            scale = std
        p.data = rng.child(k).normal(p.shape, scale)
    return model


def _leaf(rng: Rng, *shape, std=1.0) -> Tensor:
    return Tensor(rng.normal(shape, std), requires_grad=True)


def _scalarize(rng: Rng, out: Tensor) -> Tensor:
    """Fixed random linear functional of ``out`` so every output entry matters."""
    return ad.sum(ad.mul(out, rng.child(0).normal(out.shape)))


def _op_checks(rng: Rng):
    r = rng.child

    def unary(fn, shape=(3, 4), std=1.0, k=0):
        x = _leaf(r(k), *shape, std=std)
        return (lambda: _scalarize(r(k + 100), fn(x))), [x]

    def binary(fn, sa, sb, k):
        a, b = _leaf(r(k), *sa), _leaf(r(k + 1), *sb)
        return (lambda: _scalarize(r(k + 100), fn(a, b))), [a, b]

    yield "add", binary(ad.add, (2, 3, 4), (4,), 1)
    yield "mul", binary(ad.mul, (2, 3, 4), (3, 1), 2)
    yield "div", (lambda a, b: ((lambda: _scalarize(r(103), ad.div(a, ad.add(ad.mul(b, b), 1.0)))), [a, b]))(
        _leaf(r(3), 3, 4), _leaf(r(4), 3, 4))
    yield "matmul", binary(ad.matmul, (2, 3, 4), (2, 4, 5), 5)
    yield "matmul_shared", binary(ad.matmul, (2, 3, 4), (4, 2), 6)
    yield "linear", (lambda x, w, b: ((lambda: _scalarize(r(107), ad.linear(x, w, b))), [x, w, b]))(
        _leaf(r(7), 2, 3, 4), _leaf(r(8), 4, 5), _leaf(r(9), 5))
    yield "tanh", unary(ad.tanh, k=10)
    yield "exp", unary(ad.exp, k=11)
    yield "gelu", unary(ad.gelu, k=12, std=2.0)
    yield "log", unary(lambda x: ad.log(ad.add(ad.mul(x, x), 0.5)), k=13)
    yield "softmax", unary(lambda x: ad.softmax_over_axis(x, 1), shape=(2, 3, 4), k=14)
    yield "log_softmax", unary(lambda x: ad.log_softmax(x, -1), shape=(2, 3, 4), k=15)
    yield "sum", unary(lambda x: ad.sum(x, axis=1), shape=(2, 3, 4), k=16)
    yield "split_last_axis", unary(lambda x: ad.split_last_axis(x)[1], shape=(2, 3, 4), k=17)
    yield "concat_token_axis", binary(ad.concat_token_axis, (2, 2, 3), (2, 3, 3), 18)
    yield "transpose_token_channel", unary(ad.transpose_token_channel, shape=(2, 3, 4), k=20)
    yield "reshape", unary(lambda x: ad.reshape(x, (4, 6)), shape=(2, 3, 4), k=21)
    yield "take", unary(lambda x: ad.take(x, [0, 2, 2, 1], axis=1), shape=(2, 3, 4), k=22)


def _module_checks(rng: Rng):
    model = probe_model()
    cfg = model.config
    B, D, i = 2, cfg.prompt_dim, 2
    P, C = cfg.tokens(i), cfg.channels[i - 1]
    T_tokens = cfg.prompt_counts[i - 1] + cfg.text_len
    V = _leaf(rng.child(1), B, P, C)
    L = _leaf(rng.child(2), B, cfg.text_len, D)
    L_o = _leaf(rng.child(3), B, T_tokens, D)
    probe = rng.child(50)
    dfm, bfr = model.dfm_params(i), model.bfr_params(i)
    dfm_leaves = [dfm.fq_w, dfm.fq_b, dfm.fk_w, dfm.fk_b, dfm.fv_w, dfm.fv_b, dfm.out_w, dfm.out_b,
                  dfm.lq1, dfm.lk1, dfm.lq2, dfm.lk2, dfm.lbase]
    bfr_leaves = [bfr.tok_w1, bfr.tok_b1, bfr.tok_w2, bfr.tok_b2,
                  bfr.chan_w1, bfr.chan_b1, bfr.chan_w2, bfr.chan_b2]

    T = model[f"icip.stage{i}.T"]
    ip = model.icip_params(i)
    yield "icip", ((lambda: _scalarize(probe, icip_forward(V, L, T, ip).L_o)), [V, L, T, ip.w, ip.b])
    yield "lambda_v", ((lambda: _scalarize(probe, lambda_v(dfm))), [dfm.lq1, dfm.lk1, dfm.lq2, dfm.lk2, dfm.lbase])

    Q1, K1 = _leaf(rng.child(4), B, P, D), _leaf(rng.child(5), B, T_tokens, D)
    Q2, K2 = _leaf(rng.child(6), B, P, D), _leaf(rng.child(7), B, T_tokens, D)
    lv = Tensor([[0.6]], requires_grad=True)
    for soft in (False, True):
        yield f"correlation[softmax={'on' if soft else 'off'}]", (
            (lambda s=soft: _scalarize(probe, correlation(Q1, K1, Q2, K2, lv, D, softmax=s))),
            [Q1, K1, Q2, K2, lv])
    F = _leaf(rng.child(8), B, P, T_tokens)
    H = _leaf(rng.child(9), B, T_tokens, 2 * D)
    yield "modulate", ((lambda: _scalarize(probe, modulate(F, H, dfm.out_w, dfm.out_b))),
                       [F, H, dfm.out_w, dfm.out_b])
    V_o = _leaf(rng.child(10), B, P, D)
    yield "token_mixer", ((lambda: _scalarize(probe, token_mixer(V_o, bfr))), [V_o] + bfr_leaves[:4])
    yield "channel_mixer", ((lambda: _scalarize(probe, channel_mixer(V_o, bfr))), [V_o] + bfr_leaves[4:])
    yield "bif_forward", ((lambda: _scalarize(probe, bif_forward(V, L_o, dfm, bfr).O)),
                          [V, L_o] + dfm_leaves + bfr_leaves)
    yield "plain_cross_attention", ((lambda: _scalarize(probe, plain_cross_attention(V, L_o, dfm).O)),
                                    [V, L_o] + dfm_leaves[:8])


def _loss_checks(rng: Rng):
    logits = _leaf(rng.child(1), 2, 4, 4, 2, std=2.0)
    target = (rng.child(2).uniform((2, 4, 4)) > 0.5).astype(np.uint8)
    weights = (0.7, 1.6)
    yield "cross_entropy", ((lambda: cross_entropy(logits, target, weights)), [logits])
    yield "dice_loss", ((lambda: dice_loss(logits, target, 1.0)), [logits])
    yield "total_loss", ((lambda: total_loss(logits, target, LossConfig(0.1, 1.0, weights))), [logits])


def _model_checks(rng: Rng):
    model = probe_model()
    cfg = model.config
    B = 2
    images = rng.child(1).uniform((B, cfg.image_size, cfg.image_size, 3))
    ids = rng.child(2).integers(0, cfg.vocab_size, size=B * cfg.text_len).reshape(B, cfg.text_len)
    target = (rng.child(3).uniform((B, cfg.image_size, cfg.image_size)) > 0.6).astype(np.uint8)
    probe = rng.child(50)
    p = model.params

    def named(prefix):
        return [t for n, t in p.items() if n.startswith(prefix)]

    yield "embed_text", ((lambda: _scalarize(probe, model.embed_text(ids))), named("text."))
    V1 = _leaf(rng.child(4), B, cfg.tokens(1), cfg.channels[0])
    V2 = _leaf(rng.child(5), B, cfg.tokens(2), cfg.channels[1])
    L = _leaf(rng.child(6), B, cfg.text_len, cfg.prompt_dim)
    yield "encode_stage", ((lambda: _scalarize(probe, model.encode_stage(V1, 2))), [V1] + named("stage2."))
    yield "fuse_stage", ((lambda: _scalarize(probe, model.fuse_stage(V2, L, 2))),
                         [V2, L] + named("icip.stage2.") + named("bif.stage2.") + named("gate.stage2."))
    feats = [_leaf(rng.child(10 + i), B, cfg.tokens(i), cfg.channels[i - 1]) for i in range(1, 5)]
    yield "decode", ((lambda: _scalarize(probe, model.decode(feats))), feats + named("decoder."))
    loss_cfg = LossConfig(loss_lambda=cfg.loss_lambda)
    yield "full_model_loss", ((lambda: total_loss(model(images, ids), target, loss_cfg)),
                              model.parameters())


def gradient_checks(seed: int = 0):
    """Yield ``(name, (f, params, max_entries))`` for every named check."""
    rng = Rng(seed, 3)
    for group, entries in ((_op_checks, None), (_module_checks, None), (_loss_checks, None),
                           (_model_checks, MODEL_ENTRIES)):
        for name, (f, params) in group(rng.child(zlib.crc32(group.__name__.encode()))):
            limit = entries
            if name in ("fuse_stage", "decode", "bif_forward", "token_mixer", "encode_stage"):
                limit = 8
            yield name, (f, params, limit)


def run_checks(step: float = 1e-5, seed: int = 0, only: set[str] | None = None) -> list[CheckResult]:
    results = []
    for name, (f, params, limit) in gradient_checks(seed):
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        err = gradcheck(f, params, step=step, max_entries=limit, rng=Rng(seed, 5))
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
