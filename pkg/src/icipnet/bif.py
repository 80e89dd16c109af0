"""Bilateral information fusion.

Two stages: a split ("differential") cross-attention from visual queries to
the prompt+language tokens, then token-axis and channel-axis MLP mixers with
residual connections. Queries keep the visual token axis, so the fused
output has one row per visual patch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class DfmParams:
    fq_w: Tensor  # C_i x 2D
    fq_b: Tensor
    fk_w: Tensor  # D x 2D
    fk_b: Tensor
    fv_w: Tensor  # D x 2D
    fv_b: Tensor
    out_w: Tensor  # 2D x D
    out_b: Tensor
    lq1: Tensor  # 1 x D
    lk1: Tensor
    lq2: Tensor
    lk2: Tensor
    lbase: Tensor  # shape (1,)
    G: int

    def __post_init__(self):
        D = self.fk_w.shape[1] // 2
        for name in ("lq1", "lk1", "lq2", "lk2"):
            if getattr(self, name).shape != (1, D):
                raise ShapeError(f"{name} must be 1 x {D}, got {getattr(self, name).shape}")
        if self.G <= 0:
            raise ValueError(f"G must be positive, got {self.G}")


@dataclass
class BfrParams:
    tok_w1: Tensor  # P x r_t P
    tok_b1: Tensor
    tok_w2: Tensor  # r_t P x P
    tok_b2: Tensor
    chan_w1: Tensor  # D x r_c D
    chan_b1: Tensor
    chan_w2: Tensor  # r_c D x D
    chan_b2: Tensor

    @property
    def tokens(self) -> int:
        return self.tok_w1.shape[0]


@dataclass
class BifOutput:
    O: Tensor
    F: Tensor
    lambda_v: Tensor


def lambda_init(stage: int) -> float:
    """Depth-dependent starting value of the per-stage bias term."""
    return 0.8 - 0.6 * math.exp(-0.3 * (stage - 1))


def project_qkh(V: Tensor, L_o: Tensor, p: DfmParams) -> tuple[Tensor, Tensor, Tensor]:
    if V.shape[-1] != p.fq_w.shape[0] or L_o.shape[-1] != p.fk_w.shape[0]:
        raise ShapeError(f"project_qkh: V {V.shape} / L_o {L_o.shape} vs "
                         f"f_q {p.fq_w.shape}, f_k {p.fk_w.shape}")
    Q = ad.linear(V, p.fq_w, p.fq_b)
    K = ad.linear(L_o, p.fk_w, p.fk_b)
    H = ad.linear(L_o, p.fv_w, p.fv_b)
    return Q, K, H


def split_qk(Q: Tensor, K: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    Q1, Q2 = ad.split_last_axis(Q)
    K1, K2 = ad.split_last_axis(K)
    return Q1, Q2, K1, K2


def lambda_v(p: DfmParams) -> Tensor:
    """exp(<lq1, lk1>) - exp(<lq2, lk2>) + lambda_base, as a 1 x 1 tensor."""
    first = ad.exp(ad.matmul(p.lq1, ad.transpose(p.lk1)))
    second = ad.exp(ad.matmul(p.lq2, ad.transpose(p.lk2)))
    return ad.add(ad.sub(first, second), p.lbase)


def correlation(Q1: Tensor, K1: Tensor, Q2: Tensor, K2: Tensor, lv, G: int,
                softmax: bool = False) -> Tensor:
    """Difference of the two subspace score maps, B x P x (M+N).

    With ``softmax`` each scaled score map is row-normalised over the key
    axis before differencing.
    """
    if Q1.shape[-1] != K1.shape[-1] or Q2.shape[-1] != K2.shape[-1]:
        raise ShapeError(f"correlation: subspace widths differ ({Q1.shape}, {K1.shape}, "
                         f"{Q2.shape}, {K2.shape})")
    scale = 1.0 / math.sqrt(G)
    s1 = ad.mul(ad.matmul(Q1, ad.transpose(K1)), scale)
    s2 = ad.mul(ad.matmul(Q2, ad.transpose(K2)), scale)
    if softmax:
        s1 = ad.softmax_over_axis(s1, -1)
        s2 = ad.softmax_over_axis(s2, -1)
    return ad.sub(s1, ad.mul(lv, s2))


def modulate(F: Tensor, H: Tensor, out_w: Tensor, out_b: Tensor) -> Tensor:
    if F.shape[-1] != H.shape[-2]:
        raise ShapeError(f"modulate: F {F.shape} cannot weight H {H.shape}")
    return ad.linear(ad.matmul(F, H), out_w, out_b)


def token_mixer(V_o: Tensor, p: BfrParams) -> Tensor:
    if V_o.ndim != 3 or V_o.shape[1] != p.tokens:
        raise ShapeError(f"token_mixer: expected {p.tokens} tokens for this stage, got {V_o.shape}")
    x = ad.transpose_token_channel(V_o)
    x = ad.linear(ad.gelu(ad.linear(x, p.tok_w1, p.tok_b1)), p.tok_w2, p.tok_b2)
    return ad.add(V_o, ad.transpose_token_channel(x))


def channel_mixer(V_E: Tensor, p: BfrParams) -> Tensor:
    if V_E.shape[-1] != p.chan_w1.shape[0]:
        raise ShapeError(f"channel_mixer: expected {p.chan_w1.shape[0]} channels, got {V_E.shape}")
    x = ad.linear(ad.gelu(ad.linear(V_E, p.chan_w1, p.chan_b1)), p.chan_w2, p.chan_b2)
    return ad.add(V_E, x)


def bif_forward(V: Tensor, L_o: Tensor, dfm: DfmParams, bfr: BfrParams,
                softmax: bool = False) -> BifOutput:
    Q, K, H = project_qkh(V, L_o, dfm)
    Q1, Q2, K1, K2 = split_qk(Q, K)
    lv = lambda_v(dfm)
    F = correlation(Q1, K1, Q2, K2, lv, dfm.G, softmax=softmax)
    V_o = modulate(F, H, dfm.out_w, dfm.out_b)
    O = channel_mixer(token_mixer(V_o, bfr), bfr)
    return BifOutput(O=O, F=F, lambda_v=lv)


def plain_cross_attention(V: Tensor, L_o: Tensor, dfm: DfmParams,
                          softmax: bool = False) -> BifOutput:
    """Ablation baseline: first subspace only (lambda_v = 0), no mixers."""
    Q, K, H = project_qkh(V, L_o, dfm)
    Q1, _, K1, _ = split_qk(Q, K)
    s = ad.mul(ad.matmul(Q1, ad.transpose(K1)), 1.0 / math.sqrt(dfm.G))
    F = ad.softmax_over_axis(s, -1) if softmax else s
    zero = Tensor([[0.0]])
    return BifOutput(O=modulate(F, H, dfm.out_w, dfm.out_b), F=F, lambda_v=zero)
