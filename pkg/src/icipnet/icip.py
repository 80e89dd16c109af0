"""Image-conditioned instance prompts.

Learnable prompt vectors attend over the visual patches of each image,
absorb a convex mix of the patch features, and are prepended to the
language tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import Rng

PROMPT_STD = 0.02


@dataclass
class PromptBank:
    """One ``M_i x D`` prompt matrix per stage; shared across the batch."""

    prompts: list[Tensor]

    def __post_init__(self):
        widths = {T.shape[1] for T in self.prompts}
        if len(widths) > 1:
            raise ShapeError(f"prompt widths differ across stages: {sorted(widths)}")
        for T in self.prompts:
            if T.ndim != 2 or T.shape[0] < 1:
                raise ShapeError(f"prompt matrix must be M x D with M >= 1, got {T.shape}")

    @classmethod
    def init(cls, counts, dim: int, rng: Rng, std: float = PROMPT_STD) -> "PromptBank":
        return cls([Tensor(rng.child(i).normal((m, dim), std), requires_grad=True)
                    for i, m in enumerate(counts)])

    def __getitem__(self, stage: int) -> Tensor:
        return self.prompts[stage - 1]


@dataclass
class IcipStageParams:
    w: Tensor  # C_i x D
    b: Tensor  # D
    stage: int = 1


@dataclass
class IcipOutput:
    L_o: Tensor
    alpha: Tensor
    T_o: Tensor


def project_visual(V: Tensor, params: IcipStageParams) -> Tensor:
    if V.ndim != 3 or V.shape[2] != params.w.shape[0]:
        raise ShapeError(f"stage {params.stage}: visual features {V.shape} do not match "
                         f"projection {params.w.shape}")
    return ad.linear(V, params.w, params.b)


def prompt_similarity(Vhat: Tensor, T: Tensor) -> Tensor:
    """``tanh(Vhat T^T)``: B x P x M, every entry in (-1, 1)."""
    if Vhat.shape[-1] != T.shape[-1]:
        raise ShapeError(f"prompt_similarity: channels differ, {Vhat.shape} vs {T.shape}")
    return ad.tanh(ad.matmul(Vhat, ad.transpose(T)))


def prompt_attention(A: Tensor) -> Tensor:
    # normalised over patches, separately for each prompt
    return ad.softmax_over_axis(A, axis=1)


def aggregate_prompts(alpha: Tensor, Vhat: Tensor, T: Tensor) -> Tensor:
    if alpha.shape[:2] != Vhat.shape[:2] or alpha.shape[2] != T.shape[0] or Vhat.shape[2] != T.shape[1]:
        raise ShapeError(f"aggregate_prompts: alpha {alpha.shape}, Vhat {Vhat.shape}, T {T.shape}")
    return ad.add(ad.matmul(ad.transpose(alpha), Vhat), T)


def build_L_o(T_o: Tensor, L: Tensor) -> Tensor:
    return ad.concat_token_axis(T_o, L)


def icip_forward(V: Tensor, L: Tensor, T: Tensor, params: IcipStageParams) -> IcipOutput:
    Vhat = project_visual(V, params)
    alpha = prompt_attention(prompt_similarity(Vhat, T))
    T_o = aggregate_prompts(alpha, Vhat, T)
    return IcipOutput(L_o=build_L_o(T_o, L), alpha=alpha, T_o=T_o)
