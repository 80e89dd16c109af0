"""Four-stage toy referring-segmentation model.

Small deterministic stand-ins replace the pretrained image and text
backbones: a patch embedding followed by per-stage (patch merge, MLP block)
encoders, and a lookup-table text embedder. At each stage the ICIP and BIF
modules fuse the visual tokens with the prompt-augmented language tokens;
the fused features re-enter the visual stream through a zero-initialised
linear gate. A top-down sum decoder turns the four stage outputs into
per-pixel two-class logits.
"""
from __future__ import annotations

import dataclasses
import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import icit
from .autodiff import ShapeError, Tensor
from .bif import BfrParams, DfmParams, bif_forward, lambda_init, plain_cross_attention
from .icip import IcipStageParams, icip_forward
from .rng import Rng

STAGES = 4
INIT_STD = 0.02
LAMBDA_STD = 0.1
# "fan_in": linear weights drawn with std 1/sqrt(fan_in); "fixed": std init_std
WEIGHT_INITS = ("fan_in", "fixed")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 128)
    prompt_dim: int = 32
    prompt_counts: tuple[int, ...] = (4, 4, 4, 4)
    text_len: int = 8
    vocab_size: int = 32
    text_channels: int = 32
    decoder_width: int = 32
    loss_lambda: float = 0.1
    seed: int = 0
    mix_ratio: int = 2
    token_mlp_ratio: int = 4
    channel_mlp_ratio: int = 4
    dfm_softmax: bool = False
    use_icip: bool = True
    use_bif: bool = True
    init_std: float = INIT_STD
    weight_init: str = "fan_in"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.prompt_counts = tuple(int(m) for m in self.prompt_counts)
        self.validate()

    def validate(self) -> None:
        if len(self.channels) != STAGES or len(self.prompt_counts) != STAGES:
            raise ConfigError(f"need {STAGES} stage channel widths and prompt counts")
        if self.patch_size < 1 or self.image_size % (self.patch_size * 2 ** (STAGES - 1)):
            raise ConfigError(f"image_size {self.image_size} must be divisible by "
                              f"patch_size * {2 ** (STAGES - 1)}")
        for a, b in zip(self.channels, self.channels[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage widths must double, got {self.channels}")
        if min(self.prompt_counts) < 1:
            raise ConfigError(f"prompt counts must be >= 1, got {self.prompt_counts}")
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise ConfigError(f"loss_lambda must lie in [0, 1], got {self.loss_lambda}")
        for name in ("prompt_dim", "text_len", "vocab_size", "text_channels", "decoder_width",
                     "mix_ratio", "token_mlp_ratio", "channel_mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")
        if self.weight_init not in WEIGHT_INITS:
            raise ConfigError(f"weight_init must be one of {sorted(WEIGHT_INITS)}, got {self.weight_init!r}")

    def grid(self, stage: int) -> int:
        """Side length of the token grid at ``stage`` (1-based)."""
        return self.image_size // (self.patch_size * 2 ** (stage - 1))

    def tokens(self, stage: int) -> int:
        return self.grid(stage) ** 2

    def plan(self) -> list["StagePlan"]:
        return [StagePlan(i, self.tokens(i), self.channels[i - 1], self.prompt_counts[i - 1])
                for i in range(1, STAGES + 1)]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class StagePlan:
    stage: int
    tokens: int
    channels: int
    prompts: int


def tiny_config(**overrides) -> ModelConfig:
    """Smallest config used for full-model gradient checks."""
    base = dict(image_size=16, patch_size=2, channels=(4, 8, 16, 32), prompt_dim=8,
                prompt_counts=(2, 2, 2, 2), text_len=4, vocab_size=8, text_channels=6,
                decoder_width=6, mix_ratio=2, token_mlp_ratio=2, channel_mlp_ratio=2)
    base.update(overrides)
    return ModelConfig(**base)


# -- config text format ---------------------------------------------------------------

_KEY_ALIASES = {"dfm.softmax": "dfm_softmax"}
_TUPLE_KEYS = {"channels", "prompt_counts"}
_BOOL_WORDS = {"on": True, "off": False, "true": True, "false": False}


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def config_from_dict(values: dict[str, str]) -> ModelConfig:
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    for key, value in values.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown model config key {key!r}")
        kind = type(getattr(ModelConfig(), name))
        try:
            if name in _TUPLE_KEYS:
                kwargs[name] = tuple(int(v) for v in value.split(","))
            elif kind is bool:
                kwargs[name] = _BOOL_WORDS[value.lower()]
            else:
                kwargs[name] = kind(value)
        except (ValueError, KeyError):
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return ModelConfig(**kwargs)


def format_config(cfg: ModelConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = "dfm.softmax" if f.name == "dfm_softmax" else f.name
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = ("on" if value else "off") if f.name == "dfm_softmax" else str(value).lower()
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path: str | os.PathLike) -> ModelConfig:
    return config_from_dict(parse_key_values(Path(path).read_text(encoding="utf-8")))


# -- parameters -------------------------------------------------------------------------

def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """All model tensors, keyed by their checkpoint names.

    Every tensor gets its own derived random stream, so adding or removing
    one does not shift the values of the others.
    """
    root = Rng(cfg.seed)
    shapes: dict[str, tuple[tuple[int, ...], str]] = {}
    D, std = cfg.prompt_dim, cfg.init_std

    def lin(name, din, dout, kind="linear"):
        shapes[f"{name}.w"] = ((din, dout), kind)
        shapes[f"{name}.b"] = ((dout,), "zero")

    lin("embed.patch", 3 * cfg.patch_size ** 2, cfg.channels[0])
    shapes["text.embed"] = ((cfg.vocab_size, cfg.text_channels), "gauss")
    shapes["text.pos"] = ((cfg.text_len, cfg.text_channels), "gauss")
    lin("text.proj", cfg.text_channels, D)
    for plan in cfg.plan():
        i, P, C, M = plan.stage, plan.tokens, plan.channels, plan.prompts
        if i > 1:
            lin(f"stage{i}.merge", 4 * cfg.channels[i - 2], C)
        shapes[f"stage{i}.mix.w1"] = ((C, cfg.mix_ratio * C), "linear")
        shapes[f"stage{i}.mix.b1"] = ((cfg.mix_ratio * C,), "zero")
        shapes[f"stage{i}.mix.w2"] = ((cfg.mix_ratio * C, C), "linear")
        shapes[f"stage{i}.mix.b2"] = ((C,), "zero")
        shapes[f"icip.stage{i}.T"] = ((M, D), "gauss")
        lin(f"icip.stage{i}.f", C, D)
        lin(f"bif.stage{i}.fq", C, 2 * D)
        lin(f"bif.stage{i}.fk", D, 2 * D)
        lin(f"bif.stage{i}.fv", D, 2 * D)
        lin(f"bif.stage{i}.out", 2 * D, D)
        for part in ("q1", "k1", "q2", "k2"):
            shapes[f"bif.stage{i}.lambda.{part}"] = ((1, D), "lambda")
        shapes[f"bif.stage{i}.lambda.base"] = ((1,), f"const:{lambda_init(i)!r}")
        shapes[f"bif.stage{i}.tok.w1"] = ((P, cfg.token_mlp_ratio * P), "linear")
        shapes[f"bif.stage{i}.tok.b1"] = ((cfg.token_mlp_ratio * P,), "zero")
        shapes[f"bif.stage{i}.tok.w2"] = ((cfg.token_mlp_ratio * P, P), "linear")
        shapes[f"bif.stage{i}.tok.b2"] = ((P,), "zero")
        shapes[f"bif.stage{i}.chan.w1"] = ((D, cfg.channel_mlp_ratio * D), "linear")
        shapes[f"bif.stage{i}.chan.b1"] = ((cfg.channel_mlp_ratio * D,), "zero")
        shapes[f"bif.stage{i}.chan.w2"] = ((cfg.channel_mlp_ratio * D, D), "linear")
        shapes[f"bif.stage{i}.chan.b2"] = ((D,), "zero")
        lin(f"gate.stage{i}", D, C, kind="zero")
        lin(f"decoder.stage{i}", C, cfg.decoder_width)
    lin("decoder.head", cfg.decoder_width, 2)

    params = {}
    for name, (shape, kind) in shapes.items():
        rng = root.child(zlib.crc32(name.encode()))
        if kind == "gauss":
            data = rng.normal(shape, std)
        elif kind == "linear":
            data = rng.normal(shape, std if cfg.weight_init == "fixed" else shape[0] ** -0.5)
        elif kind == "lambda":
            data = rng.normal(shape, LAMBDA_STD)
        elif kind == "zero":
            data = np.zeros(shape)
        else:
            data = np.full(shape, float(kind.split(":", 1)[1]))
        params[name] = Tensor(data, requires_grad=True)
    return params


# -- index helpers (pure numpy, no gradients) ----------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """B x H x W x 3 -> B x (H/p * W/p) x (p*p*3), row-major over patches."""
    B, H, W, ch = images.shape
    g = H // patch
    x = images.reshape(B, g, patch, W // patch, patch, ch).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(B, g * (W // patch), patch * patch * ch))


def merge_indices(side: int) -> np.ndarray:
    """For a side x side token grid: 4 x (side/2)^2 source indices of each 2x2 group."""
    half = side // 2
    r, c = np.divmod(np.arange(half * half), half)
    return np.stack([(2 * r + dr) * side + 2 * c + dc for dr in (0, 1) for dc in (0, 1)])


def upsample_indices(side: int, factor: int) -> np.ndarray:
    """Nearest-neighbour map from a (side*factor)^2 grid back onto a side^2 grid."""
    big = side * factor
    r, c = np.divmod(np.arange(big * big), big)
    return (r // factor) * side + c // factor


# -- model -----------------------------------------------------------------------------------

class ICIPNet:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        self._merge = {i: merge_indices(config.grid(i - 1)) for i in range(2, STAGES + 1)}
        self._up = {i: upsample_indices(config.grid(i + 1), 2) for i in range(1, STAGES)}
        self._pixels = upsample_indices(config.grid(1), config.patch_size)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return ad.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # views used by the icip / bif functions
    def icip_params(self, i: int) -> IcipStageParams:
        p = self.params
        return IcipStageParams(p[f"icip.stage{i}.f.w"], p[f"icip.stage{i}.f.b"], stage=i)

    def dfm_params(self, i: int) -> DfmParams:
        p, pre = self.params, f"bif.stage{i}"
        return DfmParams(
            p[f"{pre}.fq.w"], p[f"{pre}.fq.b"], p[f"{pre}.fk.w"], p[f"{pre}.fk.b"],
            p[f"{pre}.fv.w"], p[f"{pre}.fv.b"], p[f"{pre}.out.w"], p[f"{pre}.out.b"],
            p[f"{pre}.lambda.q1"], p[f"{pre}.lambda.k1"], p[f"{pre}.lambda.q2"],
            p[f"{pre}.lambda.k2"], p[f"{pre}.lambda.base"], G=self.config.prompt_dim)

    def bfr_params(self, i: int) -> BfrParams:
        p, pre = self.params, f"bif.stage{i}"
        return BfrParams(*(p[f"{pre}.{m}.{k}"] for m in ("tok", "chan")
                           for k in ("w1", "b1", "w2", "b2")))

    def embed_text(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != self.config.text_len:
            raise ShapeError(f"expected {self.config.text_len} token ids per expression, "
                             f"got {ids.shape[1]}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise IndexError(f"token id out of range [0, {self.config.vocab_size})")
        L = ad.add(ad.take(self.params["text.embed"], ids, axis=0), self.params["text.pos"])
        return self._linear(L, "text.proj")

    def embed_image(self, images) -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        s = self.config.image_size
        if images.shape[1:] != (s, s, 3):
            raise ShapeError(f"expected B x {s} x {s} x 3 images, got {images.shape}")
        return self._linear(Tensor(patchify(images, self.config.patch_size)), "embed.patch")

    def encode_stage(self, V_prev: Tensor, i: int) -> Tensor:
        if not 1 <= i <= STAGES:
            raise ValueError(f"stage must be 1..{STAGES}, got {i}")
        expected = self.config.tokens(1) if i == 1 else self.config.tokens(i - 1)
        width = self.config.channels[0] if i == 1 else self.config.channels[i - 2]
        if V_prev.ndim != 3 or V_prev.shape[1:] != (expected, width):
            raise ShapeError(f"stage {i}: expected B x {expected} x {width}, got {V_prev.shape}")
        V = V_prev
        if i > 1:
            groups = [ad.take(V_prev, idx, axis=1) for idx in self._merge[i]]
            V = self._linear(ad.concat(groups, axis=2), f"stage{i}.merge")
        p = self.params
        h = ad.gelu(ad.linear(V, p[f"stage{i}.mix.w1"], p[f"stage{i}.mix.b1"]))
        return ad.add(V, ad.linear(h, p[f"stage{i}.mix.w2"], p[f"stage{i}.mix.b2"]))

    def fuse_stage(self, V: Tensor, L: Tensor, i: int) -> Tensor:
        cfg = self.config
        if cfg.use_icip:
            L_o = icip_forward(V, L, self.params[f"icip.stage{i}.T"], self.icip_params(i)).L_o
        else:
            L_o = L
        if cfg.use_bif:
            out = bif_forward(V, L_o, self.dfm_params(i), self.bfr_params(i), softmax=cfg.dfm_softmax)
        else:
            out = plain_cross_attention(V, L_o, self.dfm_params(i), softmax=cfg.dfm_softmax)
        return ad.add(V, self._linear(out.O, f"gate.stage{i}"))

    def decode(self, stage_outputs: list[Tensor]) -> Tensor:
        if len(stage_outputs) != STAGES:
            raise ValueError(f"decoder needs {STAGES} stage outputs, got {len(stage_outputs)}")
        y = self._linear(stage_outputs[-1], f"decoder.stage{STAGES}")
        for i in range(STAGES - 1, 0, -1):
            y = ad.add(self._linear(stage_outputs[i - 1], f"decoder.stage{i}"),
                       ad.take(y, self._up[i], axis=1))
        logits = self._linear(ad.gelu(y), "decoder.head")  # B x P_1 x 2
        B, s = logits.shape[0], self.config.image_size
        return ad.reshape(ad.take(logits, self._pixels, axis=1), (B, s, s, 2))

    def forward(self, images, token_ids) -> Tensor:
        L = self.embed_text(token_ids)
        V = self.embed_image(images)
        if V.shape[0] != L.shape[0]:
            raise ShapeError(f"{V.shape[0]} images but {L.shape[0]} expressions")
        outs = []
        for i in range(1, STAGES + 1):
            V = self.fuse_stage(self.encode_stage(V, i), L, i)
            outs.append(V)
        return self.decode(outs)

    __call__ = forward

    def predict(self, images, token_ids) -> np.ndarray:
        """Binary masks; ties between the two logits go to background."""
        logits = self.forward(images, token_ids).data
        return (logits[..., 1] > logits[..., 0]).astype(np.uint8)


# -- checkpoints ---------------------------------------------------------------------------

def save_checkpoint(model: ICIPNet, directory: str | os.PathLike) -> Path:
    """Directory of ``<name>.icit`` tensors plus ``config.txt`` and ``manifest.txt``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(model.config), encoding="utf-8")
    rows = []
    for name, t in model.params.items():
        icit.write_tensor(out / f"{name}.icit", t.data)
        rows.append(f"{name}\t{'x'.join(str(d) for d in t.shape)}")
    (out / "manifest.txt").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out


def load_checkpoint(directory: str | os.PathLike) -> ICIPNet:
    src = Path(directory)
    cfg = load_config(src / "config.txt")
    reference = init_params(cfg)
    params = {}
    for line in (src / "manifest.txt").read_text(encoding="utf-8").splitlines():
        name, dims = line.split("\t")
        data = icit.read_tensor(src / f"{name}.icit")
        if "x".join(str(d) for d in data.shape) != dims:
            raise ShapeError(f"{name}: file shape {data.shape} disagrees with manifest {dims}")
        if name not in reference or reference[name].shape != data.shape:
            raise ShapeError(f"{name}: not part of this config or wrong shape {data.shape}")
        params[name] = Tensor(data, requires_grad=True)
    missing = set(reference) - set(params)
    if missing:
        raise ShapeError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    return ICIPNet(cfg, {name: params[name] for name in reference})
