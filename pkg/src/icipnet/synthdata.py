"""Synthetic referring-segmentation samples.

Each image holds 2-4 flat-coloured shapes on a noisy dark background and an
expression ``the <size> <color> <shape> <position>`` that names exactly one
of them. Shapes are rasterised on a coarse cell grid (cell = ``grid`` pixels,
no anti-aliasing), so every mask is a union of whole cells.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import icit
from .rng import Rng

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.25),
    "blue": (0.20, 0.35, 0.95),
    "yellow": (0.95, 0.85, 0.15),
}
SHAPES = ("rectangle", "circle", "triangle")
SIZES = ("small", "large")
POSITIONS = ("left", "right", "top", "bottom")
VOCAB = ("<pad>", "the", "object", *COLORS, *SHAPES, *SIZES, *POSITIONS)
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
PAD = 0

# extents in cells; circles and triangles always take the upper bound so
# their footprints stay distinguishable from rectangles
SIZE_CELLS = {"small": (2, 3), "large": (4, 5)}


class GenerationError(RuntimeError):
    pass


class MaskFormatError(ValueError):
    pass


@dataclass
class SynthConfig:
    image_size: int = 64
    grid: int = 4
    text_len: int = 8
    vocab_size: int = 32
    min_objects: int = 2
    max_objects: int = 4
    noise: float = 0.05
    max_tries: int = 200

    def __post_init__(self):
        if self.image_size % self.grid:
            raise GenerationError(f"image_size {self.image_size} not divisible by grid {self.grid}")
        if len(VOCAB) > self.vocab_size:
            raise GenerationError(f"vocabulary needs {len(VOCAB)} ids, vocab_size is {self.vocab_size}")
        if self.text_len < 5:
            raise GenerationError(f"expressions need 5 tokens, text_len is {self.text_len}")
        if not 2 <= self.min_objects <= self.max_objects <= 4:
            raise GenerationError("object count must lie within 2..4")


@dataclass
class ShapeSpec:
    kind: str
    color: str
    size: str
    top: int  # cell row
    left: int  # cell column
    height: int  # cells
    width: int

    def cells(self) -> np.ndarray:
        """Boolean height x width footprint inside the bounding box."""
        r = np.arange(self.height)[:, None] + 0.5
        c = np.arange(self.width)[None, :] + 0.5
        if self.kind == "rectangle":
            return np.ones((self.height, self.width), dtype=bool)
        if self.kind == "circle":
            rad = self.width / 2
            return (r - rad) ** 2 + (c - rad) ** 2 <= (rad - 0.25) ** 2
        # upward isosceles triangle: apex at top centre, base on the bottom row
        half = self.width / 2
        return np.abs(c - half) <= half * r / self.height

    def position(self, grid_cells: int) -> str:
        cy = self.top + self.height / 2 - grid_cells / 2
        cx = self.left + self.width / 2 - grid_cells / 2
        if abs(cx) >= abs(cy):
            return "left" if cx < 0 else "right"
        return "top" if cy < 0 else "bottom"

    def attributes(self, grid_cells: int) -> tuple[str, str, str, str]:
        return (self.size, self.color, self.kind, self.position(grid_cells))


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    token_ids: np.ndarray  # N ints
    mask: np.ndarray  # H x W uint8 in {0, 1}
    meta: dict = field(default_factory=dict)

    @property
    def category(self) -> str:
        return self.meta.get("shape", "unknown")


def tokenize(words, text_len: int) -> np.ndarray:
    ids = [WORD_ID[w] for w in words]
    if len(ids) > text_len:
        raise GenerationError(f"expression of {len(ids)} words exceeds text_len {text_len}")
    return np.array(ids + [PAD] * (text_len - len(ids)), dtype=np.int64)


def expression(attrs: tuple[str, str, str, str]) -> list[str]:
    size, color, kind, pos = attrs
    return ["the", size, color, kind, pos]


def _place(rng: Rng, cfg: SynthConfig, count: int) -> list[ShapeSpec]:
    cells = cfg.image_size // cfg.grid
    for _ in range(cfg.max_tries):
        occupied = np.zeros((cells, cells), dtype=bool)
        shapes: list[ShapeSpec] = []
        for _ in range(count):
            kind, color, size = rng.choice(SHAPES), rng.choice(list(COLORS)), rng.choice(SIZES)
            lo, hi = SIZE_CELLS[size]
            if kind == "rectangle":
                h, w = rng.integers(lo, hi + 1), rng.integers(lo, hi + 1)
            else:
                h = w = hi
            if h > cells or w > cells:
                break
            for _ in range(cfg.max_tries):
                top, left = rng.integers(0, cells - h + 1), rng.integers(0, cells - w + 1)
                # one free cell of margin around every shape
                box = occupied[max(top - 1, 0):top + h + 1, max(left - 1, 0):left + w + 1]
                if not box.any():
                    occupied[top:top + h, left:left + w] = True
                    shapes.append(ShapeSpec(kind, color, size, top, left, h, w))
                    break
            else:
                break
        if len(shapes) == count:
            attrs = [s.attributes(cells) for s in shapes]
            if len(set(attrs)) == count:
                return shapes
    raise GenerationError(f"could not place {count} distinguishable shapes on a "
                          f"{cells} x {cells} cell grid")


def rasterize(shape: ShapeSpec, cfg: SynthConfig) -> np.ndarray:
    cells = cfg.image_size // cfg.grid
    grid = np.zeros((cells, cells), dtype=np.uint8)
    grid[shape.top:shape.top + shape.height, shape.left:shape.left + shape.width] = shape.cells()
    return np.kron(grid, np.ones((cfg.grid, cfg.grid), dtype=np.uint8))


def generate_one(rng: Rng, cfg: SynthConfig) -> Sample:
    count = rng.integers(cfg.min_objects, cfg.max_objects + 1)
    shapes = _place(rng, cfg, count)
    cells = cfg.image_size // cfg.grid
    referent = rng.integers(0, count)
    n = cfg.image_size
    image = 0.1 + cfg.noise * rng.uniform((n, n, 3))
    mask = None
    for k, s in enumerate(shapes):
        m = rasterize(s, cfg).astype(bool)
        image[m] = COLORS[s.color]
        if k == referent:
            mask = m.astype(np.uint8)
    attrs = shapes[referent].attributes(cells)
    meta = {
        "size": attrs[0], "color": attrs[1], "shape": attrs[2], "position": attrs[3],
        "referent": int(referent),
        "objects": [dict(zip(("size", "color", "shape", "position"), s.attributes(cells)),
                         top=s.top, left=s.left, height=s.height, width=s.width)
                    for s in shapes],
        "expression": " ".join(expression(attrs)),
    }
    return Sample(image=image, token_ids=tokenize(expression(attrs), cfg.text_len), mask=mask, meta=meta)


def generate(count: int, cfg: SynthConfig | None = None, seed: int = 0) -> list[Sample]:
    """``count`` samples; sample ``k`` depends only on ``(seed, k)``."""
    if count < 1:
        raise GenerationError(f"count must be >= 1, got {count}")
    cfg = cfg or SynthConfig()
    root = Rng(seed)
    return [generate_one(root.child(k), cfg) for k in range(count)]


def matching_objects(meta: dict) -> list[int]:
    """Indices of objects whose attributes match every word of the expression."""
    words = meta["expression"].split()[1:]
    keys = ("size", "color", "shape", "position")
    return [k for k, obj in enumerate(meta["objects"]) if all(obj[a] == w for a, w in zip(keys, words))]


def split(dataset, fractions=(0.8, 0.2), seed: int = 0):
    """Deterministic disjoint (train, val) partition."""
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-12 or min(fractions) < 0:
        raise ValueError(f"fractions must be two non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    order = Rng(seed, 2).permutation(n)
    n_train = int(round(fractions[0] * n))
    train = [dataset[i] for i in sorted(order[:n_train])]
    val = [dataset[i] for i in sorted(order[n_train:])]
    if (fractions[0] > 0 and not train) or (fractions[1] > 0 and not val):
        raise ValueError(f"split of {n} samples by {fractions} leaves a requested partition empty")
    return train, val


# -- mask files (binary PGM) -------------------------------------------------------------

def encode_mask(mask) -> bytes:
    m = np.asarray(mask)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise MaskFormatError("mask must be a 2-D binary array")
    h, w = m.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + (m.astype(np.uint8) * 255).tobytes()


def decode_mask(blob: bytes) -> np.ndarray:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MaskFormatError("truncated PGM header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P5":
        raise MaskFormatError(f"not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise MaskFormatError("malformed PGM header") from None
    if maxval != 255:
        raise MaskFormatError(f"maxval must be 255, got {maxval}")
    raster = np.frombuffer(blob[pos:], dtype=np.uint8)
    if raster.size != w * h:
        raise MaskFormatError(f"raster has {raster.size} bytes, expected {w * h}")
    if not np.isin(raster, (0, 255)).all():
        raise MaskFormatError("mask pixels must be 0 or 255")
    return (raster.reshape(h, w) // 255).astype(np.uint8)


def write_mask(mask, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_mask(mask))


def read_mask(path: str | os.PathLike) -> np.ndarray:
    return decode_mask(Path(path).read_bytes())


# -- dataset directories ----------------------------------------------------------------

def save_dataset(samples, directory: str | os.PathLike) -> Path:
    """One sub-directory per sample (image.icit, tokens.csv, mask.pgm, meta.json)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for k, s in enumerate(samples):
        name = f"sample_{k:05d}"
        d = out / name
        d.mkdir(exist_ok=True)
        icit.write_tensor(d / "image.icit", s.image)
        (d / "tokens.csv").write_text(",".join(str(int(i)) for i in s.token_ids) + "\n", encoding="utf-8")
        write_mask(s.mask, d / "mask.pgm")
        (d / "meta.json").write_text(json.dumps(s.meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        names.append(name)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample", "category", "expression"])
    for name, s in zip(names, samples):
        writer.writerow([name, s.category, s.meta.get("expression", "")])
    (out / "manifest.csv").write_text(buf.getvalue(), encoding="utf-8")
    return out


def load_dataset(directory: str | os.PathLike) -> list[Sample]:
    src = Path(directory)
    with open(src / "manifest.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    samples = []
    for row in rows:
        d = src / row["sample"]
        tokens = np.array([int(t) for t in (d / "tokens.csv").read_text(encoding="utf-8").strip().split(",")],
                          dtype=np.int64)
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
        samples.append(Sample(icit.read_tensor(d / "image.icit"), tokens, read_mask(d / "mask.pgm"), meta))
    return samples
