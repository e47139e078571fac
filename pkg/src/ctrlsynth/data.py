"""Procedural attribute-controlled images, their captions, and a compliance oracle.

Every image is a 32x32 RGB canvas with one shape on a flat background. The
eight palette colours sit on the corners of the RGB cube so that colour
evidence survives patch quantization. Background colours and shape colours
are disjoint sets, which lets the oracle separate figure from ground by
colour alone.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_SIZE = 32

BACKGROUNDS = ("black", "white", "blue", "green")
SHAPES = ("circle", "square", "stripes", "cross")
SHAPE_COLORS = ("red", "yellow", "cyan", "magenta")
POSITIONS = ("center", "corner")

PALETTE = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "blue": (0.0, 0.0, 1.0),
    "green": (0.0, 1.0, 0.0),
    "red": (1.0, 0.0, 0.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}

LEXICON = BACKGROUNDS + SHAPES + SHAPE_COLORS + POSITIONS + ("on",)

# shape centre and side length in pixels, before jitter
_LAYOUT = {"center": (17.5, 20.0), "corner": (12.0, 16.0)}
JITTER = 2

# oracle constants, fixed by the quantization sweep in scripts/oracle_sweep.py
_FIGURE_MIN_PIXELS = 12
_MERGE_RADIUS = 3
_SEARCH_SHIFT = (-1.0, -0.5, 0.0, 0.5, 1.0)
_SEARCH_SIZE = (-2.0, -1.0, 0.0, 1.0, 2.0)


@dataclass(frozen=True)
class AttributeSpec:
    background: str
    shape: str
    color: str
    position: str

    def __post_init__(self):
        for value, options in (
            (self.background, BACKGROUNDS),
            (self.shape, SHAPES),
            (self.color, SHAPE_COLORS),
            (self.position, POSITIONS),
        ):
            if value not in options:
                raise ValueError(f"unknown attribute value {value!r}")

    @property
    def words(self) -> list[str]:
        return [self.color, self.shape, self.position, "on", self.background]

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def to_bytes(self) -> bytes:
        return bytes(
            (
                BACKGROUNDS.index(self.background),
                SHAPES.index(self.shape),
                SHAPE_COLORS.index(self.color),
                POSITIONS.index(self.position),
            )
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AttributeSpec":
        b, s, c, p = raw
        return cls(BACKGROUNDS[b], SHAPES[s], SHAPE_COLORS[c], POSITIONS[p])

    @classmethod
    def from_words(cls, words) -> "AttributeSpec":
        words = list(words)
        if len(words) != 5 or words[3] != "on":
            raise ValueError(f"cannot parse caption {' '.join(words)!r}")
        color, shape, position, _, background = words
        return cls(background, shape, color, position)


def all_specs() -> list[AttributeSpec]:
    return [
        AttributeSpec(b, s, c, p)
        for b, s, c, p in itertools.product(BACKGROUNDS, SHAPES, SHAPE_COLORS, POSITIONS)
    ]


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    inside = (np.abs(u) < 1) & (np.abs(v) < 1)
    if shape == "square":
        return inside
    if shape == "circle":
        return u**2 + v**2 <= 1
    if shape == "cross":
        return inside & ((np.abs(u) <= 1 / 3) | (np.abs(v) <= 1 / 3))
    # three horizontal bars out of five equal bands
    band = np.floor((v + 1) / 2 * 5).clip(0, 4)
    return inside & (band % 2 == 0)


def render(spec: AttributeSpec, seed: int) -> np.ndarray:
    """Draw ``spec`` with a seeded +-2 px jitter of centre and size. Returns HxWx3 floats."""
    rng = np.random.default_rng([seed, *spec.to_bytes()])
    center, size = _LAYOUT[spec.position]
    cy, cx = center + rng.integers(-JITTER, JITTER + 1, size=2)
    side = size + rng.integers(-JITTER, JITTER + 1)
    coords = np.arange(IMAGE_SIZE) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    u = (xx - cx) / (side / 2)
    v = (yy - cy) / (side / 2)
    image = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    image[:] = PALETTE[spec.background]
    image[_shape_mask(spec.shape, u, v)] = PALETTE[spec.color]
    return image


def _nearest(pixels: np.ndarray, names) -> np.ndarray:
    colors = np.array([PALETTE[n] for n in names])
    d = ((pixels[..., None, :] - colors) ** 2).sum(-1)
    return d.argmin(-1)


def _classify_shape(share: np.ndarray, mask: np.ndarray) -> str:
    """Best-fitting shape template over a small search around the figure's bounding box."""
    rows, cols = np.nonzero(mask)
    cy = (rows.min() + rows.max() + 1) / 2
    cx = (cols.min() + cols.max() + 1) / 2
    extent = max(rows.max() + 1 - rows.min(), cols.max() + 1 - cols.min())
    target = np.clip(share, 0, 1)
    coords = np.arange(IMAGE_SIZE) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    best, best_err = SHAPES[0], np.inf
    for dy, dx, ds in itertools.product(_SEARCH_SHIFT, _SEARCH_SHIFT, _SEARCH_SIZE):
        half = (extent + ds) / 2
        u = (xx - cx - dx) / half
        v = (yy - cy - dy) / half
        for shape in SHAPES:
            err = ((_shape_mask(shape, u, v) - target) ** 2).sum()
            if err < best_err:
                best, best_err = shape, err
    return best


def recover_spec(image: np.ndarray) -> AttributeSpec | None:
    """Read the attributes back off the pixels, or None if no figure is found."""
    image = np.asarray(image, dtype=np.float64)
    border = np.concatenate([image[:2].reshape(-1, 3), image[-2:].reshape(-1, 3),
                             image[:, :2].reshape(-1, 3), image[:, -2:].reshape(-1, 3)])
    votes = np.bincount(_nearest(border, BACKGROUNDS), minlength=len(BACKGROUNDS))
    background = BACKGROUNDS[int(votes.argmax())]
    bg = np.array(PALETTE[background])

    # figure colour: the shape colour owning the most confidently-coloured pixels
    flat = image.reshape(-1, 3)
    nearest_all = _nearest(flat, list(PALETTE))
    names = list(PALETTE)
    counts = [int((nearest_all == names.index(c)).sum()) for c in SHAPE_COLORS]
    if max(counts) == 0:
        return None
    color = SHAPE_COLORS[int(np.argmax(counts))]

    # figure mask: project each pixel onto the background->figure segment
    fg = np.array(PALETTE[color])
    axis = fg - bg
    share = ((image - bg) @ axis) / (axis @ axis)
    raw = share > 0.5
    # components of the dilated mask, so the bars of a stripe figure count as one blob;
    # stray quantization blocks away from the figure are dropped
    labels, n = ndimage.label(ndimage.binary_dilation(raw, iterations=_MERGE_RADIUS))
    if n == 0:
        return None
    sizes = np.bincount(labels[raw], minlength=n + 1)[1:]
    mask = raw & (labels == int(sizes.argmax()) + 1)
    if mask.sum() < _FIGURE_MIN_PIXELS:
        return None

    keep = ndimage.binary_dilation(mask, iterations=_MERGE_RADIUS)
    shape = _classify_shape(np.where(keep, share, 0.0), mask)

    rows, cols = np.nonzero(mask)
    cy, cx = rows.mean() + 0.5, cols.mean() + 0.5
    centroid = np.array([cy, cx])
    d_center = np.linalg.norm(centroid - _LAYOUT["center"][0])
    d_corner = np.linalg.norm(centroid - _LAYOUT["corner"][0])
    position = "center" if d_center <= d_corner else "corner"
    return AttributeSpec(background, shape, color, position)


def compliance_oracle(image: np.ndarray, words) -> bool:
    """True when the attributes recovered from ``image`` match the caption ``words``."""
    target = AttributeSpec.from_words(words)
    return recover_spec(image) == target


@dataclass
class DatasetRecord:
    seed: int
    spec: AttributeSpec
    image: np.ndarray

    @property
    def words(self) -> list[str]:
        return self.spec.words


def make_records(n: int, seed: int, stratified: bool = False) -> list[DatasetRecord]:
    if n < 1:
        raise ValueError("n must be >= 1")
    specs = all_specs()
    rng = np.random.default_rng(seed)
    if stratified:
        picks = np.resize(np.arange(len(specs)), n)
        rng.shuffle(picks)
    else:
        picks = rng.integers(0, len(specs), size=n)
    seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [DatasetRecord(int(s), specs[p], render(specs[p], int(s))) for p, s in zip(picks, seeds)]


MAGIC = b"UFCD"
VERSION = 1


def write_dataset(records, path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(records))
    for rec in records:
        text = rec.spec.text.encode("utf-8")
        out += struct.pack("<Q", rec.seed)
        out += rec.spec.to_bytes()
        out += struct.pack("<I", len(text)) + text
        out += np.round(np.asarray(rec.image) * 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(bytes(out))


def read_dataset(path) -> list[DatasetRecord]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 12
    records = []
    npix = IMAGE_SIZE * IMAGE_SIZE * 3
    for _ in range(count):
        (seed,) = struct.unpack_from("<Q", raw, pos)
        spec = AttributeSpec.from_bytes(raw[pos + 8 : pos + 12])
        (tlen,) = struct.unpack_from("<I", raw, pos + 12)
        pos += 16
        text = raw[pos : pos + tlen].decode("utf-8")
        pos += tlen
        if text != spec.text:
            raise ValueError(f"{path}: caption/spec mismatch in record {len(records)}")
        pixels = np.frombuffer(raw, np.uint8, npix, pos).reshape(IMAGE_SIZE, IMAGE_SIZE, 3)
        pos += npix
        records.append(DatasetRecord(seed, spec, pixels.astype(np.float64) / 255.0))
    return records


def make_dataset(n: int, seed: int, path, stratified: bool = False) -> list[DatasetRecord]:
    records = make_records(n, seed, stratified)
    write_dataset(records, path)
    return records
