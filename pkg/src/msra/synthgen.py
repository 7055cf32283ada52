"""Synthetic multi-sequence digit images.

Two layouts are supported: ``stacked-rows`` (up to ``n`` horizontal sequences,
one 28-pixel band each, image ``28k x width``) and ``hv`` (one horizontal and
one vertical sequence on a square canvas). Glyphs come from a built-in 5x7
bitmap font scaled into 28x28 cells, or from an IDX image/label pair such as
MNIST.
"""

from __future__ import annotations

import base64
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from msra.core import Alphabet

GLYPH = 28

_FONT_5X7 = {
    "0": [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    "1": ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "2": [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    "3": ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    "4": ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    "5": ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    "6": ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    "7": ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    "8": [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    "9": [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
}


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass
class GlyphSource:
    """Pool of 28x28 uint8 glyphs (ink = high values) per alphabet symbol."""

    glyphs: dict
    name: str = "builtin-5x7"

    def symbols(self) -> str:
        return "".join(sorted(self.glyphs))

    def pick(self, rng: np.random.Generator, symbol: str) -> np.ndarray:
        pool = self.glyphs[symbol]
        return pool[int(rng.integers(len(pool)))]


def builtin_glyphs() -> GlyphSource:
    glyphs = {}
    for ch, rows in _FONT_5X7.items():
        bitmap = np.array([[c == "#" for c in row] for row in rows], dtype=np.uint8)
        big = np.kron(bitmap, np.ones((3, 3), dtype=np.uint8)) * 255
        cell = np.zeros((GLYPH, GLYPH), dtype=np.uint8)
        y0, x0 = (GLYPH - big.shape[0]) // 2, (GLYPH - big.shape[1]) // 2
        cell[y0 : y0 + big.shape[0], x0 : x0 + big.shape[1]] = big
        glyphs[ch] = [cell]
    return GlyphSource(glyphs)


# -- IDX -----------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def parse_idx(data: bytes, expect_magic: int | None = None) -> np.ndarray:
    """Decode an IDX blob: 2 zero bytes, type code, rank, big-endian u32 dims, payload."""
    if len(data) < 4:
        raise IdxTruncatedError(f"IDX header needs 4 bytes, got {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if expect_magic is not None and magic != expect_magic:
        raise IdxMagicError(f"bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if data[0] != 0 or data[1] != 0 or data[2] not in _IDX_TYPES:
        raise IdxMagicError(f"bad IDX magic 0x{magic:08x}")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError(f"IDX header needs {header} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(_IDX_TYPES[data[2]])
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = data[header:]
    if len(payload) < need:
        raise IdxTruncatedError(f"IDX payload has {len(payload)} bytes, dims {dims} need {need}")
    if len(payload) > need:
        raise IdxError(f"IDX payload has {len(payload) - need} trailing bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = {v: k for k, v in _IDX_TYPES.items()}[np.dtype(array.dtype).newbyteorder(">").str]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(np.dtype(array.dtype).newbyteorder(">")).tobytes())


def load_idx(images_path, labels_path, alphabet: Alphabet | None = None) -> GlyphSource:
    """Build a glyph pool from IDX image (rank 3, u8) and label (rank 1, u8) files."""
    alphabet = alphabet or Alphabet()
    images = parse_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC)
    labels = parse_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[1:] != (GLYPH, GLYPH):
        raise IdxError(f"glyphs must be {GLYPH}x{GLYPH}, got {images.shape[1:]}")
    glyphs: dict = {}
    for img, lab in zip(images, labels):
        ch = str(int(lab))
        if ch in alphabet.symbols:
            glyphs.setdefault(ch, []).append(np.ascontiguousarray(img))
    if not glyphs:
        raise IdxError("no IDX labels fall inside the alphabet")
    return GlyphSource(glyphs, name=f"idx:{Path(images_path).name}")


# -- dataset spec and records --------------------------------------------------


@dataclass
class DatasetSpec:
    max_sequences: int = 2
    min_length: int = 1
    max_length: int = 14
    length_mean: float = 7.0
    length_std: float = 3.0
    jitter: int = 3
    rotation: float = 10.0
    noise_ratio: float = 0.2
    noise_size: int = 7
    layout: str = "stacked-rows"
    width: int = 392
    # blank pixels between neighbouring glyphs of one sequence, and minimum border
    glyph_gap: int = 0
    margin: int = 0
    hv_length: int = 5
    hv_size: int = 392
    n_train: int = 3000
    n_test: int = 300
    seed: int = 0
    alphabet: str = "0123456789"

    def __post_init__(self):
        if self.layout not in ("stacked-rows", "hv"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if not 1 <= self.min_length <= self.max_length <= 14:
            raise ValueError("sequence lengths must satisfy 1 <= min <= max <= 14")
        if self.max_sequences < 1:
            raise ValueError("max_sequences must be >= 1")
        if self.layout == "stacked-rows" and self.span(self.max_length) + 2 * self.margin > self.width:
            raise ValueError("longest sequence does not fit the image width")
        if self.layout == "hv" and self.span(self.hv_length) + 2 * self.margin > self.hv_size:
            raise ValueError("hv sequences do not fit the canvas")

    def span(self, length: int) -> int:
        return length * GLYPH + (length - 1) * self.glyph_gap

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SampleRecord:
    image: np.ndarray
    targets: list
    # class index per 28x28 cell where a glyph was placed; in-memory only
    cells: np.ndarray | None = field(default=None, repr=False)
    # top-left (y, x) of each pasted glyph, targets concatenated; in-memory only
    boxes: list | None = field(default=None, repr=False)

    def to_json(self) -> str:
        h, w = self.image.shape
        return json.dumps(
            {
                "h": int(h),
                "w": int(w),
                "pixels": base64.b64encode(np.ascontiguousarray(self.image, dtype=np.uint8).tobytes()).decode("ascii"),
                "targets": list(self.targets),
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        d = json.loads(line)
        raw = base64.b64decode(d["pixels"])
        if len(raw) != d["h"] * d["w"]:
            raise ValueError(f"record pixel count {len(raw)} != {d['h']}x{d['w']}")
        image = np.frombuffer(raw, dtype=np.uint8).reshape(d["h"], d["w"]).copy()
        targets = list(d["targets"])
        if not targets or any(not t for t in targets):
            raise ValueError("records need at least one non-empty target")
        return cls(image, targets)


# -- rendering -----------------------------------------------------------------


def _clipped_normal(rng, mean, std, lo, hi) -> int:
    return int(np.clip(round(rng.normal(mean, std)), lo, hi))


def _paste(canvas, glyph, y, x):
    h, w = glyph.shape
    H, W = canvas.shape
    y0, x0 = max(y, 0), max(x, 0)
    y1, x1 = min(y + h, H), min(x + w, W)
    if y0 >= y1 or x0 >= x1:
        return
    region = canvas[y0:y1, x0:x1]
    np.maximum(region, glyph[y0 - y : y1 - y, x0 - x : x1 - x], out=region)


def _distort(glyph, rng, spec):
    angle = rng.uniform(-spec.rotation, spec.rotation)
    if angle:
        glyph = ndimage.rotate(glyph, angle, reshape=False, order=0, mode="constant", cval=0)
    dx = int(rng.integers(-spec.jitter, spec.jitter + 1))
    return glyph, dx


def _shrink(glyph, size):
    factor = GLYPH // size
    if factor * size != GLYPH:
        return np.asarray(
            ndimage.zoom(glyph.astype(np.float64), size / GLYPH, order=1), dtype=np.uint8
        )[:size, :size]
    return glyph.reshape(size, factor, size, factor).mean(axis=(1, 3)).astype(np.uint8)


def noise_count(valid_digits: int, ratio: float = 0.2) -> int:
    return math.ceil(valid_digits * ratio - 1e-9)


def _add_noise(canvas, n_valid, rng, spec, glyphs):
    symbols = glyphs.symbols()
    H, W = canvas.shape
    s = spec.noise_size
    for _ in range(noise_count(n_valid, spec.noise_ratio)):
        sym = symbols[int(rng.integers(len(symbols)))]
        small = _shrink(glyphs.pick(rng, sym), s)
        _paste(canvas, small, int(rng.integers(0, H - s + 1)), int(rng.integers(0, W - s + 1)))


def _random_text(rng, length, symbols):
    return "".join(symbols[int(k)] for k in rng.integers(len(symbols), size=length))


def _start_cell(rng, spec, span, extent):
    lo = -(-spec.margin // GLYPH)
    hi = (extent - spec.margin - span) // GLYPH
    if hi < lo:
        return spec.margin
    return int(rng.integers(lo, hi + 1)) * GLYPH


def render_sample(spec: DatasetSpec, rng: np.random.Generator, glyphs: GlyphSource) -> SampleRecord:
    """Stacked-rows layout: ``k`` sequences drawn top to bottom, one 28-pixel band each."""
    alphabet = Alphabet(spec.alphabet)
    symbols = "".join(c for c in spec.alphabet if c in glyphs.glyphs)
    n = spec.max_sequences
    k = _clipped_normal(rng, n / 2 + 0.5, n / 4, 1, n)
    canvas = np.zeros((GLYPH * k, spec.width), dtype=np.uint8)
    cells = np.zeros((k, spec.width // GLYPH), dtype=np.int64)
    targets, boxes, n_valid = [], [], 0
    pitch = GLYPH + spec.glyph_gap
    for row in range(k):
        length = _clipped_normal(rng, spec.length_mean, spec.length_std, spec.min_length, spec.max_length)
        text = _random_text(rng, length, symbols)
        x0 = _start_cell(rng, spec, spec.span(length), spec.width)
        for m, ch in enumerate(text):
            glyph, dx = _distort(glyphs.pick(rng, ch), rng, spec)
            x = x0 + m * pitch
            _paste(canvas, glyph, row * GLYPH, x + dx)
            boxes.append((row * GLYPH, x + dx))
            col = (x + GLYPH // 2) // GLYPH
            if col < cells.shape[1]:
                cells[row, col] = alphabet.encode(ch)[0]
        targets.append(text)
        n_valid += length
    _add_noise(canvas, n_valid, rng, spec, glyphs)
    return SampleRecord(canvas, targets, cells, boxes)


def _boxes_overlap(a, b) -> bool:
    (ay, ax), (by, bx) = a, b
    return ay < by + GLYPH and by < ay + GLYPH and ax < bx + GLYPH and bx < ax + GLYPH


def render_hv_sample(spec: DatasetSpec, rng: np.random.Generator, glyphs: GlyphSource,
                     max_tries: int = 200) -> SampleRecord:
    """One horizontal and one vertical sequence of ``hv_length`` glyphs, no overlap."""
    alphabet = Alphabet(spec.alphabet)
    symbols = "".join(c for c in spec.alphabet if c in glyphs.glyphs)
    size = spec.hv_size
    L = spec.hv_length
    pitch = GLYPH + spec.glyph_gap
    span = spec.span(L)
    texts = [_random_text(rng, L, symbols), _random_text(rng, L, symbols)]
    for _ in range(max_tries):
        hy = _start_cell(rng, spec, GLYPH, size)
        hx = _start_cell(rng, spec, span, size)
        vx = _start_cell(rng, spec, GLYPH, size)
        vy = _start_cell(rng, spec, span, size)
        h_pos = [(hy, hx + m * pitch) for m in range(L)]
        v_pos = [(vy + m * pitch, vx) for m in range(L)]
        distorted = [_distort(glyphs.pick(rng, ch), rng, spec) for ch in texts[0] + texts[1]]
        boxes = [(y, x + d[1]) for (y, x), d in zip(h_pos + v_pos, distorted)]
        if not any(_boxes_overlap(a, b) for a in boxes[:L] for b in boxes[L:]):
            break
    else:
        raise PlacementError(f"no overlap-free placement after {max_tries} tries")
    canvas = np.zeros((size, size), dtype=np.uint8)
    cells = np.zeros((size // GLYPH, size // GLYPH), dtype=np.int64)
    for (y, x), (glyph, dx), ch in zip(h_pos + v_pos, distorted, texts[0] + texts[1]):
        _paste(canvas, glyph, y, x + dx)
        cells[(y + GLYPH // 2) // GLYPH, (x + GLYPH // 2) // GLYPH] = alphabet.encode(ch)[0]
    _add_noise(canvas, 2 * L, rng, spec, glyphs)
    return SampleRecord(canvas, texts, cells, boxes)


_SPLITS = {"train": 0, "test": 1}


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLITS[split], index])


def iter_samples(spec: DatasetSpec, split: str, glyphs: GlyphSource | None = None) -> Iterator[SampleRecord]:
    glyphs = glyphs or builtin_glyphs()
    count = spec.n_train if split == "train" else spec.n_test
    render = render_hv_sample if spec.layout == "hv" else render_sample
    for index in range(count):
        yield render(spec, sample_rng(spec.seed, split, index), glyphs)


def gen_dataset(spec: DatasetSpec, out_dir, glyphs: GlyphSource | None = None) -> dict:
    """Write ``train.jsonl``, ``test.jsonl`` and ``manifest.json``; returns their paths."""
    glyphs = glyphs or builtin_glyphs()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in ("train", "test"):
        path = out / f"{split}.jsonl"
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            for rec in iter_samples(spec, split, glyphs):
                fh.write(rec.to_json() + "\n")
        paths[split] = str(path)
    manifest = {"spec": asdict(spec), "glyphs": glyphs.name}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="ascii")
    paths["manifest"] = str(mpath)
    return paths


def read_dataset(path) -> list[SampleRecord]:
    with open(path, encoding="ascii") as fh:
        return [SampleRecord.from_json(line) for line in fh if line.strip()]


def load_manifest(path) -> DatasetSpec:
    d = json.loads(Path(path).read_text())
    return DatasetSpec.from_dict(d["spec"])
