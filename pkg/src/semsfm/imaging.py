"""Categorical label rasters: class palette, grayscale codec, nearest-pixel sampling.

Labels are class-id bytes, never interpolated. On disk, label rasters are
binary 8-bit grayscale PGM (P5) and RGB images are binary PPM (P6).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Class ids used throughout the pipeline.
UNLABELED = 0
GROUND = 1
TRUNK = 2
CANOPY = 3
UNDERSTOREY = 4
GCP_MARKER = 5


class LabelDecodeError(ValueError):
    """A grayscale raster byte does not belong to the palette."""


class RasterFormatError(ValueError):
    """A PGM/PPM stream is malformed."""


@dataclass(frozen=True)
class PaletteEntry:
    class_id: int
    name: str
    display_rgb: tuple[int, int, int]
    gray: int


@dataclass(frozen=True)
class LabelPalette:
    """Ordered class table; class ids and grayscale bytes are unique."""

    entries: tuple[PaletteEntry, ...]

    def __post_init__(self):
        ids = [e.class_id for e in self.entries]
        grays = [e.gray for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("palette class ids must be unique")
        if len(set(grays)) != len(grays):
            raise ValueError("palette grayscale bytes must be unique")

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(e.class_id for e in self.entries)

    def entry(self, class_id: int) -> PaletteEntry:
        for e in self.entries:
            if e.class_id == class_id:
                return e
        raise KeyError(f"class id {class_id} not in palette")

    def has_class(self, class_id: int) -> bool:
        return any(e.class_id == class_id for e in self.entries)

    def name_of(self, class_id: int) -> str:
        return self.entry(class_id).name

    def gray_of(self, class_id: int) -> int:
        return self.entry(class_id).gray

    def class_of_gray(self, gray: int) -> int:
        for e in self.entries:
            if e.gray == gray:
                return e.class_id
        raise KeyError(f"gray byte {gray} not in palette")

    def class_to_gray_lut(self) -> np.ndarray:
        lut = np.full(256, -1, dtype=np.int16)
        for e in self.entries:
            lut[e.class_id] = e.gray
        return lut

    def gray_to_class_lut(self) -> np.ndarray:
        lut = np.full(256, -1, dtype=np.int16)
        for e in self.entries:
            lut[e.gray] = e.class_id
        return lut

    def to_csv(self) -> str:
        lines = ["class_id,name,gray,display_rgb"]
        for e in self.entries:
            r, g, b = e.display_rgb
            lines.append(f"{e.class_id},{e.name},{e.gray},{r}:{g}:{b}")
        return "\n".join(lines) + "\n"


DEFAULT_PALETTE = LabelPalette(
    (
        PaletteEntry(UNLABELED, "unlabeled", (0, 0, 0), 0),
        PaletteEntry(GROUND, "ground", (60, 90, 200), 51),
        PaletteEntry(TRUNK, "trunk", (0, 200, 200), 102),
        PaletteEntry(CANOPY, "canopy", (50, 170, 60), 153),
        PaletteEntry(UNDERSTOREY, "understorey", (220, 210, 70), 204),
        PaletteEntry(GCP_MARKER, "gcp_marker", (220, 40, 40), 255),
    )
)


@dataclass
class LabelImage:
    """Row-major class-id raster paired 1:1 with an RGB image."""

    pixels: np.ndarray  # uint8, shape (h, w)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2:
            raise ValueError("label raster must be 2-D")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def label_at(img: LabelImage, u: float, v: float) -> int:
    """Sample the class id at a subpixel location.

    Nearest pixel center (round half up); coordinates outside the raster
    clamp to the border pixel.
    """
    col = int(np.floor(u + 0.5))
    row = int(np.floor(v + 0.5))
    col = min(max(col, 0), img.width - 1)
    row = min(max(row, 0), img.height - 1)
    return int(img.pixels[row, col])


def labels_at(img: LabelImage, uv: np.ndarray) -> np.ndarray:
    """Vectorized `label_at` over an (n, 2) array of pixel coordinates."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    col = np.clip(np.floor(uv[:, 0] + 0.5).astype(np.int64), 0, img.width - 1)
    row = np.clip(np.floor(uv[:, 1] + 0.5).astype(np.int64), 0, img.height - 1)
    return img.pixels[row, col]


def in_bounds(img: LabelImage, u: float, v: float) -> bool:
    """True when (u, v) rounds to a pixel inside the raster without clamping."""
    return -0.5 <= u < img.width - 0.5 and -0.5 <= v < img.height - 0.5


# --- PGM/PPM codecs -------------------------------------------------------

def _read_pnm_tokens(data: bytes, count: int, offset: int) -> tuple[list[int], int]:
    """Read `count` ASCII integers from a PNM header, honoring # comments."""
    tokens: list[int] = []
    i = offset
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise RasterFormatError(f"truncated PNM header at byte {i}")
        try:
            tokens.append(int(data[start:i]))
        except ValueError:
            raise RasterFormatError(f"bad PNM header token at byte {start}") from None
    return tokens, i + 1  # consume single whitespace after maxval


def pgm_bytes(gray: np.ndarray) -> bytes:
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes()


def parse_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise RasterFormatError("not a binary PGM (P5) stream")
    (w, h, maxval), payload_at = _read_pnm_tokens(data, 3, 2)
    if maxval != 255:
        raise RasterFormatError(f"unsupported PGM maxval {maxval}")
    need = w * h
    payload = data[payload_at : payload_at + need]
    if len(payload) < need:
        raise RasterFormatError(
            f"PGM payload truncated at byte {payload_at + len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, c = rgb.shape
    if c != 3:
        raise ValueError("PPM needs 3 channels")
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def parse_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise RasterFormatError("not a binary PPM (P6) stream")
    (w, h, maxval), payload_at = _read_pnm_tokens(data, 3, 2)
    if maxval != 255:
        raise RasterFormatError(f"unsupported PPM maxval {maxval}")
    need = w * h * 3
    payload = data[payload_at : payload_at + need]
    if len(payload) < need:
        raise RasterFormatError(
            f"PPM payload truncated at byte {payload_at + len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_label_raster(img: LabelImage, palette: LabelPalette = DEFAULT_PALETTE) -> bytes:
    """Encode class ids to a grayscale PGM byte stream via the palette."""
    lut = palette.class_to_gray_lut()
    mapped = lut[img.pixels]
    if (mapped < 0).any():
        bad = int(np.argmax((mapped < 0).ravel()))
        raise LabelDecodeError(
            f"class id {int(img.pixels.ravel()[bad])} at pixel {bad} not in palette"
        )
    return pgm_bytes(mapped.astype(np.uint8))


def decode_label_raster(data: bytes, palette: LabelPalette = DEFAULT_PALETTE) -> LabelImage:
    """Decode a grayscale PGM byte stream back to class ids.

    Raises LabelDecodeError naming the first offending byte and pixel index.
    """
    gray = parse_pgm(data)
    lut = palette.gray_to_class_lut()
    mapped = lut[gray]
    if (mapped < 0).any():
        bad = int(np.argmax((mapped < 0).ravel()))
        raise LabelDecodeError(
            f"gray byte {int(gray.ravel()[bad])} at pixel {bad} not in palette"
        )
    return LabelImage(mapped.astype(np.uint8))
