"""Image inputs: synthetic generator, NVPK raw binary files, aspect-ratio statistics."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError
from .numerics.rng import substream

MAGIC = b"NVPK"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_RECORD = struct.Struct("<QIIIi")
_MAX_ELEMENTS = 1 << 32

#: Default deviation threshold when deciding whether an image is square-ish.
SQUARE_TOLERANCE = 0.2


@dataclass
class ImageSpec:
    id: int
    height: int
    width: int
    channels: int = 1
    pixels: np.ndarray | None = field(default=None, repr=False)
    label: int | None = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError(f"image {self.id}: dimensions must be >= 1")
        if self.pixels is not None:
            self.pixels = np.asarray(self.pixels, dtype=np.float32).reshape(
                self.height, self.width, self.channels
            )

    @property
    def aspect(self) -> float:
        """Height divided by width."""
        return self.height / self.width


@dataclass(frozen=True)
class Law:
    """A scalar distribution for the synthetic generator.

    ``kind`` is one of ``fixed`` (value ``a``), ``uniform`` on ``[a, b]``,
    ``normal`` with mean ``a`` and std ``b``, or ``lognormal`` whose log has
    mean ``a`` and std ``b``.
    """

    kind: str
    a: float
    b: float = 0.0

    def validate(self, what):
        if self.kind == "fixed":
            if self.a <= 0:
                raise ConfigError(f"fixed value must be positive, got {self.a}", what)
        elif self.kind == "uniform":
            if not 0 < self.a <= self.b:
                raise ConfigError(f"uniform support must satisfy 0 < low <= high, got [{self.a}, {self.b}]", what)
        elif self.kind == "normal":
            if self.b < 0 or (self.b == 0 and self.a <= 0):
                raise ConfigError(f"normal({self.a}, {self.b}) cannot produce positive values", what)
        elif self.kind == "lognormal":
            if self.b < 0:
                raise ConfigError(f"lognormal std must be >= 0, got {self.b}", what)
        else:
            raise ConfigError(f"unknown law kind {self.kind!r}", what)

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return float(self.a)
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        if self.kind == "lognormal":
            return float(math.exp(rng.normal(self.a, self.b)))
        while True:
            value = float(rng.normal(self.a, self.b))
            if value > 0:
                return value

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], float(d.get("a", 0.0)), float(d.get("b", 0.0)))

    def to_dict(self):
        return {"kind": self.kind, "a": self.a, "b": self.b}


DEFAULT_RATIO_LAW = Law("lognormal", 0.0, 0.5)
DEFAULT_AREA_LAW = Law("lognormal", math.log(160.0**2), 0.5)


def planted_pattern(height, width, label, num_classes, amplitude=1.0):
    """Low-frequency diagonal sinusoid whose phase encodes the class."""
    v = (np.arange(height) + 0.5) / height
    u = (np.arange(width) + 0.5) / width
    phase = 2 * np.pi * label / num_classes
    return amplitude * np.sin(2 * np.pi * (u[None, :] + v[:, None]) + phase)


def generate_synthetic(
    count,
    ratio_law=DEFAULT_RATIO_LAW,
    area_law=DEFAULT_AREA_LAW,
    seed=0,
    *,
    channels=1,
    num_classes=4,
    pixels=True,
    noise_std=0.5,
    amplitude=1.0,
    first_id=0,
):
    """Draw ``count`` images whose height:width ratio and area follow the given laws.

    Each image derives only from ``(seed, id)``. With ``pixels`` enabled the
    payload is Gaussian noise plus :func:`planted_pattern` for the image's
    class, which makes toy classification learnable.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}", "count")
    ratio_law.validate("ratio_law")
    area_law.validate("area_law")
    images = []
    for image_id in range(first_id, first_id + count):
        rng = substream(seed, "image", image_id)
        ratio = ratio_law.sample(rng)
        area = area_law.sample(rng)
        height = max(1, round(math.sqrt(area * ratio)))
        width = max(1, round(math.sqrt(area / ratio)))
        label = int(rng.integers(num_classes)) if num_classes > 0 else None
        payload = None
        if pixels:
            noise = rng.normal(0.0, noise_std, size=(height, width, channels))
            if label is not None:
                noise += planted_pattern(height, width, label, num_classes, amplitude)[..., None]
            payload = noise.astype(np.float32)
        images.append(ImageSpec(image_id, height, width, channels, payload, label))
    return images


# -- NVPK raw files -----------------------------------------------------------


def write_rawset(images, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(images)))
        for img in images:
            if img.pixels is None:
                raise ValueError(f"image {img.id} has no pixel payload to write")
            label = -1 if img.label is None else img.label
            fh.write(_RECORD.pack(img.id, img.height, img.width, img.channels, label))
            fh.write(np.ascontiguousarray(img.pixels, dtype="<f4").tobytes())


def read_rawset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    offset = _HEADER.size
    images = []
    for _ in range(count):
        if offset + _RECORD.size > len(buf):
            raise FormatError("truncated image record", offset)
        image_id, height, width, channels, label = _RECORD.unpack_from(buf, offset)
        if min(height, width, channels) < 1:
            raise FormatError(f"image {image_id} has a zero dimension", offset)
        elements = height * width * channels
        if elements > _MAX_ELEMENTS:
            raise FormatError(f"image {image_id} dimensions overflow ({height}x{width}x{channels})", offset)
        offset += _RECORD.size
        nbytes = 4 * elements
        if offset + nbytes > len(buf):
            raise FormatError(f"truncated payload for image {image_id}", offset)
        payload = np.frombuffer(buf, dtype="<f4", count=elements, offset=offset)
        offset += nbytes
        images.append(ImageSpec(
            image_id, height, width, channels,
            payload.astype(np.float32).reshape(height, width, channels),
            None if label == -1 else label,
        ))
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset)
    return images


# -- aspect statistics --------------------------------------------------------


@dataclass
class AspectHistogram:
    edges: np.ndarray
    counts: np.ndarray
    non_square_fraction: float
    tolerance: float = SQUARE_TOLERANCE


DEFAULT_EDGES = np.concatenate([[0.0], 2.0 ** np.linspace(-2, 2, 17), [np.inf]])


def is_non_square(height, width, tolerance=SQUARE_TOLERANCE):
    """True when the longer side exceeds the shorter by more than ``tolerance``."""
    return max(height, width) > (1 + tolerance) * min(height, width)


def aspect_stats(images, edges=DEFAULT_EDGES, tolerance=SQUARE_TOLERANCE) -> AspectHistogram:
    if not images:
        raise ValueError("aspect_stats needs at least one image")
    ratios = np.array([img.height / img.width for img in images])
    counts, _ = np.histogram(ratios, bins=edges)
    heights = np.array([img.height for img in images])
    widths = np.array([img.width for img in images])
    skewed = np.maximum(heights, widths) > (1 + tolerance) * np.minimum(heights, widths)
    return AspectHistogram(np.asarray(edges), counts, float(skewed.mean()), tolerance)
