"""Image I/O, paired rainy/clean datasets, batching and synthetic rain."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ImageReadError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
IMAGE_SUFFIXES = (".png",)


# -- image files ---------------------------------------------------------------


def load_image(path) -> Tensor:
    """Read an 8-bit RGB PNG as a ``(1, 3, h, w)`` tensor with values ``byte / 255``."""
    path = Path(path)
    if not path.is_file():
        raise ImageReadError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise ImageReadError(f"{path}: expected an RGB image, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, ImageReadError):
            raise
        raise ImageReadError(f"{path}: cannot decode image ({exc})") from exc
    return Tensor((arr.astype(np.float32) / 255.0).transpose(2, 0, 1)[None])


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantise with round-half-up to uint8."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_image(t: Tensor, path) -> None:
    """Write a ``(1, 3, h, w)`` tensor as an 8-bit RGB PNG."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] != 3:
        raise ShapeError(f"save_image expects shape (1, 3, h, w), got {data.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_bytes(data[0].transpose(1, 2, 0)), mode="RGB").save(path, format="PNG")


def save_gray(values: np.ndarray, path) -> None:
    """Write a 2-D array in [0, 1] as an 8-bit grayscale PNG (0 black, 1 white)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"save_gray expects a 2-D array, got {values.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_bytes(values), mode="L").save(path, format="PNG")


# -- geometry ------------------------------------------------------------------


def resize_to(t: Tensor, height: int = 256, width: int = 256) -> Tensor:
    """Bilinear resize (half-pixel convention, same as the network's upsampling)."""
    if height < 1 or width < 1:
        raise ConfigError(f"target size must be >= 1, got {height}x{width}")
    if (height, width) == t.shape[2:]:
        return t
    with ad.no_grad():
        return Tensor(ad.resize_bilinear(t.detach(), height, width).data)


def pad_to_multiple(t: Tensor, multiple: int = 16) -> tuple[Tensor, tuple[int, int]]:
    """Reflection-pad bottom/right so both sides are multiples of ``multiple``."""
    h, w = t.shape[2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return t, (h, w)
    padded = np.pad(t.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return Tensor(padded), (h, w)


def crop_to(t: Tensor, size: tuple[int, int]) -> Tensor:
    h, w = size
    return Tensor(t.data[:, :, :h, :w])


# -- datasets ------------------------------------------------------------------


@dataclass
class ImagePair:
    id: str
    rainy: Tensor
    clean: Tensor

    def __post_init__(self):
        if self.rainy.shape != self.clean.shape:
            raise ShapeError(f"pair {self.id}: rainy {self.rainy.shape} vs clean {self.clean.shape}")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    rainy: Path
    clean: Path


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValidationError("manifest ids must be unique")
        self.entries = sorted(self.entries, key=lambda e: e.id)

    def __len__(self) -> int:
        return len(self.entries)

    def check_files(self) -> None:
        for e in self.entries:
            for p in (e.rainy, e.clean):
                if not p.is_file():
                    raise ImageReadError(f"manifest entry {e.id}: missing file {p}")


def read_manifest(path, split: str = "train") -> DatasetManifest:
    """Parse ``id<TAB>rainy_path<TAB>clean_path`` lines; relative paths resolve next to the file."""
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"{path}:{lineno}: expected 3 tab-separated fields")
        pid, rainy, clean = parts
        entries.append(ManifestEntry(pid, root / rainy, root / clean))
    return DatasetManifest(root, entries, split)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = []
    for e in manifest.entries:
        rainy = _relative(e.rainy, path.parent)
        clean = _relative(e.clean, path.parent)
        lines.append(f"{e.id}\t{rainy}\t{clean}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _relative(p: Path, base: Path) -> str:
    try:
        return p.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)


_RAIN100 = re.compile(r"^(no)?rain[-_]?(.+)$", re.IGNORECASE)


def discover(root, split: str = "train") -> DatasetManifest:
    """Find rainy/clean pairs under ``root``.

    Tried in order: a ``manifest.tsv``; Rain100-style ``rain-XXX.png`` /
    ``norain-XXX.png`` names (anywhere below ``root``); ``rainy/`` and
    ``clean/`` sub-folders holding files with matching names.
    """
    root = Path(root)
    if not root.is_dir():
        raise ImageReadError(f"dataset directory not found: {root}")
    if (root / MANIFEST_NAME).is_file():
        return read_manifest(root / MANIFEST_NAME, split)

    rainy, clean = {}, {}
    for p in sorted(root.rglob("*")):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        m = _RAIN100.match(p.stem)
        if m:
            (clean if m.group(1) else rainy)[m.group(2)] = p
    if rainy and clean:
        keys = sorted(set(rainy) & set(clean))
        return DatasetManifest(root, [ManifestEntry(k, rainy[k], clean[k]) for k in keys], split)

    rdir, cdir = root / "rainy", root / "clean"
    if rdir.is_dir() and cdir.is_dir():
        names = sorted(
            p.name for p in rdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and (cdir / p.name).is_file()
        )
        return DatasetManifest(root, [ManifestEntry(Path(n).stem, rdir / n, cdir / n) for n in names], split)

    return DatasetManifest(root, [], split)


def load_pairs(
    manifest: DatasetManifest, size: tuple[int, int] | None = None, skip_errors: bool = False
) -> tuple[list[ImagePair], list[str]]:
    """Decode every entry, optionally resizing; returns pairs and warning messages.

    With ``skip_errors`` unreadable entries are logged and skipped, otherwise
    the first failure is raised.
    """
    pairs, warnings = [], []
    for e in manifest.entries:
        try:
            rainy, clean = load_image(e.rainy), load_image(e.clean)
            if size is not None:
                rainy, clean = resize_to(rainy, *size), resize_to(clean, *size)
            pairs.append(ImagePair(e.id, rainy, clean))
        except (ImageReadError, ShapeError) as exc:
            if not skip_errors:
                raise
            msg = f"skipped {e.id}: {exc}"
            logger.warning(msg)
            warnings.append(msg)
    return pairs, warnings


class Batch(NamedTuple):
    rainy: Tensor
    clean: Tensor
    ids: list[str]


def epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic permutation of ``range(count)`` for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(count)


def batches(
    data: Sequence[ImagePair] | DatasetManifest, batch_size: int, seed: int, epoch: int, start: int = 0
) -> Iterator[Batch]:
    """Yield shuffled batches stacked along ``n``; the last batch may be short.

    ``start`` skips that many leading batches (used when resuming mid-epoch).
    """
    if isinstance(data, DatasetManifest):
        data, _ = load_pairs(data)
    pairs = sorted(data, key=lambda p: p.id)
    if not pairs:
        raise ValidationError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(pairs), seed, epoch)
    for b, lo in enumerate(range(0, len(order), batch_size)):
        if b < start:
            continue
        chosen = [pairs[i] for i in order[lo : lo + batch_size]]
        yield Batch(
            Tensor(np.concatenate([p.rainy.data for p in chosen])),
            Tensor(np.concatenate([p.clean.data for p in chosen])),
            [p.id for p in chosen],
        )


def num_batches(count: int, batch_size: int) -> int:
    return -(-count // batch_size)


# -- synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class RainSynthesisParams:
    streak_count: int = 60
    length: float = 12.0
    angle: float = 10.0
    intensity: float = 0.6
    seed: int = 0
    width: float = 1.0

    def __post_init__(self):
        if self.streak_count < 0:
            raise ConfigError("streak_count must be >= 0")
        if not 0 < self.intensity <= 1:
            raise ConfigError(f"intensity must be in (0, 1], got {self.intensity}")
        if self.length <= 0 or self.width <= 0:
            raise ConfigError("length and width must be positive")


def rain_layer(h: int, w: int, p: RainSynthesisParams) -> np.ndarray:
    """Additive streak layer of shape ``(h, w)``.

    Each streak is a segment of the given length and angle (degrees from
    vertical) whose brightness falls off linearly with distance, reaching zero
    ``p.width`` pixels from the segment.
    """
    rng = np.random.default_rng(p.seed)
    layer = np.zeros((h, w))
    theta = np.deg2rad(p.angle)
    dx, dy = np.sin(theta), np.cos(theta)
    half = p.length / 2
    reach = half + p.width + 1
    for _ in range(p.streak_count):
        cx = rng.uniform(-half, w - 1 + half)
        cy = rng.uniform(-half, h - 1 + half)
        x0, x1 = int(max(0, np.floor(cx - reach))), int(min(w, np.ceil(cx + reach) + 1))
        y0, y1 = int(max(0, np.floor(cy - reach))), int(min(h, np.ceil(cy + reach) + 1))
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        rx, ry = xx - cx, yy - cy
        along = np.clip(rx * dx + ry * dy, -half, half)
        dist = np.hypot(rx - along * dx, ry - along * dy)
        layer[y0:y1, x0:x1] += p.intensity * np.clip(1 - dist / p.width, 0, 1)
    return layer


def synthesize_rain(clean: Tensor, p: RainSynthesisParams = RainSynthesisParams()) -> Tensor:
    """Brighten ``clean`` with white streaks; output is clamped to [0, 1] and never darker."""
    if p.streak_count == 0:
        return Tensor(clean.data.copy())
    _, _, h, w = clean.shape
    layer = rain_layer(h, w, p).astype(clean.dtype)
    return Tensor(np.clip(clean.data + layer[None, None], 0, 1))


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(round(2 * sigma)))
    ax = np.arange(-radius, radius + 1)
    k = np.exp(-(ax**2) / (2 * sigma**2))
    k /= k.sum()
    pad = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="reflect")
    rows = sum(k[i] * pad[:, i : i + img.shape[1], :] for i in range(len(k)))
    return sum(k[i] * rows[:, :, i : i + img.shape[2]] for i in range(len(k)))


def synthetic_scene(height: int = 64, width: int = 64, seed: int = 0, shapes: int = 3) -> Tensor:
    """A clean test image: a colour gradient with a few soft-edged rectangles and discs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    c0, c1 = rng.uniform(0.15, 0.6, 3), rng.uniform(0.15, 0.6, 3)
    t = 0.5 * (xx + yy)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(shapes):
        color = rng.uniform(0.05, 0.7, 3)
        cy, cx = rng.uniform(0.2, 0.8) * height, rng.uniform(0.2, 0.8) * width
        ry, rx = rng.uniform(0.08, 0.25) * height, rng.uniform(0.08, 0.25) * width
        yy_i, xx_i = np.mgrid[0:height, 0:width]
        if rng.uniform() < 0.5:
            mask = (np.abs(yy_i - cy) <= ry) & (np.abs(xx_i - cx) <= rx)
        else:
            mask = ((yy_i - cy) / ry) ** 2 + ((xx_i - cx) / rx) ** 2 <= 1
        img = np.where(mask[None], color[:, None, None], img)
    img = _blur(img, 0.7)
    return Tensor(np.clip(img, 0, 1)[None].astype(np.float32))
