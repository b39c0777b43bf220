"""Image IO, train/test preprocessing and a synthetic shapes dataset.

Only binary netpbm is supported: P6 (RGB) and P5 (gray), maxval 255.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import resize_bilinear_array

TEST_SIZE = 320


class NetpbmError(ValueError):
    """Malformed or unsupported netpbm file."""


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise NetpbmError(f"truncated header at byte {pos}")
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    if pos >= n or not data[pos:pos + 1].isspace():
        raise NetpbmError(f"expected whitespace after header at byte {pos}")
    return tokens, pos + 1


def parse_netpbm(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes into a uint8 raster of shape (channels, H, W)."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r} at byte 0")
    channels = 3 if magic == b"P6" else 1
    tokens, offset = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise NetpbmError(f"non-integer header field in {tokens[1:]!r} before byte {offset}") from None
    if width < 1 or height < 1:
        raise NetpbmError(f"bad dimensions {width}x{height} before byte {offset}")
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval} (only 255) before byte {offset}")
    need = width * height * channels
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise NetpbmError(f"truncated payload at byte {offset + len(payload)}: expected {need} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels).transpose(2, 0, 1).copy()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_netpbm(fh.read())


def to_unit(raster: np.ndarray) -> np.ndarray:
    return raster.astype(np.float32) / np.float32(255)


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to bytes with round-half-up."""
    values = np.asarray(values, dtype=np.float64)
    if values.size and (np.isnan(values).any() or values.min() < 0 or values.max() > 1):
        raise ValueError("map values must lie in [0, 1]")
    return np.floor(values * 255 + 0.5).astype(np.uint8)


def _write_netpbm(path, magic: bytes, raster: np.ndarray) -> None:
    c, h, w = raster.shape
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(raster.transpose(1, 2, 0)).tobytes())


def write_pgm(path, saliency: np.ndarray) -> None:
    """Write a [1,H,W] or [H,W] map in [0, 1] as an 8-bit P5 file."""
    arr = np.asarray(getattr(saliency, "data", saliency))
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single-channel map, got shape {arr.shape}")
        arr = arr[0]
    _write_netpbm(path, b"P5", quantize(arr)[None])


def write_ppm(path, raster: np.ndarray) -> None:
    """Write a uint8 (3, H, W) raster as P6."""
    raster = np.asarray(raster)
    if raster.dtype != np.uint8 or raster.ndim != 3 or raster.shape[0] != 3:
        raise ValueError(f"expected a uint8 (3,H,W) raster, got {raster.dtype} {raster.shape}")
    _write_netpbm(path, b"P6", raster)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in [0, 1]
    name: str

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValueError(f"{self.name}: image {self.image.shape} and mask {self.mask.shape} differ in size")


@dataclass
class DatasetManifest:
    pairs: list[tuple[Path, Path]]

    def __post_init__(self):
        names = [Path(img).stem for img, _ in self.pairs]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate sample names in manifest: {dupes}")

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def read(cls, path) -> DatasetManifest:
        """Parse ``image<TAB>mask`` lines; relative paths resolve against the manifest's directory."""
        root = Path(path).parent
        pairs = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected image<TAB>mask, got {line!r}")
            pairs.append((root / parts[0], root / parts[1]))
        return cls(pairs)

    def write(self, path) -> None:
        root = Path(path).parent
        lines = []
        for img, mask in self.pairs:
            lines.append(f"{_relative(img, root)}\t{_relative(mask, root)}")
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _relative(p: Path, root: Path) -> str:
    try:
        return Path(os.path.relpath(p, root)).as_posix()
    except ValueError:
        return Path(p).as_posix()


def load_samples(manifest: DatasetManifest) -> list[Sample]:
    samples = []
    for img_path, mask_path in manifest.pairs:
        image = read_image(img_path)
        if image.shape[0] == 1:
            image = np.repeat(image, 3, axis=0)
        mask = read_image(mask_path)
        if mask.shape[0] != 1:
            mask = mask[:1]
        samples.append(Sample(to_unit(image), to_unit(mask), Path(img_path).stem))
    return samples


def train_geometry(size: int) -> tuple[int, int]:
    """(resize, crop) sizes; 320 -> 288 at full scale, scaled for other sizes."""
    return (10 * size + 8) // 9, size


def apply_geometry(sample: Sample, resize: int, crop: int, top: int, left: int, flip: bool) -> Sample:
    image = resize_bilinear_array(sample.image, resize, resize)
    mask = resize_bilinear_array(sample.mask, resize, resize)
    image = image[:, top:top + crop, left:left + crop]
    mask = mask[:, top:top + crop, left:left + crop]
    if flip:
        image = image[:, :, ::-1]
        mask = mask[:, :, ::-1]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.name)


def preprocess_train(sample: Sample, rng: np.random.Generator, size: int = 288) -> Sample:
    """Resize, random crop and random horizontal flip, shared by image and mask."""
    resize, crop = train_geometry(size)
    top, left = (int(v) for v in rng.integers(0, resize - crop + 1, size=2))
    flip = bool(rng.random() < 0.5)
    return apply_geometry(sample, resize, crop, top, left, flip)


def preprocess_test(raster: np.ndarray, target: int = TEST_SIZE) -> tuple[np.ndarray, tuple[int, int]]:
    """Scale a uint8 raster to [0,1], resize to target x target, add a batch axis."""
    image = to_unit(raster) if raster.dtype == np.uint8 else raster.astype(np.float32)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    original = image.shape[1:]
    return resize_bilinear_array(image, target, target)[None], (int(original[0]), int(original[1]))


def restore(saliency: np.ndarray, original: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize a map back to the original (H, W)."""
    return resize_bilinear_array(saliency, *original)


# --- synthetic shapes -------------------------------------------------------

FG_RANGE = (0.05, 0.6)
MIN_COLOR_GAP = 0.45


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = rng.uniform(0.1, 0.28) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    if kind == "rectangle":
        hh, hw = r * rng.uniform(0.5, 1.0, size=2)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == "ellipse":
        ry, rx = r * rng.uniform(0.5, 1.0, size=2)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
    vy, vx = cy + r * np.sin(angles), cx + r * np.cos(angles)
    inside = np.ones((size, size), bool)
    for i in range(3):
        j = (i + 1) % 3
        cross = (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i])
        inside &= cross >= 0
    return inside


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _distinct_color(rng: np.random.Generator, avoid: list[np.ndarray]) -> np.ndarray:
    while True:
        color = rng.uniform(0, 1, size=3)
        if all(np.linalg.norm(color - a) >= MIN_COLOR_GAP for a in avoid):
            return color


def synth_sample(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (uint8 image (3,S,S), uint8 mask (1,S,S)) pair drawn from ``rng``."""
    while True:
        base = rng.uniform(0.15, 0.85, size=3)
        coarse = rng.normal(0, 0.12, size=(3, 4, 4))
        fine = rng.normal(0, 0.04, size=(3, 8, 8))
        image = (base[:, None, None]
                 + resize_bilinear_array(coarse, size, size)
                 + resize_bilinear_array(fine, size, size))
        union = np.zeros((size, size), bool)
        colors = [base]
        for _ in range(int(rng.integers(1, 4))):
            for _attempt in range(50):
                shape = _shape_mask(str(rng.choice(["rectangle", "ellipse", "triangle"])), size, rng)
                if shape.sum() >= 4 and not (shape & _dilate(union)).any():
                    break
            else:
                continue
            color = _distinct_color(rng, colors)
            colors.append(color)
            texture = rng.normal(0, 0.03, size=(3, size, size))
            image = np.where(shape, color[:, None, None] + texture, image)
            union |= shape
        if FG_RANGE[0] <= union.mean() <= FG_RANGE[1]:
            break
    return quantize(np.clip(image, 0, 1)), (union * np.uint8(255))[None]


def gen_synthetic(count: int, size: int, seed: int, out_dir) -> DatasetManifest:
    """Write ``count`` PPM/PGM pairs plus ``manifest.txt`` under ``out_dir``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        image, mask = synth_sample(size, rng)
        img_path = out / "images" / f"syn_{i:05d}.ppm"
        mask_path = out / "masks" / f"syn_{i:05d}.pgm"
        write_ppm(img_path, image)
        _write_netpbm(mask_path, b"P5", mask)
        pairs.append((img_path, mask_path))
    manifest = DatasetManifest(pairs)
    manifest.write(out / "manifest.txt")
    return manifest
