"""Image I/O (binary PPM/PGM), patch extraction and deterministic batching."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ParseError

_MASK64 = (1 << 64) - 1
IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm")


class SplitMix64:
    """64-bit SplitMix generator; the only PRNG used for data ordering."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            r = self.next_u64()
            if r <= limit:
                return r % n

    def permutation(self, n: int) -> list[int]:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def epoch_seed(seed: int, epoch: int) -> int:
    return SplitMix64(seed ^ ((epoch + 1) * 0xD1B54A32D192ED03 & _MASK64)).next_u64()


# ---------------------------------------------------------------------------
# Netpbm


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", offset=pos)
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Parse a binary P5/P6 image with maxval 255 into uint8 (C, H, W)."""
    if buf[:2] not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {buf[:2]!r}; need P5 or P6", offset=0)
    channels = 3 if buf[:2] == b"P6" else 1
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"bad {what} {tok!r}", offset=pos - len(tok))
        fields.append(int(tok))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ParseError("image extents must be positive", offset=2)
    if maxval != 255:
        raise ParseError(f"maxval {maxval} unsupported; need 255", offset=pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ParseError("missing whitespace after maxval", offset=pos)
    pos += 1
    need = width * height * channels
    have = len(buf) - pos
    if have < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {have}", offset=len(buf))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width, channels).transpose(2, 0, 1).copy()


def encode_netpbm(pixels: np.ndarray) -> bytes:
    """uint8 (C, H, W) with C in {1, 3} to P5/P6 bytes."""
    c, h, w = pixels.shape
    if c not in (1, 3):
        raise ValueError(f"need 1 or 3 channels, got {c}")
    magic = b"P6" if c == 3 else b"P5"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(pixels.transpose(1, 2, 0), dtype=np.uint8).tobytes()


def load_image(path, channels: int | None = None) -> np.ndarray:
    """Read a PPM/PGM file as float32 (C, H, W) in [0, 1].

    ``channels=3`` replicates a grayscale image to three channels.
    """
    pixels = decode_netpbm(Path(path).read_bytes())
    img = pixels.astype(np.float32) / np.float32(255.0)
    if channels == 3 and img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    elif channels is not None and channels != img.shape[0]:
        raise ValueError(f"cannot convert {img.shape[0]}-channel image to {channels} channels")
    return img


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Round-half-up quantization of [0, 1] values to 8 bits."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    Path(path).write_bytes(encode_netpbm(to_bytes(img)))


def content_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# patches


def grid_coords(height: int, width: int, patch: int) -> list[tuple[int, int]]:
    if height < patch or width < patch:
        raise ValueError(f"image {height}x{width} smaller than patch {patch}")
    return [(r, c) for r in range(0, height - patch + 1, patch) for c in range(0, width - patch + 1, patch)]


def random_coords(height: int, width: int, patch: int, seed: int, k: int) -> list[tuple[int, int]]:
    if height < patch or width < patch:
        raise ValueError(f"image {height}x{width} smaller than patch {patch}")
    rng = SplitMix64(seed)
    return [(rng.below(height - patch + 1), rng.below(width - patch + 1)) for _ in range(k)]


def extract_patches(image: np.ndarray, patch_size: int, policy: str = "grid", seed: int = 0, k: int = 1) -> list[np.ndarray]:
    """Cut (C, H, W) into patches.

    ``grid`` tiles without overlap and drops the right/bottom remainder;
    ``random`` draws ``k`` fully interior positions from ``seed``.
    """
    _, h, w = image.shape
    if policy == "grid":
        coords = grid_coords(h, w, patch_size)
    elif policy == "random":
        coords = random_coords(h, w, patch_size, seed, k)
    else:
        raise ValueError(f"unknown patch policy {policy!r}")
    return [image[:, r : r + patch_size, c : c + patch_size].copy() for r, c in coords]


def stitch_patches(patches: Sequence[np.ndarray], rows: int, cols: int) -> np.ndarray:
    """Inverse of grid extraction (without the dropped remainder)."""
    c, p, _ = patches[0].shape
    out = np.zeros((c, rows * p, cols * p), dtype=np.float32)
    for idx, patch in enumerate(patches):
        r, q = divmod(idx, cols)
        out[:, r * p : (r + 1) * p, q * p : (q + 1) * p] = patch
    return out


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass
class PatchDataset:
    """Patches cut from a list of images, batched in a seeded order."""

    paths: list[Path]
    patch_size: int
    policy: str = "grid"
    patches_per_image: int = 4
    seed: int = 0
    hashes: list[str] = field(default_factory=list)
    patches: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.paths:
            raise ValueError("dataset has no images")
        stack = []
        self.hashes = []
        for i, p in enumerate(self.paths):
            self.hashes.append(content_hash(p))
            img = load_image(p, channels=3)
            stack.extend(extract_patches(img, self.patch_size, self.policy, seed=self.seed + i, k=self.patches_per_image))
        self.patches = np.stack(stack).astype(np.float32)

    @classmethod
    def from_dir(cls, directory, patch_size: int, **kw) -> "PatchDataset":
        return cls(list_images(directory), patch_size, **kw)

    def __len__(self) -> int:
        return len(self.patches)

    def order(self, epoch: int) -> list[int]:
        return SplitMix64(epoch_seed(self.seed, epoch)).permutation(len(self))

    def batches(self, epoch: int, batch_size: int) -> Iterator[np.ndarray]:
        idx = self.order(epoch)
        for start in range(0, len(idx), batch_size):
            yield self.patches[idx[start : start + batch_size]]

    def manifest(self, root=None) -> str:
        root = Path(root) if root is not None else None
        lines = []
        for p, h in zip(self.paths, self.hashes):
            rel = os.path.relpath(p, root) if root is not None else p.name
            lines.append(f"{rel} {h}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256("".join(self.hashes).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# bundled toy corpus


def toy_corpus_dir() -> Path:
    return Path(__file__).resolve().parent / "toy"


def make_toy_image(index: int, size: int = 64) -> np.ndarray:
    """Smooth synthetic RGB scene: colour gradient, soft discs and a band."""
    rng = np.random.default_rng(1000 + index)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    img = np.empty((3, size, size))
    base = rng.uniform(0.15, 0.85, size=3)
    slope = rng.uniform(-0.35, 0.35, size=(3, 2))
    for ch in range(3):
        img[ch] = base[ch] + slope[ch, 0] * (xx - 0.5) + slope[ch, 1] * (yy - 0.5)
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.08, 0.3)
        colour = rng.uniform(0.0, 1.0, size=3)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        alpha = 1.0 / (1.0 + np.exp((d - radius) / 0.025))
        img = img * (1 - alpha) + colour[:, None, None] * alpha
    freq = rng.uniform(2.0, 5.0)
    angle = rng.uniform(0, np.pi)
    band = 0.08 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    img = img + band[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_toy_corpus(directory, count: int = 16, size: int = 64) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = d / f"toy_{i:02d}.ppm"
        save_image(make_toy_image(i, size), p)
        paths.append(p)
    return paths
