"""Whole-image compression: patch grid -> latent symbols -> range-coded container."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import extract_patches, stitch_patches
from .errors import DimensionError
from .metrics import mse, mssim, psnr_from_mse
from .model import Cae, LatentCode, entropy_estimate
from .rangecoder import CompressedImage, FrequencyTable, bpp_coded, bpp_estimate, range_encode


def crop_to_grid(image: np.ndarray, patch: int) -> np.ndarray:
    """Drop the right/bottom remainder so the image tiles exactly into patches."""
    _, h, w = image.shape
    if h < patch or w < patch:
        raise DimensionError(f"image {h}x{w} is smaller than one {patch}x{patch} patch")
    return image[:, : h - h % patch, : w - w % patch]


def compress_image(model: Cae, image: np.ndarray, quant_bits: Optional[int] = None,
                   table: Optional[FrequencyTable] = None) -> CompressedImage:
    """Encode a (C, H, W) image in [0, 1].  Without ``table`` one is fitted to this image."""
    p = model.config.patch_size
    image = crop_to_grid(np.asarray(image, dtype=np.float32), p)
    rows, cols = image.shape[1] // p, image.shape[2] // p
    patches = np.stack(extract_patches(image, p, "grid"))
    code = model.encode(patches, quant_bits)
    levels = 2 ** code.quant_bits
    if table is None:
        table = FrequencyTable.from_symbols(code.symbols, levels)
    elif table.num_symbols != levels:
        raise ValueError(f"table has {table.num_symbols} symbols, code uses {levels}")
    return CompressedImage(rows, cols, tuple(code.shape[1:]), code.quant_bits, table,
                           range_encode(code.symbols, table))


def decompress_image(model: Cae, blob: CompressedImage) -> np.ndarray:
    code = LatentCode(blob.symbols(), blob.quant_bits)
    patches = model.decode(code)
    return stitch_patches(list(patches), blob.grid_rows, blob.grid_cols)


@dataclass
class ImageScore:
    name: str
    bpp_coded: float
    bpp_est: float
    psnr: float
    mssim: float
    mse: float


def evaluate_image(model: Cae, image: np.ndarray, name: str = "", quant_bits: Optional[int] = None):
    """Round-trip one image through the codec; returns (score, reconstruction, container)."""
    p = model.config.patch_size
    ref = crop_to_grid(np.asarray(image, dtype=np.float32), p)
    blob = compress_image(model, ref, quant_bits)
    recon = decompress_image(model, blob)
    pixels = ref.shape[1] * ref.shape[2]
    symbols = blob.symbols()
    h = entropy_estimate(LatentCode(symbols, blob.quant_bits))
    m = mse(ref, recon)
    score = ImageScore(name, bpp_coded(len(blob.payload), pixels), bpp_estimate(h, symbols.size, pixels),
                       psnr_from_mse(m), mssim(ref, recon), m)
    return score, recon, blob

