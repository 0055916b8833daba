"""Image quality metrics and the MACCs / memory cost model."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

BYTES_PER_WEIGHT = 4
BYTES_PER_INDEX = 4


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m: float) -> float:
    """PSNR in dB for unit dynamic range; +inf when the MSE is zero."""
    if m == 0:
        return math.inf
    return -10.0 * math.log10(m)


def psnr(a, b) -> float:
    return psnr_from_mse(mse(a, b))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def mssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over valid window positions, averaged over channels.

    Accepts (H, W) or (C, H, W) arrays with values in [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise DimensionError(f"image {a.shape[-2:]} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = k1 * k1, k2 * k2
    scores = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def relative_loss(mse_ref: float, mse_l: float) -> float:
    """Quality change in dB of a constrained model against the reference."""
    if mse_ref <= 0 or mse_l <= 0:
        raise ValueError("MSE values must be positive")
    return 10.0 * (math.log10(mse_ref) - math.log10(mse_l))


# ---------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class LayerGeometry:
    name: str
    cin: int
    cout: int
    kernel: int
    stride: int
    pad: int
    transposed: bool
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        if self.transposed:
            return (self.cin, self.cout, self.kernel, self.kernel)
        return (self.cout, self.cin, self.kernel, self.kernel)

    @property
    def params(self) -> int:
        return self.cin * self.cout * self.kernel * self.kernel

    def maccs(self, cin: Optional[int] = None, cout: Optional[int] = None) -> int:
        cin = self.cin if cin is None else cin
        cout = self.cout if cout is None else cout
        h, w = self.in_hw if self.transposed else self.out_hw
        return h * w * self.kernel * self.kernel * cin * cout


def maccs_dense(layers: Sequence[LayerGeometry]) -> dict[str, int]:
    """Per-layer dense multiply-accumulate counts (biases excluded)."""
    return {g.name: g.maccs() for g in layers}


def _live_channels(w: np.ndarray, transposed: bool):
    """(alive output channels, input channels used by some alive output)."""
    nz = w != 0
    if transposed:  # [Cin, Cout, k, k]
        out_alive = nz.any(axis=(0, 2, 3))
        in_used = nz[:, out_alive].any(axis=(1, 2, 3))
    else:  # [Cout, Cin, k, k]
        out_alive = nz.any(axis=(1, 2, 3))
        in_used = nz[out_alive].any(axis=(0, 2, 3))
    return out_alive, in_used


def maccs_effective(layers: Sequence[LayerGeometry], weights: Mapping[str, np.ndarray],
                    masks: Optional[Mapping[str, np.ndarray]] = None) -> dict[str, int]:
    """Per-layer MACCs after removing dead filters and dead input channels.

    ``layers`` must be in forward order.  An input channel counts only if some
    surviving filter reads it with a nonzero weight and the previous layer
    actually produces it.
    """
    produced = None
    counts = {}
    for g in layers:
        w = np.asarray(weights[g.name])
        if w.shape != g.weight_shape:
            raise DimensionError(f"{g.name}: weight shape {w.shape} != {g.weight_shape}")
        if masks is not None and g.name in masks:
            m = np.asarray(masks[g.name])
            if m.shape != w.shape:
                raise DimensionError(f"{g.name}: mask shape {m.shape} != weight shape {w.shape}")
            w = w * m
        out_alive, in_used = _live_channels(w, g.transposed)
        if produced is not None:
            if produced.size != in_used.size:
                raise DimensionError(f"{g.name}: expects {in_used.size} inputs, previous layer makes {produced.size}")
            in_used = in_used & produced
        counts[g.name] = g.maccs(int(in_used.sum()), int(out_alive.sum()))
        produced = out_alive
    return counts


def memory_report(weights: Sequence[np.ndarray]) -> dict[str, float]:
    """Dense vs sparse storage of a weight set.

    ``nnz_bytes`` counts 4 bytes per nonzero (the headline figure);
    ``csr_bytes`` adds a 4-byte column index per nonzero and 4-byte row
    pointers over the flattened filter rows.
    """
    params = nnz = rows = 0
    for w in weights:
        w = np.asarray(w)
        params += w.size
        nnz += int(np.count_nonzero(w))
        rows += w.shape[0] if w.ndim > 0 else 1
    dense = BYTES_PER_WEIGHT * params
    nnz_bytes = BYTES_PER_WEIGHT * nnz
    csr_bytes = (BYTES_PER_WEIGHT + BYTES_PER_INDEX) * nnz + BYTES_PER_INDEX * (rows + 1)
    return {
        "params": params,
        "nnz": nnz,
        "dense_bytes": dense,
        "nnz_bytes": nnz_bytes,
        "csr_bytes": csr_bytes,
        "reduction_pct": 100.0 * (1 - nnz_bytes / dense) if dense else 0.0,
        "csr_reduction_pct": 100.0 * (1 - csr_bytes / dense) if dense else 0.0,
    }


COST_COLUMNS = ("layer", "dense_maccs", "eff_maccs", "dense_params", "nnz", "mem_dense", "mem_sparse", "rm_pct")


@dataclass
class CostRow:
    layer: str
    dense_maccs: int
    eff_maccs: int
    dense_params: int
    nnz: int

    @property
    def mem_dense(self) -> int:
        return BYTES_PER_WEIGHT * self.dense_params

    @property
    def mem_sparse(self) -> int:
        return BYTES_PER_WEIGHT * self.nnz

    @property
    def rm_pct(self) -> float:
        return 100.0 * (1 - self.eff_maccs / self.dense_maccs) if self.dense_maccs else 0.0

    @property
    def mem_pct(self) -> float:
        return 100.0 * (1 - self.nnz / self.dense_params) if self.dense_params else 0.0

    def as_tuple(self):
        return (self.layer, self.dense_maccs, self.eff_maccs, self.dense_params, self.nnz,
                self.mem_dense, self.mem_sparse, f"{self.rm_pct:.6f}")


@dataclass
class CostReport:
    rows: list[CostRow]

    def total(self, names: Optional[Sequence[str]] = None, label: str = "total") -> CostRow:
        sel = [r for r in self.rows if names is None or r.layer in names]
        return CostRow(label, sum(r.dense_maccs for r in sel), sum(r.eff_maccs for r in sel),
                       sum(r.dense_params for r in sel), sum(r.nnz for r in sel))

    def to_csv(self, scopes: Optional[Mapping[str, Sequence[str]]] = None) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(COST_COLUMNS)
        for r in self.rows:
            wr.writerow(r.as_tuple())
        for label, names in (scopes or {}).items():
            wr.writerow(self.total(names, label).as_tuple())
        wr.writerow(self.total().as_tuple())
        return buf.getvalue()


def cost_report(layers: Sequence[LayerGeometry], weights: Mapping[str, np.ndarray],
                masks: Optional[Mapping[str, np.ndarray]] = None) -> CostReport:
    dense = maccs_dense(layers)
    eff = maccs_effective(layers, weights, masks)
    rows = []
    for g in layers:
        w = np.asarray(weights[g.name])
        if masks is not None and g.name in masks:
            w = w * masks[g.name]
        rows.append(CostRow(g.name, dense[g.name], eff[g.name], g.params, int(np.count_nonzero(w))))
    return CostReport(rows)


def read_cost_csv(text: str) -> list[dict[str, str]]:
    rd = csv.DictReader(io.StringIO(text))
    if tuple(rd.fieldnames or ()) != COST_COLUMNS:
        raise ValueError(f"unexpected cost columns {rd.fieldnames}")
    return list(rd)
