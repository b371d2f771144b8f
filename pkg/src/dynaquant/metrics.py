"""Evaluation arithmetic: PSNR, parameter-weighted bit-widths, model size,
theoretical speedup, and Bjontegaard delta rate."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr_db: float


class RDCurve:
    """Ordered (bpp, PSNR) points; bpp strictly increasing, PSNR finite."""

    def __init__(self, points):
        pts = [RDPoint(float(b), float(p)) for b, p in points]
        if not pts:
            raise ValueError("RDCurve: no points")
        for a, b in zip(pts, pts[1:]):
            if not b.bpp > a.bpp:
                raise ValueError(
                    f"RDCurve: bpp must be strictly increasing, got {a.bpp} -> {b.bpp}")
        if not all(np.isfinite([p.bpp for p in pts]) ) or \
           not all(np.isfinite([p.psnr_db for p in pts])):
            raise ValueError("RDCurve: non-finite point")
        if any(p.bpp <= 0 for p in pts):
            raise ValueError("RDCurve: bpp must be positive")
        self.points = pts

    def __len__(self):
        return len(self.points)

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr_db for p in self.points])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["bpp", "psnr_db"])
        for p in self.points:
            w.writerow([f"{p.bpp:.6f}", f"{p.psnr_db:.4f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RDCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] != ["bpp", "psnr_db"]:
            raise ValueError("RDCurve CSV: expected header 'bpp,psnr_db' on line 1")
        pts = []
        for i, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"RDCurve CSV: malformed row on line {i}")
            try:
                pts.append((float(row[0]), float(row[1])))
            except ValueError as exc:
                raise ValueError(f"RDCurve CSV: bad number on line {i}") from exc
        return cls(pts)


@dataclass(frozen=True)
class BitProfileEntry:
    layer_id: str
    param_count: int
    bits: float
    source: str          # "fixed" | "dynamic" | "fp32"


class BitProfile:
    """Per-layer (param_count, bits) covering the whole model."""

    def __init__(self, entries):
        entries = list(entries)
        if not entries:
            raise ValueError("BitProfile: empty")
        for e in entries:
            if e.param_count <= 0:
                raise ValueError(f"BitProfile: non-positive count for {e.layer_id}")
        self.entries = entries

    def scoped(self, scope: str) -> list[BitProfileEntry]:
        if scope == "whole-model":
            return self.entries
        if scope == "dynamic-layers":
            return [e for e in self.entries if e.source == "dynamic"]
        if scope == "quantized-layers":
            return [e for e in self.entries if e.source in ("fixed", "dynamic")]
        raise ValueError(f"BitProfile: unknown scope {scope!r}")


def psnr(x: np.ndarray, x_hat: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"psnr: shapes differ, {x.shape} vs {x_hat.shape}")
    err = float(np.mean((x - x_hat) ** 2))
    if err == 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(peak * peak / err)), PSNR_CAP_DB)


def avg_bitwidth(profile: BitProfile, scope: str = "quantized-layers") -> float:
    """Parameter-count-weighted mean bit-width over the scope."""
    entries = profile.scoped(scope)
    if not entries:
        raise ValueError(f"avg_bitwidth: scope {scope!r} selects no layers")
    total = sum(e.param_count for e in entries)
    return sum(e.param_count * e.bits for e in entries) / total


def model_size(fp32_size_mb: float, avg_bits: float) -> float:
    """Headline quantized size in MB: fp32 size scaled by b/32."""
    if fp32_size_mb <= 0 or avg_bits <= 0:
        raise ValueError("model_size: inputs must be positive")
    return fp32_size_mb * avg_bits / 32.0


def theoretical_speedup(avg_bits: float) -> float:
    """32 / average bit-width."""
    if avg_bits <= 0:
        raise ValueError("theoretical_speedup: average bit-width must be positive")
    return 32.0 / avg_bits


def _fit_log_rate(curve: RDCurve) -> np.ndarray:
    return np.polyfit(curve.psnr, np.log10(curve.bpp), 3)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Bjontegaard delta rate of `test` against `anchor`, in percent.

    Classic variant: cubic polynomial fits of log10(bpp) as a function of
    PSNR, integrated in closed form over the common PSNR interval; returns
    (10^mean_log_diff - 1) * 100.
    """
    if len(anchor) < 4 or len(test) < 4:
        raise ValueError("bd_rate: need at least 4 points per curve")
    lo = max(anchor.psnr.min(), test.psnr.min())
    hi = min(anchor.psnr.max(), test.psnr.max())
    if not hi > lo:
        raise ValueError(
            f"bd_rate: PSNR ranges do not overlap "
            f"([{anchor.psnr.min():.2f}, {anchor.psnr.max():.2f}] vs "
            f"[{test.psnr.min():.2f}, {test.psnr.max():.2f}])")

    p_anchor = np.polyint(_fit_log_rate(anchor))
    p_test = np.polyint(_fit_log_rate(test))
    int_anchor = np.polyval(p_anchor, hi) - np.polyval(p_anchor, lo)
    int_test = np.polyval(p_test, hi) - np.polyval(p_test, lo)
    mean_diff = (int_test - int_anchor) / (hi - lo)
    return float((10.0 ** mean_diff - 1.0) * 100.0)
