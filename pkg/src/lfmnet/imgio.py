"""Binary PGM (P5) / PPM (P6) writers and a minimal line-plot renderer.

Plots are a rendering of the sweep CSVs, not the contract, so the renderer
stays deliberately simple: axes box, polyline per series, no text.
"""

from __future__ import annotations

import numpy as np

from .errors import StructuralError


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary PGM."""
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise StructuralError(f"PGM needs a 2-D uint8 array, got {gray.dtype} {gray.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise StructuralError(f"PPM needs an (H, W, 3) uint8 array, got {rgb.dtype} {rgb.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a binary PGM/PPM written by this module (used by tests)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        dims = fh.readline().split()
        fh.readline()  # maxval
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if magic == b"P5":
        return data.reshape(h, w)
    if magic == b"P6":
        return data.reshape(h, w, 3)
    raise StructuralError(f"unsupported PNM magic {magic!r}")


def normalize_to_u8(channel: np.ndarray) -> np.ndarray:
    """Min-max scale one 2-D map to uint8; constant maps go to mid-gray."""
    lo = float(channel.min())
    hi = float(channel.max())
    if hi <= lo:
        return np.full(channel.shape, 128, dtype=np.uint8)
    scaled = (channel - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)


_SERIES_COLORS = [
    (220, 60, 50),
    (50, 90, 220),
    (40, 160, 80),
    (200, 150, 40),
    (150, 60, 180),
]


def _draw_line(canvas: np.ndarray, p0, p1, color) -> None:
    y0, x0 = p0
    y1, x1 = p1
    n = max(abs(y1 - y0), abs(x1 - x0), 1)
    for t in range(n + 1):
        y = round(y0 + (y1 - y0) * t / n)
        x = round(x0 + (x1 - x0) * t / n)
        if 0 <= y < canvas.shape[0] and 0 <= x < canvas.shape[1]:
            canvas[y, x] = color


def render_line_plot(
    path, xs: list, series: dict, width: int = 480, height: int = 320
) -> None:
    """Render named y-series over shared x positions to a PPM file."""
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    margin = 24
    x_lo, x_hi = min(xs), max(xs)
    ys_all = [y for ys in series.values() for y in ys]
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0

    def to_px(x, y):
        px = margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)
        py = height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)
        return (int(round(py)), int(round(px)))

    box = (40, 40, 40)
    _draw_line(canvas, (margin, margin), (margin, height - margin), box)
    _draw_line(canvas, (height - margin, margin), (height - margin, width - margin), box)
    for si, (name, ys) in enumerate(sorted(series.items())):
        color = _SERIES_COLORS[si % len(_SERIES_COLORS)]
        pts = [to_px(x, y) for x, y in zip(xs, ys)]
        for a, b in zip(pts, pts[1:]):
            _draw_line(canvas, a, b, color)
        for py, px in pts:
            canvas[max(0, py - 1) : py + 2, max(0, px - 1) : px + 2] = color
    write_ppm(path, canvas)
