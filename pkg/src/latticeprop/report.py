"""Figures for the CLI report path and the omega arrow raster.

PNG metadata is stripped so identical inputs give identical bytes.
"""
from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_trace(rows: list[list[float]], path) -> None:
    """Loss curves from trace rows ``[iter, total, l_fg, l_center, l_box]``."""
    data = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    fig, ax = plt.subplots(figsize=(6, 4))
    floor = 1e-16
    for col, name in zip(range(1, 5), ("total", "l_fg", "l_center", "l_box")):
        ax.semilogy(data[:, 0], np.maximum(data[:, col], floor), label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_bench(cp_ms: list[float], gps_ms: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.boxplot([cp_ms, gps_ms])
    ax.set_xticks([1, 2], ["cp_run", "greedy + merge"])
    ax.set_yscale("log")
    ax.set_ylabel("ms per run")
    fig.tight_layout()
    _save(fig, path)


def _draw_line(img: np.ndarray, x0: float, y0: float, x1: float, y1: float, color) -> None:
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, n + 1)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n + 1)).astype(int)
    ok = (xs >= 0) & (ys >= 0) & (xs < img.shape[1]) & (ys < img.shape[0])
    img[ys[ok], xs[ok]] = color


def omega_ppm(omega: np.ndarray, rows: int, cols: int, fg_mask=None, cell: int = 16) -> bytes:
    """Binary PPM (P6) with one arrow per node along its omega vector.

    Arrow length is ``|omega| * cell / 2``; foreground cells are tinted.
    """
    if cell < 4:
        raise ValueError("cell must be >= 4 pixels")
    img = np.zeros((rows * cell, cols * cell, 3), dtype=np.uint8)
    if fg_mask is not None:
        fg = np.asarray(fg_mask, dtype=bool).reshape(rows, cols)
        tint = np.kron(fg, np.ones((cell, cell), dtype=bool))
        img[tint] = (40, 40, 90)
    arrow = np.array([255, 220, 60], dtype=np.uint8)
    half = cell / 2.0
    for node, (vx, vy) in enumerate(np.asarray(omega, dtype=np.float64)):
        r, c = divmod(node, cols)
        x0, y0 = c * cell + half - 0.5, r * cell + half - 0.5
        x1, y1 = x0 + vx * half, y0 + vy * half
        img[int(y0), int(x0)] = arrow
        mag = np.hypot(vx, vy)
        if mag * half < 1.0:
            continue
        _draw_line(img, x0, y0, x1, y1, arrow)
        # two-stroke head
        ux, uy = vx / mag, vy / mag
        head = max(2.0, mag * half / 3)
        for sx in (1, -1):
            hx = x1 - head * (ux - sx * uy * 0.6)
            hy = y1 - head * (uy + sx * ux * 0.6)
            _draw_line(img, x1, y1, hx, hy, arrow)
    header = f"P6\n{cols * cell} {rows * cell}\n255\n".encode("ascii")
    return header + img.tobytes()
