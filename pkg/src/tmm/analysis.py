"""Operator-theory diagnostics for trained Toeplitz layers.

For a causal coefficient vector c the symbol is

    sigma(z) = sum_k c[k] z^(-k),   |z| = 1,

and under the right-multiplication convention used by the mixer the Fredholm
index of the layer equals the winding number of that symbol about the origin.
Two independent routes compute the winding number: the accumulated argument
along a sampled unit-circle path (:func:`winding_number`) and root counting on
the companion matrix of the associated polynomial (:func:`winding_by_roots`).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tmm import fft as _fft
from tmm.toeplitz import materialize_causal

DEFAULT_MIN_SAMPLES = 4096
MAX_SAMPLES = 1 << 22


class SymbolVanishesError(ArithmeticError):
    """The symbol touches (numerically) zero on the unit circle; the index is undefined."""


@dataclass
class SymbolPath:
    coeffs: np.ndarray
    points: np.ndarray  # sigma(z_m), z_m = exp(2 pi i m / M), counterclockwise in z

    @property
    def samples(self) -> int:
        return self.points.shape[0]


def default_samples(n: int) -> int:
    return max(DEFAULT_MIN_SAMPLES, 8 * n)


def symbol_path(coeffs, samples: int | None = None) -> SymbolPath:
    """Sample the symbol at ``samples`` uniformly spaced unit-circle points.

    sigma(z_m) = sum_k c[k] exp(-2 pi i m k / M) is the length-M DFT of the
    zero-padded coefficients; power-of-two M uses the radix-2 FFT, other M a
    direct evaluation.
    """
    c = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    m = default_samples(c.size) if samples is None else int(samples)
    if m < 4 * c.size:
        raise ValueError(f"need at least {4 * c.size} samples for {c.size} coefficients, got {m}")
    if _fft.is_power_of_two(m):
        padded = np.zeros(m)
        padded[: c.size] = c
        pts = _fft.fft(padded)
    else:
        z_inv = np.exp(-2j * np.pi * np.arange(m) / m)
        pts = np.zeros(m, dtype=np.complex128)
        for ck in c[::-1]:
            pts = pts * z_inv + ck
    return SymbolPath(c, pts)


def _angle_steps(points: np.ndarray) -> np.ndarray:
    return np.angle(np.roll(points, -1) / points)


def winding_number(path: SymbolPath, delta: float | None = None) -> int:
    """Winding number of the closed symbol path about the origin.

    Resamples with doubled M while any per-segment argument change reaches
    pi/2, up to ``MAX_SAMPLES``.
    """
    while True:
        pts = path.points
        scale = np.abs(pts).max() if pts.size else 0.0
        tol = 1e-9 * scale if delta is None else delta
        if scale == 0.0 or np.abs(pts).min() <= tol:
            raise SymbolVanishesError("symbol vanishes on circle, index undefined")
        steps = _angle_steps(pts)
        if np.abs(steps).max() < np.pi / 2:
            return int(np.rint(steps.sum() / (2 * np.pi)))
        if 2 * path.samples > MAX_SAMPLES:
            raise SymbolVanishesError(
                f"argument steps stay >= pi/2 at {path.samples} samples; symbol too close to 0"
            )
        path = symbol_path(path.coeffs, 2 * path.samples)


def companion_roots(poly) -> np.ndarray:
    """Roots of a polynomial (highest degree first) via companion-matrix eigenvalues."""
    p = np.trim_zeros(np.asarray(poly, dtype=np.float64), "f")
    if p.size == 0:
        raise SymbolVanishesError("zero polynomial has no well-defined roots")
    stripped = np.trim_zeros(p, "b")
    zeros_at_origin = p.size - stripped.size
    p = stripped
    deg = p.size - 1
    if deg == 0:
        return np.zeros(zeros_at_origin, dtype=np.complex128)
    comp = np.zeros((deg, deg))
    comp[0, :] = -p[1:] / p[0]
    comp[1:, :-1] = np.eye(deg - 1)
    return np.concatenate([np.linalg.eigvals(comp), np.zeros(zeros_at_origin)])


def winding_by_roots(coeffs) -> int:
    """Argument-principle winding: sigma(z) = z^-(N-1) q(z), q(z) = sum_k c[k] z^(N-1-k)."""
    c = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    roots = companion_roots(c)  # c is already q's coefficients, highest degree first
    inside = int(np.sum(np.abs(roots) < 1.0))
    return inside - (c.size - 1)


def min_root_circle_distance(coeffs) -> float:
    roots = companion_roots(np.asarray(coeffs, dtype=np.float64).reshape(-1))
    if roots.size == 0:
        return np.inf
    return float(np.min(np.abs(np.abs(roots) - 1.0)))


def fredholm_index(coeffs, samples: int | None = None) -> int:
    """Index of the right-multiplied causal layer, equal to the symbol's winding number."""
    return winding_number(symbol_path(coeffs, samples))


def numerical_rank(matrix, tol: float | None = None) -> int:
    """Count of singular values above ``tol`` times the largest (default n * eps)."""
    a = np.asarray(matrix, dtype=np.float64)
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    if tol is None:
        tol = max(a.shape) * np.finfo(np.float64).eps
    return int(np.sum(s > tol * s[0]))


# ---------------------------------------------------------------- model reports


@dataclass
class LayerIndex:
    layer: int
    slot: int
    winding: int | None
    index: int | None
    min_abs_symbol: float
    rank: int


@dataclass
class IndexReport:
    name: str
    n_ctx: int
    entries: list = field(default_factory=list)

    def slots(self) -> list[int]:
        return sorted({e.slot for e in self.entries})

    def row(self, slot: int = 0) -> list:
        return [e.index for e in self.entries if e.slot == slot]

    def to_tsv(self) -> str:
        """Table layout: a layer-index header row, then one row per model (and slot)."""
        n_layers = max(e.layer for e in self.entries) + 1
        lines = ["\t".join(["Layer"] + [str(i) for i in range(n_layers)])]
        multi = len(self.slots()) > 1
        for slot in self.slots():
            label = f"{self.name}[{slot}]" if multi else self.name
            vals = ["nan" if v is None else str(v) for v in self.row(slot)]
            lines.append("\t".join([label] + vals))
        return "\n".join(lines) + "\n"


def toeplitz_layers(model) -> list[tuple[int, int, np.ndarray]]:
    """(layer, slot, coeffs) for every Toeplitz kernel in a model."""
    out = []
    for i in range(model.config.n_layers):
        c = model.params[f"blocks.{i}.mix.coeffs"].data
        c2 = c.reshape(-1, c.shape[-1])
        for s in range(c2.shape[0]):
            out.append((i, s, c2[s]))
    return out


def model_index_report(model, name: str = "model", samples: int | None = None,
                       with_rank: bool = True) -> IndexReport:
    """Winding number, index, min |sigma| and numerical rank for each Toeplitz kernel.

    ``model`` may also be a checkpoint path.
    """
    if isinstance(model, (str, Path)):
        from tmm import formats

        model = formats.load_checkpoint(model).model
    report = IndexReport(name, model.config.n_ctx)
    for layer, slot, c in toeplitz_layers(model):
        path = symbol_path(c, samples)
        min_abs = float(np.abs(path.points).min())
        try:
            w = winding_number(path)
        except SymbolVanishesError:
            w = None
        rank = numerical_rank(materialize_causal(c, c.size)) if with_rank else -1
        report.entries.append(LayerIndex(layer, slot, w, w, min_abs, rank))
    return report


def write_grid_csv(path, matrix) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.17g")


def read_grid_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_symbol_csv(path, sym: SymbolPath) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["re", "im"])
        for z in sym.points:
            w.writerow([repr(float(z.real)), repr(float(z.imag))])


def read_symbol_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0] + 1j * data[:, 1]


def export_weights(model, out_dir, layers=None, samples: int | None = None) -> list[Path]:
    """Write materialized matrices and symbol paths as CSV, one pair per kernel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for layer, slot, c in toeplitz_layers(model):
        if layers is not None and layer not in layers:
            continue
        stem = f"layer{layer:02d}_slot{slot}"
        grid = out_dir / f"{stem}_matrix.csv"
        sym = out_dir / f"{stem}_symbol.csv"
        write_grid_csv(grid, materialize_causal(c, c.size))
        write_symbol_csv(sym, symbol_path(c, samples))
        written += [grid, sym]
    return written
