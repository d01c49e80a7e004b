"""Device-by-device similarity matrix, accuracy aggregation, heatmap and
same-model confusion diagnostics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import model_of
from .similarity import SimilarityNet, score_arrays
from .store import SignatureStore

Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


class EvaluationError(ValueError):
    pass


@dataclass
class SimilarityMatrix:
    devices: List[str]
    cells: np.ndarray
    n_pairs_per_cell: int
    eta: float
    seed: int
    counts: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        n = len(self.devices)
        if self.cells.shape != (n, n):
            raise EvaluationError(f"cells must be {n}x{n}, got {self.cells.shape}")
        if np.any(self.cells < 0) or np.any(self.cells > 1):
            raise EvaluationError("cells must lie in [0, 1]")

    @property
    def diagonal_mean(self) -> float:
        return float(np.mean(np.diag(self.cells)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + list(self.devices))
        for dev, row in zip(self.devices, self.cells):
            w.writerow([dev] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "devices": list(self.devices),
            "cells": self.cells.tolist(),
            "n_pairs_per_cell": self.n_pairs_per_cell,
            "eta": self.eta,
            "seed": self.seed,
        }


def _as_scorer(f_sim: Union[SimilarityNet, Scorer]) -> Scorer:
    if isinstance(f_sim, SimilarityNet):
        return lambda A, B: score_arrays(f_sim, A, B)
    return f_sim


def cell_rng(seed: int, i: int, j: int) -> np.random.Generator:
    """Independent stream per ordered cell, so results do not depend on
    evaluation order or worker count."""
    return np.random.default_rng(np.random.SeedSequence([seed, i, j]))


def similarity_matrix_from_groups(
    groups: Dict[str, np.ndarray],
    f_sim: Union[SimilarityNet, Scorer],
    devices: Sequence[str],
    n_pairs_per_cell: int = 100,
    eta: float = 0.99,
    seed: int = 0,
) -> SimilarityMatrix:
    """For every ordered device pair draw ``n_pairs_per_cell`` image pairs with
    replacement, binarise ``score >= eta`` and average.

    ``groups`` maps device id to its ``(n_images, dim)`` signature matrix.
    """
    devices = list(devices)
    for d in devices:
        if d not in groups or len(groups[d]) == 0:
            raise EvaluationError(f"device {d} has no test signatures")
    if n_pairs_per_cell < 1:
        raise ValueError("n_pairs_per_cell must be >= 1")
    scorer = _as_scorer(f_sim)
    n = len(devices)
    lefts, rights = [], []
    for i, di in enumerate(devices):
        for j, dj in enumerate(devices):
            rng = cell_rng(seed, i, j)
            a = rng.integers(len(groups[di]), size=n_pairs_per_cell)
            b = rng.integers(len(groups[dj]), size=n_pairs_per_cell)
            lefts.append(groups[di][a])
            rights.append(groups[dj][b])
    scores = np.asarray(scorer(np.concatenate(lefts), np.concatenate(rights)), np.float64)
    hits = (scores >= eta).reshape(n, n, n_pairs_per_cell)
    counts = hits.sum(axis=2)
    return SimilarityMatrix(devices, counts / n_pairs_per_cell, n_pairs_per_cell, eta, seed, counts)


def enumerated_matrix(
    groups: Dict[str, np.ndarray],
    f_sim: Union[SimilarityNet, Scorer],
    devices: Sequence[str],
    eta: float,
) -> np.ndarray:
    """Cell means over every ordered image pair (no sampling)."""
    scorer = _as_scorer(f_sim)
    devices = list(devices)
    out = np.empty((len(devices), len(devices)))
    for i, di in enumerate(devices):
        for j, dj in enumerate(devices):
            A, B = groups[di], groups[dj]
            a, b = np.meshgrid(np.arange(len(A)), np.arange(len(B)), indexing="ij")
            s = np.asarray(scorer(A[a.ravel()], B[b.ravel()]))
            out[i, j] = float(np.mean(s >= eta))
    return out


def store_groups(
    store: SignatureStore,
    devices: Sequence[str],
    extractor_version: str,
    paths: Optional[set] = None,
) -> Dict[str, np.ndarray]:
    """Signature matrices per device, optionally restricted to ``paths``."""
    groups = {}
    for d in devices:
        recs = store.get_by_device(d, extractor_version)
        if paths is not None:
            recs = [r for r in recs if r.image_path in paths]
        if not recs:
            raise EvaluationError(f"device {d} has no test signatures")
        groups[d] = np.stack([r.values for r in recs])
    return groups


def similarity_matrix(
    store: SignatureStore,
    f_sim: Union[SimilarityNet, Scorer],
    devices: Sequence[str],
    n_pairs_per_cell: int = 100,
    eta: float = 0.99,
    seed: int = 0,
    extractor_version: Optional[str] = None,
    paths: Optional[set] = None,
) -> SimilarityMatrix:
    if extractor_version is None:
        extractor_version = getattr(f_sim, "extractor_version", None)
        if extractor_version is None:
            versions = store.versions()
            if len(versions) != 1:
                raise EvaluationError("store holds several extractor versions; pass one")
            extractor_version = versions[0]
    groups = store_groups(store, devices, extractor_version, paths)
    return similarity_matrix_from_groups(groups, f_sim, devices, n_pairs_per_cell, eta, seed)


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    matrix: SimilarityMatrix
    overall_accuracy: float
    per_cell_accuracy: np.ndarray
    worst_confusions: List[Tuple[str, str, float]]
    same_model_confusions: List[Tuple[str, str, float]]
    symmetry: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "diagonal_mean": self.matrix.diagonal_mean,
            "matrix": self.matrix.to_dict(),
            "per_cell_accuracy": self.per_cell_accuracy.tolist(),
            "worst_confusions": [list(c) for c in self.worst_confusions],
            "same_model_confusions": [list(c) for c in self.same_model_confusions],
            "symmetry_gap": self.symmetry,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def _same_model(a: str, b: str) -> bool:
    try:
        return model_of(a) == model_of(b)
    except ValueError:
        return False


def overall_accuracy(matrix: SimilarityMatrix) -> EvalReport:
    """Per-cell accuracy is the cell on the diagonal and ``1 - cell`` off it;
    the overall figure is their unweighted mean over all N^2 cells."""
    cells = matrix.cells
    n = len(matrix.devices)
    eye = np.eye(n, dtype=bool)
    acc = np.where(eye, cells, 1.0 - cells)
    confusions = [
        (matrix.devices[i], matrix.devices[j], float(cells[i, j]))
        for i in range(n)
        for j in range(n)
        if i != j and cells[i, j] > 0
    ]
    confusions.sort(key=lambda c: -c[2])
    same = [c for c in confusions if _same_model(c[0], c[1])]
    return EvalReport(matrix, float(acc.mean()), acc, confusions, same)


@dataclass
class SameModelReport:
    same_model: List[Tuple[str, str, float]]
    cross_model: List[Tuple[str, str, float]]
    same_model_mean_error: Optional[float]
    cross_model_mean_error: Optional[float]

    def to_dict(self) -> dict:
        return {
            "same_model_mean_error": self.same_model_mean_error,
            "cross_model_mean_error": self.cross_model_mean_error,
            "same_model": [list(c) for c in self.same_model],
            "cross_model": [list(c) for c in self.cross_model],
        }


def same_model_report(report: EvalReport) -> SameModelReport:
    """Group off-diagonal cells by whether both devices share a camera model.

    The ranked lists hold only cells with non-zero error; the group means
    cover every off-diagonal cell of the group.
    """
    m = report.matrix
    same_err, cross_err = [], []
    for i, di in enumerate(m.devices):
        for j, dj in enumerate(m.devices):
            if i != j:
                (same_err if _same_model(di, dj) else cross_err).append(m.cells[i, j])
    ranked_same = [c for c in report.worst_confusions if _same_model(c[0], c[1])]
    ranked_cross = [c for c in report.worst_confusions if not _same_model(c[0], c[1])]
    return SameModelReport(
        ranked_same,
        ranked_cross,
        float(np.mean(same_err)) if same_err else None,
        float(np.mean(cross_err)) if cross_err else None,
    )


def heatmap_figure(matrix: SimilarityMatrix, title: Optional[str] = None):
    """Annotated matplotlib ``Figure`` of the matrix; no global pyplot state."""
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    n = len(matrix.devices)
    side = max(4.0, 0.42 * n + 2.5)
    fig = Figure(figsize=(side + 1.2, side), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    im = ax.imshow(matrix.cells, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(matrix.devices, rotation=90, fontsize=7)
    ax.set_yticklabels(matrix.devices, fontsize=7)
    if n <= 40:
        for i in range(n):
            for j in range(n):
                v = matrix.cells[i, j]
                ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=5,
                        color="black" if v > 0.6 else "white")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return fig


def render_heatmap(matrix: SimilarityMatrix, out_path, title: Optional[str] = None) -> Path:
    out_path = Path(out_path)
    fig = heatmap_figure(matrix, title)
    try:
        fig.savefig(out_path, format="png", metadata={"Software": None})
    except OSError as exc:
        raise EvaluationError(f"cannot write heatmap to {out_path}: {exc}") from exc
    return out_path
