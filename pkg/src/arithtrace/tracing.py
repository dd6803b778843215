"""Trace intermediate values through layer representations with PCA.

For each layer, every instance's token states are concatenated into one row
``H = h_1 (+) ... (+) h_n``; a PCA is fit over the rows, instances are
projected onto the top components, and the resulting component weights are
correlated with the instance's intermediate values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import ActivationRecord, read_tensor_file, write_tensor_file
from .plots import heatmap_svg


class TracingError(ValueError):
    pass


@dataclass
class LayerMatrix:
    layer: int
    data: np.ndarray  # (instances, tokens * dim)
    num_tokens: int
    dim: int


@dataclass
class PcaModel:
    layer: int
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (K, D), orthonormal rows
    explained_variance_ratio: np.ndarray  # (K,)
    singular_values: np.ndarray  # (K,)
    num_samples: int
    requested: int  # K asked for; > len(components) when the data had lower rank

    @property
    def num_components(self) -> int:
        return len(self.components)

    @property
    def truncated(self) -> bool:
        return self.num_components < self.requested

    def component(self, k: int) -> np.ndarray:
        """1-based component vector."""
        if not 1 <= k <= self.num_components:
            raise TracingError(f"component {k} outside [1, {self.num_components}]")
        return self.components[k - 1]


@dataclass
class ProjectionTable:
    layer: int
    weights: np.ndarray  # (instances, K)


@dataclass
class CorrelationReport:
    labels: list[str]
    layers: list[int]
    corr: dict[int, np.ndarray]  # layer -> (len(labels), K); NaN where undefined
    explained: dict[int, np.ndarray] = field(default_factory=dict)

    def get(self, layer: int, label: str) -> np.ndarray:
        if layer not in self.corr:
            raise TracingError(f"layer {layer} not in report (layers {self.layers})")
        if label not in self.labels:
            raise TracingError(f"intermediate {label!r} not in report (labels {self.labels})")
        return self.corr[layer][self.labels.index(label)]


@dataclass
class MostCorrelatedDirection:
    label: str
    layer: int
    k: int  # 1-based
    corr: float
    vector: np.ndarray | None = None


def build_layer_matrix(record: ActivationRecord, layer: int) -> LayerMatrix:
    if layer not in record.layers:
        raise TracingError(f"activation record has no layer {layer} (has {sorted(record.layers)})")
    states = record.layers[layer]
    n, t, d = states.shape
    return LayerMatrix(layer, states.reshape(n, t * d).astype(np.float64), t, d)


def fit_pca(matrix: LayerMatrix | np.ndarray, k: int = 10, layer: int | None = None) -> PcaModel:
    """Exact PCA via SVD of the centered rows.

    Each component is sign-fixed so its largest-magnitude coordinate is
    positive. If the centered data has rank below ``k``, only the nonzero
    directions are returned and ``truncated`` is set.
    """
    data = matrix.data if isinstance(matrix, LayerMatrix) else np.asarray(matrix, dtype=np.float64)
    if layer is None:
        layer = matrix.layer if isinstance(matrix, LayerMatrix) else 0
    n = data.shape[0]
    if not 1 <= k <= n:
        raise TracingError(f"need 1 <= K <= number of instances, got K={k} with {n} instances")
    mean = data.mean(axis=0)
    centered = data - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    total = float(np.sum(s * s))
    tol = (s[0] if s.size else 0.0) * max(centered.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(s > tol)) if total > 0 else 0
    keep = min(k, rank)
    comps = vt[:keep].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ratios = (s[:keep] ** 2) / total if total > 0 else np.zeros(0)
    return PcaModel(layer, mean, comps, ratios, s[:keep].copy(), n, k)


def project(pca: PcaModel, matrix: LayerMatrix | np.ndarray) -> ProjectionTable:
    data = matrix.data if isinstance(matrix, LayerMatrix) else np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if data.shape[1] != pca.mean.shape[0]:
        raise TracingError(f"row dimension {data.shape[1]} does not match PCA dimension {pca.mean.shape[0]}")
    return ProjectionTable(pca.layer, (data - pca.mean) @ pca.components.T)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; NaN when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise TracingError(f"length mismatch: {x.shape} vs {y.shape}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    return float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))


def correlate(projections: ProjectionTable, intermediates: Mapping[str, Sequence[float]]) -> np.ndarray:
    """Correlation matrix (labels x components) in the mapping's label order."""
    w = projections.weights
    out = np.full((len(intermediates), w.shape[1]), np.nan)
    for j, (label, values) in enumerate(intermediates.items()):
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != w.shape[0]:
            raise TracingError(f"{label!r}: {values.shape[0]} values for {w.shape[0]} instances")
        for k in range(w.shape[1]):
            out[j, k] = pearson(w[:, k], values)
    return out


def most_correlated(report: CorrelationReport, label: str, layer: int, pca: PcaModel | None = None) -> MostCorrelatedDirection:
    """Component with the largest |corr| for (label, layer); ties go to the smaller index."""
    row = report.get(layer, label)
    mags = np.abs(row)
    if np.all(np.isnan(mags)):
        raise TracingError(f"no defined correlation for {label!r} at layer {layer}")
    best = float(np.nanmax(mags))
    k = int(np.flatnonzero(mags == best)[0]) + 1
    vector = pca.component(k) if pca is not None else None
    return MostCorrelatedDirection(label, layer, k, float(row[k - 1]), vector)


@dataclass
class TraceResult:
    pcas: dict[int, PcaModel]
    report: CorrelationReport


def trace(record: ActivationRecord, layers: Sequence[int] | None = None, k: int = 10) -> TraceResult:
    """Fit one PCA per layer and correlate every intermediate with every component."""
    layers = sorted(record.layers) if layers is None else list(layers)
    labels = record.labels()
    values = {label: record.values(label) for label in labels}
    pcas, corr, explained = {}, {}, {}
    for layer in layers:
        matrix = build_layer_matrix(record, layer)
        pca = fit_pca(matrix, k)
        pcas[layer] = pca
        corr[layer] = correlate(project(pca, matrix), values)
        explained[layer] = pca.explained_variance_ratio
    return TraceResult(pcas, CorrelationReport(labels, layers, corr, explained))


# --------------------------------------------------------------------------
# Output


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else f"{v:.8f}"


def emit_heatmap(report: CorrelationReport, out_dir, svg: bool = True) -> list[Path]:
    """Write ``corr_layer<l>.csv`` (+ .svg) per layer and ``explained_variance.csv``."""
    if not report.layers or not report.labels:
        raise TracingError("empty correlation report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for layer in report.layers:
        mat = np.abs(report.corr[layer])
        kk = mat.shape[1]
        path = out_dir / f"corr_layer{layer}.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["intermediate"] + [f"k{i}" for i in range(1, kk + 1)])
            for label, row in zip(report.labels, mat):
                w.writerow([label] + [_fmt(v) for v in row])
        written.append(path)
        if svg:
            svg_path = out_dir / f"corr_layer{layer}.svg"
            svg_path.write_text(
                heatmap_svg(
                    mat,
                    row_labels=report.labels,
                    col_labels=[f"k{i}" for i in range(1, kk + 1)],
                    overlay=report.explained.get(layer),
                    title=f"layer {layer}: |corr(intermediate, component weight)|",
                )
            )
            written.append(svg_path)
    path = out_dir / "explained_variance.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "k", "ratio"])
        for layer in report.layers:
            for i, ratio in enumerate(report.explained.get(layer, []), 1):
                w.writerow([layer, i, _fmt(float(ratio))])
    written.append(path)
    return written


def read_heatmap_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    labels = [r[0] for r in rows[1:]]
    data = np.array([[float(c) if c else math.nan for c in r[1:]] for r in rows[1:]], dtype=np.float64)
    return labels, data


# PCA files: same framing as checkpoints, float64 payload.
PCA_MAGIC = b"TMLP"


def save_pcas(result: TraceResult, path, template: str | None = None) -> None:
    header = {
        "layers": result.report.layers,
        "labels": result.report.labels,
        "template": template,
        "num_samples": {str(l): p.num_samples for l, p in result.pcas.items()},
        "requested": {str(l): p.requested for l, p in result.pcas.items()},
    }
    tensors = {}
    for layer, pca in result.pcas.items():
        tensors[f"layer{layer}.mean"] = pca.mean
        tensors[f"layer{layer}.components"] = pca.components
        tensors[f"layer{layer}.ratio"] = pca.explained_variance_ratio
        tensors[f"layer{layer}.singular"] = pca.singular_values
        tensors[f"layer{layer}.corr"] = result.report.corr[layer]
    write_tensor_file(path, PCA_MAGIC, header, tensors, dtype="<f8")


def load_pcas(path) -> tuple[TraceResult, dict]:
    header, t = read_tensor_file(path, PCA_MAGIC, dtype="<f8")
    pcas, corr, explained = {}, {}, {}
    for layer in header["layers"]:
        pcas[layer] = PcaModel(
            layer,
            t[f"layer{layer}.mean"],
            t[f"layer{layer}.components"],
            t[f"layer{layer}.ratio"],
            t[f"layer{layer}.singular"],
            header["num_samples"][str(layer)],
            header["requested"][str(layer)],
        )
        corr[layer] = t[f"layer{layer}.corr"]
        explained[layer] = pcas[layer].explained_variance_ratio
    report = CorrelationReport(header["labels"], header["layers"], corr, explained)
    return TraceResult(pcas, report), header
