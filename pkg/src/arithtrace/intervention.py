"""Causal manipulation of layer representations along principal components.

The concatenated layer representation ``H`` of an instance is replaced by

    H' = H + (r - 1) (p . H) p

for a unit component ``p`` and factor ``r``, i.e. the raw (uncentered)
projection onto ``p`` is multiplied by ``r`` while everything orthogonal to
``p`` is left alone. Sweeping ``r`` and reading the model's prediction back
through the expression's sign algebra gives the operand value each ``r``
"means"; inverting that map predicts where a genuinely different operand
should put the component weight, which is compared with where it actually is.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .equations import Equation, EquationTemplate, instantiate_template, invert_for_operand, shape_key, width_range
from .model import InterventionHook, TransformerModel, capture_activations, forward
from .plots import scatter_svg
from .tracing import MostCorrelatedDirection, PcaModel, TraceResult, most_correlated, pearson

log = logging.getLogger(__name__)


class FitError(ValueError):
    pass


class InterventionError(ValueError):
    pass


DEFAULT_R_GRID = tuple(float(x) for x in np.linspace(-1.0, 3.0, 41))


def manipulate_rows(H: np.ndarray, p: np.ndarray, r) -> np.ndarray:
    """Scale each row's projection onto unit vector ``p`` by ``r`` (scalar or one per row)."""
    H = np.asarray(H, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), H.shape[:1])
    return H + ((r - 1.0) * (H @ p))[:, None] * p[None, :]


def manipulation_hook(layer: int, p: np.ndarray, r) -> InterventionHook:
    """Hook applying the projection scaling to the whole (batch, tokens, dim) state at ``layer``."""

    def transform(state: np.ndarray) -> np.ndarray:
        b, t, d = state.shape
        if t * d != p.shape[0]:
            raise InterventionError(f"layer state has {t}x{d}={t * d} features, component has {p.shape[0]}")
        return manipulate_rows(state.reshape(b, t * d), p, r).reshape(b, t, d)

    return InterventionHook(layer, transform)


def _tokens(equations: Sequence[Equation]):
    return [eq.tokens() for eq in equations]


def manipulate_forward(
    model: TransformerModel, equation: Equation, pca: PcaModel, layer: int, k: int, r
) -> tuple[np.ndarray, np.ndarray]:
    """Predictions and post-manipulation raw weights ``p . H'`` for each factor in ``r``.

    ``r`` may be a scalar (one result) or a sequence (one batched row per factor).
    """
    rs = np.atleast_1d(np.asarray(r, dtype=np.float64))
    if not np.all(np.isfinite(rs)):
        raise InterventionError("manipulation factors must be finite")
    if not 0 <= layer <= model.config.num_layers:
        raise InterventionError(f"layer {layer} outside [0, {model.config.num_layers}]")
    p = pca.component(k)
    n_features = len(equation.tokens()) * model.config.model_dim
    if n_features != p.shape[0]:
        raise InterventionError(
            f"{equation.text!r} gives {n_features} features at layer {layer}, PCA expects {p.shape[0]}"
        )
    seqs = _tokens([equation]) * len(rs)
    preds, captured = forward(model, seqs, {layer}, manipulation_hook(layer, p, rs))
    states = captured[layer].reshape(len(rs), -1).astype(np.float64)
    weights = states @ p
    if np.ndim(r) == 0:
        return preds[0], weights[0]
    return preds, weights


# --------------------------------------------------------------------------
# Sweeps and inversion


@dataclass
class SweepSample:
    r: float
    prediction: float
    implied: float
    weight: float  # raw p . H'
    weight_centered: float  # p . (H' - mean)


@dataclass
class SweepResult:
    label: str
    layer: int
    k: int
    target_slot: str
    base_text: str
    base_bindings: dict
    base_prediction: float
    w0: float  # raw p . H of the base instance
    offset: float  # p . mean, so centered = raw - offset
    samples: list[SweepSample] = field(default_factory=list)

    @property
    def w0_centered(self) -> float:
        return self.w0 - self.offset


def sweep(
    model: TransformerModel,
    template: EquationTemplate,
    base_bindings: Mapping[str, int],
    direction: MostCorrelatedDirection,
    pca: PcaModel,
    r_grid: Sequence[float],
    target_slot: str,
) -> SweepResult:
    if len(r_grid) == 0:
        raise InterventionError("empty r grid")
    base = instantiate_template(template, base_bindings)
    p = pca.component(direction.k)
    offset = float(pca.mean @ p)
    base_pred, w0 = manipulate_forward(model, base, pca, direction.layer, direction.k, 1.0)
    preds, weights = manipulate_forward(model, base, pca, direction.layer, direction.k, list(r_grid))
    result = SweepResult(
        direction.label, direction.layer, direction.k, target_slot, base.text, dict(base_bindings),
        float(base_pred), float(w0), offset,
    )
    for r, y, w in zip(r_grid, preds, weights):
        implied = invert_for_operand(template, base_bindings, target_slot, float(y))
        result.samples.append(SweepSample(float(r), float(y), implied, float(w), float(w) - offset))
    return result


@dataclass
class FittedInverse:
    """Piecewise-linear map from implied operand value to manipulation factor."""

    values: np.ndarray  # increasing implied values
    factors: np.ndarray
    support: tuple[float, float]

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        out = np.interp(v, self.values, self.factors)
        inside = (v >= self.support[0]) & (v <= self.support[1])
        return np.where(inside, out, np.nan)


def _longest_monotone_run(values: np.ndarray) -> tuple[int, int]:
    """[start, stop) of the longest strictly monotone contiguous run (earliest on ties)."""
    best = (0, 1)
    n = len(values)
    for sign in (1.0, -1.0):
        start = 0
        for i in range(1, n + 1):
            if i == n or not sign * (values[i] - values[i - 1]) > 0:
                if i - start > best[1] - best[0] or (i - start == best[1] - best[0] and start < best[0]):
                    best = (start, i)
                start = i
    return best


def fit_inverse(result: SweepResult) -> FittedInverse:
    """Invert the sweep's r -> implied-value samples over their longest monotone stretch."""
    samples = sorted(result.samples, key=lambda s: s.r)
    if len(samples) < 2:
        raise FitError(f"need at least 2 sweep samples, got {len(samples)}")
    implied = np.array([s.implied for s in samples])
    rs = np.array([s.r for s in samples])
    start, stop = _longest_monotone_run(implied)
    if stop - start < 2:
        raise FitError("implied values have no monotone stretch of 2 or more samples")
    b, r = implied[start:stop], rs[start:stop]
    order = np.argsort(b)
    b, r = b[order], r[order]
    return FittedInverse(b, r, (float(b[0]), float(b[-1])))


# --------------------------------------------------------------------------
# Actual weights and fidelity


@dataclass
class ActualWeights:
    values: np.ndarray
    weights: np.ndarray  # centered p . (H - mean)
    raw: np.ndarray  # p . H
    skipped: list[int] = field(default_factory=list)


def actual_weights(
    model: TransformerModel,
    pca: PcaModel,
    k: int,
    template: EquationTemplate,
    base_bindings: Mapping[str, int],
    target_slot: str,
    values: Iterable[int],
) -> ActualWeights:
    """Component weights observed when the target slot really takes each value."""
    lo, hi = template.slot_range(target_slot)
    kept, skipped = [], []
    for v in values:
        (kept if lo <= v <= hi else skipped).append(int(v))
    if skipped:
        log.warning("skipped %d values outside the %s slot's range [%d, %d]", len(skipped), target_slot, lo, hi)
    eqs = [instantiate_template(template, {**base_bindings, target_slot: v}) for v in kept]
    p = pca.component(k)
    if not eqs:
        return ActualWeights(np.zeros(0), np.zeros(0), np.zeros(0), skipped)
    record = capture_activations(model, eqs, {pca.layer})
    rows = record.layers[pca.layer].reshape(len(eqs), -1).astype(np.float64)
    raw = rows @ p
    return ActualWeights(np.array(kept, dtype=np.float64), raw - float(pca.mean @ p), raw, skipped)


def r2_against(actual: np.ndarray, predicted: np.ndarray) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if ss_tot == 0.0:
        return math.nan
    return 1.0 - float(np.sum((actual - predicted) ** 2)) / ss_tot


@dataclass
class FidelityReport:
    values: np.ndarray
    predicted: np.ndarray  # centered; NaN outside the fitted support
    actual: np.ndarray  # centered
    predicted_raw: np.ndarray
    actual_raw: np.ndarray
    in_support: np.ndarray  # bool
    corr: float
    r2: float
    fitted_support: tuple[float, float]
    data_support: tuple[float, float] | None

    @property
    def num_in_support(self) -> int:
        return int(self.in_support.sum())


def fidelity(
    fitted: FittedInverse,
    w0: float,
    actual: ActualWeights,
    offset: float = 0.0,
    data_support: tuple[float, float] | None = None,
) -> FidelityReport:
    """Compare predicted weights ``f(v) * w0`` against observed ones.

    ``w0`` is the base instance's raw weight; predictions are shifted by
    ``offset`` (p . mean) into the centered frame the actual weights use.
    Only values inside both the fitted support and ``data_support`` enter
    the correlation and R^2.
    """
    v = actual.values
    factors = fitted(v)
    predicted_raw = factors * w0
    predicted = predicted_raw - offset
    mask = np.isfinite(factors)
    if data_support is not None:
        mask &= (v >= data_support[0]) & (v <= data_support[1])
    if mask.sum() < 3:
        raise FitError(f"only {int(mask.sum())} actual points fall inside the fitted support {fitted.support}")
    corr = pearson(predicted[mask], actual.weights[mask])
    r2 = r2_against(actual.weights[mask], predicted[mask])
    return FidelityReport(
        v, predicted, actual.weights, predicted_raw, actual.raw, mask, corr, r2, fitted.support, data_support
    )


def data_support(train: Sequence[Equation], template: EquationTemplate, target_slot: str) -> tuple[float, float] | None:
    """[min, max] of the target operand across training equations of the template's shape.

    Falls back to all training operands when no equation shares the shape.
    Both are restricted to the slot's digit width.
    """
    path, width = template.slots[target_slot]
    lo, hi = width_range(width)
    key = shape_key(template.skeleton)
    seen = []
    for eq in train:
        if shape_key(eq.ast) == key:
            seen.extend(n.value for n in eq.ast.leaves() if n.path == path)
    if not seen:
        seen = [n.value for eq in train for n in eq.ast.leaves()]
    seen = [v for v in seen if lo <= v <= hi]
    if not seen:
        return None
    return float(min(seen)), float(max(seen))


# --------------------------------------------------------------------------
# Case study


@dataclass
class LayerStudy:
    direction: MostCorrelatedDirection
    sweep: SweepResult
    fitted: FittedInverse | None = None
    actual: ActualWeights | None = None
    fidelity: FidelityReport | None = None
    error: str | None = None


@dataclass
class CaseStudy:
    label: str
    target_slot: str
    base_text: str
    layers: dict[int, LayerStudy]
    data_support: tuple[float, float] | None

    def most_correlated_layer(self) -> int:
        """Layer whose most-correlated direction has the largest |corr| (earliest on ties)."""
        return max(self.layers, key=lambda l: (abs(self.layers[l].direction.corr), -l))

    def best_layer(self, min_corr: float = 0.6) -> int | None:
        """Most faithful well-correlated direction: highest fidelity R^2 among |trace corr| >= min_corr."""
        scored = [
            l for l, s in self.layers.items()
            if s.fidelity is not None and abs(s.direction.corr) >= min_corr and math.isfinite(s.fidelity.r2)
        ]
        if not scored:
            return None
        return max(scored, key=lambda l: (self.layers[l].fidelity.r2, -l))

    def contrast_layers(self, min_corr: float = 0.6) -> list[int]:
        """Layers with a well-correlated direction whose manipulation fidelity R^2 is negative."""
        return [
            l
            for l, s in self.layers.items()
            if s.fidelity is not None and abs(s.direction.corr) >= min_corr and s.fidelity.r2 < 0
        ]

    def summary_lines(self, min_corr: float = 0.6) -> list[str]:
        lines = [f"intermediate {self.label} (slot {self.target_slot}), base {self.base_text}"]
        lines.append("layer component trace_corr fidelity_corr fidelity_r2")
        for l, s in sorted(self.layers.items()):
            if s.fidelity is None:
                lines.append(f"{l} {s.direction.k} {s.direction.corr:.4f} - - ({s.error})")
            else:
                lines.append(
                    f"{l} {s.direction.k} {s.direction.corr:.4f} {s.fidelity.corr:.4f} {s.fidelity.r2:.4f}"
                )
        top = self.most_correlated_layer()
        lines.append(f"most correlated direction: layer {top}, component {self.layers[top].direction.k}")
        best = self.best_layer(min_corr)
        if best is None:
            lines.append(f"best direction: none (no fitted direction with |trace corr| >= {min_corr:.1f})")
        else:
            s = self.layers[best]
            lines.append(
                f"best direction: layer {best}, component {s.direction.k} "
                f"(corr {s.fidelity.corr:.4f}, R^2 {s.fidelity.r2:.4f})"
            )
        contrast = self.contrast_layers(min_corr)
        if contrast:
            lines.append(
                "correlated but not used (|trace corr| >= %.1f, R^2 < 0): layers %s"
                % (min_corr, ", ".join(str(l) for l in contrast))
            )
        else:
            lines.append(f"no direction with |trace corr| >= {min_corr:.1f} and negative R^2 was found")
        return lines


def case_study(
    model: TransformerModel,
    traced: TraceResult,
    template: EquationTemplate,
    base_bindings: Mapping[str, int],
    label: str,
    target_slot: str | None = None,
    r_grid: Sequence[float] = DEFAULT_R_GRID,
    values: Iterable[int] | None = None,
    support: tuple[float, float] | None = None,
    layers: Sequence[int] | None = None,
) -> CaseStudy:
    """Sweep, invert and score the most-correlated direction of ``label`` at every traced layer."""
    target_slot = target_slot or label
    if target_slot not in template.slots:
        raise InterventionError(f"{target_slot!r} is not a slot of {template.text}")
    if values is None:
        lo, hi = template.slot_range(target_slot)
        values = range(lo, hi + 1)
    values = list(values)
    base = instantiate_template(template, base_bindings)
    layers = list(traced.report.layers if layers is None else layers)
    studies = {}
    for layer in layers:
        pca = traced.pcas[layer]
        direction = most_correlated(traced.report, label, layer, pca)
        sw = sweep(model, template, base_bindings, direction, pca, r_grid, target_slot)
        study = LayerStudy(direction, sw)
        study.actual = actual_weights(model, pca, direction.k, template, base_bindings, target_slot, values)
        try:
            study.fitted = fit_inverse(sw)
            study.fidelity = fidelity(study.fitted, sw.w0, study.actual, sw.offset, support)
        except FitError as exc:
            study.error = str(exc)
            log.warning("layer %d: %s", layer, exc)
        studies[layer] = study
    return CaseStudy(label, target_slot, base.text, studies, support)


def _f(v: float) -> str:
    return "" if v is None or not math.isfinite(v) else f"{v:.8f}"


def write_case_study(study: CaseStudy, out_dir, svg: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "sweep.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "component", "r", "prediction", "implied_value", "weight", "weight_centered"])
        for l, s in sorted(study.layers.items()):
            for smp in s.sweep.samples:
                w.writerow([l, s.direction.k, _f(smp.r), _f(smp.prediction), _f(smp.implied), _f(smp.weight), _f(smp.weight_centered)])
    written.append(path)

    for l, s in sorted(study.layers.items()):
        if s.actual is None:
            continue
        path = out_dir / f"fidelity_layer{l}.csv"
        fid = s.fidelity
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["value", "predicted_weight", "actual_weight", "in_support", "predicted_raw", "actual_raw"])
            for i, v in enumerate(s.actual.values):
                if fid is not None:
                    row = [int(v), _f(fid.predicted[i]), _f(fid.actual[i]), int(fid.in_support[i]), _f(fid.predicted_raw[i]), _f(fid.actual_raw[i])]
                else:
                    row = [int(v), "", _f(s.actual.weights[i]), 0, "", _f(s.actual.raw[i])]
                w.writerow(row)
        written.append(path)

    path = out_dir / "fidelity_summary.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "component", "corr", "r2", "support_lo", "support_hi", "trace_corr", "n_in_support", "status"])
        for l, s in sorted(study.layers.items()):
            fid = s.fidelity
            if fid is None:
                w.writerow([l, s.direction.k, "", "", "", "", _f(s.direction.corr), 0, "fit_error"])
            else:
                w.writerow([
                    l, s.direction.k, _f(fid.corr), _f(fid.r2), _f(fid.fitted_support[0]), _f(fid.fitted_support[1]),
                    _f(s.direction.corr), fid.num_in_support, "ok",
                ])
    written.append(path)

    path = out_dir / "summary.txt"
    path.write_text("\n".join(study.summary_lines()) + "\n")
    written.append(path)

    if svg:
        written.extend(_write_svgs(study, out_dir))
    return written


def _write_svgs(study: CaseStudy, out_dir: Path) -> list[Path]:
    written = []
    slot = study.target_slot
    for l, s in sorted(study.layers.items()):
        name = f"p{l}_{s.direction.k}"
        rs = [x.r for x in s.sweep.samples]
        files = {
            f"sweep_layer{l}_prediction.svg": scatter_svg(
                [("prediction", rs, [x.prediction for x in s.sweep.samples], "#1f77b4")],
                f"manipulation factor r on {name}", "model prediction",
                title=f"{study.base_text}: prediction vs r (layer {l})", lines=True,
            ),
            f"sweep_layer{l}_implied.svg": scatter_svg(
                [(f"implied {slot}", rs, [x.implied for x in s.sweep.samples], "#2ca02c")],
                f"manipulation factor r on {name}", f"implied {slot}",
                title=f"{study.base_text}: implied {slot} vs r (layer {l})", lines=True,
            ),
        }
        if s.actual is not None:
            series = [("actual", s.actual.values, s.actual.weights, "#1f77b4")]
            if s.fidelity is not None:
                series.append(("predicted", s.fidelity.values, s.fidelity.predicted, "#d62728"))
            shaded = []
            v = s.actual.values
            if len(v):
                lo = s.fitted.support[0] if s.fitted else float(v.max())
                hi = s.fitted.support[1] if s.fitted else float(v.max())
                if study.data_support is not None:
                    lo, hi = max(lo, study.data_support[0]), min(hi, study.data_support[1])
                shaded = [(float(v.min()), lo), (hi, float(v.max()))]
            files[f"fidelity_layer{l}.svg"] = scatter_svg(
                series, slot, f"weight of {name}",
                title=f"predicted vs actual weights (layer {l})", shaded=shaded,
            )
        for fname, text in files.items():
            path = out_dir / fname
            path.write_text(text)
            written.append(path)
    return written
