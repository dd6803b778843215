"""Acceptance suite: one PASS/FAIL line per criterion.

The desk pipeline (gen -> train -> trace -> manipulate) runs twice with the
same seed through the CLI; run A feeds the training, tracing and manipulation
criteria and the two runs are byte-compared for determinism. The remaining
criteria re-run the property suites in compact form.

Runtime is dominated by the two desk trainings (about 7 minutes each on one
core).
"""

import csv
import json
import math
import random
from pathlib import Path

import numpy as np
import pytest

import test_model
import test_tensor
from arithtrace.cli import main
from arithtrace.equations import (
    EquationTemplate,
    GenerationConfig,
    detokenize,
    generate_dataset,
    instantiate_template,
    invert_for_operand,
    parse,
    render,
    sign_coefficients,
    tokenize,
)
from arithtrace.intervention import manipulate_rows, manipulation_hook
from arithtrace.model import InterventionHook, ModelConfig, TransformerModel, forward
from arithtrace.tensor import grad_check
from arithtrace.tracing import correlate, fit_pca, project

SEED = 0
TEMPLATE = "{a:3}-({b:3}-{c:3})"


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} ({detail})")


def _run_pipeline(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    seed = ["--seed", str(SEED)]
    assert main(["gen", *seed, "--out", str(root / "data")]) == 0
    assert main(["train", *seed, "--data", str(root / "data"), "--out", str(root / "model")]) == 0
    ckpt = str(root / "model" / "model.tmlb")
    assert main(["trace", *seed, "--checkpoint", ckpt, "--template", TEMPLATE, "--out", str(root / "trace")]) == 0
    assert main([
        "manipulate", *seed, "--checkpoint", ckpt, "--pca", str(root / "trace" / "pca.tmlp"),
        "--data", str(root / "data"), "--out", str(root / "manip"),
    ]) == 0
    return root


@pytest.fixture(scope="session")
def run_a(tmp_path_factory):
    return _run_pipeline(tmp_path_factory.mktemp("desk") / "a")


@pytest.fixture(scope="session")
def run_b(tmp_path_factory, run_a):
    return _run_pipeline(tmp_path_factory.mktemp("desk") / "b")


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_criterion_1_desk_training_r2(run_a, capsys):
    rep = json.loads((run_a / "model" / "train_report.json").read_text())
    ok = rep["eval_r2"] >= 0.95
    report(capsys, 1, ok, f"desk eval R^2 = {rep['eval_r2']:.4f} >= 0.95; {rep['steps']} steps, {rep['wall_time']:.0f}s")
    assert ok


def test_criterion_2_gradient_suite(capsys):
    worst = 0.0
    for name, case in test_tensor.OP_CASES.items():
        for seed in range(10):
            fn, point = case(np.random.default_rng(seed))
            worst = max(worst, grad_check(fn, point))
    for seed in range(10):
        test_model.test_full_model_grad_check(seed)
    ok = worst < 1e-3
    report(capsys, 2, ok, f"{len(test_tensor.OP_CASES)} ops x 10 seeds max rel err {worst:.2e}; tiny model passes at 10 seeds")
    assert ok


def test_criterion_3_manipulation_algebra(capsys):
    worst_scale = worst_perp = 0.0
    identical = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(1, 6)), int(rng.integers(2, 64))
        H = rng.normal(size=(n, d)) * rng.uniform(0.1, 10)
        p = rng.normal(size=d)
        p /= np.linalg.norm(p)
        r = float(rng.uniform(-3, 3))
        Hp = manipulate_rows(H, p, r)
        before, after = H @ p, Hp @ p
        worst_scale = max(worst_scale, float(np.max(np.abs(after - r * before) / np.maximum(np.abs(r * before), 1e-12))))
        perp = (Hp - np.outer(after, p)) - (H - np.outer(before, p))
        worst_perp = max(worst_perp, float(np.max(np.abs(perp)) / max(1.0, np.max(np.abs(H)))))
        identical &= np.array_equal(manipulate_rows(H, p, 1.0), H)

    model = TransformerModel(ModelConfig(num_layers=2, model_dim=16, num_heads=2, ffn_dim=32, max_sequence_length=16, seed=5))
    model.scaler.mean, model.scaler.std = 500.0, 400.0
    toks = [instantiate_template(EquationTemplate.parse(TEMPLATE), {"a": 617, "b": 555, "c": 602}).tokens()]
    plain, _ = forward(model, toks)
    worst_comp = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        layer = int(rng.integers(0, 3))
        p = rng.normal(size=14 * 16)
        p /= np.linalg.norm(p)
        r1, r2 = rng.uniform(-2, 3, size=2)
        same, _ = forward(model, toks, hook=manipulation_hook(layer, p, 1.0))
        identical &= np.array_equal(same, plain)
        twice = InterventionHook(layer, lambda s: manipulate_rows(manipulate_rows(s.reshape(1, -1), p, r1), p, r2).reshape(s.shape))
        a, _ = forward(model, toks, hook=twice)
        b, _ = forward(model, toks, hook=manipulation_hook(layer, p, r1 * r2))
        worst_comp = max(worst_comp, abs(a[0] - b[0]) / max(1.0, abs(b[0])))
    ok = worst_scale < 1e-5 and worst_perp < 1e-5 and identical and worst_comp < 1e-4
    report(capsys, 3, ok, f"scale rel err {worst_scale:.1e}, complement {worst_perp:.1e}, r=1 identical {identical}, composition {worst_comp:.1e}")
    assert ok


def test_criterion_4_pca_properties(capsys):
    worst_orth, ratios_ok = 0.0, True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        data = rng.normal(size=(200, 12)) * np.linspace(3, 0.2, 12)
        pca = fit_pca(data, k=10)
        worst_orth = max(worst_orth, float(np.max(np.abs(pca.components @ pca.components.T - np.eye(10)))))
        r = pca.explained_variance_ratio
        ratios_ok &= bool(np.all(np.diff(r) <= 0) and r.sum() <= 1 + 1e-6)
    rng = np.random.default_rng(0)
    line = rng.normal(size=(300, 1)) * rng.normal(size=9) + rng.normal(size=9)
    rank1 = float(fit_pca(line, k=3).explained_variance_ratio[0])
    data = rng.normal(size=(50, 8)) @ rng.normal(size=(8, 8))
    values = rng.normal(size=50)
    pca = fit_pca(data, k=8)
    corr = correlate(project(pca, data), {"v": values})[0]
    w = project(pca, data).weights
    oracle = []
    for k in range(8):
        x = list(w[:, k])
        mx, my = sum(x) / 50, sum(values) / 50
        sxy = sum((a - mx) * (b - my) for a, b in zip(x, values))
        sxx = sum((a - mx) ** 2 for a in x)
        syy = sum((b - my) ** 2 for b in values)
        oracle.append(sxy / math.sqrt(sxx * syy))
    pearson_err = float(np.max(np.abs(corr - np.array(oracle))))
    ok = worst_orth < 1e-6 and ratios_ok and abs(rank1 - 1) <= 1e-6 and pearson_err < 1e-10
    report(capsys, 4, ok, f"orthonormality {worst_orth:.1e}, ratios ok {ratios_ok}, rank-1 ratio {rank1:.9f}, Pearson oracle err {pearson_err:.1e}")
    assert ok


def test_criterion_5_tracing(run_a, capsys):
    best = {"a": (0.0, None), "b": (0.0, None), "c": (0.0, None)}
    files = sorted((run_a / "trace").glob("corr_layer*.csv"))
    for path in files:
        layer = int(path.stem.removeprefix("corr_layer"))
        for row in _read_csv(path):
            if row["intermediate"] in best:
                for key, cell in row.items():
                    if key.startswith("k") and cell and float(cell) > best[row["intermediate"]][0]:
                        best[row["intermediate"]] = (float(cell), (layer, key))
    ok = len(files) == 3 and all(v >= 0.8 for v, _ in best.values())
    detail = ", ".join(f"{name} {v:.3f} at layer {where[0]} {where[1]}" for name, (v, where) in best.items() if where)
    report(capsys, 5, ok, f"best |corr|: {detail}; threshold 0.8")
    if not ok:
        for path in files:
            print(path.read_text())
    assert ok


def test_criterion_6_manipulation_fidelity(run_a, capsys):
    rows = _read_csv(run_a / "manip" / "fidelity_summary.csv")
    summary = (run_a / "manip" / "summary.txt").read_text()
    fitted = [r for r in rows if r["status"] == "ok" and abs(float(r["trace_corr"])) >= 0.6]
    best = max(fitted, key=lambda r: float(r["r2"]), default=None)
    top = max(rows, key=lambda r: abs(float(r["trace_corr"])))
    contrast = [r for r in fitted if float(r["r2"]) < 0]
    fidelity_ok = best is not None and float(best["corr"]) >= 0.9 and float(best["r2"]) >= 0.3
    if contrast:
        listed = "layers " + ", ".join(r["layer"] for r in contrast)
        contrast_ok = "correlated but not used" in summary and listed in summary
    else:
        contrast_ok = "no direction with" in summary
    ok = fidelity_ok and contrast_ok
    parts = []
    if best is not None:
        parts.append(f"best direction layer {best['layer']} k{best['component']}: corr {float(best['corr']):.3f}, R^2 {float(best['r2']):.3f}")
    top_fit = f"R^2 {float(top['r2']):.3f}" if top["r2"] else "no fit"
    parts.append(f"most correlated layer {top['layer']} k{top['component']} (trace corr {float(top['trace_corr']):.3f}, {top_fit})")
    parts.append("contrast layers " + (", ".join(r["layer"] for r in contrast) if contrast else "none found"))
    report(capsys, 6, ok, "; ".join(parts))
    print(summary)
    assert ok


def test_criterion_7_equation_oracles(capsys):
    split = generate_dataset(GenerationConfig(size=10_000, eval_size=1, max_ops=5), 7)
    failures = 0
    for eq in split.train + split.eval:
        coeffs = sign_coefficients(eq.ast)
        failures += not (
            render(parse(eq.text)) == eq.text
            and parse(eq.text) == eq.ast
            and detokenize(tokenize(eq.text)) == eq.text
            and eq.result == sum(coeffs[n.path] * n.value for n in eq.ast.leaves())
        )
    rng = random.Random(7)
    inversions = 0
    for text in ("{a:3}-({b:3}-{c:3})", "({a:2}+{b:3})-({c:1}-{d:2})", "{x:4}+{y:1}"):
        t = EquationTemplate.parse(text)
        for _ in range(1000):
            bindings = {n: rng.randint(*t.slot_range(n)) for n in t.slots}
            result = instantiate_template(t, bindings).result
            inversions += 1
            failures += any(invert_for_operand(t, bindings, s, result) != bindings[s] for s in t.slots)
    ok = failures == 0
    report(capsys, 7, ok, f"10000 equations and {inversions} inversions, {failures} failures")
    assert ok


def test_criterion_8_determinism(run_a, run_b, capsys):
    csvs = sorted(p.relative_to(run_a) for p in run_a.rglob("*.csv"))
    csvs += sorted(p.relative_to(run_a) for p in run_a.rglob("*.tsv"))
    differing = [str(rel) for rel in csvs if (run_a / rel).read_bytes() != (run_b / rel).read_bytes()]
    ok = len(csvs) > 0 and not differing and (run_a / "model" / "model.tmlb").read_bytes() == (run_b / "model" / "model.tmlb").read_bytes()
    report(capsys, 8, ok, f"{len(csvs)} CSV/TSV files compared, {len(differing)} differ {differing if differing else ''}".strip())
    assert ok
