"""Command-line entry point: ``arithtrace {gen,train,eval,trace,manipulate,report}``.

Exit codes: 0 success (possibly with warnings), 1 internal error,
2 usage/config/input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import random
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config, parse_bindings, parse_layers, parse_r_grid
from .equations import (
    DatasetSplit,
    EquationTemplate,
    TemplateError,
    generate_dataset,
    instantiate_template,
    read_dataset,
    write_dataset,
)
from .intervention import InterventionError, case_study, data_support, write_case_study
from .model import CheckpointError, InputError, TransformerModel, capture_activations, load, save
from .tracing import TracingError, emit_heatmap, load_pcas, save_pcas, trace
from .training import TrainConfig, eval_r2, train

log = logging.getLogger("arithtrace")


class UsageError(Exception):
    """Bad input detected by a command; maps to exit code 2."""


USER_ERRORS = (UsageError, ConfigError, CheckpointError, InputError, TemplateError, TracingError, InterventionError)


# --------------------------------------------------------------------------
# Manifests


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Manifest:
    """Records config, version, input digests and outputs; rewritten as outputs appear."""

    def __init__(self, out_dir: Path, command: str, cfg: RunConfig, inputs: list[Path]):
        self.path = out_dir / f"manifest_{command}.json"
        self.out_dir = out_dir
        self.data = {
            "command": command,
            "tool_version": __version__,
            "config": cfg.to_dict(),
            "inputs": {str(p): _digest(p) for p in inputs if p.is_file()},
            "outputs": [],
            "status": "running",
        }
        self.write()

    def add(self, paths) -> None:
        for p in paths:
            self.data["outputs"].append(str(Path(p).relative_to(self.out_dir)))

    def finish(self, status: str = "ok") -> None:
        self.data["status"] = status
        self.write()

    def write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _read_split(data_dir: str) -> DatasetSplit:
    root = Path(data_dir)
    train_path, eval_path = root / "train.tsv", root / "eval.tsv"
    if not train_path.is_file():
        raise UsageError(f"dataset not found: {train_path}")
    try:
        train_eqs = read_dataset(train_path)
        eval_eqs = read_dataset(eval_path) if eval_path.is_file() else []
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return DatasetSplit(train_eqs, eval_eqs)


def _load_checkpoint(path: str) -> TransformerModel:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load(path)


def _trace_instances(template: EquationTemplate, count: int, seed: int):
    rng = random.Random(seed)
    ranges = {name: template.slot_range(name) for name in template.slots}
    return [
        instantiate_template(template, {name: rng.randint(*ranges[name]) for name in template.slots})
        for _ in range(count)
    ]


# --------------------------------------------------------------------------
# Commands


def cmd_gen(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    manifest = Manifest(out, "gen", cfg, [])
    split = generate_dataset(cfg.gen, cfg.seed)
    write_dataset(split.train, out / "train.tsv")
    write_dataset(split.eval, out / "eval.tsv")
    (out / "config.txt").write_text(dump_config(cfg))
    manifest.add([out / "train.tsv", out / "eval.tsv", out / "config.txt"])
    manifest.finish()
    print(f"wrote {len(split.train)} train / {len(split.eval)} eval equations to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    split = _read_split(args.data)
    out = _out_dir(args.out)
    manifest = Manifest(out, "train", cfg, [Path(args.data) / "train.tsv", Path(args.data) / "eval.tsv"])
    model = TransformerModel(cfg.model)
    report = train(model, split, cfg.train)
    ckpt = out / "model.tmlb"
    tmp = out / "model.tmlb.partial"
    save(model, tmp)
    tmp.replace(ckpt)
    (out / "train_report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    manifest.add([ckpt, out / "train_report.json"])
    manifest.finish()
    print(f"trained {report.steps} steps; eval R^2 = {report.eval_r2:.4f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load_checkpoint(args.checkpoint)
    path = Path(args.data)
    if path.is_dir():
        path = path / "eval.tsv"
    if not path.is_file():
        raise UsageError(f"dataset not found: {path}")
    try:
        eqs = read_dataset(path)
        r2 = eval_r2(model, eqs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps({"equations": len(eqs), "r2": r2}))
    return 0


def cmd_trace(args, cfg: RunConfig) -> int:
    model = _load_checkpoint(args.checkpoint)
    template = EquationTemplate.parse(args.template or cfg.trace.template)
    layers = parse_layers(cfg.trace.layers, model.config.num_layers)
    if template.token_length() > model.config.max_sequence_length:
        raise UsageError(f"template is longer than the model's max_sequence_length")
    out = _out_dir(args.out)
    manifest = Manifest(out, "trace", cfg, [Path(args.checkpoint)])
    eqs = _trace_instances(template, cfg.trace.instances, cfg.seed)
    record = capture_activations(model, eqs, layers)
    result = trace(record, layers, cfg.trace.k)
    for layer, pca in result.pcas.items():
        if pca.truncated:
            log.warning("layer %d: data rank allows only %d of %d components", layer, pca.num_components, pca.requested)
    written = emit_heatmap(result.report, out)
    save_pcas(result, out / "pca.tmlp", template.text)
    manifest.add(written + [out / "pca.tmlp"])
    manifest.finish()
    print(f"traced {len(eqs)} instances of {template.text} over layers {layers}")
    return 0


def cmd_manipulate(args, cfg: RunConfig) -> int:
    model = _load_checkpoint(args.checkpoint)
    if not Path(args.pca).is_file():
        raise UsageError(f"PCA file not found: {args.pca}")
    traced, header = load_pcas(args.pca)
    template = EquationTemplate.parse(args.template or header.get("template") or cfg.trace.template)
    n_features = template.token_length() * model.config.model_dim
    for layer, pca in traced.pcas.items():
        if pca.mean.shape[0] != n_features:
            raise UsageError(
                f"PCA for layer {layer} has dimension {pca.mean.shape[0]}, "
                f"but the checkpoint and template give {n_features}"
            )
        if layer > model.config.num_layers:
            raise UsageError(f"PCA layer {layer} exceeds checkpoint depth {model.config.num_layers}")
    m = cfg.manipulate
    slot = m.slot or m.label
    bindings = parse_bindings(m.base)
    r_grid = parse_r_grid(args.r_grid if args.r_grid is not None else m.r_grid)
    lo, hi = template.slot_range(slot) if slot in template.slots else (0, -1)
    values = range(m.value_min if m.value_min is not None else lo, (m.value_max if m.value_max is not None else hi) + 1)
    support = None
    inputs = [Path(args.checkpoint), Path(args.pca)]
    if args.data:
        split = _read_split(args.data)
        support = data_support(split.train, template, slot)
        inputs.append(Path(args.data) / "train.tsv")
    out = _out_dir(args.out)
    manifest = Manifest(out, "manipulate", cfg, inputs)
    study = case_study(model, traced, template, bindings, m.label, slot, r_grid, values, support)
    written = write_case_study(study, out)
    manifest.add(written)
    failed = [l for l, s in study.layers.items() if s.error]
    manifest.finish("ok" if not failed else "incomplete")
    print("\n".join(study.summary_lines()))
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    """Collect train/trace/manipulate outputs under a run directory into report.md."""
    root = Path(args.run)
    if not root.is_dir():
        raise UsageError(f"run directory not found: {root}")
    lines = ["# Run report", ""]
    for rep in sorted(root.rglob("train_report.json")):
        data = json.loads(rep.read_text())
        lines += [f"## Training ({rep.parent.relative_to(root)})", "",
                  f"- steps: {data['steps']}", f"- eval R^2: {data['eval_r2']:.4f}",
                  f"- epoch losses: {', '.join(f'{x:.4f}' for x in data['epoch_losses'])}", ""]
    for ev in sorted(root.rglob("explained_variance.csv")):
        lines += [f"## Tracing ({ev.parent.relative_to(root)})", ""]
        for corr in sorted(ev.parent.glob("corr_layer*.csv")):
            rows = corr.read_text().splitlines()
            lines.append(f"### {corr.stem}")
            lines.append("")
            lines.append("| " + " | ".join(rows[0].split(",")) + " |")
            lines.append("|" + "---|" * len(rows[0].split(",")))
            lines += ["| " + " | ".join(r.split(",")) + " |" for r in rows[1:]]
            lines.append("")
    for summ in sorted(root.rglob("summary.txt")):
        lines += [f"## Manipulation ({summ.parent.relative_to(root)})", "", "```"]
        lines += summ.read_text().splitlines() + ["```", ""]
    out = root / "report.md"
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out}")
    return 0


# --------------------------------------------------------------------------
# Argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="global seed (falls back to $TML_SEED, then 0)")
    p.add_argument("--preset", choices=("desk", "full"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arithtrace", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate train/eval equation files")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--eval-size", type=int)
    p.add_argument("--max-ops", type=int)
    p.add_argument("--operand-min", type=int)
    p.add_argument("--operand-max", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the regression Transformer")
    _common(p)
    p.add_argument("--data", required=True, help="directory holding train.tsv / eval.tsv")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="stop after this many updates (0 = no training)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report R^2 of a checkpoint on a dataset file")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file or directory (uses eval.tsv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="PCA tracing of intermediate values")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--template")
    p.add_argument("--out", required=True)
    p.add_argument("-k", type=int, dest="k")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("manipulate", help="manipulation case study along traced directions")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pca", required=True, help="pca.tmlp written by 'trace'")
    p.add_argument("--template")
    p.add_argument("--data", help="dataset directory; its train split defines the data-support interval")
    p.add_argument("--out", required=True)
    p.add_argument("--r-grid", help="'lo:hi:count' or comma list")
    p.set_defaults(func=cmd_manipulate)

    p = sub.add_parser("report", help="summarize a run directory into report.md")
    _common(p)
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


_FLAG_KEYS = {
    "size": "gen.size",
    "eval_size": "gen.eval_size",
    "max_ops": "gen.max_ops",
    "operand_min": "gen.operand_min",
    "operand_max": "gen.operand_max",
    "epochs": "train.epochs",
    "steps": "train.max_steps",
    "k": "trace.k",
}


def resolve_config(args) -> RunConfig:
    overrides = {}
    if args.preset:
        overrides["preset"] = args.preset
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    if args.command == "gen" and "gen.size" in overrides and "gen.eval_size" not in overrides:
        # Keep the 5% eval share when only the total size is given.
        size = int(overrides["gen.size"])
        overrides["gen.eval_size"] = str(max(1, size // 20) if size > 1 else 0)
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
