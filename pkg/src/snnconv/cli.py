"""Command-line harness: fixture generation, conversion, runs, sweeps, reports.

    snnconv gen-fixture --fixture f1 --out work/fx
    snnconv convert --model work/fx/model.json --samples work/fx/samples.ten --out work/conv
    snnconv run --model work/conv/converted.json --input work/fx/eval.ten \\
        --timesteps 64 --compression 16 --scheme stdi --out work/run
    snnconv sweep --fixture f1 --out work/sweep
    snnconv report work/sweep/sweep.csv

Any flag may come from a JSON config file (--config cfg.json, keys named like
the flags); explicitly given flags win over the file. Exit codes: 0 success,
1 usage error, 2 validation failure, 3 runtime failure.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
from click.core import ParameterSource

from .convert import (
    BIAS_RULES,
    CodingConfig,
    SCHEMES,
    build_snn,
    load_converted,
    normalize_weights,
    normalized_forward,
    save_converted,
)
from .engine import run_snn
from .errors import ValidationError
from .fixtures import DEFAULT_SAMPLE_COUNT, DEFAULT_SEED, FIXTURE_NAMES, FixtureSpec, gen_fixture
from .graph import fold_batchnorm
from .metrics import EnergyConstants, compare_outputs, count_ann_flops, count_snn_flops, energy_report
from .model_io import load_input, load_model, load_tensors, save_stats
from .stats import sample_activation_stats

DEFAULT_GRID = [
    [64, 1, "rate"],
    [64, 16, "rate"],
    [64, 64, "rate"],
    [64, 16, "stdi"],
    [16, 4, "stdi"],
    [4, 4, "stdi"],
]

SWEEP_COLUMNS = [
    "fixture", "timesteps", "compression", "scheme", "status",
    "max_abs_err", "mse", "argmax_agree", "total_spikes", "ac_total",
    "energy_snn_joules", "energy_ann_joules",
    "wall_ms",  # timing stays last so diffs can drop one column
]


@click.group()
def cli():
    """ANN-to-SNN conversion and integrate-and-fire simulation harness."""


def _resolved(ctx: click.Context, config: str | None) -> dict:
    """Parameter values with the precedence: explicit flag > config file > default."""
    values = dict(ctx.params)
    values.pop("config", None)
    if not config:
        return values
    path = Path(config)
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise ValidationError(f"cannot read config file {path}: {e}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path} must hold a JSON object of flag values")
    known = {p.name for p in ctx.command.params}
    for key, val in raw.items():
        name = key.lstrip("-").replace("-", "_")
        if name == "config" or name not in known:
            raise ValidationError(
                f"config key '{key}' does not match any flag of '{ctx.command.name}'"
            )
        if ctx.get_parameter_source(name) is ParameterSource.DEFAULT:
            values[name] = val
    return values


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


@cli.command("gen-fixture")
@click.option("--fixture", type=click.Choice(FIXTURE_NAMES), default="f1", show_default=True)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--samples", type=int, default=DEFAULT_SAMPLE_COUNT, show_default=True,
              help="Number of stats-sampling inputs to draw.")
@click.option("--bias-scale", type=float, default=1.0, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--config", type=click.Path(), default=None, help="JSON file of flag values.")
@click.pass_context
def cmd_gen_fixture(ctx, **_kw):
    """Write a built-in fixture: model, stats samples, and eval input."""
    p = _resolved(ctx, ctx.params["config"])
    spec = FixtureSpec(p["fixture"], int(p["seed"]), int(p["samples"]), float(p["bias_scale"]))
    paths = gen_fixture(spec, p["out"])
    click.echo(f"{spec.name}: wrote {', '.join(sorted(paths))} under {p['out']} (seed {spec.seed})")


@cli.command("convert")
@click.option("--model", required=True, type=click.Path(), help="Model manifest (model.json).")
@click.option("--samples", required=True, type=click.Path(), help="Stats sample tensor file.")
@click.option("--bias-rule", type=click.Choice(BIAS_RULES), default="max_out", show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--config", type=click.Path(), default=None, help="JSON file of flag values.")
@click.pass_context
def cmd_convert(ctx, **_kw):
    """Fold batchnorm, sample activation stats, and normalize the weights."""
    p = _resolved(ctx, ctx.params["config"])
    graph, _ = load_model(p["model"])
    folded = fold_batchnorm(graph)
    stats = sample_activation_stats(folded, load_tensors(p["samples"]))
    converted = normalize_weights(folded, stats, p["bias_rule"])
    out = Path(p["out"])
    save_converted(converted, out / "converted.json")
    save_stats(out / "stats.json", stats)
    peak = max(float(v.max()) for v in stats.max_out.values())
    click.echo(
        f"converted {len(folded.layers)} layers ({p['bias_rule']}); "
        f"peak channel stat {peak:.4g}; wrote converted.json, stats.json under {out}"
    )


def _run_once(converted, x, coding):
    """One simulation plus its comparison and energy records."""
    plan = build_snn(converted, coding)
    t0 = time.perf_counter()
    result = run_snn(plan, x)
    wall_ms = (time.perf_counter() - t0) * 1e3
    reference = normalized_forward(converted, x)
    out_ids = sorted(result.outputs)
    ref_flat = np.concatenate([reference[i].ravel() for i in out_ids])
    got_flat = np.concatenate([result.outputs[i].ravel() for i in out_ids])
    comparison = compare_outputs(ref_flat, got_flat)
    flops = count_snn_flops(result)
    ann_macs = count_ann_flops(converted.graph)["total_macs"]
    energy = energy_report(ann_macs, flops["ac_total"], flops["input_macs"], EnergyConstants())
    return result, comparison, energy, flops, wall_ms


@cli.command("run")
@click.option("--model", required=True, type=click.Path(), help="Converted manifest.")
@click.option("--input", "input_", required=True, type=click.Path(), help="Input tensor file.")
@click.option("--timesteps", type=int, default=64, show_default=True)
@click.option("--compression", type=int, default=1, show_default=True)
@click.option("--scheme", type=click.Choice(SCHEMES), default="rate", show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--config", type=click.Path(), default=None, help="JSON file of flag values.")
@click.pass_context
def cmd_run(ctx, **_kw):
    """Simulate a converted model on one input and write telemetry."""
    p = _resolved(ctx, ctx.params["config"])
    converted = load_converted(p["model"])
    x = load_input(p["input_"])
    coding = CodingConfig(p["scheme"], int(p["timesteps"]), int(p["compression"]))
    result, comparison, energy, flops, wall_ms = _run_once(converted, x, coding)
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    telemetry = result.to_json()
    telemetry["wall_ms"] = wall_ms
    (out / "telemetry.json").write_text(json.dumps(telemetry, indent=2, sort_keys=True) + "\n")
    record = {
        "coding": {"scheme": coding.scheme, "timesteps": coding.timesteps,
                   "compression": coding.compression},
        "comparison": asdict(comparison),
        "energy": asdict(energy),
        "flops": flops,
    }
    (out / "report.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    click.echo(
        f"max-abs err {comparison.max_abs:.6f} | spikes {result.total_spikes} | "
        f"snn {energy.energy_snn_j:.3e} J vs ann {energy.energy_ann_j:.3e} J"
    )


def _parse_grid(grid) -> list[tuple[int, int, str]]:
    if isinstance(grid, str):
        try:
            grid = json.loads(grid)
        except json.JSONDecodeError as e:
            raise ValidationError(f"--grid is not valid JSON: {e}")
    if not isinstance(grid, list) or not all(isinstance(t, (list, tuple)) and len(t) == 3 for t in grid):
        raise ValidationError("--grid must be a JSON list of [timesteps, compression, scheme] triples")
    return [(int(t), int(f), str(s)) for t, f, s in grid]


@cli.command("sweep")
@click.option("--fixture", type=click.Choice(FIXTURE_NAMES), default="f1", show_default=True)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--samples", type=int, default=DEFAULT_SAMPLE_COUNT, show_default=True)
@click.option("--grid", default=json.dumps(DEFAULT_GRID), show_default=False,
              help="JSON list of [timesteps, compression, scheme] triples.")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--config", type=click.Path(), default=None, help="JSON file of flag values.")
@click.pass_context
def cmd_sweep(ctx, **_kw):
    """Generate a fixture, convert it, and run a coding-config grid to CSV."""
    p = _resolved(ctx, ctx.params["config"])
    grid = _parse_grid(p["grid"])
    out = Path(p["out"])
    spec = FixtureSpec(p["fixture"], int(p["seed"]), int(p["samples"]))
    paths = gen_fixture(spec, out / "fixture")
    graph, _ = load_model(paths["model"])
    folded = fold_batchnorm(graph)
    stats = sample_activation_stats(folded, load_tensors(paths["samples"]))
    converted = normalize_weights(folded, stats)
    save_converted(converted, out / "converted" / "converted.json")
    save_stats(out / "converted" / "stats.json", stats)
    x = load_input(paths["eval"])

    rows, failures = [], 0
    for timesteps, compression, scheme in grid:
        row = {"fixture": spec.name, "timesteps": timesteps,
               "compression": compression, "scheme": scheme}
        try:
            coding = CodingConfig(scheme, timesteps, compression)
            result, comparison, energy, flops, wall_ms = _run_once(converted, x, coding)
            row |= {
                "status": "ok",
                "max_abs_err": comparison.max_abs,
                "mse": comparison.mse,
                "argmax_agree": comparison.argmax_agree,
                "total_spikes": result.total_spikes,
                "ac_total": flops["ac_total"],
                "energy_snn_joules": energy.energy_snn_j,
                "energy_ann_joules": energy.energy_ann_j,
                "wall_ms": wall_ms,
            }
        except ValidationError as e:
            failures += 1
            row |= {"status": f"failed: {e}"}
        rows.append(row)

    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    click.echo(f"swept {len(rows)} configs ({failures} failed) -> {out / 'sweep.csv'}")
    if failures:
        raise RuntimeError(f"{failures} sweep row(s) failed; see {out / 'sweep.csv'}")


@cli.command("report")
@click.argument("path", type=click.Path())
def cmd_report(path):
    """Render a sweep CSV or a run report/telemetry JSON as readable text."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"no such report input: {path}")
    if path.suffix == ".csv":
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            click.echo("empty sweep")
            return
        cols = ["timesteps", "compression", "scheme", "status", "max_abs_err",
                "total_spikes", "energy_snn_joules", "wall_ms"]
        widths = {c: max(len(c), *(len(r.get(c, "")) for r in rows)) for c in cols}
        click.echo("  ".join(c.ljust(widths[c]) for c in cols))
        for r in rows:
            click.echo("  ".join(r.get(c, "").ljust(widths[c]) for c in cols))
        return
    try:
        record = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is neither a CSV nor valid JSON: {e}")
    for key in ("coding", "comparison", "energy", "flops"):
        if key in record:
            click.echo(f"{key}: {json.dumps(record[key], sort_keys=True)}")
    if "stages" in record:
        click.echo(f"stages: {len(record['stages'])}, total spikes {record.get('total_spikes')}")


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Exit as e:
        sys.exit(e.exit_code)
    except click.UsageError as e:
        e.show()
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(1)
    except ValidationError as e:
        click.echo(f"validation error: {e}", err=True)
        sys.exit(2)
    except Exception as e:  # noqa: BLE001 - the CLI boundary maps everything
        click.echo(f"runtime failure: {e}", err=True)
        sys.exit(3)
    sys.exit(0)


if __name__ == "__main__":
    main()
