"""Command-line entry point wiring every workflow.

Exit codes: 0 success, 1 configuration/validation problems (all problems are
listed, not just the first), 2 runtime failure.
"""

import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .analytics import write_report
from .annotator import ALLOCATIONS, PLACEMENTS, AnnotatorModel
from .campaign import CampaignConfig, EventLog, replay_file, resolve_profile
from .engine import CampaignEngine
from .experiment import (
    parse_schedule,
    run_grid,
    write_aggregates_json,
    write_grid_csv,
    write_instances_csv,
)
from .manifest import SIZE_FILTERS, import_manifest
from .masks import rle_decode, rle_encode
from .ranker import (
    FEATURE_NAMES,
    Forest,
    ForestParams,
    dataset_from_states,
    ranking_curve,
    spearman,
    train,
)
from .seeding import rng_stream
from .synthdata import SceneConfig, write_dataset


class ValidationFailure(Exception):
    def __init__(self, problems):
        self.problems = problems
        super().__init__("; ".join(problems))


def _fail_validation(problems):
    if problems:
        raise ValidationFailure(problems)


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _campaign_config(defaults: dict, **overrides) -> CampaignConfig:
    merged = dict(defaults)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    annotator = AnnotatorModel(
        click_sigma=merged.pop("sigma", 3.0),
        min_region_side=merged.pop("min_side", 10.0),
        max_clicks_per_round=merged.get("clicks_per_round", 4),
        placement=merged.pop("placement", "region-centre"),
        allocation=merged.pop("allocation", "proportional-deterministic"),
    )
    merged.pop("annotator", None)
    merged.pop("encoding", None)
    return CampaignConfig(annotator=annotator, **merged)


def _internal_manifest_path(campaign_dir) -> Path:
    return Path(campaign_dir) / "manifest.json"


def _load_campaign_manifest(campaign_dir):
    path = _internal_manifest_path(campaign_dir)
    problems = []
    if not path.exists():
        problems.append(f"no imported manifest at {path}; run `maskloop import` first")
    _fail_validation(problems)
    manifest, rejects = import_manifest(path, size_filter="none")
    return manifest


@click.group()
def main():
    """Interactive instance-mask annotation at desk scale."""


@main.command()
@click.option("--out", required=True, type=click.Path(), help="Dataset output directory.")
@click.option("--count", default=200, show_default=True, help="Number of scenes.")
@click.option("--seed", default=7, show_default=True, help="Generator seed.")
def synth(out, count, seed):
    """Generate the bundled synthetic dataset (scenes + manifest.json)."""
    path = write_dataset(out, count=count, seed=seed, cfg=SceneConfig())
    click.echo(f"wrote {count} scenes, manifest at {path}")


@main.command("import")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--campaign", "campaign_dir", required=True, type=click.Path())
@click.option(
    "--size-filter",
    default="blueprint",
    show_default=True,
    type=click.Choice(sorted(SIZE_FILTERS)),
)
def import_cmd(manifest_path, campaign_dir, size_filter):
    """Import a dataset manifest into a campaign directory.

    Polygons are rasterized to RLE; undersized instances and instances with
    missing images land in rejects.json, never abort the import.
    """
    manifest, rejects = import_manifest(manifest_path, size_filter=size_filter)
    out = Path(campaign_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "images": [
            {"id": m.id, "path": m.path, "width": m.width, "height": m.height}
            for m in manifest.images.values()
        ],
        "instances": [
            {
                "id": i.id,
                "image_id": i.image_id,
                "class": i.class_label,
                "bbox": [i.box.x, i.box.y, i.box.w, i.box.h],
                **({"gt_rle": i.gt.to_json()} if i.gt is not None else {}),
            }
            for i in manifest.instances
        ],
    }
    with open(_internal_manifest_path(out), "w") as f:
        json.dump(doc, f)
    with open(out / "rejects.json", "w") as f:
        json.dump(rejects, f, indent=2)
    click.echo(f"imported {len(manifest.instances)} instances ({len(rejects)} rejected)")
    if not manifest.instances:
        click.echo("warning: the manifest is empty", err=True)


simulate_options = [
    click.option("--grid", default="4x3", show_default=True, help="Comma-separated KxR cells."),
    click.option(
        "--refiner",
        default=None,
        type=click.Choice(["healing-oracle", "box-prior", "geodesic-click", "remote"]),
    ),
    click.option("--profile", default=None, help="Geometry profile (blueprint/campaign/mini or inner:outer)."),
    click.option("--sigma", default=None, type=float, help="Click noise sigma in canvas px."),
    click.option("--min-side", default=None, type=float, help="Ignore error regions below side^2."),
    click.option("--placement", default=None, type=click.Choice(PLACEMENTS)),
    click.option("--allocation", default=None, type=click.Choice(ALLOCATIONS)),
    click.option("--box-sigma", default=None, type=float, help="Box corner noise sigma."),
    click.option("--seed", default=None, type=int),
    click.option("--workers", default=1, show_default=True, type=int),
]


def add_options(options):
    def wrap(f):
        for option in reversed(options):
            f = option(f)
        return f

    return wrap


@main.command()
@click.option("--campaign", "campaign_dir", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@add_options(simulate_options)
def simulate(campaign_dir, config_path, grid, refiner, profile, sigma, min_side,
             placement, allocation, box_sigma, seed, workers):
    """Run simulated k-clicks x r-rounds campaigns over the imported manifest."""
    defaults = _load_config_file(config_path)
    problems = []
    cells = [c.strip() for c in grid.split(",") if c.strip()]
    for cell in cells:
        try:
            parse_schedule(cell)
        except ValueError as exc:
            problems.append(str(exc))
    if profile is not None:
        try:
            resolve_profile(profile)
        except ValueError as exc:
            problems.append(str(exc))
    _fail_validation(problems)

    manifest = _load_campaign_manifest(campaign_dir)
    if not manifest.has_gt:
        raise ValidationFailure(["simulation requires ground truth for every instance"])
    base = _campaign_config(
        {
            "profile": defaults.get("profile", "mini"),
            "refiner": defaults.get("refiner", "healing-oracle"),
            "refiner_params": defaults.get("refiner_params", {}),
            "seed": defaults.get("seed", 0),
            "sigma": defaults.get("sigma", 3.0),
            "min_side": defaults.get("min_side", 10.0),
            "placement": defaults.get("placement", "region-centre"),
            "allocation": defaults.get("allocation", "proportional-deterministic"),
            "box_sigma": defaults.get("box_sigma", 0.0),
        },
        refiner=refiner,
        profile=profile,
        sigma=sigma,
        min_side=min_side,
        placement=placement,
        allocation=allocation,
        box_sigma=box_sigma,
        seed=seed,
    )
    if base.refiner == "geodesic-click" and not base.refiner_params:
        base = replace(
            base, refiner_params={"epsilon": 0.004, "core_erosion": 3.0, "bg_band_margin": 4.0}
        )
    results = run_grid(base, cells, manifest, workers=workers)
    out = Path(campaign_dir)
    for cell, result in results.items():
        run_dir = out / "runs" / cell
        run_dir.mkdir(parents=True, exist_ok=True)
        result.write_log(run_dir / "events.jsonl")
        write_instances_csv(result, run_dir / "instances.csv")
        with open(run_dir / "config.json", "w") as f:
            json.dump(result.config.to_json(), f, indent=2)
    reports = out / "reports"
    write_grid_csv(results, reports / "grid.csv")
    write_aggregates_json(results, reports / "aggregates.json")
    for cell in cells:
        final = results[cell].per_round[-1]
        click.echo(
            f"{cell}: mIoU {final.miou:.4f} boundary-F {final.mboundary_f:.4f} "
            f"after {final.cum_clicks_mean:.1f} clicks over {final.n} instances"
        )
    click.echo(f"reports under {reports}")


@main.command("rank-train")
@click.option("--campaign", "campaign_dir", required=True, type=click.Path(exists=True))
@click.option("--run", "run_name", required=True, help="Run directory name under runs/.")
@click.option("--fraction", default=0.01, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--trees", default=100, show_default=True, type=int)
@click.option("--depth", default=8, show_default=True, type=int)
@click.option("--out", "model_path", default=None, type=click.Path())
def rank_train(campaign_dir, run_name, fraction, seed, trees, depth, model_path):
    """Train the mask-quality forest on a fraction of a simulated run."""
    problems = []
    if not 0 < fraction <= 1:
        problems.append("--fraction must be in (0, 1]")
    run_dir = Path(campaign_dir) / "runs" / run_name
    if not (run_dir / "events.jsonl").exists():
        problems.append(f"no run log at {run_dir}/events.jsonl")
    _fail_validation(problems)

    state = replay_file(run_dir / "events.jsonl")
    inner, outer = state.config.geometry
    samples = dataset_from_states(state.instances, inner, outer)
    if not samples:
        raise ValidationFailure(["the run contains no trainable rounds"])
    features = [s[0] for s in samples]
    targets = [s[1] for s in samples]
    rng = rng_stream(seed, "rank-split")
    order = rng.permutation(len(samples))
    n_train = max(1, int(np.ceil(fraction * len(samples))))
    train_idx, hold_idx = order[:n_train], order[n_train:]
    forest = train(
        [(features[i], targets[i]) for i in train_idx],
        ForestParams(n_trees=trees, max_depth=depth),
        seed=seed,
    )
    model_path = Path(model_path or Path(campaign_dir) / "models" / "forest.json")
    model_path.parent.mkdir(parents=True, exist_ok=True)
    forest.save(model_path)

    features_csv = run_dir / "features.csv"
    with open(features_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["instance", "round", *FEATURE_NAMES, "true_iou"])
        for feat, target, iid, rnd in samples:
            writer.writerow([iid, rnd, *[f"{v:.6f}" for v in feat.as_array()], f"{target:.6f}"])

    msg = f"trained on {n_train}/{len(samples)} samples -> {model_path}"
    if len(hold_idx) >= 10:
        pred = forest.predict([features[i] for i in hold_idx])
        rho = spearman(pred, [targets[i] for i in hold_idx])
        msg += f"; held-out Spearman rho {rho:.3f}"
    click.echo(msg)


@main.command("rank-apply")
@click.option("--campaign", "campaign_dir", required=True, type=click.Path(exists=True))
@click.option("--run", "run_name", required=True)
@click.option("--model", "model_path", default=None, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
def rank_apply(campaign_dir, run_name, model_path, out_path):
    """Score every answered round of a run with a trained forest."""
    model_path = Path(model_path or Path(campaign_dir) / "models" / "forest.json")
    problems = []
    if not model_path.exists():
        problems.append(f"no trained model at {model_path}; run `maskloop rank-train` first")
    run_dir = Path(campaign_dir) / "runs" / run_name
    if not (run_dir / "events.jsonl").exists():
        problems.append(f"no run log at {run_dir}/events.jsonl")
    _fail_validation(problems)

    forest = Forest.load(model_path)
    state = replay_file(run_dir / "events.jsonl")
    inner, outer = state.config.geometry
    samples = dataset_from_states(state.instances, inner, outer)
    predictions = forest.predict([s[0] for s in samples])
    out_path = Path(out_path or run_dir / "scores.csv")
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["instance", "round", "predicted_iou", "true_iou"])
        for (feat, target, iid, rnd), pred in zip(samples, predictions):
            writer.writerow([iid, rnd, f"{pred:.6f}", f"{target:.6f}"])
    curve = ranking_curve(predictions, [s[1] for s in samples])
    curve_path = out_path.parent / "ranking_curve.csv"
    with open(curve_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["top_percent", "mean_true_iou"])
        for pct, value in curve:
            writer.writerow([pct, f"{value:.6f}"])
    click.echo(f"scores -> {out_path}; ranking curve -> {curve_path}")


@main.command()
@click.option("--campaign", "campaign_dir", required=True, type=click.Path(exists=True))
@click.option("--run", "run_name", default=None, help="Run name; default: the live serve log.")
@click.option("--out", "out_dir", default=None, type=click.Path())
def report(campaign_dir, run_name, out_dir):
    """Analytics report (CSV + JSON) for a run or the live campaign log."""
    base = Path(campaign_dir)
    log_path = (
        base / "runs" / run_name / "events.jsonl" if run_name else base / "serve" / "events.jsonl"
    )
    if not log_path.exists():
        raise ValidationFailure([f"no event log at {log_path}"])
    state = replay_file(log_path)
    out = write_report(state, out_dir or (base / "reports" / (run_name or "serve")))
    click.echo(f"report -> {out}")


def _serve_engine(campaign_dir, config_path, refiner, profile, immediate, seed, scores_path):
    defaults = _load_config_file(config_path)
    manifest = _load_campaign_manifest(campaign_dir)
    config = _campaign_config(
        {
            "profile": defaults.get("profile", "campaign"),
            "refiner": defaults.get("refiner", "geodesic-click"),
            "refiner_params": defaults.get("refiner_params", {}),
            "seed": defaults.get("seed", 0),
            "immediate_refine": defaults.get("immediate_refine", False),
            "clicks_per_round": defaults.get("clicks_per_round", 4),
            "rounds": defaults.get("rounds", 3),
        },
        refiner=refiner,
        profile=profile,
        immediate_refine=immediate if immediate else None,
        seed=seed,
    )
    scores = {}
    if scores_path:
        with open(scores_path, newline="") as f:
            for row in csv.DictReader(f):
                scores[row["instance"]] = float(row["predicted_iou"])
    policies_path = Path(campaign_dir) / "policies.json"
    policies = json.loads(policies_path.read_text()) if policies_path.exists() else {}
    log = EventLog(Path(campaign_dir) / "serve" / "events.jsonl", fsync=True)
    engine = CampaignEngine(config, manifest, log, policies=policies, scores=scores)
    engine.import_instances()
    return engine


@main.command("advance-round")
@click.option("--campaign", "campaign_dir", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--refiner", default=None)
@click.option("--profile", default=None)
@click.option("--seed", default=None, type=int)
def advance_round(campaign_dir, config_path, refiner, profile, seed):
    """Refine every instance with a pending answered round (and bootstrap)."""
    engine = _serve_engine(campaign_dir, config_path, refiner, profile, False, seed, None)
    out = engine.advance_round()
    click.echo(json.dumps(out))
    engine.log.close()


@main.command()
@click.option("--campaign", "campaign_dir", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True, type=int, envvar="MASKLOOP_PORT")
@click.option("--refiner", default=None)
@click.option("--profile", default=None)
@click.option("--immediate", is_flag=True, help="Refine on answer instead of between rounds.")
@click.option("--seed", default=None, type=int)
@click.option("--scores", "scores_path", default=None, type=click.Path(exists=True))
@click.option("--static", "static_dir", default=None, type=click.Path(exists=True),
              help="Directory with the built web UI to host at /.")
def serve(campaign_dir, config_path, host, port, refiner, profile, immediate, seed,
          scores_path, static_dir):
    """Run the campaign HTTP server (bootstraps round-0 masks on start)."""
    import uvicorn

    from .server import create_app

    engine = _serve_engine(campaign_dir, config_path, refiner, profile, immediate, seed, scores_path)
    engine.advance_round()
    app = create_app(engine, static_dir=static_dir)
    click.echo(f"serving campaign on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


def entry():
    try:
        main(standalone_mode=False)
    except ValidationFailure as exc:
        for problem in exc.problems:
            click.echo(f"error: {problem}", err=True)
        sys.exit(1)
    except click.UsageError as exc:
        exc.show()
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except Exception as exc:  # runtime failure
        click.echo(f"runtime error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    entry()
