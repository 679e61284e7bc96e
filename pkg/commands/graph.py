import click
from flask import Blueprint, current_app

from app import DEFAULTS
from commands import PipelineCommand, file_digest, manifest_path, setting, timed, write_manifest
from engine.evaluation import split_chrono
from engine.graph import build_hetero, graph_stats, save_graph, with_poi_poi
from engine.ingest import load_dataset
from models import TIME_MODES, RunManifest

graph_bp = Blueprint("graph", __name__, cli_group=None)


@graph_bp.cli.command("graph", cls=PipelineCommand)
@click.option("--checkins", required=True, type=click.Path(dir_okay=False), help="Check-in CSV.")
@click.option("--venues", required=True, type=click.Path(dir_okay=False), help="Venue CSV.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Graph file to write.")
@click.option("--time-mode", type=click.Choice(list(TIME_MODES)), default="28", show_default=True)
@click.option("--min-checkins", type=int, default=None, show_default=str(DEFAULTS["MIN_CHECKINS"]))
@click.option("--poi-window-hours", type=float, default=None, show_default=str(DEFAULTS["POI_WINDOW_HOURS"]))
@click.option("--train-frac", type=click.FloatRange(0, 1, min_open=True), default=None,
              show_default=str(DEFAULTS["TRAIN_FRAC"]),
              help="Build on each user's first fraction of records; 1 uses everything.")
def graph(checkins, venues, out, time_mode, min_checkins, poi_window_hours, train_frac):
    """Build the heterogeneous graph from a check-in log."""
    min_checkins = setting(min_checkins, "MIN_CHECKINS")
    poi_window_hours = setting(poi_window_hours, "POI_WINDOW_HOURS")
    train_frac = setting(train_frac, "TRAIN_FRAC")

    timings = {}
    current_app.logger.info("Loading check-ins...")
    with timed(timings, "ingest"):
        data = load_dataset(checkins, venues, min_checkins)
        if train_frac < 1:
            data = split_chrono(data, train_frac).train

    current_app.logger.info(f"Building graph ({time_mode}) from {len(data)} check-ins...")
    with timed(timings, "build"):
        hetero = with_poi_poi(build_hetero(data, time_mode), data, poi_window_hours)
    for name, stats in graph_stats(hetero).items():
        current_app.logger.info(
            f"  {name}: {stats['edges']} edges, weight {stats['weight']:.0f}, density {stats['density']:.4f}"
        )

    with timed(timings, "write"):
        save_graph(hetero, out)
    current_app.logger.info(f"Graph written to {out}")

    write_manifest(
        manifest_path(out),
        RunManifest(
            command="graph",
            config={
                "time_mode": time_mode,
                "min_checkins": min_checkins,
                "poi_window_hours": poi_window_hours,
                "train_frac": train_frac,
            },
            inputs={checkins: file_digest(checkins), venues: file_digest(venues)},
            timings=timings,
            outputs=[out],
        ),
    )
