import click
import pandas as pd
from flask import Blueprint, current_app

from app import DEFAULTS
from commands import PipelineCommand, file_digest, manifest_path, setting, write_manifest
from engine.evaluation import covisit, stays_by_user
from engine.ingest import load_dataset
from models import RunManifest

covisit_bp = Blueprint("covisit", __name__, cli_group=None)


@covisit_bp.cli.command("covisit", cls=PipelineCommand)
@click.option("--checkins", required=True, type=click.Path(dir_okay=False))
@click.option("--venues", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--min-checkins", type=int, default=None, show_default=str(DEFAULTS["MIN_CHECKINS"]))
@click.option("--gap-minutes", type=int, default=None, show_default=str(DEFAULTS["STAY_GAP_MINUTES"]))
def covisit_command(checkins, venues, out, min_checkins, gap_minutes):
    """Minutes each pair of users spent at the same POI."""
    min_checkins = setting(min_checkins, "MIN_CHECKINS")
    gap_minutes = setting(gap_minutes, "STAY_GAP_MINUTES")
    data = load_dataset(checkins, venues, min_checkins)
    matrix = covisit(stays_by_user(data, gap_minutes))

    user_ids = data.user_ids
    rows = [
        {"user_a": user_ids[a], "user_b": user_ids[b], "minutes": minutes}
        for (a, b), minutes in sorted(matrix.minutes.items())
    ]
    pd.DataFrame(rows, columns=["user_a", "user_b", "minutes"]).to_csv(out, index=False, lineterminator="\n")
    current_app.logger.info(f"{len(rows)} co-visiting pairs written to {out}")

    write_manifest(
        manifest_path(out),
        RunManifest(
            command="covisit",
            config={"min_checkins": min_checkins, "gap_minutes": gap_minutes},
            inputs={checkins: file_digest(checkins), venues: file_digest(venues)},
            outputs=[out],
        ),
    )
