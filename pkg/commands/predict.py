import io

import click
import pandas as pd
from flask import Blueprint, current_app

from commands import PipelineCommand, file_digest, manifest_path, write_manifest
from engine.graph import load_graph
from engine.ingest import parse_timestamp, read_text
from engine.predict import friend_rows, prediction_rows
from engine.train import load_embeddings
from models import RunManifest, ValidationError

predict_bp = Blueprint("predict", __name__, cli_group=None)

PREDICTION_COLUMNS = ["user_id", "timestamp", "rank", "poi_id", "score"]
FRIEND_COLUMNS = ["user_id", "rank", "friend_id", "score"]


def _read_column_file(path, columns):
    frame = pd.read_csv(io.StringIO(read_text(path)), dtype=str, keep_default_na=False)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    return frame


def _load_model(graph_path, embeddings_path):
    hetero = load_graph(graph_path)
    store = load_embeddings(embeddings_path)
    if store.z_user.shape[0] != len(hetero.user_ids) or store.z_poi.shape[0] != len(hetero.poi_ids):
        raise ValidationError(f"{embeddings_path} does not match the nodes of {graph_path}")
    return hetero, store


def _write_rows(rows, columns, out, command, inputs, config):
    pd.DataFrame(rows, columns=columns).to_csv(
        out, index=False, lineterminator="\n", float_format="%.9g"
    )
    current_app.logger.info(f"{len(rows)} rows written to {out}")
    write_manifest(
        manifest_path(out),
        RunManifest(
            command=command,
            config=config,
            inputs={p: file_digest(p) for p in inputs},
            outputs=[out],
        ),
    )


@predict_bp.cli.command("predict", cls=PipelineCommand)
@click.option("--graph", "graph_path", required=True, type=click.Path(dir_okay=False))
@click.option("--embeddings", required=True, type=click.Path(dir_okay=False))
@click.option("--queries", required=True, type=click.Path(dir_okay=False),
              help="CSV with user_id,timestamp columns.")
@click.option("--k", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def predict(graph_path, embeddings, queries, k, out):
    """Top-k POIs for each (user, time) query."""
    hetero, store = _load_model(graph_path, embeddings)
    frame = _read_column_file(queries, ["user_id", "timestamp"])
    pairs = [(u.strip(), parse_timestamp(t)) for u, t in zip(frame["user_id"], frame["timestamp"])]
    current_app.logger.info(f"Scoring {len(pairs)} queries...")
    rows = prediction_rows(hetero, store, pairs, k)
    _write_rows(rows, PREDICTION_COLUMNS, out, "predict", [graph_path, embeddings, queries], {"k": k})


@predict_bp.cli.command("friends", cls=PipelineCommand)
@click.option("--graph", "graph_path", required=True, type=click.Path(dir_okay=False))
@click.option("--embeddings", required=True, type=click.Path(dir_okay=False))
@click.option("--users", required=True, type=click.Path(dir_okay=False), help="CSV with a user_id column.")
@click.option("--k", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def friends(graph_path, embeddings, users, k, out):
    """Top-k friend suggestions for each listed user."""
    hetero, store = _load_model(graph_path, embeddings)
    user_ids = [u.strip() for u in _read_column_file(users, ["user_id"])["user_id"]]
    rows = friend_rows(hetero, store, user_ids, k)
    _write_rows(rows, FRIEND_COLUMNS, out, "friends", [graph_path, embeddings, users], {"k": k})
