import os

import click
import pandas as pd
from flask import Blueprint, current_app

from app import DEFAULTS
from commands import PipelineCommand, file_digest, manifest_path, setting, timed, write_manifest
from engine.graph import load_graph
from engine.sampling import connected_negative_rate, make_rng
from engine.train import JointTrainer, save_embeddings
from models import RunManifest, TrainConfig, Variant

train_bp = Blueprint("train", __name__, cli_group=None)

CONNECTED_DRAWS = 10_000


@train_bp.cli.command("train", cls=PipelineCommand)
@click.option("--graph", "graph_path", required=True, type=click.Path(dir_okay=False), help="Graph file.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Embedding file to write.")
@click.option("--iterations", type=click.IntRange(min=1), default=None, show_default=str(DEFAULTS["ITERATIONS"]))
@click.option("--negatives", type=click.IntRange(min=0), default=None, show_default=str(DEFAULTS["NEGATIVES"]))
@click.option("--dim", type=click.IntRange(min=1), default=None, show_default=str(DEFAULTS["DIM"]))
@click.option("--lr-initial", type=float, default=None, show_default=str(DEFAULTS["LR_INITIAL"]))
@click.option("--lr-final", type=float, default=None, show_default=str(DEFAULTS["LR_FINAL"]))
@click.option("--seed", type=int, default=None, show_default=str(DEFAULTS["SEED"]))
@click.option("--threads", type=click.IntRange(min=1), default=None, show_default=str(DEFAULTS["THREADS"]))
@click.option("--variant", type=click.Choice([v.value for v in Variant]), default=Variant.EDHG.value,
              show_default=True)
def train(graph_path, out, iterations, negatives, dim, lr_initial, lr_final, seed, threads, variant):
    """Learn node embeddings from a graph file."""
    config = TrainConfig(
        iterations=setting(iterations, "ITERATIONS"),
        negatives=setting(negatives, "NEGATIVES"),
        dim=setting(dim, "DIM"),
        lr_initial=setting(lr_initial, "LR_INITIAL"),
        lr_final=setting(lr_final, "LR_FINAL"),
        seed=setting(seed, "SEED"),
        threads=setting(threads, "THREADS"),
        variant=variant,
        progress=bool(current_app.config["PROGRESS"]),
    ).validate()

    timings = {}
    with timed(timings, "load"):
        hetero = load_graph(graph_path)
    current_app.logger.info(f"Training {config.variant.value} embeddings on {hetero!r}...")
    with timed(timings, "train"):
        trainer = JointTrainer(hetero, config)
        store = trainer.run()
    with timed(timings, "write"):
        save_embeddings(store, out)
    current_app.logger.info(f"Embeddings written to {out}")

    rates = {}
    for g, noise in zip(trainer.views, trainer.noises):
        rates[g.name] = connected_negative_rate(g, noise, CONNECTED_DRAWS, make_rng(config.seed))
        current_app.logger.info(f"  {g.name}: {rates[g.name]:.4f} of negatives are connected to their target")

    losses = f"{os.path.splitext(out)[0]}.losses.csv"
    pd.DataFrame(
        {"step": [s.step for s in trainer.history], "loss": [s.estimate for s in trainer.history]},
        columns=["step", "loss"],
    ).to_csv(losses, index=False, lineterminator="\n")

    snapshot = {k: v for k, v in vars(config).items() if k != "variant"}
    snapshot["variant"] = config.variant.value
    write_manifest(
        manifest_path(out),
        RunManifest(
            command="train",
            config=snapshot,
            seed=config.seed,
            inputs={graph_path: file_digest(graph_path)},
            timings=timings,
            outputs=[out, losses],
            diagnostics={"connected_negative_rate": rates},
        ),
    )
