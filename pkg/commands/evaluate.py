import os

import click
import pandas as pd
from flask import Blueprint, current_app

from app import DEFAULTS
from commands import PipelineCommand, file_digest, manifest_path, setting, timed, write_manifest
from engine.datagen import cluster_purity, load_truth
from engine.evaluation import (
    DEFAULT_KS,
    NbcPredictor,
    PopularityPredictor,
    RandomPredictor,
    accuracy_at_k,
    active_users,
    covisit,
    covisit_truth,
    learning_curve,
    learning_curve_rows,
    location_truth,
    mrr_curve,
    nbc_fit,
    rank_positions,
    split_chrono,
    stays_by_user,
    visit_counts,
)
from engine.graph import build_hetero, load_graph, with_poi_poi
from engine.ingest import load_dataset, parse_checkins
from engine.predict import EmbeddingPredictor, friend_scores
from engine.train import JointTrainer, load_embeddings
from models import TIME_MODES, Dataset, RunManifest, Split, TrainConfig, ValidationError, Variant

evaluate_bp = Blueprint("evaluate", __name__, cli_group=None)

ACCURACY_COLUMNS = ["protocol", "model", "bucket", "k", "hits", "n", "accuracy"]


def _int_list(ctx, param, value):
    try:
        values = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated integers")
    if not values or min(values) < 1:
        raise click.BadParameter("expected positive integers")
    return values


def _float_list(ctx, param, value):
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated numbers")


def _load_split(checkins, venues, min_checkins, train_frac):
    data = load_dataset(checkins, venues, setting(min_checkins, "MIN_CHECKINS"))
    return data, split_chrono(data, setting(train_frac, "TRAIN_FRAC"))


def _coldstart_split(path, train):
    """Train split paired with the censored records of known users."""
    records = [c for c in parse_checkins(path) if c.user_id in train.users and c.poi_id in train.venues]
    return Split(train, Dataset(tuple(records), train.venues, train.users))


def _write_csv(rows, columns, path):
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, lineterminator="\n", float_format="%.9g")
    current_app.logger.info(f"Report written to {path}")
    return path


@evaluate_bp.cli.command("eval", cls=PipelineCommand)
@click.option("--checkins", required=True, type=click.Path(dir_okay=False))
@click.option("--venues", required=True, type=click.Path(dir_okay=False))
@click.option("--graph", "graph_path", required=True, type=click.Path(dir_okay=False),
              help="Graph built on the train split.")
@click.option("--embeddings", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--ks", default=",".join(map(str, DEFAULT_KS)), show_default=True, callback=_int_list)
@click.option("--min-checkins", type=int, default=None, show_default=str(DEFAULTS["MIN_CHECKINS"]))
@click.option("--train-frac", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=None,
              show_default=str(DEFAULTS["TRAIN_FRAC"]))
@click.option("--coldstart", type=click.Path(dir_okay=False), default=None,
              help="Censored check-ins to score as an unvisited-only test set.")
@click.option("--truth", type=click.Path(dir_okay=False), default=None,
              help="Planted clusters; adds cluster purity.")
@click.option("--active", default="10,50,100", show_default=True, callback=_int_list,
              help="Active-user counts for the MRR curve.")
@click.option("--gap-minutes", type=int, default=None, show_default=str(DEFAULTS["STAY_GAP_MINUTES"]))
@click.option("--seed", type=int, default=None, show_default=str(DEFAULTS["SEED"]))
def evaluate(checkins, venues, graph_path, embeddings, out_dir, ks, min_checkins, train_frac,
             coldstart, truth, active, gap_minutes, seed):
    """Accuracy@k against the baselines, friend MRR and cluster purity."""
    timings = {}
    with timed(timings, "load"):
        _, split = _load_split(checkins, venues, min_checkins, train_frac)
        hetero = load_graph(graph_path)
        store = load_embeddings(embeddings)
    if tuple(hetero.user_ids) != split.train.user_ids or tuple(hetero.poi_ids) != split.train.poi_ids:
        raise ValidationError(f"{graph_path} was not built from {checkins}")
    os.makedirs(out_dir, exist_ok=True)

    protocols = [("chrono", split)]
    if coldstart:
        protocols.append(("coldstart", _coldstart_split(coldstart, split.train)))

    current_app.logger.info("Scoring predictors...")
    predictors = {
        "embedding": EmbeddingPredictor(store, hetero.time_mode),
        "nbc": NbcPredictor(nbc_fit(split.train, hetero.time_mode)),
        "popularity": PopularityPredictor(split.train),
        "random": RandomPredictor(len(hetero.poi_ids), setting(seed, "SEED")),
    }
    rows = []
    with timed(timings, "accuracy"):
        for protocol, test_split in protocols:
            for name, predictor in predictors.items():
                report = accuracy_at_k(predictor, test_split, ks)
                rows += [{"protocol": protocol, "model": name, **row} for row in report.rows()]
                current_app.logger.info(
                    f"  {protocol}/{name}: total acc@{report.ks[-1]} = {report.accuracy('total', report.ks[-1]):.4f}"
                )
            predictors["embedding"].clear()
    outputs = [_write_csv(rows, ACCURACY_COLUMNS, os.path.join(out_dir, "accuracy.csv"))]

    current_app.logger.info("Scoring friend suggestions...")
    with timed(timings, "mrr"):
        ranked_users = active_users(split.train, max(active))
        suggestions = {u: friend_scores(store, u) for u in ranked_users}
        truths = {
            "covisit": covisit_truth(
                covisit(stays_by_user(split.train, setting(gap_minutes, "STAY_GAP_MINUTES"))),
                ranked_users,
            ),
            "location": location_truth(rank_positions(visit_counts(split.train)), ranked_users),
        }
        mrr_rows = []
        for proxy, truth_sets in truths.items():
            # users without a truth set for this proxy are left out of its curve
            eligible = [u for u in ranked_users if u in truth_sets]
            n_values = [n for n in active if n <= len(eligible)]
            if not n_values:
                current_app.logger.warning(f"  {proxy}: only {len(eligible)} users have a truth set, no MRR")
                continue
            for n, value in mrr_curve(suggestions, truth_sets, eligible, n_values):
                mrr_rows.append({"proxy": proxy, "n_active": n, "mrr": value})
                current_app.logger.info(f"  {proxy} MRR over {n} active users = {value:.4f}")
    outputs.append(_write_csv(mrr_rows, ["proxy", "n_active", "mrr"], os.path.join(out_dir, "mrr.csv")))

    inputs = [checkins, venues, graph_path, embeddings]
    if truth:
        cluster_of = load_truth(truth)
        purity = cluster_purity(store, hetero.user_ids, cluster_of, k=2)
        current_app.logger.info(f"  2-NN cluster purity = {purity:.4f}")
        outputs.append(_write_csv([{"k": 2, "purity": purity}], ["k", "purity"], os.path.join(out_dir, "purity.csv")))
        inputs.append(truth)
    if coldstart:
        inputs.append(coldstart)

    write_manifest(
        manifest_path(out_dir),
        RunManifest(
            command="eval",
            config={"ks": ks, "active": active, "time_mode": hetero.time_mode},
            seed=setting(seed, "SEED"),
            inputs={p: file_digest(p) for p in inputs},
            timings=timings,
            outputs=outputs,
        ),
    )


@evaluate_bp.cli.command("curve", cls=PipelineCommand)
@click.option("--checkins", required=True, type=click.Path(dir_okay=False))
@click.option("--venues", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="CSV to write.")
@click.option("--fractions", default="0.2,0.4,0.6,0.8,1.0", show_default=True, callback=_float_list)
@click.option("--ks", default=",".join(map(str, DEFAULT_KS)), show_default=True, callback=_int_list)
@click.option("--time-mode", type=click.Choice(list(TIME_MODES)), default="28", show_default=True)
@click.option("--variant", type=click.Choice([v.value for v in Variant]), default=Variant.EDHG.value,
              show_default=True)
@click.option("--min-checkins", type=int, default=None, show_default=str(DEFAULTS["MIN_CHECKINS"]))
@click.option("--train-frac", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=None,
              show_default=str(DEFAULTS["TRAIN_FRAC"]))
@click.option("--iterations", type=click.IntRange(min=1), default=None, show_default=str(DEFAULTS["ITERATIONS"]))
@click.option("--negatives", type=click.IntRange(min=0), default=None, show_default=str(DEFAULTS["NEGATIVES"]))
@click.option("--dim", type=click.IntRange(min=1), default=None, show_default=str(DEFAULTS["DIM"]))
@click.option("--seed", type=int, default=None, show_default=str(DEFAULTS["SEED"]))
def curve(checkins, venues, out, fractions, ks, time_mode, variant, min_checkins, train_frac,
          iterations, negatives, dim, seed):
    """Accuracy as each user's train history grows, embedding model against NBC."""
    _, split = _load_split(checkins, venues, min_checkins, train_frac)
    config = TrainConfig(
        iterations=setting(iterations, "ITERATIONS"),
        negatives=setting(negatives, "NEGATIVES"),
        dim=setting(dim, "DIM"),
        lr_initial=current_app.config["LR_INITIAL"],
        lr_final=current_app.config["LR_FINAL"],
        seed=setting(seed, "SEED"),
        variant=variant,
        progress=bool(current_app.config["PROGRESS"]),
    ).validate()
    window = current_app.config["POI_WINDOW_HOURS"]

    def train_embedding(train):
        hetero = build_hetero(train, time_mode)
        if config.variant == Variant.EDHG_POI:
            hetero = with_poi_poi(hetero, train, window)
        return EmbeddingPredictor(JointTrainer(hetero, config).run(), time_mode)

    def evaluate_split(predictor, test_split):
        return accuracy_at_k(predictor, test_split, ks)

    rows = []
    for name, train_fn in (
        ("embedding", train_embedding),
        ("nbc", lambda train: NbcPredictor(nbc_fit(train, time_mode))),
    ):
        current_app.logger.info(f"Learning curve for {name}...")
        curve_points = learning_curve(split, fractions, train_fn, evaluate_split)
        rows += [{"model": name, **row} for row in learning_curve_rows(curve_points)]
    _write_csv(rows, ["model", "fraction", "bucket", "k", "accuracy"], out)

    write_manifest(
        manifest_path(out),
        RunManifest(
            command="curve",
            config={"fractions": fractions, "ks": ks, "time_mode": time_mode, "variant": variant,
                    "iterations": config.iterations, "dim": config.dim, "negatives": config.negatives},
            seed=config.seed,
            inputs={checkins: file_digest(checkins), venues: file_digest(venues)},
            outputs=[out],
        ),
    )
