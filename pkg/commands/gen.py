import click
from flask import Blueprint, current_app

from app import DEFAULTS
from commands import PipelineCommand, file_digest, manifest_path, setting, timed, write_manifest
from engine.datagen import gen_checkins, gen_population, write_dataset
from models import GenConfig, RunManifest

gen_bp = Blueprint("gen", __name__, cli_group=None)

_defaults = GenConfig()


@gen_bp.cli.command("gen", cls=PipelineCommand)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--n-users", type=click.IntRange(min=1), default=_defaults.n_users, show_default=True)
@click.option("--n-pois", type=click.IntRange(min=1), default=_defaults.n_pois, show_default=True)
@click.option("--n-clusters", type=click.IntRange(min=1), default=_defaults.n_clusters, show_default=True)
@click.option("--records-per-user", type=click.IntRange(min=1), default=_defaults.records_per_user, show_default=True)
@click.option("--weeks", type=click.IntRange(min=1), default=_defaults.weeks, show_default=True)
@click.option("--cluster-poi-affinity", type=float, default=_defaults.cluster_poi_affinity, show_default=True)
@click.option("--temporal-sharpness", type=float, default=_defaults.temporal_sharpness, show_default=True)
@click.option("--cluster-poi-count", type=click.IntRange(min=1), default=None,
              help="POIs preferred by each cluster (default: 18% of POIs).")
@click.option("--seed", type=int, default=None, show_default=str(DEFAULTS["SEED"]))
def gen(out_dir, n_users, n_pois, n_clusters, records_per_user, weeks,
        cluster_poi_affinity, temporal_sharpness, cluster_poi_count, seed):
    """Generate the synthetic check-in benchmark with planted clusters."""
    config = GenConfig(
        n_users=n_users,
        n_pois=n_pois,
        n_clusters=n_clusters,
        records_per_user=records_per_user,
        seed=setting(seed, "SEED"),
        weeks=weeks,
        cluster_poi_affinity=cluster_poi_affinity,
        temporal_sharpness=temporal_sharpness,
        cluster_poi_count=cluster_poi_count,
    ).validate()

    timings = {}
    current_app.logger.info(f"Generating {config.n_users} users over {config.n_pois} POIs...")
    with timed(timings, "population"):
        venues, truth = gen_population(config)
    with timed(timings, "checkins"):
        data, coldstart = gen_checkins(config, truth, venues)
    with timed(timings, "write"):
        paths = write_dataset(out_dir, venues, truth, data, coldstart)
    current_app.logger.info(f"Dataset written to {out_dir}")

    manifest = RunManifest(
        command="gen",
        config=vars(config),
        seed=config.seed,
        timings=timings,
        outputs=sorted(paths.values()),
    )
    write_manifest(manifest_path(out_dir), manifest)
    for name in sorted(paths):
        click.echo(f"{name}: {paths[name]} sha256={file_digest(paths[name])}")
