import logging
import sys

import click
from dotenv import load_dotenv
from flask import Flask
from flask.cli import FlaskGroup

load_dotenv()

# every key can be overridden with an EDHG_<KEY> environment variable
DEFAULTS = {
    "LOG": "INFO",
    "THREADS": 1,
    "SEED": 0,
    "DIM": 100,
    "NEGATIVES": 10,
    "ITERATIONS": 10_000_000,
    "LR_INITIAL": 0.025,
    "LR_FINAL": 1e-5,
    "MIN_CHECKINS": 100,
    "TRAIN_FRAC": 0.8,
    "STAY_GAP_MINUTES": 10,
    "POI_WINDOW_HOURS": 4.0,
    "PROGRESS": False,
}


def create_app(test_config=None):
    app = Flask(__name__)

    # --- Config ---
    app.config.from_mapping(DEFAULTS)
    app.config.from_prefixed_env("EDHG")
    if test_config:
        app.config.from_mapping(test_config)

    level = str(app.config["LOG"]).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    app.logger.debug(f"Log level {level}, threads {app.config['THREADS']}, seed {app.config['SEED']}")

    # --- Register blueprints ---
    from commands.covisit import covisit_bp
    from commands.evaluate import evaluate_bp
    from commands.gen import gen_bp
    from commands.graph import graph_bp
    from commands.predict import predict_bp
    from commands.train import train_bp

    app.register_blueprint(gen_bp)
    app.register_blueprint(graph_bp)
    app.register_blueprint(train_bp)
    app.register_blueprint(predict_bp)
    app.register_blueprint(evaluate_bp)
    app.register_blueprint(covisit_bp)
    return app


cli = FlaskGroup(
    name="edhg",
    help="Heterogeneous graph embedding pipeline for check-in data.",
    create_app=create_app,
    add_default_commands=False,
    add_version_option=False,
    load_dotenv=False,
)


def main(argv=None):
    try:
        code = cli.main(args=argv, prog_name="edhg", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        code = 1
    except click.ClickException as e:
        e.show()
        code = e.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        code = 1
    sys.exit(code or 0)


if __name__ == "__main__":
    main()
