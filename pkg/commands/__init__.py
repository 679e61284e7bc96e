import hashlib
import os
import tempfile
import time
from contextlib import contextmanager

import click
from flask import current_app

from models import ValidationError


class PipelineCommand(click.Command):
    """
    Command with the pipeline's exit codes: 1 for usage and validation
    errors, 2 for I/O errors.
    """

    def parse_args(self, ctx, args):
        try:
            return super().parse_args(ctx, args)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ValidationError as e:
            click.echo(f"Error: {e}", err=True)
            ctx.exit(1)
        except OSError as e:
            click.echo(f"Error: {e}", err=True)
            ctx.exit(2)


def setting(value, key):
    """Command-line value if given, else the app config value."""
    return current_app.config[key] if value is None else value


def file_digest(path):
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


@contextmanager
def timed(timings, stage):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = round(time.perf_counter() - start, 3)


def write_manifest(path, manifest):
    """Write the manifest JSON next to the outputs, atomically."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(prefix=".manifest-", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(manifest.to_json() + "\n")
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    current_app.logger.info(f"Manifest written to {path}")
    return path


def manifest_path(output):
    """`<dir>/manifest.json` for a directory, `<file>.manifest.json` otherwise."""
    if os.path.isdir(output):
        return os.path.join(output, "manifest.json")
    return f"{output}.manifest.json"
