"""Command line entry point: ``qjacobi run <config>``, ``qjacobi verify``, ``qjacobi scene list``."""

import datetime
import hashlib
import logging
import os
import platform
import sys
import time

import click
import numpy as np
import scipy

from . import __version__
from .config import ConfigError, load_config
from .fieldio import dumps_json
from .scene_geometry import SCENES, SceneError
from .solver import SolverError, StabilityError
from .tasks import TASK_FUNCS, TaskError, task_verify


def _versions():
    return {"qjacobi": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _write(outdir, artifacts):
    os.makedirs(outdir, exist_ok=True)
    hashes = {}
    for name in sorted(artifacts):
        data = artifacts[name].encode("utf-8")
        with open(os.path.join(outdir, name), "wb") as fh:
            fh.write(data)
        hashes[name] = hashlib.sha256(data).hexdigest()
    return hashes


def _print_checks(checks):
    for c in checks:
        status = "PASS" if c["passed"] else "FAIL"
        extra = f" ({c['error']})" if "error" in c else ""
        click.echo(f"{status} {c['name']}: measured={c['measured']!r} tol={c['tolerance']!r}{extra}")


@click.group()
@click.version_option(__version__, prog_name="qjacobi")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Q-valued Jacobi fields: minimizers, frequency audits, blow-ups and extensions."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("-o", "--output", type=click.Path(file_okay=False), default=None,
              help="Override the output directory of the config.")
def run(config, output):
    """Run the task named in CONFIG and write its artifacts and manifest.json."""
    try:
        cfg = load_config(config)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    outdir = output or cfg.output
    t0 = time.perf_counter()
    checks = None
    try:
        if cfg.task == "verify":
            artifacts, warnings, checks = task_verify(cfg)
        else:
            artifacts, warnings = TASK_FUNCS[cfg.task](cfg)
    except (TaskError, SceneError, SolverError, StabilityError) as exc:
        raise click.ClickException(f"{cfg.task}: {exc}") from exc
    wall = time.perf_counter() - t0
    hashes = _write(outdir, artifacts)
    manifest = {
        "task": cfg.task,
        "config": os.path.abspath(config),
        "config_sha256": cfg.digest,
        "seed": cfg.seed,
        "versions": _versions(),
        "wall_time_s": wall,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "warnings": warnings,
        "artifacts": hashes,
    }
    if checks is not None:
        manifest["checks"] = checks
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        fh.write(dumps_json(manifest))
    if checks is not None:
        _print_checks(checks)
    for w in warnings:
        click.echo(f"warning: {w}", err=True)
    click.echo(f"{cfg.task}: wrote {len(hashes)} artifacts to {outdir} in {wall:.2f} s")
    if checks is not None and not all(c["passed"] for c in checks):
        sys.exit(1)


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--check", "names", multiple=True, help="Run only the named checks.")
def verify(seed, names):
    """Run the built-in checks and print one PASS/FAIL line each."""
    from .verify import run_checks
    checks = run_checks(seed, set(names) or None)
    _print_checks(checks)
    if not all(c["passed"] for c in checks):
        sys.exit(1)


@cli.group()
def scene():
    """Built-in scenes."""


@scene.command("list")
def scene_list():
    """List the built-in scenes and their parameters."""
    for name, desc in SCENES.items():
        click.echo(f"{name}: {desc}")


def main(argv=None):
    cli.main(args=argv, prog_name="qjacobi")


if __name__ == "__main__":
    main()
