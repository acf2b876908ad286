"""Command-line entry point: collect, train, make-ref, run, encode.

Every command takes ``--config`` (TOML) and ``--seed``.  Results are printed as
JSON on stdout; failures exit nonzero with a JSON error object on stderr.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import Config, ConfigError, load_config

EXIT_ERROR = 1


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2, default=_jsonable))


def _jsonable(obj):
    if isinstance(obj, (np.ndarray, np.generic)):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _fail(command: str, exc: BaseException) -> None:
    err = {"command": command, "error": type(exc).__name__, "message": str(exc)}
    cause = getattr(exc, "cause", None)
    if cause is not None:
        err["cause"] = {"error": type(cause).__name__, "message": str(cause)}
    tick = getattr(exc, "tick", None)
    if tick is not None:
        err["tick"] = tick
    click.echo(json.dumps(err), err=True)
    sys.exit(EXIT_ERROR)


def guarded(command: str):
    """Turn any exception into a JSON error on stderr and a nonzero exit."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except click.exceptions.Exit:
                raise
            except click.ClickException:
                raise
            except Exception as exc:  # noqa: BLE001 - reported as JSON
                _fail(command, exc)

        return inner

    return wrap


def _load(config_path) -> Config:
    return load_config(config_path)


def _world(cfg: Config, seed: int = 0):
    from .harness import World

    return World(plant=cfg.plant, views=cfg.views(), seed=seed)


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                             default=None, help="TOML configuration file.")
seed_option = click.option("--seed", type=int, default=None, help="Override the configured seed.")


@click.group()
@click.version_option(__version__, prog_name="bezierbot")
def main():
    """Visual self-modelling and shape-position control of a simulated continuum robot."""


@main.command()
@config_option
@seed_option
@click.option("--samples", type=int, default=None, help="Number of transitions to record.")
@guarded("collect")
def collect(config_path, seed, samples):
    """Record shape and position transition datasets by random-walk exploration."""
    from .harness import collect as run_collect

    cfg = _load(config_path)
    seed = 0 if seed is None else seed
    n = cfg.collect.samples if samples is None else samples
    if n < 0:
        raise ConfigError("samples must be non-negative")
    start = time.time()
    shape_ds, pos_ds, skipped = run_collect(n, seed=seed, bound=cfg.collect.bound,
                                            dt=cfg.experiment.dt, world=_world(cfg, seed))
    out_s, out_p = cfg.path(cfg.collect.shape_out), cfg.path(cfg.collect.position_out)
    for path, ds in ((out_s, shape_ds), (out_p, pos_ds)):
        path.parent.mkdir(parents=True, exist_ok=True)
        ds.to_csv(path)
    _emit({"shape": out_s, "position": out_p, "samples": len(shape_ds), "skipped": skipped,
           "seed": seed, "seconds": round(time.time() - start, 2)})


@main.command()
@config_option
@seed_option
@click.option("--kind", type=click.Choice(["shape", "position"]), required=True)
@click.option("--data", "data_path", type=click.Path(dir_okay=False), default=None,
              help="Dataset CSV; defaults to the configured collection output.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Model JSON; defaults to the experiment's model path.")
@click.option("--epochs", type=int, default=None)
@guarded("train")
def train(config_path, seed, kind, data_path, out_path, epochs):
    """Fit a dynamics model to a transition dataset."""
    from . import node
    from .harness import file_hash

    cfg = _load(config_path)
    tcfg = cfg.train
    if seed is not None:
        tcfg = replace(tcfg, seed=seed)
    if epochs is not None:
        tcfg = replace(tcfg, epochs=epochs)
    default_data = cfg.collect.shape_out if kind == "shape" else cfg.collect.position_out
    default_out = cfg.experiment.shape_model if kind == "shape" else cfg.experiment.position_model
    data = Path(data_path) if data_path else cfg.path(default_data)
    out = Path(out_path) if out_path else cfg.path(default_out)
    try:
        ds = node.Dataset.from_csv(data)
    except (OSError, ValueError) as exc:
        raise type(exc)(f"{data}: {exc}") from exc
    start = time.time()
    model, report = node.train(ds, tcfg, kind=kind)
    out.parent.mkdir(parents=True, exist_ok=True)
    node.save_model(model, out)
    summary = {"model": out, "kind": kind, "dataset": data, "dataset_sha256": file_hash(data),
               "model_sha256": file_hash(out), "best_epoch": report.best_epoch,
               "n_train": report.n_train, "n_val": report.n_val,
               "final_train_loss": report.train_loss[-1], "best_val_loss": min(report.val_loss),
               "train_config": asdict(tcfg), "seconds": round(time.time() - start, 2)}
    report_path = out.with_suffix(".report.json")
    report_path.write_text(json.dumps({**summary, "train_loss": report.train_loss,
                                       "val_loss": report.val_loss}, default=_jsonable, indent=2) + "\n")
    _emit(summary)


@main.command("make-ref")
@config_option
@seed_option
@click.option("--kind", type=click.Choice(["infinity", "eight", "random"]), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@guarded("make-ref")
def make_ref(config_path, seed, kind, out_path):
    """Generate a feasible reference by replaying plant poses through the encoder."""
    from .harness import make_reference

    cfg = _load(config_path)
    rc = cfg.reference
    kind = rc.kind if kind is None else kind
    seed = cfg.experiment.seed if seed is None else seed
    ref = make_reference(kind, _world(cfg, seed), duration=rc.duration, dt=cfg.experiment.dt,
                         amplitude_x=rc.amplitude_x, amplitude_z=rc.amplitude_z, depth=rc.depth,
                         u_limit=rc.u_limit, seed=seed)
    out = Path(out_path) if out_path else cfg.path(rc.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ref.to_csv(out)
    _emit({"reference": out, "kind": kind, "points": len(ref), "seed": seed})


def _obstacle(cfg: Config, world, reference, u0, d_w):
    from . import harness

    oc = cfg.experiment.obstacle
    if oc.placement == "trajectory":
        return harness.ObstaclePath.from_csv(cfg.path(oc.trajectory), oc.radius)
    if oc.placement == "en-route":
        return harness.en_route_obstacle(world, u0, reference, oc.fraction, d_w, radius=oc.radius,
                                          offset=oc.offset)
    if oc.placement == "approach":
        return harness.approach_sweep(world, reference.u[-1], cfg.experiment.duration,
                                      oc.body_fraction, oc.direction, oc.start, oc.stop, oc.radius)
    return harness.ObstaclePath.static(oc.position, oc.radius)


@main.command()
@config_option
@seed_option
@click.option("--task", type=click.Choice(["regulate", "track", "obstacle-regulate", "self-motion"]),
              default=None)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@guarded("run")
def run(config_path, seed, task, out_dir):
    """Run one closed-loop experiment and write its log, plots and summary."""
    from . import control, harness, node

    cfg = _load(config_path)
    exp = cfg.experiment
    if task is not None:
        exp = replace(exp, task=task)
    if seed is not None:
        exp = replace(exp, seed=seed)
    cfg = replace(cfg, experiment=exp)
    out = Path(out_dir) if out_dir else cfg.path(exp.out_dir)
    world = _world(cfg, exp.seed)
    n_shape = world.encoding.state_dim
    shape_path, pos_path = cfg.path(exp.shape_model), cfg.path(exp.position_model)
    shape_model = node.load_model(shape_path, n_shape, cfg.plant.m)
    position_model = node.load_model(pos_path, 3, cfg.plant.m)
    if exp.reference:
        ref_path = cfg.path(exp.reference)
        reference = harness.Trajectory.from_csv(ref_path)
    else:
        ref_path = None
        limit = exp.target_u_limit or harness.TARGET_U_LIMIT[exp.task]
        reference = harness.make_reference("random", world, u_limit=limit, seed=exp.seed)
    u0 = np.asarray(exp.initial_u, float) if exp.initial_u else harness.initial_actuation(exp.task, reference)
    gains = exp.gains or control.default_gains(exp.task)
    obstacle = None
    if exp.task in ("obstacle-regulate", "self-motion"):
        obstacle = _obstacle(cfg, world, reference, u0, exp.avoidance.d_w)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.to_dict()
    snapshot["experiment"]["gains"] = asdict(gains)
    (out / "config.json").write_text(json.dumps(snapshot, indent=2, default=_jsonable) + "\n")
    provenance = {"version": __version__, "seed": exp.seed,
                  "shape_model": {"path": shape_path, "sha256": harness.file_hash(shape_path)},
                  "position_model": {"path": pos_path, "sha256": harness.file_hash(pos_path)},
                  "reference": ({"path": ref_path, "sha256": harness.file_hash(ref_path)}
                                if ref_path else {"random_seed": exp.seed})}
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, default=_jsonable) + "\n")
    reference.to_csv(out / "reference.csv")
    if obstacle is not None:
        obstacle.to_csv(out / "obstacle.csv")
    start = time.time()
    result = harness.run_task(exp.task, world, shape_model, position_model, reference,
                              exp.duration, exp.dt, gains, exp.avoidance, obstacle, u0,
                              exp.delta_u, out, tuple(exp.snapshot_ticks))
    _emit({"out_dir": out, "task": exp.task, "seconds": round(time.time() - start, 2),
           **result.summary})


@main.command()
@config_option
@click.argument("images", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Append the shape state as a CSV row to this file.")
@guarded("encode")
def encode(config_path, images, out_path):
    """Encode one PGM image per view into the stacked control-point state."""
    from .encoding import encode_views, read_pgm

    cfg = _load(config_path)
    world = _world(cfg)
    if len(images) != len(world.views):
        raise click.UsageError(f"expected {len(world.views)} images, got {len(images)}")
    x_s = encode_views([read_pgm(p) for p in images], world.encoding)
    if out_path:
        path = Path(out_path)
        head = "" if path.exists() else ",".join(f"xs_{i}" for i in range(len(x_s))) + "\n"
        with path.open("a") as fh:
            fh.write(head + ",".join(repr(float(v)) for v in x_s) + "\n")
    _emit({"images": list(images), "x_s": x_s})


if __name__ == "__main__":
    main()
