import functools
import json
import sys

import click

from src.config.settings import EXIT_CODES, TASK_DEFAULTS, TOLERANCES
from src.tools.accounting import audit_model
from src.tools.checks import assert_gradients, assert_suite, gradcheck_model, run_equivariance_suite
from src.tools.model import ChiralNet, ModelConfig, build_model, resolve_layouts
from src.tools.tasks import SyntheticPoseTask, make_task
from src.tools.training import evaluate, plot_history, train
from src.utils.exceptions import ChiralityError
from src.utils.logger import setup_logger
from src.utils.utils import dumps, load_json, with_schema

logger = setup_logger(__name__)


def handle_errors(command):
    """Map library errors to their exit code and a JSON error object on stderr."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ChiralityError as e:
            logger.error(f"{command.__name__} failed: {e}", extra={"error": e.to_dict()})
            click.echo(json.dumps(e.to_dict()), err=True)
            sys.exit(e.exit_code)
        except Exception as e:
            logger.exception(f"Unexpected error in {command.__name__}: {e}")
            click.echo(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": 1}), err=True)
            sys.exit(EXIT_CODES["unexpected"])

    return wrapper


def load_layout(path):
    """A layout file holds any single entry accepted in a config's ``layouts`` section."""
    record = load_json(path, require_schema=False)
    record.pop("schema", None)
    return resolve_layouts({"layout": record})["layout"]


def emit(payload):
    click.echo(dumps(with_schema(payload)), nl=False)


@click.group()
def cli():
    """chirality-kit: chirality-equivariant layers, cost audits and a synthetic training harness."""
    pass


@cli.command("check-equivariance")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Model config JSON")
@click.option("--trials", default=100, show_default=True, type=click.IntRange(min=1), help="Random trials per check")
@click.option("--tol", default=TOLERANCES["equivariance"], show_default=True, type=float, help="Per-layer tolerance")
@handle_errors
def check_equivariance(config_path, trials, tol):
    """Run the full property suite on a freshly built model."""
    model = build_model(ModelConfig.load(config_path))
    frame = run_equivariance_suite(model, trials=trials, tol=tol, seed=model.config.seed)
    emit({"checks": frame.to_dict(orient="records"), "passed": bool(frame["passed"].all())})
    assert_suite(frame)


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Model config JSON")
@handle_errors
def audit(config_path):
    """Print the parameter and multiplication audit of every affine map."""
    report = audit_model(ModelConfig.load(config_path))
    click.echo(report.render(), err=True)
    emit(report.to_dict())


@cli.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Model config JSON")
@click.option("--task", "task_path", required=True, type=click.Path(dir_okay=False), help="Task JSON from gen-task")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Where to write the model")
@click.option("--limit-frac", default=None, type=click.FloatRange(0.0, 1.0, min_open=True), help="Training fraction")
@click.option("--plot", "plot_path", default=None, type=click.Path(dir_okay=False), help="Save the loss curve here")
@handle_errors
def train_command(config_path, task_path, out_path, limit_frac, plot_path):
    """Train a model on a synthetic task and save it."""
    config = ModelConfig.load(config_path)
    task = SyntheticPoseTask.load(task_path)
    result = train(config, task, limit_frac=limit_frac)
    result.model.save(out_path)
    if plot_path:
        plot_history(result.history, plot_path, title=f"{config.name} training loss")
    logger.info(f"Saved trained model to {out_path}")
    emit({"model": str(out_path), **result.to_dict()})


@cli.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False), help="Trained model JSON")
@click.option("--task", "task_path", required=True, type=click.Path(dir_okay=False), help="Task JSON")
@click.option("--mode", default="plain", show_default=True, type=click.Choice(["plain", "flip-averaged"]))
@handle_errors
def eval_command(model_path, task_path, mode):
    """Evaluate a trained model on the task's validation split (all samples if it has none)."""
    model = ChiralNet.load(model_path)
    task = SyntheticPoseTask.load(task_path)
    split = task.split()
    x, y = (split.x_val, split.y_val) if len(split.x_val) else (split.x_train, split.y_train)
    metrics = evaluate(model, x, y, task.in_layout, task.out_layout, mode=mode.replace("-", "_"))
    emit({"metrics": metrics})


@cli.command("gen-task")
@click.option("--layout", "layout_path", required=True, type=click.Path(dir_okay=False), help="Input layout JSON")
@click.option("--samples", default=TASK_DEFAULTS["samples"], show_default=True, type=click.IntRange(min=1))
@click.option("--noise", default=TASK_DEFAULTS["noise"], show_default=True, type=click.FloatRange(min=0.0))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Where to write the task")
@click.option("--kind", default=TASK_DEFAULTS["kind"], show_default=True, type=click.Choice(["linear", "mlp"]))
@click.option("--frames", default=TASK_DEFAULTS["frames"], show_default=True, type=click.IntRange(min=1))
@click.option("--out-dims", default=TASK_DEFAULTS["out_dims"], show_default=True, type=click.IntRange(min=1))
@handle_errors
def gen_task(layout_path, samples, noise, seed, out_path, kind, frames, out_dims):
    """Generate a chirally consistent synthetic pose-lifting task."""
    task = make_task(
        load_layout(layout_path), samples=samples, noise=noise, seed=seed, kind=kind, frames=frames, out_dims=out_dims
    )
    task.save(out_path)
    emit({"task": str(out_path), "samples": samples, "frames": frames, "kind": kind})


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Model config JSON")
@click.option("--eps", default=1e-6, show_default=True, type=float, help="Central-difference step")
@handle_errors
def gradcheck(config_path, eps):
    """Compare analytic gradients of every parameter block with central differences."""
    model = build_model(ModelConfig.load(config_path))
    errors = gradcheck_model(model, eps=eps, seed=model.config.seed)
    emit({"errors": errors, "max_error": max(errors.values(), default=0.0), "tolerance": TOLERANCES["gradcheck"]})
    assert_gradients(errors)


if __name__ == "__main__":
    cli()
