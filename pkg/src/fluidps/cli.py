"""
Command-line interface for the fluid model toolkit.

Each subcommand builds an ExperimentConfig from an optional key=value config
file and its flags (flags win), runs one experiment driver and writes the
report tables to the output directory.
"""

import functools
import sys

import click
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, field_validator
from pydantic import ValidationError as ConfigError

from . import experiments
from . import validation
from .config import get_logger, settings
from .exceptions import CertificateError, FluidPSError, exit_code_for
from .reports import to_json, write_reports
from .utils import parse_range

logger = get_logger(__name__)


class ExperimentConfig(BaseModel):
    """One experiment record; mirrors the command-line flags."""

    model_config = ConfigDict(extra="forbid")

    dist: list[str] = Field(default_factory=list)
    init: list[str] = Field(default_factory=list)
    h: PositiveFloat | None = None
    x_max: PositiveFloat | None = None
    u_max: PositiveFloat | None = None
    times: list[float] = Field(default_factory=list)
    radii: list[float] = Field(default_factory=list)
    scales: list[float] = Field(default_factory=lambda: [50.0, 200.0, 800.0])
    c: list[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    eps: PositiveFloat = 0.5
    M: PositiveFloat = 4.0
    gap_eps: PositiveFloat | None = None
    anchor: PositiveFloat | None = None
    metric: str = "rho"
    seeds: list[int] = Field(default_factory=lambda: list(range(20)))
    output: str | None = None

    @field_validator("dist", "init", mode="before")
    @classmethod
    def _split_specs(cls, value):
        if isinstance(value, str):
            return [part.strip() for part in value.split("|") if part.strip()]
        return value

    @field_validator("times", "radii", "scales", "c", "seeds", mode="before")
    @classmethod
    def _parse_ranges(cls, value):
        if isinstance(value, (str, int, float)):
            return parse_range(value).tolist()
        return value

    @field_validator("times", "radii")
    @classmethod
    def _increasing(cls, value):
        if any(b < a for a, b in zip(value, value[1:])) or any(v < 0 for v in value):
            raise ValueError("must be nonnegative and increasing")
        return value

    @field_validator("metric")
    @classmethod
    def _metric(cls, value):
        if value not in ("rho", "tv"):
            raise ValueError("metric must be 'rho' or 'tv'")
        return value

    def grid(self) -> dict:
        return {"h": self.h, "x_max": self.x_max, "u_max": self.u_max}

    def one(self, field_name: str) -> str:
        values = getattr(self, field_name)
        if len(values) != 1:
            raise click.UsageError(f"Exactly one --{field_name} is required, got {len(values)}.")
        return values[0]


def load_config(config_path: str | None, **flags) -> ExperimentConfig:
    """Config file values (keys case-insensitive) overridden by the flags that were given."""
    values = {}
    if config_path:
        values = {k.lower(): v for k, v in dotenv_values(config_path).items() if v is not None}
        logger.info(f"Loaded experiment config from {config_path}")
    for key, value in flags.items():
        if value is None or value == ():
            continue
        values[key] = list(value) if isinstance(value, tuple) else value
    return ExperimentConfig(**values)


def handle_errors(command):
    """Maps library errors to exit codes: 2 for numerical certificates, 1 otherwise."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return command(*args, **kwargs)
        except (FluidPSError, ConfigError, OSError) as e:
            logger.error(f"CLI: {ctx.info_name} failed: {e}")
            click.secho(f"Error: {e}", fg="red", err=True)
            ctx.exit(exit_code_for(e))

    return wrapper


def finish(result: experiments.ExperimentResult, cfg: ExperimentConfig):
    paths = write_reports(result.tables, cfg.output)
    for name, path in paths.items():
        click.echo(f"{name}: {path}")
    if result.breaches:
        for breach in result.breaches:
            click.secho(f"Threshold breach: {breach}", fg="yellow", err=True)
        raise CertificateError(f"{len(result.breaches)} check(s) exceeded their thresholds.")


def common_options(command):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="key=value experiment file."),
        click.option("--output", type=click.Path(file_okay=False), default=None, help="Report directory (default: OUTPUT_DIR)."),
        click.option("--h", type=float, default=None, help="Grid step."),
        click.option("--xmax", "x_max", type=float, default=None, help="State-space extent."),
        click.option("--umax", "u_max", type=float, default=None, help="Service-time extent."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


@click.group()
def cli():
    """Fluid model of the critical processor-sharing queue."""
    pass


@cli.command()
@common_options
@click.option("--dist", multiple=True, help="Service distribution spec, e.g. exp:rate=1.")
@click.option("--t", "times", default=None, help="Blackwell sweep times, e.g. 0:10:90.")
@handle_errors
def renewal(config_path, output, h, x_max, u_max, dist, times):
    """Tabulates U_e and sweeps the Blackwell discrepancy."""
    logger.info("CLI: Starting renewal computation...")
    cfg = load_config(config_path, dist=dist, times=times, output=output, h=h, x_max=x_max, u_max=u_max)
    result = experiments.renewal_experiment(cfg.one("dist"), cfg.h, cfg.u_max, cfg.times or None)
    finish(result, cfg)
    logger.info("CLI: Renewal computation completed successfully.")


@cli.command()
@common_options
@click.option("--dist", multiple=True, help="Service distribution spec.")
@click.option("--init", multiple=True, help="Initial measure spec, e.g. uniformdensity:a=0,b=2,mass=1.")
@click.option("--t", "times", default=None, help="Snapshot times, e.g. 0:1:20.")
@handle_errors
def solve(config_path, output, h, x_max, u_max, dist, init, times):
    """Solves the fluid model and writes snapshots, S̄, Z̄ and residuals."""
    logger.info("CLI: Starting fluid solve...")
    cfg = load_config(config_path, dist=dist, init=init, times=times, output=output, h=h, x_max=x_max, u_max=u_max)
    result = experiments.solve_experiment(cfg.one("dist"), cfg.one("init"), cfg.times or [0.0], **cfg.grid())
    finish(result, cfg)
    logger.info("CLI: Fluid solve completed successfully.")


@cli.command(name="invariant-check")
@common_options
@click.option("--dist", multiple=True, help="Service distribution spec (repeatable).")
@click.option("--c", "c", default=None, help="Multiples of nu_e, e.g. 0.5,1,2.")
@click.option("--t", "times", default=None, help="Times, default 0:1:20.")
@handle_errors
def invariant_check(config_path, output, h, x_max, u_max, dist, c, times):
    """Checks that c·ν_e stays put."""
    cfg = load_config(config_path, dist=dist, c=c, times=times, output=output, h=h, x_max=x_max, u_max=u_max)
    dists = cfg.dist or ["exp:rate=1", "uniform:a=0,b=2"]
    result = experiments.invariant_experiment(dists, cfg.c, cfg.times or parse_range("0:1:20").tolist(), **cfg.grid())
    finish(result, cfg)


@cli.command()
@common_options
@click.option("--dist", multiple=True, help="Service distribution spec.")
@click.option("--init", multiple=True, help="Initial measure spec.")
@click.option("--t", "times", default=None, help="Times.")
@handle_errors
def converge(config_path, output, h, x_max, u_max, dist, init, times):
    """Distances from μ̄(t) to its limit κ·ν_e."""
    cfg = load_config(config_path, dist=dist, init=init, times=times, output=output, h=h, x_max=x_max, u_max=u_max)
    result = experiments.convergence_experiment(cfg.one("dist"), cfg.one("init"), cfg.times or [0.0], **cfg.grid())
    finish(result, cfg)


@cli.command()
@common_options
@click.option("--dist", multiple=True, help="Service distribution spec.")
@click.option("--init", multiple=True, help="Initial measure spec (repeatable).")
@click.option("--metric", type=click.Choice(["rho", "tv"]), default=None)
@click.option("--eps", type=float, default=None)
@click.option("--M", "M", type=float, default=None, help="Moment ball radius.")
@click.option("--t", "times", default=None, help="Times, e.g. 50:50:500.")
@click.option("--anchor", type=float, default=None, help="Time at which the bound constant is fixed.")
@handle_errors
def rates(config_path, output, h, x_max, u_max, dist, init, metric, eps, M, times, anchor):
    """Fits and checks power-law convergence rates; prints the JSON report."""
    cfg = load_config(
        config_path, dist=dist, init=init, metric=metric, eps=eps, M=M, times=times, anchor=anchor,
        output=output, h=h, x_max=x_max, u_max=u_max,
    )
    if not cfg.init or not cfg.times:
        raise click.UsageError("rates needs at least one --init and a --t range.")
    result = experiments.rates_experiment(
        cfg.one("dist"), cfg.init, cfg.metric, cfg.eps, cfg.M, cfg.times, cfg.anchor, **cfg.grid()
    )
    click.echo(to_json(result.tables["rates"]))
    finish(result, cfg)


@cli.command()
@common_options
@click.option("--dist", multiple=True, help="Service distribution spec.")
@click.option("--init", multiple=True, help="Initial measure spec.")
@click.option("--r", "radii", default=None, help="Radii, e.g. 0:0.5:10.")
@click.option("--eps", type=float, default=None, help="Check gap(r) <= C r^-eps when given.")
@click.option("--anchor", type=float, default=None)
@handle_errors
def gap(config_path, output, h, x_max, u_max, dist, init, radii, eps, anchor):
    """Sweeps the stationarity gap ∫_r |T̄' - κ| over r."""
    cfg = load_config(
        config_path, dist=dist, init=init, radii=radii, gap_eps=eps, anchor=anchor,
        output=output, h=h, x_max=x_max, u_max=u_max,
    )
    result = experiments.gap_experiment(
        cfg.one("dist"), cfg.one("init"), cfg.radii or [0.0], cfg.gap_eps, cfg.anchor, **cfg.grid()
    )
    finish(result, cfg)


@cli.command()
@common_options
@click.option("--dist", multiple=True, help="Service distribution spec.")
@click.option("--init", multiple=True, help="Initial measure spec.")
@click.option("--scales", default=None, help="Scales r, e.g. 50,200,800.")
@click.option("--t", "times", default=None, help="Snapshot times.")
@click.option("--seeds", default=None, help="Seeds, e.g. 0:1:19.")
@handle_errors
def simulate(config_path, output, h, x_max, u_max, dist, init, scales, times, seeds):
    """Simulates the queue and compares fluid-scaled snapshots with the fluid model."""
    cfg = load_config(
        config_path, dist=dist, init=init, scales=scales, times=times, seeds=seeds,
        output=output, h=h, x_max=x_max, u_max=u_max,
    )
    result = experiments.simulation_experiment(
        cfg.one("dist"), cfg.one("init"), cfg.scales, cfg.times or [1.0], cfg.seeds, **cfg.grid()
    )
    finish(result, cfg)


@cli.command()
@click.option("--output", type=click.Path(file_okay=False), default=None)
@click.option("--quick", is_flag=True, help="Skip the long-horizon checks.")
@handle_errors
def selftest(output, quick):
    """Runs the acceptance suite and writes selftest.json."""
    logger.info("CLI: Starting self-test...")
    click.secho("--- Running Self-Test ---", fg="cyan", bold=True, err=True)
    results = validation.run_selftest(quick=quick)
    write_reports({"selftest": results}, output or settings.OUTPUT_DIR)
    failed = [name for name, check in results["checks"].items() if not check["passed"]]
    if failed:
        raise CertificateError(f"Self-test failed: {', '.join(failed)}")
    click.secho("Self-test passed.", fg="green", err=True)


def run(argv=None) -> int:
    """Runs the CLI on ``argv`` and returns the exit code instead of exiting."""
    try:
        code = cli.main(args=argv, prog_name="fluidps", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        click.secho("Aborted.", fg="red", err=True)
        return 1
    return code if isinstance(code, int) else 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
