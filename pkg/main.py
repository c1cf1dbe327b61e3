import logging
import sys

import click

from core.errors import ConfigError, DataValidationError, GeomortError
from schemas.config import validate_config

# --- IMPORT COMMANDS ---
from commands import data, training, analysis

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _parse_overrides(pairs):
    overrides, bad = {}, []
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            bad.append(f"--set expects KEY=VALUE, got '{pair}'")
            continue
        overrides[key.strip()] = value.strip()
    return overrides, bad


# ==========================================
#   GROUP
# ==========================================

@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Flat key = value config file.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override one config key (repeatable).")
@click.option("--out", "output_dir", type=click.Path(file_okay=False),
              help="Output directory (overrides output_dir).")
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.pass_context
def cli(ctx, config_path, overrides, output_dir, log_level):
    """geomort: county mortality from satellite imagery, end to end."""
    logging.basicConfig(level=getattr(logging, log_level.upper()), format=LOG_FORMAT, force=True)
    values, bad = _parse_overrides(overrides)
    if output_dir:
        values["output_dir"] = output_dir
    if bad:
        raise click.UsageError("; ".join(bad))
    ctx.ensure_object(dict)
    ctx.obj["config"] = validate_config(config_path, values)


# --- REGISTER COMMANDS ---
cli.add_command(data.ingest)
cli.add_command(data.plan_grid)
cli.add_command(data.fetch)
cli.add_command(data.synth)
cli.add_command(data.split)
cli.add_command(training.train)
cli.add_command(training.eval_)
cli.add_command(training.embed)
cli.add_command(analysis.cluster)
cli.add_command(analysis.explain)
cli.add_command(analysis.report)


# ==========================================
#   ENTRY POINT
# ==========================================

def main(argv=None) -> int:
    """Run one command; returns the process exit code (0 / 1 / 2 config / 3 data)."""
    try:
        cli.main(args=argv, prog_name="geomort", standalone_mode=False)
    except click.Abort:
        click.echo("❌ Aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except DataValidationError as e:
        click.echo(f"❌ {e.describe()}", err=True)
        return e.exit_code
    except ConfigError as e:
        click.echo(f"❌ {e}", err=True)
        for line in e.errors:
            if line != str(e):
                click.echo(f"   - {line}", err=True)
        return e.exit_code
    except GeomortError as e:
        click.echo(f"❌ {e}", err=True)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
