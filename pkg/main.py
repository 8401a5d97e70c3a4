import logging
import sys
from typing import List, Optional

import click
import typer
from pydantic import ValidationError as ConfigValidationError
from rich.console import Console
from rich.logging import RichHandler

from commands import backend, embed, evaluate, split, train
from kws.errors import PipelineError, ValidationError

logging.basicConfig(
    level=logging.INFO,
    format="%(message)s",
    handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
)
logger = logging.getLogger(__name__)

app = typer.Typer(help="Keyword spotting with metric-learned embeddings.", add_completion=False)

app.command("split")(split.split)
app.command("train")(train.train)
app.command("embed")(embed.embed)
app.command("fit-backend")(backend.fit_backend)
app.command("eval")(evaluate.evaluate)
app.command("export-roc")(evaluate.export_roc)


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging")):
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


def run(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 on invalid input, 2 on runtime failure."""
    try:
        code = app(args=argv, prog_name="kws", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.Abort:
        return 1
    except (ValidationError, ConfigValidationError) as e:
        logger.error(f"Invalid input: {e}")
        return 1
    except PipelineError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2
    except Exception as e:
        logger.exception(f"Unexpected failure: {type(e).__name__}: {e}")
        return 2
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(run())
