"""
CLI package for stereo-ssm
"""
import logging
from collections.abc import Iterator
from contextlib import contextmanager

import click

from tools.errors import ConfigError, FormatError, ShapeError, StereoSSMError, ToleranceError

EXIT_TOLERANCE = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def fail(message: str, code: int) -> None:
    click.echo(f"Error: {message}", err=True)
    raise click.exceptions.Exit(code)


@contextmanager
def exit_on_error() -> Iterator[None]:
    """Map package errors to the documented exit codes."""
    try:
        yield
    except ToleranceError as e:
        fail(str(e), EXIT_TOLERANCE)
    except (ConfigError, ShapeError) as e:
        fail(str(e), EXIT_CONFIG)
    except (OSError, FormatError) as e:
        fail(str(e), EXIT_IO)
    except StereoSSMError as e:
        logging.exception(e)
        fail(str(e), EXIT_TOLERANCE)
