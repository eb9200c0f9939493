"""
Error handling for CLI commands.

Provides centralized error handling with categorized exit codes and
logging, so every command fails the same way.
"""

import functools
import logging
import sys
from typing import Any, Callable, Dict, TypeVar

import yaml
from pydantic import ValidationError

from phenldiff.middleware.exceptions import (
    CATEGORY_CONFIG,
    CATEGORY_DATA,
    CATEGORY_IO,
    CATEGORY_NUMERICAL,
    PhenLDiffError,
)

logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Any])

EXIT_CODES: Dict[str, int] = {
    CATEGORY_CONFIG: 2,
    CATEGORY_DATA: 3,
    CATEGORY_NUMERICAL: 4,
    CATEGORY_IO: 5,
}
EXIT_UNEXPECTED = 1


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the process exit code."""
    if isinstance(exc, PhenLDiffError):
        return EXIT_CODES.get(exc.category, EXIT_UNEXPECTED)
    if isinstance(exc, (ValidationError, yaml.YAMLError)):
        return EXIT_CODES[CATEGORY_CONFIG]
    if isinstance(exc, OSError):
        return EXIT_CODES[CATEGORY_IO]
    return EXIT_UNEXPECTED


def handle_errors(func: F) -> F:
    """
    Wrap a CLI command and turn failures into categorized exits.

    Args:
        func: The command callback

    Returns:
        The wrapped callback
    """

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        command = func.__name__
        try:
            return func(*args, **kwargs)
        except PhenLDiffError as exc:
            logger.warning(
                f"{exc.category} error: {exc.detail}",
                extra={"command": command, "category": exc.category},
            )
            print(f"error [{exc.category}]: {exc.detail}", file=sys.stderr)
            sys.exit(exit_code_for(exc))
        except (ValidationError, yaml.YAMLError) as exc:
            logger.warning(
                f"Configuration error: {exc}",
                extra={"command": command, "category": CATEGORY_CONFIG},
            )
            print(f"error [{CATEGORY_CONFIG}]: {exc}", file=sys.stderr)
            sys.exit(exit_code_for(exc))
        except OSError as exc:
            logger.error(
                f"I/O error: {exc}",
                extra={"command": command, "category": CATEGORY_IO},
                exc_info=True,
            )
            print(f"error [{CATEGORY_IO}]: {exc}", file=sys.stderr)
            sys.exit(exit_code_for(exc))
        except Exception as exc:
            logger.error(
                f"Unexpected error: {exc}",
                extra={"command": command},
                exc_info=True,
            )
            print(f"error [unexpected]: {exc}", file=sys.stderr)
            sys.exit(EXIT_UNEXPECTED)

    return wrapper  # type: ignore[return-value]
