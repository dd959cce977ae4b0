"""Rich logging with a per-run context appended to every line.

Runs and sweep cells push their identity (scenario, variant, arm, seed, T) into a
context variable; the formatter renders it as ``key=value`` pairs after the message.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Any, Dict, Iterator, Mapping

from rich.logging import RichHandler

CONTEXT_KEYS = ("scenario", "variant", "arm", "seed", "horizon_T")

_RUN_CONTEXT: ContextVar[Mapping[str, Any]] = ContextVar("ece_run_context", default={})


class _RunContextFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        record.run_context = dict(_RUN_CONTEXT.get())
        return True


class _RunContextFormatter(logging.Formatter):
    """Append known context fields, in a fixed order, after the message."""

    def format(self, record: logging.LogRecord) -> str:
        message = super().format(record)
        context: Dict[str, Any] = getattr(record, "run_context", {})
        pairs = [
            f"{key}={_render(context[key])}"
            for key in CONTEXT_KEYS
            if context.get(key) is not None
        ]
        return f"{message} | {' '.join(pairs)}" if pairs else message


def _render(value: Any) -> str:
    return f"{value:.6g}" if isinstance(value, float) else str(value)


def setup_logging(level: str, *, show_path: bool = False) -> None:
    """Install a single Rich handler on the root logger.

    Also used as the process-pool initializer so sweep workers log the same way.
    """

    handler = RichHandler(show_time=True, show_path=show_path, markup=False, rich_tracebacks=True)
    handler.setFormatter(_RunContextFormatter("%(message)s"))
    handler.addFilter(_RunContextFilter())

    root = logging.getLogger()
    root.handlers.clear()
    root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))


def set_log_context(**fields: Any) -> None:
    """Merge ``fields`` into the current run context."""

    _RUN_CONTEXT.set({**_RUN_CONTEXT.get(), **fields})


def current_log_context() -> Dict[str, Any]:
    return dict(_RUN_CONTEXT.get())


@contextmanager
def log_context(**fields: Any) -> Iterator[None]:
    """Scope ``fields`` to the enclosed block; the previous context is restored on exit."""

    token = _RUN_CONTEXT.set({**_RUN_CONTEXT.get(), **fields})
    try:
        yield
    finally:
        _RUN_CONTEXT.reset(token)
