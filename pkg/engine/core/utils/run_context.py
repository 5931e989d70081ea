"""
Run context for log correlation.
Every experiment run gets a unique run id that is attached to all log
records emitted while the run is active.
"""

import contextvars
import logging
import uuid
from contextlib import contextmanager

logger = logging.getLogger(__name__)

_current_run_id = contextvars.ContextVar('run_id', default=None)


def current_run_id():
    """Run id of the active run, or None outside a run."""
    return _current_run_id.get()


@contextmanager
def run_context(run_id=None, command=None):
    """
    Activate a run id for the duration of the block.
    If none is given, generate a new UUID.
    """
    run_id = run_id or str(uuid.uuid4())
    token = _current_run_id.set(run_id)
    logger.info(
        "Run started",
        extra={'run_id': run_id, 'command': command},
    )
    try:
        yield run_id
    finally:
        _current_run_id.reset(token)


class RunContextFilter(logging.Filter):
    """
    Adds `run_id` to every record so formatters can reference it.
    Records that already carry a run_id keep it.
    """

    def filter(self, record):
        if not getattr(record, 'run_id', None):
            record.run_id = current_run_id() or '-'
        return True
