"""
Production settings - batch runs on shared compute.
JSON structured logs to console and a rotating file, optional error tracking.
"""

from .base import *  # noqa
from pathlib import Path

from .base import BASE_DIR, LOGGING, config

DEBUG = False

LOG_DIR = Path(config('LOG_DIR', default=str(BASE_DIR / 'logs')))
LOG_DIR.mkdir(parents=True, exist_ok=True)

# Logging - JSON structured logs for production
LOGGING['handlers']['console']['formatter'] = 'json'
LOGGING['handlers']['file'] = {
    'level': 'INFO',
    'class': 'logging.handlers.RotatingFileHandler',
    'filename': LOG_DIR / 'engine.log',
    'maxBytes': 1024 * 1024 * 10,  # 10 MB
    'backupCount': 5,
    'formatter': 'json',
    'filters': ['run_context'],
}
for _name in ('apps', 'core'):
    LOGGING['loggers'][_name]['handlers'] = ['console', 'file']

# Error tracking for long unattended runs
SENTRY_DSN = config('SENTRY_DSN', default='')
if SENTRY_DSN:
    import sentry_sdk

    sentry_sdk.init(dsn=SENTRY_DSN, traces_sample_rate=0.0)
