"""
Development settings - for local runs and the test suite.
Inherits from base.py and overrides with development-specific configurations.
"""

from .base import *  # noqa

DEBUG = True

# Keep test and scratch runs out of the shared output directory
EXPERIMENT_OUTPUT_DIR = BASE_DIR / 'runs' / 'dev'

# Logging: more verbose for debugging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '[{asctime}] {levelname} {name} [{run_id}]: {message}',
            'style': '{',
        },
    },
    'filters': {
        'run_context': {
            '()': 'core.utils.run_context.RunContextFilter',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
            'filters': ['run_context'],
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        'apps': {
            'handlers': ['console'],
            'level': 'DEBUG',
            'propagate': False,
        },
        'core': {
            'handlers': ['console'],
            'level': 'DEBUG',
            'propagate': False,
        },
    },
}
