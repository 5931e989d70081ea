"""
Base settings shared across all environments.
Numerical defaults live in NUMERICS; environment overrides come from .env.
"""

from pathlib import Path
from decouple import config

# Build paths
BASE_DIR = Path(__file__).resolve().parent.parent.parent

# Required by Django even though nothing here is signed
SECRET_KEY = config('SECRET_KEY', default='ergodic-inversion-local-key')

DEBUG = False
ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',

    # Third-party
    'rest_framework',

    # Local apps
    'apps.coefficients',
    'apps.density',
    'apps.simulation',
    'apps.inversion',
    'apps.spde',
    'apps.experiments',
]

# Experiments persist to files, not to a database
DATABASES = {}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Run artifacts
EXPERIMENT_OUTPUT_DIR = Path(config('EXPERIMENT_OUTPUT_DIR', default=str(BASE_DIR / 'runs')))
DEFAULT_SEED = config('DEFAULT_SEED', default=20240607, cast=int)
EXPERIMENT_QUICK_FACTOR = config('EXPERIMENT_QUICK_FACTOR', default=0.1, cast=float)

# Numerical constants (read through core.utils.numerics.numerics_setting)
NUMERICS = {
    # Gradient consistency of Langevin pairs
    'TOL_FD': config('NUMERICS_TOL_FD', default=1e-6, cast=float),
    'FD_STEP': 1e-5,
    # Slack for strict inequalities
    'STRICT_SLACK': 1e-12,
    # Density grids
    'TAIL_TOL': config('NUMERICS_TAIL_TOL', default=1e-6, cast=float),
    'P_FLOOR_RELATIVE': 1e-12,
    'MIN_NODES_PER_AXIS': 9,
    'WEAK_FORM_BUMPS': 8,
    # Inversion
    'EPS_LAP': 1e-6,
    'EPS_GRAD': 1e-6,
    'MIN_ADMISSIBLE_NODES': 100,
    'MASKED_FRACTION_LIMIT': 0.5,
    'BOOTSTRAP_RESAMPLES': 16,
    # Simulation
    'BLOWUP_RADIUS': 1e8,
    'BURN_IN_FRACTION': 0.5,
    'NOISE_BLOCK_STEPS': 1024,
    'KS_PROJECTIONS': 8,
    'KS_PROJECTION_SEED': 7,
    'MIN_DENSITY_SAMPLES': 1000,
    'MIXING_STANDARD_ERRORS': 5.0,
    'STABILITY_ADVISORY': 0.5,
    # SPDE
    'SPDE_MIN_ESS': 1e4,
}

# Logging Configuration (Structured logs for production)
LOG_LEVEL = config('LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name} [{run_id}] {message}',
            'style': '{',
        },
        'json': {
            '()': 'pythonjsonlogger.jsonlogger.JsonFormatter',
            'format': '%(asctime)s %(name)s %(levelname)s %(run_id)s %(message)s',
        },
    },
    'filters': {
        'run_context': {
            '()': 'core.utils.run_context.RunContextFilter',
        },
    },
    'handlers': {
        'console': {
            'level': LOG_LEVEL,
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
            'level': LOG_LEVEL,
            'propagate': False,
        },
        'core': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}
