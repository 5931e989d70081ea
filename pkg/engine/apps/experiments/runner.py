"""
Run directories, manifests and the base class of the experiment commands.

A run writes into `<out>/<config-hash[:12]>-<UTC timestamp>.partial` and
the directory is renamed once the manifest is written. Failed runs leave
nothing behind.
"""

import hashlib
import json
import logging
import platform
import shutil
import time
import warnings
from importlib import metadata
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from core.utils.exceptions import (
    AcceptanceFailure,
    ConfigError,
    EngineError,
    EngineWarning,
    handle_engine_exception,
)
from core.utils.run_context import run_context

from .config import ExperimentConfig
from .models import Advisory, OutputFile, RunManifest, RunOptions
from .serializers import RunManifestSerializer

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
PARTIAL_SUFFIX = '.partial'
VERSIONED_PACKAGES = ('numpy', 'scipy', 'sympy', 'pandas', 'Django', 'djangorestframework')


def sha256_of_file(path):
    digest = hashlib.sha256()
    with Path(path).open('rb') as handle:
        for block in iter(lambda: handle.read(1024 * 1024), b''):
            digest.update(block)
    return digest.hexdigest()


def package_versions():
    versions = {'python': platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = 'unknown'
    return versions


def _jsonable(value):
    """numpy scalars and arrays inside report dicts."""
    if hasattr(value, 'tolist'):
        return value.tolist()
    raise TypeError(f'{type(value).__name__} is not JSON serializable')


class RunDirectory:
    """
    Staging directory of one run.

    Example:
        >>> run = RunDirectory('runs', 'ab' * 32)
        >>> run.staging.name.endswith('.partial')
        True
    """

    def __init__(self, root, config_hash, now=None):
        now = now or timezone.now()
        self.root = Path(root)
        self.name = f'{config_hash[:12]}-{now:%Y%m%dT%H%M%SZ}'
        self.staging = self.root / f'{self.name}{PARTIAL_SUFFIX}'
        self.final = None

    def open(self):
        self.root.mkdir(parents=True, exist_ok=True)
        if self.staging.exists():
            shutil.rmtree(self.staging)
        self.staging.mkdir()
        return self

    def path(self, name):
        return self.staging / name

    def write_json(self, name, data):
        path = self.path(name)
        path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + '\n')
        return path

    def outputs(self):
        """Digests of every file written so far, manifest excluded."""
        return tuple(
            OutputFile(name=path.name, sha256=sha256_of_file(path), size=path.stat().st_size)
            for path in sorted(self.staging.iterdir())
            if path.is_file() and path.name != MANIFEST_NAME
        )

    def commit(self):
        target = self.root / self.name
        suffix = 1
        while target.exists():
            target = self.root / f'{self.name}-{suffix}'
            suffix += 1
        self.staging.rename(target)
        self.final = target
        return target

    def discard(self):
        if self.staging.exists():
            shutil.rmtree(self.staging)


class ExperimentCommand(BaseCommand):
    """
    Shared surface of the experiment commands: --config, --out, --seed and
    --quick. Subclasses set `experiment`, `seed_section` and implement
    `run(config, run_dir, options)` returning a list of Checks.
    """
    experiment = None
    config_required = True
    seed_section = 'simulation'
    enforce_checks = False

    def add_arguments(self, parser):
        parser.add_argument('--config', required=self.config_required, help='INI experiment config')
        parser.add_argument('--out', default=None, help='Directory that receives the run directory')
        parser.add_argument('--seed', type=int, default=None, help='Overrides the config seed')
        parser.add_argument('--quick', action='store_true', help='Reduced sample sizes, advisory verdicts')

    def run(self, config, run_dir, options):
        raise NotImplementedError

    def load_config(self, options):
        if options.get('config'):
            return ExperimentConfig.from_path(options['config'])
        return ExperimentConfig()

    def effective_seed(self, config, override=None):
        """--seed, else the seed of `seed_section`, else DEFAULT_SEED."""
        if override is not None:
            if override < 0:
                raise ConfigError('--seed must be nonnegative', key='seed')
            return override
        raw = config.section(self.seed_section).get('seed')
        if raw is None:
            return settings.DEFAULT_SEED
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(
                f'seed must be an integer, got {raw!r}',
                section=self.seed_section, key='seed', line=config.line(self.seed_section, 'seed'),
            )

    def handle(self, *args, **options):
        out = Path(options.get('out') or settings.EXPERIMENT_OUTPUT_DIR)
        run_dir = None
        with run_context(command=self.experiment) as run_id, warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always', EngineWarning)
            try:
                config = self.load_config(options)
                run_options = RunOptions(
                    seed=self.effective_seed(config, options.get('seed')),
                    quick=bool(options.get('quick')),
                    quick_factor=settings.EXPERIMENT_QUICK_FACTOR,
                )
                config_hash = config.digest(seed=run_options.seed, quick=run_options.quick)
                run_dir = RunDirectory(out, config_hash).open()
                started_at = timezone.now()
                started = time.perf_counter()
                logger.info(f"{self.experiment}: staging in {run_dir.staging}", extra={'seed': run_options.seed})

                checks = tuple(self.run(config, run_dir, run_options))
                if run_options.quick:
                    checks = tuple(check.advisory() for check in checks)

                manifest = RunManifest(
                    command=self.experiment,
                    run_id=run_id,
                    config_hash=config_hash,
                    seed=run_options.seed,
                    quick=run_options.quick,
                    started_at=started_at.isoformat(),
                    wall_time=round(time.perf_counter() - started, 3),
                    versions=package_versions(),
                    outputs=run_dir.outputs(),
                    checks=checks,
                    advisories=tuple(
                        Advisory(category=w.category.__name__, message=str(w.message))
                        for w in caught if issubclass(w.category, EngineWarning)
                    ),
                    config=config.as_dict(),
                )
                run_dir.write_json(MANIFEST_NAME, RunManifestSerializer(manifest).data)
                final = run_dir.commit()
            except Exception as exc:
                if run_dir is not None:
                    run_dir.discard()
                payload = handle_engine_exception(exc, {'run_id': run_id, 'command': self.experiment})
                self.stderr.write(json.dumps(payload, indent=2))
                if not isinstance(exc, EngineError):
                    raise
                raise CommandError(payload['detail'], returncode=payload['exit_code']) from exc

        summary = ', '.join(f'{count} {status}' for status, count in manifest.summary.items() if count)
        self.stdout.write(f'{final} ({summary or "no checks"})')
        logger.info(f"{self.experiment}: wrote {final}", extra={'wall_time': manifest.wall_time})

        if self.enforce_checks and not manifest.passed:
            failure = AcceptanceFailure(manifest.failed_checks, run_dir=str(final))
            payload = handle_engine_exception(failure, {'run_id': run_id, 'command': self.experiment})
            self.stderr.write(json.dumps(payload, indent=2))
            raise CommandError(str(failure), returncode=failure.exit_code)
