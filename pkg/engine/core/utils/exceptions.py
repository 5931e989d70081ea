"""
Exception hierarchy and central handler for engine runs.
Provides consistent error payloads, exit codes and logging.
"""

import logging

logger = logging.getLogger(__name__)


class ExitCode:
    """Process exit codes of the management commands."""
    SUCCESS = 0
    CONFIG_ERROR = 2
    NUMERICAL_DOMAIN = 3
    DIVERGENCE = 4
    INSUFFICIENT_SUPPORT = 5
    ACCEPTANCE_FAILURE = 6


class EngineError(Exception):
    """Base class for every error raised by the engine."""
    exit_code = 1
    default_detail = 'Engine error.'

    def __init__(self, detail=None, **context):
        self.detail = detail or self.default_detail
        self.context = context
        super().__init__(self.detail)


class ConfigError(EngineError):
    """
    Invalid experiment configuration.
    Carries the section, key and line number when known.
    """
    exit_code = ExitCode.CONFIG_ERROR
    default_detail = 'Invalid configuration.'

    def __init__(self, detail=None, section=None, key=None, line=None, **context):
        self.section = section
        self.key = key
        self.line = line
        location = ''
        if section or key:
            location = f" [{section or '?'}].{key or '?'}"
        if line is not None:
            location += f' (line {line})'
        super().__init__(f'{detail or self.default_detail}{location}', section=section, key=key, line=line, **context)


class NumericalDomainError(EngineError):
    """Inputs outside the domain where the numerics are meaningful."""
    exit_code = ExitCode.NUMERICAL_DOMAIN
    default_detail = 'Numerical domain error.'


class CoefficientDomainError(NumericalDomainError):
    """A coefficient failed to evaluate or violates a structural requirement."""
    default_detail = 'Coefficient evaluation failed.'


class CoefficientSpecError(CoefficientDomainError):
    """A coefficient constructor precondition was violated."""

    def __init__(self, condition, detail=None, **context):
        self.condition = condition
        super().__init__(detail or f'Condition {condition!r} violated.', condition=condition, **context)


class TruncationError(NumericalDomainError):
    """The truncated domain leaves too much probability mass outside."""
    default_detail = 'Tail mass outside the truncated domain exceeds tolerance.'

    def __init__(self, detail=None, tail_mass=None, suggested_domain=None, **context):
        self.tail_mass = tail_mass
        self.suggested_domain = suggested_domain
        super().__init__(detail, tail_mass=tail_mass, suggested_domain=suggested_domain, **context)


class InvalidFamilyError(NumericalDomainError):
    """A non-identifiability family cannot be built with the given parameters."""
    default_detail = 'Invalid non-identifiability family.'


class DivergenceError(EngineError):
    """A simulated chain left the blow-up radius or produced non-finite values."""
    exit_code = ExitCode.DIVERGENCE
    default_detail = 'Simulation diverged.'

    def __init__(self, detail=None, chain=None, step=None, **context):
        self.chain = chain
        self.step = step
        super().__init__(detail, chain=chain, step=step, **context)


class InsufficientSupportError(EngineError):
    """Too few admissible nodes or samples for a stable estimate."""
    exit_code = ExitCode.INSUFFICIENT_SUPPORT
    default_detail = 'Insufficient support for the estimate.'


class AcceptanceFailure(EngineError):
    """One or more acceptance criteria failed."""
    exit_code = ExitCode.ACCEPTANCE_FAILURE
    default_detail = 'Acceptance criteria failed.'

    def __init__(self, failed=(), **context):
        self.failed = list(failed)
        super().__init__(f"Failed criteria: {', '.join(self.failed)}", failed=self.failed, **context)


# Advisory conditions (raised through warnings.warn and logged)

class EngineWarning(UserWarning):
    """Base class for advisory numerical warnings."""


class IntegrabilityWarning(EngineWarning):
    """Values do not decay toward the boundary; integrability is suspect."""


class HeavyTailWarning(EngineWarning):
    """Tail mass outside the box exceeds tolerance but the run continues."""


class MassLossWarning(EngineWarning):
    """Samples fall outside the estimation grid."""


class MixingWarning(EngineWarning):
    """Chains disagree beyond the configured number of standard errors."""


class StabilityWarning(EngineWarning):
    """Time step is large relative to the local Lipschitz scale."""


class QuadratureResolutionWarning(EngineWarning):
    """Spatial quadrature is too coarse for the number of modes."""


class DegenerateDiffusionWarning(EngineWarning):
    """The diffusion tensor is not positive definite."""


def handle_engine_exception(exc, context=None):
    """
    Convert an exception raised during a run into an error payload.

    Format:
    {
        "error": "Error type",
        "detail": "Human-readable message",
        "exit_code": int,
        "run_id": "uuid",
        "context": {...}
    }
    """
    context = context or {}
    run_id = context.get('run_id')

    if isinstance(exc, EngineError):
        payload = {
            'error': exc.__class__.__name__,
            'detail': str(exc.detail),
            'exit_code': exc.exit_code,
            'context': {k: _jsonable(v) for k, v in exc.context.items() if v is not None},
        }
        logger.warning(
            f"Run error: {exc}",
            extra={
                'run_id': run_id,
                'exception_type': exc.__class__.__name__,
                'exit_code': exc.exit_code,
                'command': context.get('command'),
            },
        )
    else:
        payload = {
            'error': 'InternalError',
            'detail': 'An unexpected error occurred.',
            'exit_code': 1,
            'context': {'message': str(exc)},
        }
        logger.error(
            f"Unhandled exception: {exc}",
            extra={'run_id': run_id, 'command': context.get('command')},
            exc_info=True,
        )

    if run_id:
        payload['run_id'] = run_id
    return payload


def _jsonable(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    try:
        return float(value)
    except (TypeError, ValueError):
        return str(value)
