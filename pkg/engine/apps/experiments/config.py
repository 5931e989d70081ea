"""
INI experiment configs.

Sections map onto the apps (`[coefficients]`, `[density]`, `[simulation]`,
`[sampling]`, `[inversion]`, `[counterexample]`, `[spde]`, `[acceptance]`)
and are validated one at a time with the app serializers. Every error
points at the section, key and line it comes from.
"""

import configparser
import hashlib
import logging
import re
from pathlib import Path

from core.utils.exceptions import ConfigError

logger = logging.getLogger(__name__)

SECTION_PATTERN = re.compile(r'^\s*\[(?P<name>[^\]]+)\]')
KEY_PATTERN = re.compile(r'^(?P<key>[^\s=:#;\[][^=:]*?)\s*[=:]')


def _line_index(text):
    """(section, key) -> 1-based line; key None for the section header."""
    index = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        header = SECTION_PATTERN.match(line)
        if header:
            section = header.group('name').strip()
            index.setdefault((section, None), number)
            continue
        entry = KEY_PATTERN.match(line)
        if entry and section is not None:
            index.setdefault((section, entry.group('key').strip().lower()), number)
    return index


def _parse_error_line(exc):
    if isinstance(exc, configparser.ParsingError) and exc.errors:
        return exc.errors[0][0]
    return getattr(exc, 'lineno', None)


def _first_message(errors):
    """First message of a DRF error structure."""
    if isinstance(errors, dict):
        key = next(iter(errors))
        return key, _first_message(errors[key])[1]
    if isinstance(errors, (list, tuple)) and errors:
        return None, _first_message(errors[0])[1]
    return None, str(errors)


class ExperimentConfig:
    """
    Parsed experiment config.

    Example:
        >>> cfg = ExperimentConfig('[simulation]\\ndt = 0.01\\n')
        >>> cfg.section('simulation')
        {'dt': '0.01'}
        >>> cfg.line('simulation', 'dt')
        2
    """

    def __init__(self, text='', source='<config>'):
        self.source = str(source)
        self._parser = configparser.ConfigParser(
            interpolation=None, inline_comment_prefixes=('#', ';'), default_section='__defaults__',
        )
        try:
            self._parser.read_string(text, source=self.source)
        except configparser.Error as exc:
            raise ConfigError(f'{self.source}: {exc.message.splitlines()[0]}', line=_parse_error_line(exc))
        self._lines = _line_index(text)

    @classmethod
    def from_path(cls, path):
        path = Path(path)
        try:
            text = path.read_text(encoding='utf-8')
        except FileNotFoundError:
            raise ConfigError(f'Config file {path} does not exist')
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f'Config file {path} is not readable: {exc}')
        return cls(text, source=path)

    # Access

    def sections(self):
        return list(self._parser.sections())

    def has_section(self, name):
        return self._parser.has_section(name)

    def section(self, name):
        if not self.has_section(name):
            return {}
        return dict(self._parser.items(name))

    def line(self, section, key=None):
        return self._lines.get((section, key.lower() if key else None))

    def as_dict(self):
        return {name: self.section(name) for name in sorted(self.sections())}

    # Identity

    def canonical(self):
        """Sections and keys sorted, values stripped: comments and layout do not matter."""
        blocks = []
        for name, values in self.as_dict().items():
            body = ''.join(f'{key} = {values[key].strip()}\n' for key in sorted(values))
            blocks.append(f'[{name}]\n{body}')
        return '\n'.join(blocks)

    def digest(self, **run_values):
        """sha256 of the canonical text plus run-level values such as the effective seed."""
        text = self.canonical() + ''.join(f'\n# {key} = {run_values[key]}' for key in sorted(run_values))
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    # Validation

    def require_sections(self, allowed, required=()):
        for name in required:
            if not self.has_section(name):
                raise ConfigError(f'Missing section [{name}]', section=name)
        unknown = sorted(set(self.sections()) - set(allowed))
        if unknown:
            name = unknown[0]
            raise ConfigError(
                f'Unexpected section; this command reads {", ".join(sorted(allowed))}',
                section=name,
                line=self.line(name),
            )

    def validate(self, section, serializer_class, required=True, **kwargs):
        """
        Run a DRF serializer over one section.

        Raises:
            ConfigError: missing section, unknown key or invalid value,
                with the line of the offending key
        """
        if required and not self.has_section(section):
            raise ConfigError(f'Missing section [{section}]', section=section)
        data = self.section(section)
        serializer = serializer_class(data=data, **kwargs)
        unknown = sorted(set(data) - set(serializer.fields))
        if unknown:
            key = unknown[0]
            raise ConfigError(
                f'Unknown key; expected one of {", ".join(sorted(serializer.fields))}',
                section=section,
                key=key,
                line=self.line(section, key),
            )
        if not serializer.is_valid():
            key, message = _first_message(serializer.errors)
            if key == 'non_field_errors':
                key = None
            raise ConfigError(message, section=section, key=key, line=self.line(section, key))
        logger.debug(f"Validated [{section}] from {self.source}")
        return serializer
