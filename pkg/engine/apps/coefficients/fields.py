"""
Compilation of symbolic coefficient expressions into vectorized fields.

Variables are named x in one dimension (x1 is accepted as an alias)
and x1..xd otherwise.
"""

import numpy as np
import sympy as sp

from core.utils.exceptions import CoefficientSpecError


def coordinate_symbols(dimension):
    if dimension == 1:
        return (sp.Symbol('x', real=True),)
    return tuple(sp.symbols(f'x1:{dimension + 1}', real=True))


def _namespace(symbols):
    names = {s.name: s for s in symbols}
    if len(symbols) == 1:
        names['x1'] = symbols[0]
    return names


def parse_expression(text, symbols):
    """
    Parse an expression string (or pass through a sympy object) and check
    that it only depends on the coordinate symbols.
    """
    if isinstance(text, sp.Basic):
        expr = text
    else:
        try:
            expr = sp.sympify(text, locals=_namespace(symbols))
        except (sp.SympifyError, SyntaxError, TypeError) as exc:
            raise CoefficientSpecError('expression', f'Cannot parse {text!r}: {exc}') from exc
        if isinstance(expr, (list, tuple)):
            expr = sp.Matrix(expr)
    unknown = {str(s) for s in getattr(expr, 'free_symbols', set())} - {s.name for s in symbols}
    if unknown:
        raise CoefficientSpecError('expression', f'Unknown symbols {sorted(unknown)} in {text!r}')
    return expr


def parse_vector(texts, symbols):
    if isinstance(texts, str):
        parsed = parse_expression(texts, symbols)
        items = list(parsed) if isinstance(parsed, (sp.MatrixBase, list, tuple, sp.Tuple)) else [parsed]
    else:
        items = [parse_expression(t, symbols) for t in texts]
    if len(items) != len(symbols):
        raise CoefficientSpecError('expression', f'Expected {len(symbols)} drift components, got {len(items)}')
    return [sp.sympify(e) for e in items]


def parse_matrix(text, symbols, noise_dimension=None):
    """
    A scalar expression means scalar * Id; otherwise a d x m nested list.
    """
    d = len(symbols)
    if isinstance(text, sp.MatrixBase):
        matrix = sp.Matrix(text)
    elif isinstance(text, (list, tuple)):
        matrix = sp.Matrix([[parse_expression(e, symbols) for e in row] for row in text])
    else:
        parsed = parse_expression(text, symbols)
        if isinstance(parsed, (list, tuple, sp.Tuple)):
            matrix = sp.Matrix(parsed)
        elif isinstance(parsed, sp.MatrixBase):
            matrix = sp.Matrix(parsed)
        else:
            m = noise_dimension or d
            if m != d:
                raise CoefficientSpecError('expression', 'A scalar noise needs noise_dimension == dimension')
            matrix = parsed * sp.eye(d)
    if matrix.shape[0] != d:
        raise CoefficientSpecError('expression', f'Noise matrix has {matrix.shape[0]} rows, expected {d}')
    return matrix


def _column(value, n):
    return np.broadcast_to(np.asarray(value, dtype=float), (n,))


def vector_field(exprs, symbols):
    fn = sp.lambdify(symbols, list(exprs), modules='numpy')

    def field(points):
        cols = [points[:, i] for i in range(points.shape[1])]
        return np.stack([_column(v, points.shape[0]) for v in fn(*cols)], axis=1)

    return field


def matrix_field(matrix, symbols):
    rows, cols = matrix.shape
    fn = sp.lambdify(symbols, list(matrix), modules='numpy')

    def field(points):
        n = points.shape[0]
        values = fn(*[points[:, i] for i in range(points.shape[1])])
        flat = np.stack([_column(v, n) for v in values], axis=1)
        return flat.reshape(n, rows, cols)

    return field


def scalar_field(expr, symbols):
    fn = sp.lambdify(symbols, expr, modules='numpy')

    def field(points):
        return _column(fn(*[points[:, i] for i in range(points.shape[1])]), points.shape[0])

    return field


def gradient(expr, symbols):
    return [sp.diff(expr, s) for s in symbols]


def is_constant(matrix, symbols):
    return all(not (sp.sympify(e).free_symbols & set(symbols)) for e in matrix)
