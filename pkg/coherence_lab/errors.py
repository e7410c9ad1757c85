#!/usr/bin/env python3

"""
Exceptions raised by coherence_lab.

Every class also derives from the closest builtin exception so callers can catch
either. ``exit_code`` is what the command line tool returns when the error escapes
a command (1 usage/config, 2 data, 3 numeric failure).
"""


class CoherenceLabError(Exception):
    exit_code = 1


class ConfigError(CoherenceLabError, ValueError):
    exit_code = 1


class UsageError(CoherenceLabError, ValueError):
    exit_code = 1


class DimensionError(CoherenceLabError, ValueError):
    exit_code = 2


class ContractError(CoherenceLabError, ValueError):
    exit_code = 2


class LengthError(CoherenceLabError, ValueError):
    exit_code = 2


class VocabError(CoherenceLabError, IndexError):
    exit_code = 2


class SegmentError(CoherenceLabError, ValueError):
    exit_code = 2


class ExcludedDocumentError(CoherenceLabError, ValueError):
    """Document cannot take part in sentence ordering (fewer than two sentences)."""
    exit_code = 2


class ParseError(CoherenceLabError, ValueError):
    exit_code = 2

    def __init__(self, message, path=None, line_number=None):
        if line_number is not None:
            message = f'{path}:{line_number}: {message}'
        super().__init__(message)
        self.path = path
        self.line_number = line_number


class FactAlignmentError(CoherenceLabError, ValueError):
    exit_code = 2


class TargetError(CoherenceLabError, IndexError):
    exit_code = 2


class LabelError(CoherenceLabError, ValueError):
    exit_code = 2


class MetricError(CoherenceLabError, ValueError):
    exit_code = 2


class InvalidCheckError(CoherenceLabError, RuntimeError):
    exit_code = 3


class NumericError(CoherenceLabError, FloatingPointError):
    exit_code = 3
