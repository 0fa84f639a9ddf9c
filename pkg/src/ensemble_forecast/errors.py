"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class ForecastError(Exception):
    exit_code = 1


class DataError(ForecastError, ValueError):
    """Input data is missing, malformed, or too short for the requested operation."""

    exit_code = 2


class SchemaError(DataError):
    """A bundle or matrix does not match the expected feature schema."""


class NumericFault(ForecastError, ArithmeticError):
    """A computation produced NaN/Inf or could not be solved numerically."""

    exit_code = 3
