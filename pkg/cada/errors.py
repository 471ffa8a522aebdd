###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""Exceptions raised across the ``cada`` package."""


class CadaError(Exception):
    """Base class. The CLI maps every subclass to a non-zero exit code."""

    exit_code = 2


class DimensionError(CadaError):
    pass


class NumericError(CadaError):
    exit_code = 3


class TrainingError(CadaError):
    exit_code = 3


class ConfigError(CadaError):
    pass


class ValidationError(CadaError):
    pass


class CheckError(CadaError):
    pass


class GenerationError(CadaError):
    pass


class LoadError(CadaError):
    pass


class BatchError(CadaError):
    pass


class EvaluationError(CadaError):
    pass


class RestoreError(CadaError):
    def __init__(self, message, diff=None):
        super().__init__(message)
        self.diff = diff or {}


class SharingError(CadaError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
