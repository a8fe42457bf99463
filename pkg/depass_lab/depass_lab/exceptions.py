"""
Error hierarchy shared by every app.

Each error carries a machine-parsable ``default_code`` and the process
``exit_code`` the management commands report, the same way DRF exceptions
carry a code and an HTTP status.
"""

EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class DePassError(Exception):
    default_detail = 'DePass error.'
    default_code = 'error'
    exit_code = EXIT_INPUT

    def __init__(self, detail=None, code=None):
        self.detail = detail if detail is not None else self.default_detail
        self.code = code if code is not None else self.default_code
        super().__init__(self.detail)

    def __str__(self):
        return str(self.detail)


class ConfigurationError(DePassError):
    default_detail = 'Invalid model configuration.'
    default_code = 'config_error'


class ArchiveFormatError(DePassError):
    default_detail = 'Malformed tensor archive.'
    default_code = 'archive_format'


class TokenizationError(DePassError):
    default_detail = 'Text could not be tokenized.'
    default_code = 'tokenization'


class InputError(DePassError):
    default_detail = 'Invalid input.'
    default_code = 'input_error'


class UsageError(DePassError):
    default_detail = 'Invalid usage.'
    default_code = 'usage'
    exit_code = EXIT_USAGE


class NumericDomainError(DePassError):
    default_detail = 'Value outside the numeric domain of the operation.'
    default_code = 'numeric_domain'
    exit_code = EXIT_NUMERIC


class ConsistencyError(DePassError):
    default_detail = 'Decomposed state no longer reconstructs the traced state.'
    default_code = 'consistency'
    exit_code = EXIT_NUMERIC


class ResourceBudgetError(DePassError):
    default_detail = 'Decomposed state exceeds the configured memory budget.'
    default_code = 'resource_budget'
    exit_code = EXIT_NUMERIC


class AttributionError(DePassError):
    default_detail = 'Attribution target is not available.'
    default_code = 'attribution'


class TrainingError(DePassError):
    default_detail = 'Probe training failed.'
    default_code = 'training'


class DegenerateSubspaceError(DePassError):
    default_detail = 'Direction set spans no subspace.'
    default_code = 'degenerate_subspace'
    exit_code = EXIT_NUMERIC


class UndefinedMetricError(DePassError):
    default_detail = 'Metric is undefined for these inputs.'
    default_code = 'undefined_metric'
    exit_code = EXIT_NUMERIC


class InterventionError(DePassError):
    default_detail = 'Intervention left no tokens.'
    default_code = 'intervention'


class EvaluationError(DePassError):
    default_detail = 'Nothing to evaluate.'
    default_code = 'evaluation'
