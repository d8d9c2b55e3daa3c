"""Exception hierarchy shared by every module.

Each class carries a short ``category`` tag; the CLI prints it in its
single-line error message so callers can dispatch on failures.
"""


class IndretError(Exception):
    category = "error"


class DimensionError(IndretError, ValueError):
    category = "dimension"


class ContractError(IndretError, ValueError):
    category = "contract"


class ConfigError(IndretError, ValueError):
    category = "config"


class ParameterError(IndretError, ValueError):
    category = "parameter"


class IngestError(IndretError, OSError):
    category = "ingest"


class PersistenceError(IndretError, OSError):
    category = "persistence"


class ValidationError(IndretError, ValueError):
    category = "validation"

    def __init__(self, message, offenders=()):
        self.offenders = list(offenders)
        if self.offenders:
            message = f"{message}: {', '.join(map(str, self.offenders))}"
        super().__init__(message)


class ModelError(IndretError, RuntimeError):
    category = "model"


class LookupFailure(IndretError, KeyError):
    category = "lookup"

    def __str__(self):
        return str(self.args[0]) if self.args else ""
