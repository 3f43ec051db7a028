"""Exception hierarchy shared by the library and the command line."""


class StrataMinerError(Exception):
    """Base class for all errors raised by strata_miner."""


class ConfigError(StrataMinerError, ValueError):
    """A configuration value or schema definition is invalid."""


class SchemaError(ConfigError):
    """The cohort schema file is inconsistent."""


class DataError(StrataMinerError, ValueError):
    """Input data could not be parsed or is inconsistent with the schema."""


class CandidateBudgetExceeded(StrataMinerError, RuntimeError):
    """Exhaustive enumeration would evaluate more candidates than allowed."""

    def __init__(self, count: int, budget: int):
        self.count = count
        self.budget = budget
        super().__init__(
            f"exhaustive search needs {count} candidates, budget is {budget}")
