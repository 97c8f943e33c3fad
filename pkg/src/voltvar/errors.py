"""Exception hierarchy shared across the package."""


class VoltVarError(Exception):
    """Base class for all errors raised by this package."""


class FeederParseError(VoltVarError):
    """Feeder file is malformed (bad syntax, missing or unknown fields)."""


class FeederValidationError(VoltVarError):
    """Feeder file parsed but violates a structural invariant."""


class PositionRangeError(VoltVarError):
    """A tap position or capacitor status is outside its device's range."""


class LoadDataError(VoltVarError):
    """Meter/load pipeline precondition violated."""


class EnvError(VoltVarError):
    """Environment configuration or usage error."""


class AgentError(VoltVarError):
    """Agent configuration or training error."""


class NonFiniteLossError(AgentError):
    """Training loss became NaN or infinite; training is halted."""


class BenchError(VoltVarError):
    """Benchmark harness error (bad spec, missing inputs)."""
