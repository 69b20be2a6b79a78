"""Exception hierarchy shared across the package."""


class DbDoctorError(Exception):
    """Base class for all dbdoctor errors."""


class ConfigError(DbDoctorError):
    """A provider/source/session configuration is missing required fields."""


class GatewayError(DbDoctorError):
    """Model gateway failure."""


class TransportError(GatewayError):
    """HTTP transport failed after the configured retries."""


class NoMatchingRuleError(GatewayError):
    """The scripted backend has no rule matching the latest prompt."""


class MalformedResponseError(GatewayError):
    """Provider returned a response we cannot interpret."""


class SegmentValidationError(DbDoctorError):
    """An extracted experience segment violates the 4-field contract."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class PromptValidationError(DbDoctorError):
    """A proposed prompt template is missing required slots."""


class FixtureError(DbDoctorError):
    """A telemetry fixture is missing or malformed."""


class UnknownMetricError(FixtureError):
    """No fixture/source data exists for the requested metric."""


class SessionError(DbDoctorError):
    """Invalid session operation (unknown id, terminal state, duplicate)."""


class DiagnosisAborted(DbDoctorError):
    """Diagnosis stopped early (e.g. exhausted script); partial transcript kept."""

    def __init__(self, message: str, transcript: list):
        self.transcript = transcript
        super().__init__(message)
