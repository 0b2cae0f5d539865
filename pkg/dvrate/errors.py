from dvrate.const import (
    EXIT_CERTIFICATE_REFUSED,
    EXIT_NUMERIC,
    EXIT_PARSE,
    EXIT_ROW_FAILED,
)


class DvRateError(Exception):
    exit_code = EXIT_ROW_FAILED


class ParseError(DvRateError):
    exit_code = EXIT_PARSE


class NumericalError(DvRateError):
    exit_code = EXIT_NUMERIC


class SizeGuardError(NumericalError):
    pass


class EmptyConvexSetError(DvRateError):
    pass


class CertificateRefused(DvRateError):
    """The witness is not superharmonic outside Y.

    ``violations`` is the list of ``(state, deficit)`` pairs reported by
    ``superharmonic_check``.
    """

    exit_code = EXIT_CERTIFICATE_REFUSED

    def __init__(self, violations):
        self.violations = list(violations)
        worst = max((d for _, d in self.violations), default=0.0)
        super().__init__(
            f"certificate refused: {len(self.violations)} violation(s), worst deficit {worst:.3e}"
        )
