"""Exception and warning types shared by all modules.

Every error carries a short machine-readable ``code`` (e.g. ``"SIZE_GUARD"``)
so the CLI can report it and tests can match on it.
"""


class GremError(Exception):
    """Base error with a machine-readable code."""

    def __init__(self, code, message=""):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}" if message else code)


class ValidationError(GremError):
    """Model validation failed; ``errors`` lists every ``(code, message)``."""

    def __init__(self, errors):
        self.errors = list(errors)
        codes = ", ".join(code for code, _ in self.errors)
        detail = "; ".join(msg for _, msg in self.errors)
        super().__init__(self.errors[0][0], f"[{codes}] {detail}")

    @property
    def codes(self):
        return [code for code, _ in self.errors]


class GremWarning(UserWarning):
    """Non-fatal diagnostic with a code (e.g. ``DEGENERATE_T1``)."""

    def __init__(self, code, message=""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)
