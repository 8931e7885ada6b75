class SolverError(RuntimeError):
    """A linear or eigen solver failed to reach its tolerance."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class CFLViolation(ValueError):
    pass


class ConfigError(ValueError):
    """Raised with the full list of validation problems found in a config."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))
