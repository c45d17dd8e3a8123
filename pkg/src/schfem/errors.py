"""Exception taxonomy shared across the package."""


class InputError(ValueError):
    """Caller passed arguments that violate an operation's preconditions."""


class PreconditionError(InputError):
    """A mathematical precondition (e.g. zero mean) does not hold."""


class StructuralError(RuntimeError):
    """Meshes or fields are structurally incompatible (forest, generation)."""


class SolverFailure(RuntimeError):
    """An iterative solver did not converge; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
