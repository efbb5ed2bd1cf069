"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value (degenerate range, bad factor, ...)."""


class GeometryError(ValueError):
    """Operands do not share the required grid geometry."""


class InputError(ValueError):
    """Input data violates an operation precondition (empty mask, single class, ...)."""


class DivergedError(RuntimeError):
    """Registration optimization diverged.

    Carries the cost trace accumulated up to the failure so the caller can
    inspect what happened.
    """

    def __init__(self, message, cost_trace=None):
        super().__init__(message)
        self.cost_trace = list(cost_trace) if cost_trace is not None else []


class NotConvergedError(RuntimeError):
    """Iterative solver failed to converge; carries per-step diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class StageError(RuntimeError):
    """A pipeline stage failed; names the stage and the case being processed.

    ``detail`` is a plain string (not the original exception) so the error
    survives pickling across worker-process boundaries; ``case_id`` is ``"-"``
    for cohort-level stages.
    """

    def __init__(self, stage, case_id, detail):
        super().__init__(stage, case_id, detail)
        self.stage = stage
        self.case_id = case_id
        self.detail = detail

    def __str__(self):
        return f"stage '{self.stage}' failed on case '{self.case_id}': {self.detail}"
