"""Exception types shared across the package."""


class InputError(ValueError):
    """Invalid user-supplied data: malformed files, bad shapes, bad values."""


class ConvergenceError(RuntimeError):
    """A solve failed to reach tolerance where a converged value is required."""


class BudgetError(RuntimeError):
    """A computation was refused because it would exceed a resource budget."""
