"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A model, config, stats table, or input failed validation.

    The CLI maps this to exit code 2; everything else that escapes a
    command is treated as a runtime failure (exit code 3).
    """
