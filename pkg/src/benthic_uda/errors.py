"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid configuration or argument combination."""


class ManifestError(ValueError):
    """Malformed or inconsistent dataset manifest."""


class NonFiniteError(FloatingPointError):
    """A loss or intermediate value became NaN or infinite."""
