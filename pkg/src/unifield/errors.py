"""Exception types shared across the package."""


class UniFieldError(Exception):
    pass


class ConfigError(UniFieldError, ValueError):
    """Invalid model, run, or CLI configuration."""


class RegistryError(UniFieldError, KeyError):
    """Domain id or name not present in the registry."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class RoutingError(RegistryError):
    """A sample names a domain that has no adapter."""


class SchemaError(UniFieldError, ValueError):
    """Flow vector length does not match the domain's declared dimensionality."""


class DataFormatError(UniFieldError, ValueError):
    """Malformed sample, manifest, or checkpoint file."""


class NumericalError(UniFieldError, RuntimeError):
    """Non-finite loss or gradient during training."""
