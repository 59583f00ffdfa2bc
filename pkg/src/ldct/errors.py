"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class LdctError(Exception):
    exit_code = 1


class ConfigError(LdctError, ValueError):
    exit_code = 2


class ModelError(LdctError):
    exit_code = 2


class DataError(LdctError, ValueError):
    exit_code = 3


class TrainingError(LdctError, RuntimeError):
    exit_code = 4

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer
