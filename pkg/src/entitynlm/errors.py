"""Exception hierarchy shared by every module."""


class EntityNLMError(Exception):
    """Base class for all package errors."""


class DimensionError(EntityNLMError, ValueError):
    pass


class DegenerateInputError(EntityNLMError, ValueError):
    pass


class ContractError(EntityNLMError, ValueError):
    pass


class VocabularyError(EntityNLMError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigurationError(EntityNLMError, ValueError):
    pass


class IngestionError(EntityNLMError, ValueError):
    pass


class NumericalError(EntityNLMError, ArithmeticError):
    pass


class LifecycleError(EntityNLMError, LookupError):
    pass
