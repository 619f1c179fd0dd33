"""Adversarial domain-invariant feature learning on a small numpy autodiff core."""
from .errors import (AdinError, ConfigError, ContractError, DataError, DimensionError, DivergenceError,
                     LabelError, ParseError)

__version__ = "0.1.0"
