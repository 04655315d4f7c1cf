r"""
Strict pydantic bases shared by every value type in the package.

Usage example:

    from validation_helpers import ValidatedValueModel

    class Miscoverage(ValidatedValueModel[float]):
        '''Target miscoverage level alpha'''

        @staticmethod
        def custom_validate(value: float) -> None:
            if not 0.0 < value < 1.0:
                raise ValueError(f"alpha must lie in (0, 1), got {value}")

        @classmethod
        def get_value_type(cls) -> Type[float]:
            return float

    alpha = Miscoverage(value=0.1)
    Miscoverage(value=1.5)  # raises ValidationError

numpy arrays are allowed as fields (arbitrary types). Models that hold
arrays should call `freeze_array` on them in an after-validator so that the
model stays immutable once built.
"""

from abc import ABC, abstractmethod
from functools import total_ordering
from typing import Any, Generic, Type, TypeVar

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, model_serializer, model_validator
from typeguard import check_type, typechecked
from typing_extensions import ClassVar, Self, TypeAlias

T = TypeVar("T")

# Field annotation for numpy arrays inside models; dtype and shape are checked
# by each model's validator.
ArrayField: TypeAlias = np.ndarray  # type: ignore[type-arg]

STRICT_MODEL_CONFIG = ConfigDict(
    strict=True,
    extra="forbid",
    frozen=True,
    allow_inf_nan=False,
    arbitrary_types_allowed=True,
    populate_by_name=False,
    use_enum_values=False,
    str_strip_whitespace=True,
    str_min_length=1,  # No empty strings allowed
)

# Interval bounds and lengths may legitimately be infinite.
EXTENDED_REAL_MODEL_CONFIG = ConfigDict(**{**STRICT_MODEL_CONFIG, "allow_inf_nan": True})


class StrictBaseModel(BaseModel):
    """A strict base model"""

    model_config: ClassVar[ConfigDict] = STRICT_MODEL_CONFIG


class ExtendedRealModel(BaseModel):
    """Strict base model whose float fields accept +/-inf (NaN is checked by hand)."""

    model_config: ClassVar[ConfigDict] = EXTENDED_REAL_MODEL_CONFIG


# Check if BaseModel has a custom_validate method
if hasattr(BaseModel, "custom_validate"):
    raise TypeError(
        "BaseModel already has a 'custom_validate' method. Please choose a different name for the custom validation method."
    )


def freeze_array(a: NDArray[Any]) -> NDArray[Any]:
    """Return a read-only view of `a`, copying first if it is still writeable."""
    if a.flags.writeable:
        a = a.copy()
        a.setflags(write=False)
    return a


@typechecked
@total_ordering
class ValidatedValueModel(StrictBaseModel, Generic[T], ABC):
    """Base class for single-value Pydantic models with custom validation and strict configuration."""

    value: T

    @staticmethod
    @abstractmethod
    def custom_validate(value: T) -> None:
        """
        Custom validation method to be implemented by subclasses.

        Raises:
            NotImplementedError: If not overridden by subclass.
        """
        raise NotImplementedError("Subclasses must implement custom_validate method")

    @model_validator(mode="after")
    def validate_model(self) -> Self:
        value_type = self.get_value_type()
        check_type(self.value, value_type)

        if not hasattr(self.value, "__lt__"):
            raise TypeError(f"Value of type {type(self.value)} is not comparable")

        self.custom_validate(self.value)
        return self

    def __lt__(self, other: Any) -> bool:
        if not isinstance(other, type(self)):
            return NotImplemented
        return bool(self.value < other.value)  # type: ignore[operator]

    def __str__(self) -> str:
        return str(self.value)

    def __float__(self) -> float:
        return float(self.value)  # type: ignore[arg-type]

    @classmethod
    @abstractmethod
    def get_value_type(cls) -> Type[T]:
        """Return the type of the 'value' field."""
        raise NotImplementedError("Subclasses must implement get_value_type method")

    @model_validator(mode="before")
    @classmethod
    def deserialize_value(cls, data: Any) -> Any:
        expected_type = cls.get_value_type()
        if isinstance(data, expected_type):
            return {"value": data}
        return data

    @model_serializer
    def serialize(self) -> T:
        return self.value


class Miscoverage(ValidatedValueModel[float]):
    """Target miscoverage level alpha, strictly inside (0, 1)."""

    @staticmethod
    def custom_validate(value: float) -> None:
        if not 0.0 < value < 1.0 or np.isnan(value):
            raise ValueError(f"alpha must lie in (0, 1), got {value}")

    @classmethod
    def get_value_type(cls) -> Type[float]:
        return float


class QuantileLevel(ValidatedValueModel[float]):
    """Quantile level tau, strictly inside (0, 1)."""

    @staticmethod
    def custom_validate(value: float) -> None:
        if not 0.0 < value < 1.0 or np.isnan(value):
            raise ValueError(f"quantile level must lie in (0, 1), got {value}")

    @classmethod
    def get_value_type(cls) -> Type[float]:
        return float


class MissingRate(ValidatedValueModel[float]):
    """Probability that an eligible cell is masked, inside [0, 1]."""

    @staticmethod
    def custom_validate(value: float) -> None:
        if not 0.0 <= value <= 1.0 or np.isnan(value):
            raise ValueError(f"missing rate must lie in [0, 1], got {value}")

    @classmethod
    def get_value_type(cls) -> Type[float]:
        return float


@typechecked
def check_alpha(alpha: float) -> float:
    """Validate a miscoverage level and return it as a plain float."""
    return float(Miscoverage(value=float(alpha)))


@typechecked
def check_level(tau: float) -> float:
    """Validate a quantile level and return it as a plain float."""
    return float(QuantileLevel(value=float(tau)))


@typechecked
def check_rate(p: float) -> float:
    """Validate a missing rate and return it as a plain float."""
    return float(MissingRate(value=float(p)))
