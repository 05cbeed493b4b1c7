"""
Shared behaviour for the dataclass configuration sections.
"""
from __future__ import annotations

import dataclasses
from typing import Any, Dict, Mapping, Type, TypeVar

from src.errors import InvalidConfig

T = TypeVar("T", bound="ConfigSection")


class ConfigSection:
    """
    Mixin for ``@dataclass`` configuration sections.

    Subclasses implement ``validate`` and get dictionary round-tripping with
    strict key checking for free.
    """

    def validate(self) -> None:
        """Raise InvalidConfig when a field is out of range."""

    def __post_init__(self) -> None:
        self.validate()

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, tuple):
                value = list(value)
            out[field.name] = value
        return out

    @classmethod
    def from_dict(cls: Type[T], data: Mapping[str, Any]) -> T:
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise InvalidConfig(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in data.items():
            default = _field_default(known[name])
            if isinstance(default, tuple) and isinstance(value, list):
                value = tuple(value)
            elif isinstance(default, float) and isinstance(value, (int, str)) and not isinstance(value, bool):
                try:
                    value = float(value)
                except ValueError as exc:
                    raise InvalidConfig(f"{cls.__name__}.{name} must be a number, got {value!r}") from exc
            kwargs[name] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise InvalidConfig(f"Invalid {cls.__name__}: {exc}") from exc

    def replace(self: T, **changes: Any) -> T:
        return dataclasses.replace(self, **changes)

    @classmethod
    def field_types(cls) -> Dict[str, Any]:
        """Python type of each field's default value, used to parse text overrides."""
        return {f.name: type(_field_default(f)) for f in dataclasses.fields(cls)}


def _field_default(field: dataclasses.Field) -> Any:
    if field.default is not dataclasses.MISSING:
        return field.default
    if field.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        return field.default_factory()  # type: ignore[misc]
    return None
