"""Dataclass <-> JSON/YAML serialization for reports and sweep specs."""

import logging
from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import asdict, is_dataclass
from json import dump as json_dump
from json import load as json_load
from pathlib import Path
from typing import Any

from yaml import safe_dump, safe_load

logger = logging.getLogger(__name__)


def check_file(path_out: Path, overwrite: bool = False) -> bool:
    """Refuse to write over a directory, or over a file unless ``overwrite``."""
    if path_out.exists():
        if path_out.is_dir():
            raise IsADirectoryError(f"Output path exists and it is a directory. {path_out}")
        if path_out.is_file() and not overwrite:
            raise FileExistsError(f"Output path exists and overwrite is false. {path_out}")
    return True


class SimpleSerializerABC[C, S](ABC):
    """Converts complex objects to json/yaml friendly simple objects and back."""

    @abstractmethod
    def to_simple(self, complex_obj: C) -> S:
        pass

    @abstractmethod
    def from_simple(self, simple_obj: S) -> C:
        pass

    def save_as_json(self, path_out: Path, complex_obj: C, indent: int = 1, overwrite: bool = False):
        check_file(path_out=path_out, overwrite=overwrite)
        path_out.parent.mkdir(exist_ok=True, parents=True)
        with open(path_out, "w", encoding="utf-8") as file:
            json_dump(obj=self.to_simple(complex_obj), fp=file, indent=indent)

    def load_from_json(self, path_in: Path) -> C:
        with open(path_in, encoding="utf-8") as file:
            return self.from_simple(json_load(file))

    def save_as_yaml(self, path_out: Path, complex_obj: C, indent: int = 1, overwrite: bool = False):
        check_file(path_out=path_out, overwrite=overwrite)
        path_out.parent.mkdir(exist_ok=True, parents=True)
        with open(path_out, "w", encoding="utf-8") as file:
            safe_dump(data=self.to_simple(complex_obj), stream=file, indent=indent, sort_keys=False)

    def load_from_yaml(self, path_in: Path) -> C:
        with open(path_in, encoding="utf-8") as file:
            return self.from_simple(safe_load(file))


class DataclassSerializer[C, S](SimpleSerializerABC[C, S]):
    def __init__(
        self,
        simple_factory: Callable[[C], S] | None = None,
        complex_factory: Callable[[S], C] | None = None,
    ) -> None:
        """A simple dataclass serializer.

        To serialize, the default arguments are enough.
        Default behavior for the simple factory is `asdict(value)`

        To deserialize, provide a complex factory.

        ```
        # For simple cases:
        lambda x: YourDataclass(**x)
        ```

        Args:
            simple_factory : The dataclass to simple object factory. Defaults to None.
            complex_factory : The simple object to dataclass factory. Defaults to None.
        """
        self.simple_factory = simple_factory or self._to_simple_default
        self.complex_factory = complex_factory

    def to_simple(self, complex_obj: C) -> S:
        return self.simple_factory(complex_obj)

    def from_simple(self, simple_obj: S) -> C:
        if self.complex_factory is None:
            raise ValueError("DataclassSerializer was not provided a complex factory.")
        return self.complex_factory(simple_obj)

    def _to_simple_default(self, data_cls: C) -> S:
        if is_dataclass(data_cls) and not isinstance(data_cls, type):
            simple: Any = asdict(data_cls)
            return simple
        raise ValueError(f"complex_obj is not a dataclass, its type name is {type(data_cls).__name__}")
