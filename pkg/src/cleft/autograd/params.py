"""Named parameter registry with per-entry trainable flags."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from cleft.autograd.variable import Variable
from cleft.errors import ConfigError, ContractError

COMPONENT_TAGS = (
    "vision",
    "text_base",
    "text_embedding",
    "adapter",
    "projection",
    "temperature",
    "prompt_context",
    "probe",
)


@dataclass
class ParamEntry:
    var: Variable
    tag: str

    @property
    def trainable(self) -> bool:
        return self.var.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.var.requires_grad = bool(flag)
        if not flag:
            self.var.zero_grad()


class ParameterStore:
    """Ordered map ``name -> (Variable, trainable, component tag)``.

    Iteration is always lexicographic by name so optimizer updates and
    serialisation are reproducible. A parameter's ``requires_grad`` flag is its
    trainable flag: frozen entries never enter the autodiff tape.
    """

    def __init__(self, dtype=np.float32) -> None:
        self._entries: dict[str, ParamEntry] = {}
        self.dtype = np.dtype(dtype)

    def add(self, name: str, value, tag: str, trainable: bool = True) -> Variable:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        if tag not in COMPONENT_TAGS:
            raise ConfigError(f"unknown component tag {tag!r} for {name!r}")
        var = Variable(np.array(value, dtype=self.dtype), requires_grad=trainable, name=name)
        self._entries[name] = ParamEntry(var, tag)
        return var

    def remove(self, name: str) -> None:
        del self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Variable:
        try:
            return self._entries[name].var
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, ParamEntry]]:
        for name in self.names():
            yield name, self._entries[name]

    def tag_of(self, name: str) -> str:
        return self._entries[name].tag

    def tags(self) -> set[str]:
        return {e.tag for e in self._entries.values()}

    def trainable_items(self) -> Iterator[tuple[str, Variable]]:
        for name, e in self.items():
            if e.trainable:
                yield name, e.var

    def set_trainable(self, name: str, flag: bool) -> None:
        self._entries[name].trainable = flag

    def zero_grads(self) -> None:
        for e in self._entries.values():
            e.var.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: e.var.value.copy() for name, e in self.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._entries) - set(state)
            extra = set(state) - set(self._entries)
            if missing or extra:
                raise ContractError(
                    f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, value in state.items():
            if name not in self._entries:
                continue
            var = self._entries[name].var
            value = np.asarray(value, dtype=self.dtype)
            if value.shape != var.shape:
                raise ContractError(f"{name}: shape {value.shape} != {var.shape}")
            var.value = value.copy()

    def subset(self, tags: Iterable[str]) -> dict[str, np.ndarray]:
        tags = set(tags)
        return {name: e.var.value.copy() for name, e in self.items() if e.tag in tags}
