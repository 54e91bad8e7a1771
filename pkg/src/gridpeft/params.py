"""Named parameter collections with trainability flags and group labels."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor

# Groups whose parameters count towards the "backbone" budget in reports.
REPORT_EXCLUDED_GROUPS = ("embedding", "head")


@dataclass
class Param:
    name: str
    tensor: Tensor
    group: str
    trainable: bool = True

    @property
    def value(self):
        return self.tensor.data

    @property
    def size(self):
        return self.tensor.size


class ParamStore:
    """Ordered ``name -> Param`` mapping.

    Insertion order is the global flattening order, so two stores built by
    the same construction code flatten identically.
    """

    def __init__(self):
        self._entries = {}

    def add(self, name, data, group, trainable=True):
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(data)
        self._entries[name] = Param(name, t, group, trainable)
        return t

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def names(self, group=None, trainable=None):
        return [
            p.name
            for p in self._entries.values()
            if (group is None or p.group == group)
            and (trainable is None or p.trainable == trainable)
        ]

    def groups(self):
        seen = []
        for p in self._entries.values():
            if p.group not in seen:
                seen.append(p.group)
        return seen

    def count(self, group=None, trainable=None):
        return sum(self[n].size for n in self.names(group, trainable))

    def set_trainable(self, flag, names=None, predicate=None):
        for p in self._entries.values():
            if names is not None and p.name not in names:
                continue
            if predicate is not None and not predicate(p):
                continue
            p.trainable = flag

    def bind(self, session=None):
        """Map every name to a tensor; trainable entries are watched by ``session``."""
        if session is None:
            return {n: p.tensor for n, p in self._entries.items()}
        return {
            n: (session.watch(p.tensor) if p.trainable else p.tensor)
            for n, p in self._entries.items()
        }

    def state(self):
        return {n: p.tensor.data.copy() for n, p in self._entries.items()}

    def load_state(self, state, strict=True):
        for name, arr in state.items():
            if name not in self._entries:
                if strict:
                    raise ContractError(f"unknown parameter {name!r} in state")
                continue
            p = self._entries[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.tensor.shape:
                raise ContractError(
                    f"shape mismatch for {name}: stored {arr.shape}, model {p.tensor.shape}"
                )
            p.tensor.data[...] = arr
        if strict:
            missing = [n for n in self._entries if n not in state]
            if missing:
                raise ContractError(f"state is missing parameters: {missing[:5]}")

    def flatten(self, names):
        return np.concatenate([self[n].tensor.data.reshape(-1) for n in names])

    def split(self, flat, names):
        """Cut a flat vector back into per-parameter arrays, in ``names`` order."""
        out, pos = {}, 0
        for n in names:
            shape = self[n].tensor.shape
            size = self[n].size
            out[n] = flat[pos:pos + size].reshape(shape)
            pos += size
        if pos != len(flat):
            raise ContractError(f"flat vector has {len(flat)} entries, expected {pos}")
        return out
