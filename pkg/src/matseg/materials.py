"""The fixed material vocabulary and label sets attached to components and samples.

The five materials have a fixed canonical order; argmax tie-breaking and every
array whose axis runs over materials follow it.
"""

from __future__ import annotations

from typing import Iterable, Iterator

MATERIALS: tuple[str, ...] = ("wood", "plastic", "metal", "glass", "fabric")
MATERIAL_INDEX: dict[str, int] = {name: i for i, name in enumerate(MATERIALS)}
NUM_MATERIALS = len(MATERIALS)


class MaterialLabelSet:
    """Immutable set of material labels, stored as a bitmask over MATERIALS.

    Multi-material ground truth such as "metal or plastic" is a set with two
    bits on. Equality, hashing and iteration follow the canonical order.
    """

    __slots__ = ("_mask",)

    def __init__(self, names: Iterable[str] = ()):
        mask = 0
        for name in names:
            try:
                mask |= 1 << MATERIAL_INDEX[name]
            except KeyError:
                raise ValueError(f"unknown material {name!r}; expected one of {MATERIALS}") from None
        self._mask = mask

    @classmethod
    def from_mask(cls, mask: int) -> "MaterialLabelSet":
        if not 0 <= mask < (1 << NUM_MATERIALS):
            raise ValueError(f"mask {mask} out of range")
        out = cls.__new__(cls)
        out._mask = mask
        return out

    @property
    def mask(self) -> int:
        return self._mask

    def __contains__(self, name: str) -> bool:
        idx = MATERIAL_INDEX.get(name)
        return idx is not None and bool(self._mask >> idx & 1)

    def __iter__(self) -> Iterator[str]:
        for i, name in enumerate(MATERIALS):
            if self._mask >> i & 1:
                yield name

    def __len__(self) -> int:
        return bin(self._mask).count("1")

    def __bool__(self) -> bool:
        return self._mask != 0

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MaterialLabelSet) and self._mask == other._mask

    def __hash__(self) -> int:
        return hash(self._mask)

    def __repr__(self) -> str:
        return f"MaterialLabelSet({list(self)})"

    def intersects(self, other: "MaterialLabelSet") -> bool:
        """True when the two sets share at least one material."""
        return bool(self._mask & other._mask)

    def names(self) -> tuple[str, ...]:
        return tuple(self)

    def indices(self) -> tuple[int, ...]:
        return tuple(i for i in range(NUM_MATERIALS) if self._mask >> i & 1)


EMPTY_LABELS = MaterialLabelSet()
