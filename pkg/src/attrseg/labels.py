"""The label space and the attribute-combination table.

Ten garbage categories, three states (only for bottle/cup/box/can), two
positions. Combining them gives 4*3*2 + 6*2 = 36 joint classes ("combos"),
ordered category-major, then state, then position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

CATEGORY_NAMES = [
    "bottle", "cup", "box", "can", "paper ball",
    "bag", "peel", "toy", "cigarette", "trash bin",
]
STATE_NAMES = {0: "standing", 1: "lying", 2: "deformation"}
POSITION_NAMES = {0: "ground", 1: "platform"}
STATEFUL_CATEGORIES = ("bottle", "cup", "box", "can")


@dataclass(frozen=True)
class LabelSpace:
    categories: Tuple[str, ...] = tuple(CATEGORY_NAMES)
    states: Tuple[str, ...] = ("standing", "lying", "deformation")
    positions: Tuple[str, ...] = ("ground", "platform")
    stateful: Tuple[str, ...] = STATEFUL_CATEGORIES

    def __post_init__(self):
        assert len(self.categories) == 10
        assert len(self.states) == 3
        assert len(self.positions) == 2
        assert len(self.stateful) == 4
        assert all(c in self.categories for c in self.stateful)

    @property
    def num_labels(self) -> int:
        return len(self.categories) + len(self.states) + len(self.positions)

    def label_names(self) -> List[str]:
        """All 15 atomic labels in fixed order: categories, states, positions."""
        return list(self.categories) + list(self.states) + list(self.positions)

    def category_id(self, name: str) -> int:
        return self.categories.index(name)

    def is_stateful(self, category_id: int) -> bool:
        return self.categories[category_id] in self.stateful

    def state_label_index(self, state: int) -> int:
        return len(self.categories) + state

    def position_label_index(self, position: int) -> int:
        return len(self.categories) + len(self.states) + position


@dataclass(frozen=True)
class Combo:
    combo_id: int
    category_id: int
    state: Optional[int]  # None for stateless categories
    position: int

    def name(self, space: LabelSpace) -> str:
        parts = [space.categories[self.category_id]]
        if self.state is not None:
            parts.append(space.states[self.state])
        parts.append(space.positions[self.position])
        return "/".join(parts)


@dataclass
class ComboTable:
    combos: List[Combo]
    _index: Dict[Tuple[int, Optional[int], int], int] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {(c.category_id, c.state, c.position): c.combo_id
                       for c in self.combos}
        assert len(self._index) == len(self.combos)

    def __len__(self) -> int:
        return len(self.combos)

    def by_id(self, combo_id: int) -> Combo:
        return self.combos[combo_id]

    def lookup(self, category_id: int, state: Optional[int], position: int) -> int:
        key = (category_id, state, position)
        if key not in self._index:
            raise KeyError(f"no combo for category={category_id} "
                           f"state={state} position={position}")
        return self._index[key]

    def member_label_indices(self, combo_id: int, space: LabelSpace) -> List[int]:
        """Atomic label indices whose logits are averaged for this combo."""
        c = self.combos[combo_id]
        idx = [c.category_id]
        if c.state is not None:
            idx.append(space.state_label_index(c.state))
        idx.append(space.position_label_index(c.position))
        return idx


def build_combo_table(space: LabelSpace) -> ComboTable:
    combos: List[Combo] = []
    for cat_id, cat in enumerate(space.categories):
        if cat in space.stateful:
            for state in range(len(space.states)):
                for pos in range(len(space.positions)):
                    combos.append(Combo(len(combos), cat_id, state, pos))
        else:
            for pos in range(len(space.positions)):
                combos.append(Combo(len(combos), cat_id, None, pos))
    return ComboTable(combos)
