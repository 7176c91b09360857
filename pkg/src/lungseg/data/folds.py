"""Seeded k-fold volume split with a per-fold validation slice subset."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from ..core.rng import make_rng

SliceId = Tuple[int, int]


@dataclass
class Fold:
    index: int
    test_volumes: List[int]
    train_volumes: List[int]
    val_slices: List[SliceId] = field(default_factory=list)

    def role(self, volume_id: int, slice_index: int) -> str:
        if volume_id in self.test_volumes:
            return "test"
        if (volume_id, slice_index) in set(self.val_slices):
            return "validation"
        return "train"


@dataclass
class FoldPlan:
    k: int
    seed: int
    volume_ids: List[int]
    val_fraction: float
    folds: List[Fold]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        raw = json.loads(text)
        folds = [
            Fold(f["index"], list(f["test_volumes"]), list(f["train_volumes"]),
                 [tuple(s) for s in f["val_slices"]])
            for f in raw["folds"]
        ]
        return cls(raw["k"], raw["seed"], list(raw["volume_ids"]), raw["val_fraction"], folds)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_folds(
    volume_ids: Sequence[int],
    seed: int,
    k: int = 5,
    slices: Optional[Iterable[SliceId]] = None,
    val_fraction: float = 0.12,
) -> FoldPlan:
    """Shuffle the volumes, cut them into k consecutive test blocks, then draw validation slices.

    Twenty volumes give the 16/4 train/test split per fold; any count divisible
    by ``k`` works the same way with ``len(volume_ids) // k`` test volumes.
    ``slices`` lists every (volume_id, slice_index); without it the
    validation sets are left empty.
    """
    ids = [int(v) for v in volume_ids]
    if len(set(ids)) != len(ids):
        raise ValueError("make_folds: duplicate volume ids")
    if not ids or len(ids) % k:
        raise ValueError(f"make_folds: {len(ids)} volumes cannot be split into {k} equal folds")
    order = make_rng(seed, "folds").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    block = len(ids) // k
    all_slices = sorted({(int(v), int(i)) for v, i in slices}) if slices is not None else []

    folds = []
    for f in range(k):
        test = sorted(shuffled[f * block : (f + 1) * block])
        train = sorted(v for v in ids if v not in test)
        train_set = set(train)
        pool = [s for s in all_slices if s[0] in train_set]
        n_val = round_half_up(val_fraction * len(pool))
        rng = make_rng(seed, f"validation-{f}")
        picked = sorted(rng.choice(len(pool), size=n_val, replace=False).tolist()) if n_val else []
        folds.append(Fold(f, test, train, [pool[i] for i in picked]))
    return FoldPlan(k, int(seed), ids, val_fraction, folds)
