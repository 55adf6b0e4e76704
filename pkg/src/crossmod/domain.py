"""Shared vocabulary: modalities, routes, images and understanding instances."""

from __future__ import annotations

import enum
import string
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DataError, UnknownRoute
from .rng import RngStream, stream

__all__ = [
    "Modality",
    "DatasetTag",
    "Route",
    "Image2D",
    "UnderstandingInstance",
    "route_catalog",
    "get_route",
    "letter",
    "RngStream",
    "stream",
]

LETTERS = string.ascii_uppercase
TEMPLATE_VERSION = 1


class Modality(enum.Enum):
    CT = "ct"
    CBCT = "cbct"
    PET = "pet"
    MR = "mr"
    MR_T1 = "t1"
    MR_T1CE = "t1ce"
    MR_T2 = "t2"
    MR_FLAIR = "flair"

    @property
    def token(self) -> str:
        return self.value

    @property
    def coarse(self) -> "Modality":
        """Coarse class: every MR sequence collapses to ``MR``."""
        if self.name.startswith("MR"):
            return Modality.MR
        return self

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def is_mr(self) -> bool:
        return self.coarse is Modality.MR

    @classmethod
    def parse(cls, text: str) -> "Modality":
        key = str(text).strip()
        for m in cls:
            if key in (m.name, m.value) or key.upper() == m.name:
                return m
        raise DataError(f"unknown modality {text!r}")


_LABELS = {
    Modality.CT: "CT",
    Modality.CBCT: "CBCT",
    Modality.PET: "PET",
    Modality.MR: "MRI",
    Modality.MR_T1: "MRI T1",
    Modality.MR_T1CE: "MRI T1CE",
    Modality.MR_T2: "MRI T2",
    Modality.MR_FLAIR: "MRI FLAIR",
}
_ORDER = {m: i for i, m in enumerate(Modality)}


class DatasetTag(enum.Enum):
    SYNTHRAD_BRAIN = "synthrad_brain"
    SYNTHRAD_PELVIS = "synthrad_pelvis"
    AUTOPET = "autopet"
    BRATS = "brats"

    @property
    def allowed_modalities(self) -> frozenset:
        return _ALLOWED[self]

    @property
    def fine_grained_mr(self) -> bool:
        return self is DatasetTag.BRATS

    @classmethod
    def parse(cls, text: str) -> "DatasetTag":
        key = str(text).strip()
        for d in cls:
            if key in (d.name, d.value) or key.upper() == d.name:
                return d
        raise DataError(f"unknown dataset {text!r}")


_BRATS_SEQ = (Modality.MR_T1, Modality.MR_T1CE, Modality.MR_T2, Modality.MR_FLAIR)
_ALLOWED = {
    DatasetTag.SYNTHRAD_BRAIN: frozenset({Modality.CBCT, Modality.CT, Modality.MR}),
    DatasetTag.SYNTHRAD_PELVIS: frozenset({Modality.CBCT, Modality.CT, Modality.MR}),
    DatasetTag.AUTOPET: frozenset({Modality.CT, Modality.PET}),
    DatasetTag.BRATS: frozenset(_BRATS_SEQ),
}


@dataclass(frozen=True, order=False)
class Route:
    dataset: DatasetTag
    src: Modality
    tgt: Modality

    def __post_init__(self):
        if self.src is self.tgt:
            raise DataError("route source and target modality must differ")

    @property
    def route_id(self) -> str:
        return f"{self.dataset.value}/{self.src.token}_to_{self.tgt.token}"

    def reversed(self) -> "Route":
        return Route(self.dataset, self.tgt, self.src)

    def __str__(self) -> str:
        return self.route_id


def _build_catalog() -> tuple[Route, ...]:
    pairs: list[tuple[DatasetTag, Modality, Modality]] = []
    for ds in (DatasetTag.SYNTHRAD_BRAIN, DatasetTag.SYNTHRAD_PELVIS):
        for a, b in ((Modality.CBCT, Modality.CT), (Modality.MR, Modality.CT)):
            pairs += [(ds, a, b), (ds, b, a)]
    pairs += [
        (DatasetTag.AUTOPET, Modality.CT, Modality.PET),
        (DatasetTag.AUTOPET, Modality.PET, Modality.CT),
    ]
    pairs += [(DatasetTag.BRATS, a, b) for a in _BRATS_SEQ for b in _BRATS_SEQ if a is not b]
    ds_order = {d: i for i, d in enumerate(DatasetTag)}
    pairs.sort(key=lambda p: (ds_order[p[0]], _ORDER[p[1]], _ORDER[p[2]]))
    return tuple(Route(*p) for p in pairs)


_CATALOG = _build_catalog()
_BY_ID = {r.route_id: r for r in _CATALOG}


def route_catalog() -> list[Route]:
    """The 22 directed synthesis routes in canonical order."""
    return list(_CATALOG)


def get_route(route_id: str) -> Route:
    try:
        return _BY_ID[route_id]
    except KeyError:
        raise UnknownRoute(f"unknown route {route_id!r}") from None


def letter(index: int) -> str:
    if not 0 <= index < len(LETTERS):
        raise DataError(f"option index {index} outside A-Z")
    return LETTERS[index]


@dataclass(frozen=True, eq=False)
class Image2D:
    """Normalised 2-D slice, ``data`` shaped ``(height, width)`` with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise DataError(f"image must be a non-empty 2-D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("image values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other) -> bool:
        return isinstance(other, Image2D) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class UnderstandingInstance:
    instance_id: str
    task: str
    prompt: str
    image_refs: tuple[str, ...]
    options: tuple[str, ...]
    answer_index: int
    answer_letter: str
    meta: dict[str, Any] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "image_refs", tuple(self.image_refs))
        object.__setattr__(self, "options", tuple(self.options))
        if self.task not in ("CTS", "MI", "TIA"):
            raise DataError(f"unknown task {self.task!r}")
        if len(self.options) < 2:
            raise DataError("an instance needs at least two options")
        if len(self.options) > len(LETTERS):
            raise DataError("more than 26 options")
        if not 0 <= self.answer_index < len(self.options):
            raise DataError("answer_index out of range")
        if self.answer_letter != LETTERS[self.answer_index]:
            raise DataError("answer_letter does not match answer_index")

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "task": self.task,
            "prompt": self.prompt,
            "image_refs": list(self.image_refs),
            "options": list(self.options),
            "answer_index": self.answer_index,
            "answer_letter": self.answer_letter,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "UnderstandingInstance":
        return cls(
            instance_id=d["instance_id"],
            task=d["task"],
            prompt=d["prompt"],
            image_refs=tuple(d["image_refs"]),
            options=tuple(d["options"]),
            answer_index=int(d["answer_index"]),
            answer_letter=d["answer_letter"],
            meta=dict(d.get("meta", {})),
        )


def parse_image_ref(ref: str) -> tuple[str, int]:
    """Split ``"volume_id#k"`` into its parts."""
    volume_id, sep, k = ref.rpartition("#")
    if not sep or not k.isdigit():
        raise DataError(f"malformed image ref {ref!r}")
    return volume_id, int(k)
