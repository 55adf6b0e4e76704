"""Paired-volume ingestion: binary PGM slices plus a JSON corpus manifest."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from .domain import DatasetTag, Image2D, Modality, Route, get_route
from .errors import (
    ConstraintError,
    DataError,
    IndexOutOfRange,
    MalformedHeader,
    SchemaError,
    TruncatedPayload,
    UnsupportedMaxval,
)

SCHEMA_VERSION = 1

_TOKEN = re.compile(rb"\S+")


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last one.
    """
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise MalformedHeader("header ended early")
        if buf[pos : pos + 1] == b"#":
            eol = buf.find(b"\n", pos)
            pos = n if eol < 0 else eol + 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos


def parse_pgm(data: bytes) -> Image2D:
    """Decode a binary (P5) PGM into an image normalised by its maxval.

    Parameters
    ----------
    data : bytes
        Raw file contents. Samples are one byte for ``maxval == 255`` and
        two big-endian bytes for ``maxval == 65535``.

    Returns
    -------
    Image2D
        Pixel ``v`` becomes ``v / maxval``.
    """
    data = bytes(data)
    if data[:2] != b"P5":
        raise MalformedHeader(f"bad magic {data[:2]!r}, expected b'P5'")
    tokens, pos = _header_tokens(data[2:], 3)
    pos += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise MalformedHeader(f"non-numeric header fields {tokens!r}") from None
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"bad dimensions {width}x{height}")
    if maxval not in (255, 65535):
        raise UnsupportedMaxval(f"maxval {maxval} not in {{255, 65535}}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise TruncatedPayload("missing whitespace after maxval")
    payload = data[pos + 1 :]
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(payload) < need:
        raise TruncatedPayload(
            f"expected {width * height} samples ({need} bytes), got {len(payload)} bytes"
        )
    pixels = np.frombuffer(payload[:need], dtype=dtype).reshape(height, width)
    return Image2D(pixels.astype(np.float64) / maxval)


def quantize(image, maxval: int = 65535) -> np.ndarray:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(arr * maxval).astype(np.int64)


def write_pgm(image, maxval: int = 65535, comment: str | None = None) -> bytes:
    """Encode an image in [0, 1] as P5 bytes (rounded to the nearest level).

    ``comment`` becomes one ``#`` line after the magic number.
    """
    if maxval not in (255, 65535):
        raise UnsupportedMaxval(f"maxval {maxval} not in {{255, 65535}}")
    q = quantize(image, maxval)
    if q.ndim != 2:
        raise DataError("write_pgm expects a 2-D image")
    height, width = q.shape
    note = ""
    if comment is not None:
        if "\n" in comment or "\r" in comment:
            raise DataError("PGM comment must be a single line")
        note = f"# {comment}\n"
    header = f"P5\n{note}{width} {height}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval == 65535 else "u1"
    return header + q.astype(dtype).tobytes()


def read_pgm(path) -> Image2D:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def save_pgm(path, image, maxval: int = 65535, comment: str | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(write_pgm(image, maxval, comment))


@dataclass(frozen=True)
class VolumeRef:
    volume_id: str
    dataset: DatasetTag
    modality: Modality
    slice_paths: tuple[str, ...]
    width: int
    height: int
    intensity_window: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "slice_paths", tuple(self.slice_paths))
        if not self.slice_paths:
            raise ConstraintError(f"volume {self.volume_id!r} has no slices")
        lo, hi = self.intensity_window
        if not lo < hi:
            raise ConstraintError(f"volume {self.volume_id!r}: window lo must be < hi")

    @property
    def n_slices(self) -> int:
        return len(self.slice_paths)

    def ref(self, k: int) -> str:
        return f"{self.volume_id}#{k}"


@dataclass(frozen=True)
class VolumePair:
    pair_id: str
    route: Route
    src: VolumeRef
    tgt: VolumeRef

    def __post_init__(self):
        if self.src.n_slices != self.tgt.n_slices:
            raise ConstraintError(
                f"pair {self.pair_id!r}: {self.src.n_slices} source slices vs "
                f"{self.tgt.n_slices} target slices (must be 1:1)"
            )
        if self.src.modality is not self.route.src or self.tgt.modality is not self.route.tgt:
            raise ConstraintError(f"pair {self.pair_id!r}: modalities do not match route")
        if (self.src.width, self.src.height) != (self.tgt.width, self.tgt.height):
            raise ConstraintError(f"pair {self.pair_id!r}: slice dimensions differ")

    @property
    def n_slices(self) -> int:
        return self.src.n_slices


@dataclass(frozen=True)
class CorpusManifest:
    schema_version: int
    volumes: tuple[VolumeRef, ...]
    pairs: tuple[VolumePair, ...]
    root: str = "."

    def volume(self, volume_id: str) -> VolumeRef:
        for v in self.volumes:
            if v.volume_id == volume_id:
                return v
        raise ConstraintError(f"unknown volume {volume_id!r}")

    @property
    def volume_index(self) -> dict[str, VolumeRef]:
        return {v.volume_id: v for v in self.volumes}

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "volumes": [
                {
                    "volume_id": v.volume_id,
                    "dataset": v.dataset.value,
                    "modality": v.modality.name,
                    "width": v.width,
                    "height": v.height,
                    "intensity_window": list(v.intensity_window),
                    "slices": list(v.slice_paths),
                }
                for v in self.volumes
            ],
            "pairs": [
                {
                    "pair_id": p.pair_id,
                    "route_id": p.route.route_id,
                    "src_volume_id": p.src.volume_id,
                    "tgt_volume_id": p.tgt.volume_id,
                }
                for p in self.pairs
            ],
        }


MANIFEST_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["schema_version", "volumes", "pairs"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "provenance": {"type": "object"},
        "volumes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["volume_id", "dataset", "modality", "width", "height", "slices"],
                "additionalProperties": False,
                "properties": {
                    "volume_id": {"type": "string", "minLength": 1},
                    "dataset": {"type": "string"},
                    "modality": {"type": "string"},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                    "intensity_window": {
                        "type": "array",
                        "items": {"type": "number"},
                        "minItems": 2,
                        "maxItems": 2,
                    },
                    "slices": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                },
            },
        },
        "pairs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["pair_id", "route_id", "src_volume_id", "tgt_volume_id"],
                "additionalProperties": False,
                "properties": {
                    "pair_id": {"type": "string", "minLength": 1},
                    "route_id": {"type": "string"},
                    "src_volume_id": {"type": "string"},
                    "tgt_volume_id": {"type": "string"},
                },
            },
        },
    },
    "additionalProperties": False,
}


def _pointer(path: Sequence) -> str:
    return "".join(f"/{p}" for p in path)


def manifest_from_dict(doc: Any, root: str | os.PathLike = ".") -> CorpusManifest:
    validator = jsonschema.Draft7Validator(MANIFEST_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise SchemaError(err.message, _pointer(err.absolute_path))

    volumes: dict[str, VolumeRef] = {}
    for i, v in enumerate(doc["volumes"]):
        where = f"/volumes/{i}"
        try:
            dataset = DatasetTag.parse(v["dataset"])
            modality = Modality.parse(v["modality"])
        except DataError as exc:
            raise SchemaError(str(exc), where) from None
        if modality not in dataset.allowed_modalities:
            raise ConstraintError(f"{where}: modality {modality.name} not used by {dataset.name}")
        if v["volume_id"] in volumes:
            raise ConstraintError(f"{where}: duplicate volume_id {v['volume_id']!r}")
        window = tuple(float(x) for x in v.get("intensity_window", (0.0, 1.0)))
        volumes[v["volume_id"]] = VolumeRef(
            volume_id=v["volume_id"],
            dataset=dataset,
            modality=modality,
            slice_paths=tuple(v["slices"]),
            width=v["width"],
            height=v["height"],
            intensity_window=window,
        )

    pairs: list[VolumePair] = []
    seen: set[str] = set()
    for i, p in enumerate(doc["pairs"]):
        where = f"/pairs/{i}"
        if p["pair_id"] in seen:
            raise ConstraintError(f"{where}: duplicate pair_id {p['pair_id']!r}")
        seen.add(p["pair_id"])
        for key in ("src_volume_id", "tgt_volume_id"):
            if p[key] not in volumes:
                raise ConstraintError(f"{where}: {key} {p[key]!r} does not exist")
        try:
            route = get_route(p["route_id"])
        except DataError as exc:
            raise ConstraintError(f"{where}: {exc}") from None
        src, tgt = volumes[p["src_volume_id"]], volumes[p["tgt_volume_id"]]
        if src.dataset is not route.dataset or tgt.dataset is not route.dataset:
            raise ConstraintError(f"{where}: volume dataset does not match route")
        try:
            pairs.append(VolumePair(p["pair_id"], route, src, tgt))
        except ConstraintError as exc:
            raise ConstraintError(f"{where}: {exc}") from None

    return CorpusManifest(
        schema_version=doc["schema_version"],
        volumes=tuple(volumes.values()),
        pairs=tuple(pairs),
        root=str(root),
    )


def load_manifest(path) -> CorpusManifest:
    """Read and fully validate a corpus manifest.

    Slice paths are kept relative; they resolve against the manifest's
    directory, which is stored as ``root``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    return manifest_from_dict(doc, root=path.parent)


def apply_window(pixels: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    lo, hi = window
    return np.clip((pixels - lo) / (hi - lo), 0.0, 1.0)


def load_slice(vref: VolumeRef, k: int, root: str | os.PathLike = ".") -> Image2D:
    if not 0 <= k < vref.n_slices:
        raise IndexOutOfRange(f"slice {k} outside volume {vref.volume_id!r} ({vref.n_slices})")
    img = read_pgm(Path(root) / vref.slice_paths[k])
    if img.shape != (vref.height, vref.width):
        raise ConstraintError(
            f"{vref.slice_paths[k]}: shape {img.shape} != ({vref.height}, {vref.width})"
        )
    if tuple(vref.intensity_window) == (0.0, 1.0):
        return img
    return Image2D(apply_window(img.data, vref.intensity_window))


def load_volume(vref: VolumeRef, root: str | os.PathLike = ".") -> np.ndarray:
    """All slices of a volume stacked as ``(S, H, W)``."""
    return np.stack([load_slice(vref, k, root).data for k in range(vref.n_slices)])
