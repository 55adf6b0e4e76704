"""Random access to every slice of a corpus, in memory.

Rows are numbered volume by volume in manifest order, slice by slice within
a volume, so ``row = offset[volume] + k``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from ..domain import parse_image_ref
from ..errors import ConstraintError, EmptyDataset
from ..ingest import CorpusManifest, load_volume, quantize
from ..rng import RngStream
from .model import ROUTE_INDEX, encoder_view, latent_of
from .toycorpus import PGM_MAX, ToyCorpus


def patient_of(volume_id: str) -> str:
    """Patient key of a volume id: everything before the last underscore."""
    return volume_id.rsplit("_", 1)[0]


class SliceStore:
    """Slices of a corpus as 16-bit levels, with cached encoder and latent views.

    Parameters
    ----------
    manifest : CorpusManifest
    volumes : dict
        ``volume_id -> (S, H, W)`` uint16 array (levels out of 65535).
    """

    def __init__(self, manifest: CorpusManifest, volumes: dict[str, np.ndarray]):
        if not manifest.volumes:
            raise EmptyDataset("corpus has no volumes")
        self.manifest = manifest
        self.volume_ids = [v.volume_id for v in manifest.volumes]
        self._levels = np.concatenate([np.asarray(volumes[v], dtype=np.uint16) for v in self.volume_ids])
        sizes = [v.n_slices for v in manifest.volumes]
        self.offsets = dict(zip(self.volume_ids, np.cumsum([0] + sizes[:-1]).tolist()))
        self.size = manifest.volumes[0].width
        if any(v.width != self.size or v.height != self.size for v in manifest.volumes):
            raise ConstraintError("every volume must share one square slice size")
        self._raw = None
        self._latents = None

    @classmethod
    def from_toy(cls, corpus: ToyCorpus) -> "SliceStore":
        return cls(corpus.manifest, corpus.volumes)

    @classmethod
    def from_manifest(cls, manifest: CorpusManifest, jobs: int = 1) -> "SliceStore":
        """Read every PGM slice under ``manifest.root``."""

        def read(vref):
            return quantize(load_volume(vref, manifest.root)).astype(np.uint16)

        if jobs <= 1:
            stacks = [read(v) for v in manifest.volumes]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as ex:
                stacks = list(ex.map(read, manifest.volumes))
        return cls(manifest, dict(zip((v.volume_id for v in manifest.volumes), stacks)))

    def __len__(self) -> int:
        return len(self._levels)

    def row(self, volume_id: str, k: int) -> int:
        return self.offsets[volume_id] + k

    def ref_row(self, ref: str) -> int:
        """Row of an image reference ``"volume_id#k"``."""
        vid, k = parse_image_ref(ref)
        if vid not in self.offsets:
            raise ConstraintError(f"image reference {ref!r} names an unknown volume")
        return self.row(vid, k)

    def slices(self, rows) -> np.ndarray:
        """Float slices in [0, 1] for the given rows."""
        return self._levels[np.asarray(rows, dtype=np.int64)] / PGM_MAX

    def raw_inputs(self) -> np.ndarray:
        """Unstandardised encoder view of every row, ``(n_rows, 256)``."""
        if self._raw is None:
            self._raw = np.concatenate(
                [encoder_view(self.slices(np.arange(i, min(i + 4096, len(self))))) for i in range(0, len(self), 4096)]
            )
        return self._raw

    def latents(self) -> np.ndarray:
        """Flow latent of every row, ``(n_rows, 64)``."""
        if self._latents is None:
            self._latents = np.concatenate(
                [latent_of(self.slices(np.arange(i, min(i + 4096, len(self))))) for i in range(0, len(self), 4096)]
            )
        return self._latents

    # -- splits

    @property
    def patients(self) -> list[str]:
        return sorted({patient_of(v) for v in self.volume_ids})

    def split_patients(self, seed: int, holdout_fraction: float) -> tuple[list[str], list[str]]:
        """Seeded patient-level split into (train, held-out); both sides non-empty."""
        patients = self.patients
        if len(patients) < 2:
            raise EmptyDataset("need at least two patients to split")
        order = RngStream(seed, ["split"]).permutation(len(patients))
        n_hold = min(max(1, round(holdout_fraction * len(patients))), len(patients) - 1)
        held = sorted(patients[i] for i in order[:n_hold])
        train = sorted(patients[i] for i in order[n_hold:])
        return train, held

    def sub_manifest(self, patients) -> CorpusManifest:
        keep = set(patients)
        return replace(
            self.manifest,
            volumes=tuple(v for v in self.manifest.volumes if patient_of(v.volume_id) in keep),
            pairs=tuple(p for p in self.manifest.pairs if patient_of(p.src.volume_id) in keep),
        )

    def pair_rows(self, pairs, stride: int = 1) -> np.ndarray:
        """``(n, 3)`` array of (src row, tgt row, route index) over every ``stride``-th slice."""
        out = [
            (self.row(p.src.volume_id, k), self.row(p.tgt.volume_id, k), ROUTE_INDEX[p.route.route_id])
            for p in pairs
            for k in range(0, p.n_slices, stride)
        ]
        return np.array(out, dtype=np.int64).reshape(-1, 3)
