"""Synthetic paired-modality corpus.

Each patient owns a content field (Gaussian blobs on a smooth background)
whose blob centres random-walk from slice to slice, so neighbouring slices
make genuine hard negatives. Every modality renders the same content through
its own gamma curve, low-frequency cosine bias and additive noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..domain import DatasetTag, Modality, Route, route_catalog
from ..errors import ConfigError
from ..ingest import SCHEMA_VERSION, CorpusManifest, manifest_from_dict, quantize, write_pgm
from ..rng import RngStream


PGM_MAX = 65535


@dataclass(frozen=True)
class ModalityStyle:
    gamma: float
    bias_amplitude: float
    noise_sigma: float


DEFAULT_STYLES = {
    "CT": ModalityStyle(gamma=1.0, bias_amplitude=0.0, noise_sigma=0.01),
    "CBCT": ModalityStyle(gamma=1.4, bias_amplitude=0.05, noise_sigma=0.05),
    "MR": ModalityStyle(gamma=0.7, bias_amplitude=0.05, noise_sigma=0.02),
}


@dataclass
class ToyCorpusConfig:
    n_volumes: int = 300
    slices_per_volume: int = 32
    size: int = 32
    n_blobs: int = 4
    drift: float = 0.5
    heading_jitter: float = 0.35
    dataset: str = "synthrad_brain"
    styles: dict = field(default_factory=lambda: {k: asdict(v) for k, v in DEFAULT_STYLES.items()})
    seed: int = 0
    min_k_window: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_volumes < 1:
            raise ConfigError("n_volumes must be >= 1")
        if self.size < 8 or self.size % 4:
            raise ConfigError("size must be a multiple of 4 and >= 8")
        if self.n_blobs < 1 or self.drift < 0:
            raise ConfigError("n_blobs must be >= 1 and drift >= 0")
        if self.slices_per_volume < 2 * self.min_k_window + 2:
            raise ConfigError(
                f"slices_per_volume={self.slices_per_volume} < 2K+2 for K={self.min_k_window}"
            )
        dataset = DatasetTag.parse(self.dataset)
        if len(self.styles) < 2:
            raise ConfigError("need at least two toy modalities")
        for name, st in self.styles.items():
            mod = Modality.parse(name)
            if mod not in dataset.allowed_modalities:
                raise ConfigError(f"modality {name} not used by {dataset.name}")
            st = ModalityStyle(**st) if isinstance(st, dict) else st
            if st.noise_sigma < 0 or st.bias_amplitude < 0 or st.gamma <= 0:
                raise ConfigError(f"invalid style for {name}")
        if not self.routes:
            raise ConfigError("toy modalities form no catalog route")

    @property
    def dataset_tag(self) -> DatasetTag:
        return DatasetTag.parse(self.dataset)

    @property
    def modalities(self) -> list[Modality]:
        mods = {Modality.parse(n) for n in self.styles}
        return [m for m in Modality if m in mods]

    def style(self, modality: Modality) -> ModalityStyle:
        for name, st in self.styles.items():
            if Modality.parse(name) is modality:
                return ModalityStyle(**st) if isinstance(st, dict) else st
        raise ConfigError(f"no style for {modality.name}")

    @property
    def routes(self) -> list[Route]:
        mods = set(self.modalities)
        tag = self.dataset_tag
        return [r for r in route_catalog() if r.dataset is tag and r.src in mods and r.tgt in mods]

    def to_dict(self) -> dict:
        return asdict(self)


def patient_id(i: int) -> str:
    return f"p{i:03d}"


def volume_id(pid: str, modality: Modality) -> str:
    return f"{pid}_{modality.token}"


def content_volume(cfg: ToyCorpusConfig, rng: RngStream) -> np.ndarray:
    """Content field ``(S, size, size)`` in [0, 1] for one patient."""
    n, S, B = cfg.size, cfg.slices_per_volume, cfg.n_blobs
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    u = rng.child("shape").uniform(4 * B + 3)
    amps = 0.35 + 0.35 * u[:B]
    sigmas = 1.0 + 1.5 * u[B : 2 * B]
    lo, hi = 5.0, n - 5.0
    centers = np.stack([lo + (hi - lo) * u[2 * B : 3 * B], lo + (hi - lo) * u[3 * B : 4 * B]], 1)
    angle = 2 * np.pi * u[-3]
    bg = 0.1 + 0.08 * (np.cos(angle) * xx + np.sin(angle) * yy) / n + 0.04 * u[-2]
    # correlated walk: each blob keeps a heading that turns by a small normal angle per slice
    heading = 2 * np.pi * rng.child("heading").uniform(B)
    turns = cfg.heading_jitter * rng.child("walk").normal((S, B))
    walk = heading[None, :] + np.cumsum(turns, axis=0)
    out = np.empty((S, n, n))
    for s in range(S):
        if s:
            step = cfg.drift * np.stack([np.cos(walk[s]), np.sin(walk[s])], 1)
            centers = centers + step
            # reflect at the margins so blobs stay inside the field
            centers = np.where(centers < lo, 2 * lo - centers, centers)
            centers = np.where(centers > hi, 2 * hi - centers, centers)
        field_ = bg.copy()
        for j in range(B):
            d2 = (xx - centers[j, 0]) ** 2 + (yy - centers[j, 1]) ** 2
            field_ += amps[j] * np.exp(-d2 / (2 * sigmas[j] ** 2))
        out[s] = field_
    return np.clip(out, 0.0, 1.0)


def bias_field(cfg: ToyCorpusConfig, rng: RngStream) -> np.ndarray:
    """Unit-amplitude low-frequency cosine pattern shared by a patient's modalities."""
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    u = rng.uniform(2)
    angle, phase = 2 * np.pi * u[0], 2 * np.pi * u[1]
    return np.cos(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / n + phase)


def render(content: np.ndarray, style: ModalityStyle, bias: np.ndarray, rng: RngStream) -> np.ndarray:
    out = content**style.gamma * (1.0 + style.bias_amplitude * bias)
    if style.noise_sigma > 0:
        out = out + style.noise_sigma * rng.normal(content.shape)
    return np.clip(out, 0.0, 1.0)


@dataclass
class ToyCorpus:
    """In-memory toy corpus: 16-bit volumes keyed by volume id, plus the manifest.

    Volumes hold the same quantised levels the PGM files store, so the
    in-memory and on-disk paths see identical pixels.
    """

    config: ToyCorpusConfig
    volumes: dict[str, np.ndarray]
    manifest: CorpusManifest

    @property
    def patients(self) -> list[str]:
        return [patient_id(i) for i in range(self.config.n_volumes)]

    def pairs_for(self, patients) -> list:
        keep = set(patients)
        return [p for p in self.manifest.pairs if p.src.volume_id.split("_")[0] in keep]


def manifest_doc(cfg: ToyCorpusConfig) -> dict:
    S = cfg.slices_per_volume
    volumes, pairs = [], []
    for i in range(cfg.n_volumes):
        pid = patient_id(i)
        for mod in cfg.modalities:
            vid = volume_id(pid, mod)
            volumes.append(
                {
                    "volume_id": vid,
                    "dataset": cfg.dataset_tag.value,
                    "modality": mod.name,
                    "width": cfg.size,
                    "height": cfg.size,
                    "intensity_window": [0.0, 1.0],
                    "slices": [f"{vid}/{k:03d}.pgm" for k in range(S)],
                }
            )
        for route in cfg.routes:
            pairs.append(
                {
                    "pair_id": f"{pid}_{route.src.token}2{route.tgt.token}",
                    "route_id": route.route_id,
                    "src_volume_id": volume_id(pid, route.src),
                    "tgt_volume_id": volume_id(pid, route.tgt),
                }
            )
    return {"schema_version": SCHEMA_VERSION, "volumes": volumes, "pairs": pairs}


def gen_toy_corpus(cfg: ToyCorpusConfig) -> ToyCorpus:
    """Render every patient in every toy modality (no files written)."""
    cfg.validate()
    root = RngStream(cfg.seed, ["toy"])
    volumes = {}
    for i in range(cfg.n_volumes):
        pid = patient_id(i)
        prng = root.child(pid)
        content = content_volume(cfg, prng.child("content"))
        bias = bias_field(cfg, prng.child("bias"))
        for mod in cfg.modalities:
            noise = prng.child("noise", mod.token)
            image = render(content, cfg.style(mod), bias, noise)
            volumes[volume_id(pid, mod)] = quantize(image).astype(np.uint16)
    return ToyCorpus(cfg, volumes, manifest_from_dict(manifest_doc(cfg)))


def write_toy_corpus(
    corpus: ToyCorpus, out_dir, provenance: dict | None = None, comment: str | None = None
) -> Path:
    """Write 16-bit PGM slices and ``manifest.json``; returns the manifest path.

    ``provenance`` is embedded in the manifest and ``comment`` in every slice header.
    """
    out_dir = Path(out_dir)
    doc = manifest_doc(corpus.config)
    for vol in doc["volumes"]:
        data = corpus.volumes[vol["volume_id"]]
        for k, rel in enumerate(vol["slices"]):
            path = out_dir / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(write_pgm(data[k] / PGM_MAX, comment=comment))
    if provenance is not None:
        doc["provenance"] = provenance
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
