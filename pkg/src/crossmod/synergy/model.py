"""Shared encoder, task heads and velocity network, with their composite losses.

Every loss function here returns its gradients in the order of
:meth:`SynergyModel.stage1_parameters` or
:meth:`SynergyModel.stage2_parameters`. Gradient checks run against exactly
these functions.

Images enter the model as 16x16 box-downsampled slices, flattened and
standardised with a scaler fitted on training sources (``prepare``). The flow
latent is the 8x8 box-downsample of the target slice.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..domain import Modality, route_catalog
from ..errors import ConfigError, DimMismatch
from ..flowcore import load_tns, save_tns
from ..rng import RngStream
from ..toynet import MlpNet, softmax_xent

N_MODALITIES = len(Modality)
ROUTE_IDS = [r.route_id for r in route_catalog()]
N_ROUTES = len(ROUTE_IDS)
ROUTE_INDEX = {rid: i for i, rid in enumerate(ROUTE_IDS)}
MODALITY_INDEX = {m: i for i, m in enumerate(Modality)}
TIME_FEATURES = 3
ENCODER_SIDE = 16
LATENT_SIDE = 8
NORM_EPS = 1e-12
SCALE_EPS = 1e-6
CTS_SCORERS = ("cosine", "dot")


def downsample(images: np.ndarray, factor: int) -> np.ndarray:
    """Box-average ``(..., H, W)`` by ``factor`` in both directions."""
    *lead, h, w = images.shape
    x = images.reshape(*lead, h // factor, factor, w // factor, factor)
    return x.mean(axis=(-3, -1))


def upsample_bilinear(latent: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of square ``(..., n, n)`` grids to ``size``, pixel-centre aligned."""
    n = latent.shape[-1]
    coords = (np.arange(size) + 0.5) * n / size - 0.5
    coords = np.clip(coords, 0.0, n - 1.0)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    f = coords - i0
    rows = latent[..., i0, :] * (1 - f)[:, None] + latent[..., i1, :] * f[:, None]
    return rows[..., i0] * (1 - f) + rows[..., i1] * f


def encoder_view(slices: np.ndarray) -> np.ndarray:
    """Raw encoder input: ``(n, S, S)`` slices -> ``(n, 256)`` 16x16 box averages."""
    slices = np.asarray(slices, dtype=np.float64)
    side = slices.shape[-1]
    if side % ENCODER_SIDE:
        raise DimMismatch(f"slice side {side} is not a multiple of {ENCODER_SIDE}")
    return downsample(slices, side // ENCODER_SIDE).reshape(len(slices), -1)


def latent_of(slices: np.ndarray) -> np.ndarray:
    """Flow latent: ``(n, S, S)`` slices -> ``(n, 64)`` 8x8 box averages."""
    slices = np.asarray(slices, dtype=np.float64)
    side = slices.shape[-1]
    if side % LATENT_SIDE:
        raise DimMismatch(f"slice side {side} is not a multiple of {LATENT_SIDE}")
    return downsample(slices, side // LATENT_SIDE).reshape(len(slices), -1)


def decode_latent(z: np.ndarray, size: int) -> np.ndarray:
    """``(n, 64)`` latents -> ``(n, size, size)`` images."""
    z = np.asarray(z, dtype=np.float64)
    return upsample_bilinear(z.reshape(-1, LATENT_SIDE, LATENT_SIDE), size)


def time_features(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return np.hstack([t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)])


def one_hot(indices, n: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    out = np.zeros((idx.size, n))
    out[np.arange(idx.size), idx] = 1.0
    return out


def _unit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return x / norm, norm


def _unit_backward(u: np.ndarray, norm: np.ndarray, d_u: np.ndarray) -> np.ndarray:
    return (d_u - u * np.sum(d_u * u, axis=-1, keepdims=True)) / norm


@dataclass
class ModelShape:
    """Layer widths plus the CTS scoring rule.

    ``cts_scorer="cosine"`` scores ``cts_scale * cos(q, c)``; ``"dot"`` scores
    the raw inner product ``q . c``. With ``vnet_skip`` the velocity is
    ``z + vnet(...)``, so at ``t = 1`` the net only has to output ``-z0``.
    """

    encoder_input: int = ENCODER_SIDE * ENCODER_SIDE
    encoder_hidden: int = 128
    embed_dim: int = 64
    latent_dim: int = LATENT_SIDE * LATENT_SIDE
    vnet_hidden: int = 256
    cts_scorer: str = "cosine"
    cts_scale: float = 10.0
    vnet_skip: bool = True

    def __post_init__(self):
        if self.cts_scorer not in CTS_SCORERS:
            raise ConfigError(f"cts_scorer must be one of {CTS_SCORERS}, got {self.cts_scorer!r}")
        if min(self.encoder_input, self.encoder_hidden, self.embed_dim, self.latent_dim, self.vnet_hidden) < 1:
            raise ConfigError("layer widths must be positive")
        if self.cts_scale <= 0:
            raise ConfigError("cts_scale must be positive")

    @property
    def vnet_input(self) -> int:
        return self.latent_dim + self.embed_dim + N_ROUTES + TIME_FEATURES


def cts_forward(shape: ModelShape, q: np.ndarray, cands: np.ndarray):
    """Scores ``(b, n)`` of queries ``(b, d)`` against candidates ``(b, n, d)``, plus a cache."""
    if shape.cts_scorer == "dot":
        return np.einsum("bd,bnd->bn", q, cands), (q, cands)
    qu, q_norm = _unit(q)
    cu, c_norm = _unit(cands)
    scores = shape.cts_scale * np.einsum("bd,bnd->bn", qu, cu)
    return scores, (qu, q_norm, cu, c_norm)


def cts_backward(shape: ModelShape, cache, d_scores: np.ndarray):
    """Gradients w.r.t. queries and candidates."""
    if shape.cts_scorer == "dot":
        q, cands = cache
        return np.einsum("bn,bnd->bd", d_scores, cands), d_scores[:, :, None] * q[:, None, :]
    qu, q_norm, cu, c_norm = cache
    d_scores = d_scores * shape.cts_scale
    d_qu = np.einsum("bn,bnd->bd", d_scores, cu)
    d_cu = d_scores[:, :, None] * qu[:, None, :]
    return _unit_backward(qu, q_norm, d_qu), _unit_backward(cu, c_norm, d_cu)


class SynergyModel:
    """Encoder feeding CTS/MI/TIA heads (stage I) and a velocity network (stage II).

    Parameters
    ----------
    shape : ModelShape, optional
    rng : RngStream, optional
        Source of the He-normal initialisation of the encoder, CTS head and
        velocity net; each draws from its own child stream. Without one every
        weight starts at zero. The MI and TIA readouts always start at zero.
    """

    NETS = ("encoder", "cts_head", "mi_head", "tia_head", "vnet")

    def __init__(self, shape: ModelShape | None = None, rng: RngStream | None = None):
        self.shape = s = shape or ModelShape()
        child = (lambda name: rng.child(name)) if rng is not None else (lambda name: None)
        self.encoder = MlpNet([s.encoder_input, s.encoder_hidden, s.embed_dim], child("encoder"))
        self.cts_head = MlpNet([s.embed_dim + N_MODALITIES, s.embed_dim], child("cts_head"))
        # zero readouts: an untrained model ties every MI/TIA option
        self.mi_head = MlpNet([s.embed_dim, N_MODALITIES])
        self.tia_head = MlpNet([2 * s.embed_dim, N_ROUTES])
        self.vnet = MlpNet([s.vnet_input, s.vnet_hidden, s.vnet_hidden, s.latent_dim], child("vnet"))
        self.input_mean = np.zeros(s.encoder_input)
        self.input_scale = np.ones(1)
        self.cond_mean = np.zeros(s.embed_dim)
        self.cond_scale = np.ones(s.embed_dim)
        self.latent_mean = np.zeros(1)
        self.latent_scale = np.ones(1)

    # -- preprocessing

    def fit_input_scaler(self, raw: np.ndarray) -> None:
        """Per-pixel centring and one global scale over raw encoder inputs."""
        raw = np.asarray(raw, dtype=np.float64)
        self.input_mean = raw.mean(axis=0)
        self.input_scale = np.array([max(float((raw - self.input_mean).std()), SCALE_EPS)])

    def prepare(self, slices: np.ndarray) -> np.ndarray:
        """Slices ``(n, S, S)`` -> standardised encoder inputs ``(n, 256)``."""
        return (encoder_view(slices) - self.input_mean) / self.input_scale

    def fit_cond_scaler(self, x: np.ndarray) -> None:
        """Per-dimension standardisation of the embedding used as conditioning."""
        e = self.encoder(x)
        self.cond_mean = e.mean(axis=0)
        self.cond_scale = e.std(axis=0) + SCALE_EPS

    def fit_latent_scaler(self, z0: np.ndarray) -> None:
        """One global mean and scale mapping data latents to unit variance for the flow.

        Raw 8x8 latents spread about 0.1 around 0.17, so against unit-variance
        noise the source-dependent part of the flow loss is tiny and conditioning
        is learned very slowly. This plays the role of a latent scale factor.
        """
        z0 = np.asarray(z0, dtype=np.float64)
        self.latent_mean = np.array([float(z0.mean())])
        self.latent_scale = np.array([max(float(z0.std()), SCALE_EPS)])

    def to_flow(self, z: np.ndarray) -> np.ndarray:
        """Data latents -> flow space."""
        return (np.asarray(z, dtype=np.float64) - self.latent_mean) / self.latent_scale

    def from_flow(self, z: np.ndarray) -> np.ndarray:
        """Flow space -> data latents."""
        return np.asarray(z, dtype=np.float64) * self.latent_scale + self.latent_mean

    def condition(self, x: np.ndarray) -> np.ndarray:
        return (self.encoder(x) - self.cond_mean) / self.cond_scale

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.encoder(x)

    # -- parameters

    def copy(self) -> "SynergyModel":
        clone = SynergyModel.__new__(SynergyModel)
        clone.shape = self.shape
        for name in self.SCALERS:
            setattr(clone, name, getattr(self, name).copy())
        for name in self.NETS:
            setattr(clone, name, getattr(self, name).copy())
        return clone

    def stage1_parameters(self) -> list[np.ndarray]:
        return (
            self.encoder.parameters()
            + self.cts_head.parameters()
            + self.mi_head.parameters()
            + self.tia_head.parameters()
        )

    def stage2_parameters(self, freeze_encoder: bool = False) -> list[np.ndarray]:
        if freeze_encoder:
            return self.vnet.parameters()
        return self.encoder.parameters() + self.vnet.parameters()

    def velocity(self, z, t, cond, route_idx) -> np.ndarray:
        """Velocity for a batch; ``cond`` is the standardised source embedding."""
        z = np.atleast_2d(z)
        b = len(z)
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        inp = np.hstack(
            [
                z,
                np.atleast_2d(cond),
                one_hot(np.broadcast_to(route_idx, (b,)), N_ROUTES),
                time_features(t_arr),
            ]
        )
        out = self.vnet(inp)
        return out + z if self.shape.vnet_skip else out

    # -- persistence

    SCALERS = ("input_mean", "input_scale", "cond_mean", "cond_scale", "latent_mean", "latent_scale")

    def save(self, directory, provenance: dict | None = None) -> None:
        """Write every network and scaler as ``.tns`` plus a topology JSON."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in self.NETS:
            getattr(self, name).save(directory, name)
        for name in self.SCALERS:
            save_tns(directory / f"{name}.tns", getattr(self, name))
        meta = {"shape": asdict(self.shape), "nets": list(self.NETS), "routes": ROUTE_IDS}
        if provenance is not None:
            meta["provenance"] = provenance
        (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "SynergyModel":
        directory = Path(directory)
        meta = json.loads((directory / "model.json").read_text())
        if meta.get("routes") != ROUTE_IDS:
            raise ConfigError("checkpoint was written against a different route catalog")
        model = cls(ModelShape(**meta["shape"]))
        for name in cls.NETS:
            setattr(model, name, MlpNet.load(directory, name))
        for name in cls.SCALERS:
            setattr(model, name, load_tns(directory / f"{name}.tns"))
        return model


@dataclass
class Stage1Batch:
    """Index-form minibatch; all image indices point into ``images``."""

    images: np.ndarray  # (n_img, encoder_input), already prepared
    cts_src: np.ndarray  # (b,)
    cts_cands: np.ndarray  # (b, N)
    cts_tgt_mod: np.ndarray  # (b,)
    cts_answer: np.ndarray  # (b,)
    mi_img: np.ndarray  # (b,)
    mi_options: np.ndarray  # (b, n_opt) modality indices
    mi_answer: np.ndarray
    tia_img: np.ndarray  # (b, 2)
    tia_options: np.ndarray  # (b, n_opt) route indices
    tia_answer: np.ndarray

    TASK_KEYS = {
        "CTS": ("cts_src", "cts_cands", "cts_tgt_mod", "cts_answer"),
        "MI": ("mi_img", "mi_options", "mi_answer"),
        "TIA": ("tia_img", "tia_options", "tia_answer"),
    }

    def compact(self) -> "Stage1Batch":
        """Keep only the images this batch references, re-indexing to match."""
        keys = [k for ks in self.TASK_KEYS.values() for k in ks if k.endswith(("src", "cands", "img"))]
        flat = [np.asarray(getattr(self, k)).ravel() for k in keys]
        used, inverse = np.unique(np.concatenate(flat), return_inverse=True)
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "images"}
        offset = 0
        for k, f in zip(keys, flat):
            fields[k] = inverse[offset : offset + f.size].reshape(np.shape(getattr(self, k)))
            offset += f.size
        return Stage1Batch(images=self.images[used], **fields)


def _cts_query(model: SynergyModel, E: np.ndarray, batch: Stage1Batch):
    return np.hstack([E[batch.cts_src], one_hot(batch.cts_tgt_mod, N_MODALITIES)])


def stage1_scores(model: SynergyModel, batch: Stage1Batch) -> dict[str, np.ndarray]:
    """Option scores per task (no gradients), for prediction and accuracy."""
    E = model.encoder(batch.images)
    out = {}
    if len(batch.cts_answer):
        q = model.cts_head(_cts_query(model, E, batch))
        out["CTS"], _ = cts_forward(model.shape, q, E[batch.cts_cands])
    if len(batch.mi_answer):
        logits = model.mi_head(E[batch.mi_img])
        out["MI"] = np.take_along_axis(logits, batch.mi_options, axis=1)
    if len(batch.tia_answer):
        pair = np.hstack([E[batch.tia_img[:, 0]], E[batch.tia_img[:, 1]]])
        logits = model.tia_head(pair)
        out["TIA"] = np.take_along_axis(logits, batch.tia_options, axis=1)
    return out


def _option_head_loss(head: MlpNet, inputs, options, answer):
    """Mean option cross-entropy of a linear head; returns (loss, grads, d_inputs)."""
    b = len(answer)
    logits, cache = head.forward(inputs)
    opt = np.take_along_axis(logits, options, axis=1)
    loss, d_opt = softmax_xent(opt, answer)
    d_logits = np.zeros_like(logits)
    # options are distinct within a row, so put (not add) is exact
    np.put_along_axis(d_logits, options, d_opt / b, axis=1)
    grads, d_in = head.backward(cache, d_logits)
    return loss / b, grads, d_in


def stage1_loss_and_grad(
    model: SynergyModel, batch: Stage1Batch
) -> tuple[float, list[np.ndarray], dict[str, float]]:
    """Equal-weight sum of the per-task mean cross-entropies.

    A task with no instances in the batch contributes zero loss and zero
    head gradients.
    """
    E, enc_cache = model.encoder.forward(batch.images)
    dE = np.zeros_like(E)
    parts: dict[str, float] = {}
    zeros = lambda net: [np.zeros_like(p) for p in net.parameters()]  # noqa: E731
    g_cts, g_mi, g_tia = zeros(model.cts_head), zeros(model.mi_head), zeros(model.tia_head)
    d = E.shape[1]

    b = len(batch.cts_answer)
    if b:
        q, q_cache = model.cts_head.forward(_cts_query(model, E, batch))
        scores, s_cache = cts_forward(model.shape, q, E[batch.cts_cands])
        loss, d_scores = softmax_xent(scores, batch.cts_answer)
        parts["CTS"] = loss / b
        d_q, d_c = cts_backward(model.shape, s_cache, d_scores / b)
        np.add.at(dE, batch.cts_cands, d_c)
        g_cts, d_q_in = model.cts_head.backward(q_cache, d_q)
        np.add.at(dE, batch.cts_src, d_q_in[:, :d])

    if len(batch.mi_answer):
        parts["MI"], g_mi, d_in = _option_head_loss(
            model.mi_head, E[batch.mi_img], batch.mi_options, batch.mi_answer
        )
        np.add.at(dE, batch.mi_img, d_in)

    if len(batch.tia_answer):
        pair = np.hstack([E[batch.tia_img[:, 0]], E[batch.tia_img[:, 1]]])
        parts["TIA"], g_tia, d_pair = _option_head_loss(
            model.tia_head, pair, batch.tia_options, batch.tia_answer
        )
        np.add.at(dE, batch.tia_img[:, 0], d_pair[:, :d])
        np.add.at(dE, batch.tia_img[:, 1], d_pair[:, d:])

    enc_grads, _ = model.encoder.backward(enc_cache, dE)
    total = float(sum(parts.values()))
    return total, enc_grads + g_cts + g_mi + g_tia, parts


@dataclass
class Stage2Batch:
    src: np.ndarray  # (b, encoder_input), already prepared
    z0: np.ndarray  # (b, latent_dim) latents in flow space
    z1: np.ndarray  # (b, latent_dim) noise
    t: np.ndarray  # (b,)
    route: np.ndarray  # (b,) route indices


def stage2_loss_and_grad(
    model: SynergyModel,
    batch: Stage2Batch,
    freeze_encoder: bool = False,
    zero_cond: bool = False,
) -> tuple[float, list[np.ndarray]]:
    """Flow-matching MSE of the velocity net conditioned on the encoded source.

    ``zero_cond`` replaces the conditioning by zeros (the unconditioned
    control); the encoder then receives zero gradient.
    """
    emb, enc_cache = model.encoder.forward(batch.src)
    cond = np.zeros_like(emb) if zero_cond else (emb - model.cond_mean) / model.cond_scale
    t = batch.t[:, None]
    z_t = (1.0 - t) * batch.z0 + t * batch.z1
    inp = np.hstack([z_t, cond, one_hot(batch.route, N_ROUTES), time_features(batch.t)])
    v, v_cache = model.vnet.forward(inp)
    if model.shape.vnet_skip:
        v = v + z_t
    diff = v - (batch.z1 - batch.z0)
    loss = float(np.mean(diff**2))
    v_grads, d_inp = model.vnet.backward(v_cache, 2.0 * diff / diff.size)
    if freeze_encoder:
        return loss, v_grads
    lo = batch.z0.shape[1]
    d_cond = np.zeros_like(emb) if zero_cond else d_inp[:, lo : lo + emb.shape[1]] / model.cond_scale
    enc_grads, _ = model.encoder.backward(enc_cache, d_cond)
    return loss, enc_grads + v_grads
