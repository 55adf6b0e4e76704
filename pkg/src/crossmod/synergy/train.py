"""Stage I (joint CTS/MI/TIA) and Stage II (conditional flow matching) trainers.

Both trainers draw every minibatch from derived RNG streams, so a run is
fixed by (corpus, instances, model init, config).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..domain import Image2D, Modality, UnderstandingInstance, get_route
from ..errors import ConfigError, EmptyDataset, NonFinite
from ..flowcore import sample
from ..rng import RngStream
from ..toynet import AdamState, adam_step
from .model import (
    MODALITY_INDEX,
    ROUTE_INDEX,
    Stage1Batch,
    Stage2Batch,
    SynergyModel,
    decode_latent,
    stage1_loss_and_grad,
    stage1_scores,
    stage2_loss_and_grad,
)
from .store import SliceStore

TASKS = ("CTS", "MI", "TIA")


@dataclass
class TrainConfig:
    """Hyperparameters for both stages and for sampling.

    An epoch is one pass over the CTS instances; MI and TIA minibatches of the
    same size ride along at every step.
    """

    seed: int = 0
    stage1_epochs: int = 30
    stage1_lr: float = 2e-3
    stage1_batch: int = 64
    stage2_steps: int = 4000
    stage2_lr: float = 1e-3
    stage2_batch: int = 64
    freeze_encoder: bool = False
    sample_steps: int = 50
    t_end: float = 1e-3
    holdout_fraction: float = 0.25
    eval_stride: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("stage1_batch", "stage2_batch", "sample_steps", "eval_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("stage1_epochs", "stage2_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        if not 0.0 <= self.t_end < 1.0:
            raise ConfigError("t_end must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- stage I


@dataclass
class InstanceArrays:
    """Index form of forged instances against a :class:`SliceStore`."""

    fields: dict[str, np.ndarray]

    @property
    def counts(self) -> dict[str, int]:
        return {
            "CTS": len(self.fields["cts_answer"]),
            "MI": len(self.fields["mi_answer"]),
            "TIA": len(self.fields["tia_answer"]),
        }

    def take(self, picks: Mapping[str, np.ndarray], images: np.ndarray) -> Stage1Batch:
        out = {}
        for task, keys in Stage1Batch.TASK_KEYS.items():
            for k in keys:
                out[k] = self.fields[k][picks[task]]
        return Stage1Batch(images=images, **out)

    def full(self, images: np.ndarray) -> Stage1Batch:
        return self.take({t: np.arange(n) for t, n in self.counts.items()}, images)


def _rows(store: SliceStore, refs) -> np.ndarray:
    return np.array([store.ref_row(r) for r in refs], dtype=np.int64)


def instance_arrays(
    instances: Mapping[str, Sequence[UnderstandingInstance]], store: SliceStore
) -> InstanceArrays:
    """Resolve image references and option labels to row and class indices."""
    cts = list(instances.get("CTS", ()))
    mi = list(instances.get("MI", ()))
    tia = list(instances.get("TIA", ()))
    n_cts = len(cts[0].options) if cts else 0
    n_mi = len(mi[0].options) if mi else 0
    n_tia = len(tia[0].options) if tia else 0
    f = {
        "cts_src": _rows(store, [i.image_refs[0] for i in cts]),
        "cts_cands": _rows(store, [r for i in cts for r in i.options]).reshape(len(cts), n_cts),
        "cts_tgt_mod": np.array(
            [MODALITY_INDEX[Modality[i.meta["target_modality"]]] for i in cts], dtype=np.int64
        ),
        "cts_answer": np.array([i.answer_index for i in cts], dtype=np.int64),
        "mi_img": _rows(store, [i.image_refs[0] for i in mi]),
        "mi_options": np.array(
            [[MODALITY_INDEX[Modality[m]] for m in i.meta["option_modalities"]] for i in mi], dtype=np.int64
        ).reshape(len(mi), n_mi),
        "mi_answer": np.array([i.answer_index for i in mi], dtype=np.int64),
        "tia_img": _rows(store, [r for i in tia for r in i.image_refs[:2]]).reshape(len(tia), 2),
        "tia_options": np.array(
            [[ROUTE_INDEX[r] for r in i.meta["option_route_ids"]] for i in tia], dtype=np.int64
        ).reshape(len(tia), n_tia),
        "tia_answer": np.array([i.answer_index for i in tia], dtype=np.int64),
    }
    return InstanceArrays(f)


def stage1_predictions(model: SynergyModel, arrays: InstanceArrays, inputs: np.ndarray) -> dict[str, np.ndarray]:
    """Chosen option index per instance and task."""
    scores = stage1_scores(model, arrays.full(inputs))
    return {task: np.argmax(s, axis=1) for task, s in scores.items()}


def stage1_accuracy(model: SynergyModel, arrays: InstanceArrays, inputs: np.ndarray) -> dict[str, float]:
    preds = stage1_predictions(model, arrays, inputs)
    answers = {"CTS": "cts_answer", "MI": "mi_answer", "TIA": "tia_answer"}
    return {t: float(np.mean(p == arrays.fields[answers[t]])) for t, p in preds.items()}


@dataclass
class Stage1Result:
    model: SynergyModel
    epoch_loss: list[float]
    epoch_parts: list[dict[str, float]]
    train_accuracy: dict[str, float]
    heldout_accuracy: dict[str, float] = field(default_factory=dict)


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


def train_stage1(
    model: SynergyModel,
    arrays: InstanceArrays,
    inputs: np.ndarray,
    cfg: TrainConfig,
    heldout: InstanceArrays | None = None,
) -> Stage1Result:
    """Minimise the equal-weight CTS + MI + TIA cross-entropy, in place.

    Parameters
    ----------
    model : SynergyModel
        Trained in place and also returned in the result.
    arrays : InstanceArrays
        Training instances in index form.
    inputs : ndarray
        Prepared encoder inputs for every store row.
    cfg : TrainConfig
    heldout : InstanceArrays, optional
        Scored after training.
    """
    counts = arrays.counts
    if not any(counts.values()):
        raise EmptyDataset("no understanding instances to train on")
    lead = "CTS" if counts["CTS"] else max(counts, key=counts.get)
    steps_per_epoch = max(1, math.ceil(counts[lead] / cfg.stage1_batch))
    total = steps_per_epoch * cfg.stage1_epochs
    rng = RngStream(cfg.seed, ["stage1"])
    state = AdamState(lr=cfg.stage1_lr)
    params = model.stage1_parameters()
    epoch_loss, epoch_parts = [], []
    step = 0
    for epoch in range(cfg.stage1_epochs):
        erng = rng.child("epoch", epoch)
        sums: dict[str, float] = {}
        total_loss = 0.0
        for _ in range(steps_per_epoch):
            picks = {
                t: erng.integers(n, cfg.stage1_batch) if n else np.zeros(0, dtype=np.int64)
                for t, n in counts.items()
            }
            batch = arrays.take(picks, inputs).compact()
            loss, grads, parts = stage1_loss_and_grad(model, batch)
            if not math.isfinite(loss):
                raise NonFinite("stage I loss became non-finite", step=step)
            state.lr = cosine_lr(cfg.stage1_lr, step, total)
            adam_step(params, grads, state)
            total_loss += loss
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            step += 1
        epoch_loss.append(total_loss / steps_per_epoch)
        epoch_parts.append({k: v / steps_per_epoch for k, v in sorted(sums.items())})
    result = Stage1Result(model, epoch_loss, epoch_parts, stage1_accuracy(model, arrays, inputs))
    if heldout is not None:
        result.heldout_accuracy = stage1_accuracy(model, heldout, inputs)
    return result


# ---------------------------------------------------------------- stage II


@dataclass
class Stage2Result:
    model: SynergyModel
    loss_curve: list[float]  # mean loss per block of ``CURVE_BLOCK`` steps


CURVE_BLOCK = 50


def _balanced_rows(rng: RngStream, by_route: list[np.ndarray], n: int) -> np.ndarray:
    """Pick a route uniformly, then a row uniformly within it."""
    route_pick = rng.integers(len(by_route), n)
    draws = rng.u64_array(n)
    sizes = np.array([len(r) for r in by_route], dtype=np.uint64)
    within = (draws % sizes[route_pick]).astype(np.int64)
    return np.array([by_route[r][i] for r, i in zip(route_pick, within)], dtype=np.int64)


def train_stage2(
    model: SynergyModel,
    src_inputs: np.ndarray,
    z0: np.ndarray,
    routes: np.ndarray,
    cfg: TrainConfig,
    zero_cond: bool = False,
) -> Stage2Result:
    """Regress the velocity net onto ``z1 - z0``, in place.

    Parameters
    ----------
    model : SynergyModel
        Either freshly initialised or carrying a Stage-I encoder.
    src_inputs : ndarray
        Prepared encoder inputs of the source slices, ``(n, 256)``.
    z0 : ndarray
        Target latents ``(n, 64)`` in [0, 1] aligned with ``src_inputs``; the
        model's latent scaler is fitted on them.
    routes : ndarray
        Route index per sample; minibatches are balanced across routes.
    cfg : TrainConfig
    zero_cond : bool
        Train the unconditioned control.
    """
    n = len(src_inputs)
    if n == 0:
        raise EmptyDataset("no paired samples for stage II")
    model.fit_cond_scaler(src_inputs)
    model.fit_latent_scaler(z0)
    z0 = model.to_flow(z0)
    by_route = [np.flatnonzero(routes == r) for r in np.unique(routes)]
    rng = RngStream(cfg.seed, ["stage2"])
    state = AdamState(lr=cfg.stage2_lr)
    params = model.stage2_parameters(cfg.freeze_encoder)
    curve, block = [], []
    b = cfg.stage2_batch
    for step in range(cfg.stage2_steps):
        srng = rng.child("step", step)
        idx = _balanced_rows(srng, by_route, b)
        batch = Stage2Batch(
            src=src_inputs[idx],
            z0=z0[idx],
            z1=srng.normal((b, z0.shape[1])),
            t=srng.uniform_open_left(b),
            route=routes[idx],
        )
        loss, grads = stage2_loss_and_grad(model, batch, cfg.freeze_encoder, zero_cond)
        if not math.isfinite(loss):
            raise NonFinite("stage II loss became non-finite", step=step)
        adam_step(params, grads, state)
        block.append(loss)
        if len(block) == CURVE_BLOCK:
            curve.append(float(np.mean(block)))
            block = []
    if block:
        curve.append(float(np.mean(block)))
    return Stage2Result(model, curve)


def fm_validation_loss(
    model: SynergyModel,
    src_inputs: np.ndarray,
    z0: np.ndarray,
    routes: np.ndarray,
    seed: int = 0,
    zero_cond: bool = False,
) -> float:
    """Flow-matching loss on a fixed draw of ``(t, z1)`` per sample; ``z0`` in [0, 1]."""
    rng = RngStream(seed, ["fm-validation"])
    z0 = model.to_flow(z0)
    batch = Stage2Batch(
        src=src_inputs,
        z0=z0,
        z1=rng.normal(z0.shape),
        t=rng.uniform_open_left(len(z0)),
        route=routes,
    )
    loss, _ = stage2_loss_and_grad(model, batch, freeze_encoder=True, zero_cond=zero_cond)
    return loss


# ---------------------------------------------------------------- sampling


def sample_latents(
    model: SynergyModel,
    src_inputs: np.ndarray,
    routes: np.ndarray,
    seed: int = 0,
    steps: int = 50,
    t_end: float = 1e-3,
) -> np.ndarray:
    """Euler-sample target latents from standard-normal starts, mapped back and clamped to [0, 1]."""
    cond = model.condition(src_inputs)
    routes = np.asarray(routes, dtype=np.int64)
    z_start = RngStream(seed, ["synthesize"]).normal((len(src_inputs), model.shape.latent_dim))
    z = sample(lambda z, t, c: model.velocity(z, t, c, routes), z_start, cond, steps=steps, t_end=t_end)
    return np.clip(model.from_flow(z), 0.0, 1.0)


def synthesize(
    model: SynergyModel,
    src: Image2D,
    route_id: str,
    seed: int = 0,
    steps: int = 50,
    t_end: float = 1e-3,
) -> Image2D:
    """Synthesise one target slice: sample the 8x8 latent and upsample it bilinearly."""
    arr = np.asarray(src, dtype=np.float64)
    get_route(route_id)
    z = sample_latents(model, model.prepare(arr[None]), np.array([ROUTE_INDEX[route_id]]), seed, steps, t_end)
    return Image2D(decode_latent(z, arr.shape[-1])[0])
