"""scikit-learn style front ends for the two training stages."""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ..domain import LETTERS, UnderstandingInstance
from ..rng import RngStream
from ..validation import check_nonempty, check_paired, check_routes, check_slices
from .ablation import TOY_SSIM, latent_metrics
from .model import ROUTE_INDEX, ModelShape, SynergyModel, decode_latent, encoder_view, latent_of
from .store import SliceStore
from .train import TASKS, TrainConfig, instance_arrays, sample_latents, stage1_predictions, train_stage1, train_stage2


def _group(instances: Sequence[UnderstandingInstance]) -> tuple[dict[str, list], dict[str, list[int]]]:
    by_task, positions = defaultdict(list), defaultdict(list)
    for i, inst in enumerate(instances):
        by_task[inst.task].append(inst)
        positions[inst.task].append(i)
    return dict(by_task), dict(positions)


class UnderstandingClassifier(ClassifierMixin, BaseEstimator):
    """Stage I: a shared encoder trained jointly on CTS, MI and TIA instances.

    Parameters
    ----------
    epochs : int, default=30
        Passes over the CTS instances.
    lr : float, default=2e-3
        Peak Adam learning rate (cosine decay to zero).
    batch_size : int, default=64
        Instances per task per step.
    seed : int, default=0
        Seeds the initialisation and the minibatch streams.
    cts_scorer : {"cosine", "dot"}, default="cosine"
    init_model : SynergyModel, optional
        Start from a copy of this model instead of a fresh one.

    Attributes
    ----------
    model_ : SynergyModel
    epoch_loss_ : list of float
    train_accuracy_ : dict
    """

    def __init__(self, epochs=30, lr=2e-3, batch_size=64, seed=0, cts_scorer="cosine", init_model=None):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.cts_scorer = cts_scorer
        self.init_model = init_model

    def _inputs(self, store: SliceStore) -> np.ndarray:
        return (store.raw_inputs() - self.model_.input_mean) / self.model_.input_scale

    def fit(self, instances: Sequence[UnderstandingInstance], store: SliceStore):
        """Train on forged instances whose image references resolve in ``store``."""
        check_nonempty(instances, "instances")
        by_task, _ = _group(instances)
        arrays = instance_arrays(by_task, store)
        if self.init_model is not None:
            self.model_ = self.init_model.copy()
        else:
            self.model_ = SynergyModel(ModelShape(cts_scorer=self.cts_scorer), RngStream(self.seed, ["model"]))
            refs = [v.ravel() for k, v in arrays.fields.items() if k.endswith(("src", "cands", "img"))]
            used = np.unique(np.concatenate(refs))
            self.model_.fit_input_scaler(store.raw_inputs()[used])
        cfg = TrainConfig(seed=self.seed, stage1_epochs=self.epochs, stage1_lr=self.lr, stage1_batch=self.batch_size)
        result = train_stage1(self.model_, arrays, self._inputs(store), cfg)
        self.epoch_loss_ = result.epoch_loss
        self.train_accuracy_ = result.train_accuracy
        self.classes_ = np.array(list(LETTERS))
        return self

    def predict(self, instances: Sequence[UnderstandingInstance], store: SliceStore) -> np.ndarray:
        """Answer letter per instance, in input order (ties go to the earliest option)."""
        check_is_fitted(self, "model_")
        check_nonempty(instances, "instances")
        by_task, positions = _group(instances)
        preds = stage1_predictions(self.model_, instance_arrays(by_task, store), self._inputs(store))
        out = np.empty(len(instances), dtype="<U1")
        for task, idx in preds.items():
            out[positions[task]] = [LETTERS[i] for i in idx]
        return out

    def task_accuracy(self, instances: Sequence[UnderstandingInstance], store: SliceStore) -> dict[str, float]:
        pred = self.predict(instances, store)
        by_task, positions = _group(instances)
        return {
            t: float(np.mean([pred[i] == instances[i].answer_letter for i in positions[t]]))
            for t in TASKS
            if t in positions
        }

    def score(self, instances: Sequence[UnderstandingInstance], store: SliceStore) -> float:
        """Unweighted mean of the per-task accuracies."""
        acc = self.task_accuracy(instances, store)
        return float(np.mean(list(acc.values())))

    def transform(self, X) -> np.ndarray:
        """Embeddings ``(n, 64)`` of slices ``(n, S, S)``."""
        check_is_fitted(self, "model_")
        return self.model_.embed(self.model_.prepare(check_slices(X)))


class FlowSynthesizer(RegressorMixin, BaseEstimator):
    """Stage II: conditional flow matching from source slices to target latents.

    Parameters
    ----------
    steps : int, default=4000
        Optimiser steps.
    lr : float, default=1e-3
    batch_size : int, default=64
    seed : int, default=0
    freeze_encoder : bool, default=False
        Train only the velocity net.
    sample_steps : int, default=50
        Euler steps used by ``predict``.
    t_end : float, default=1e-3
    init_model : SynergyModel, optional
        Start from a copy of this model (e.g. a Stage-I encoder).

    Attributes
    ----------
    model_ : SynergyModel
    loss_curve_ : list of float
    """

    def __init__(
        self,
        steps=4000,
        lr=1e-3,
        batch_size=64,
        seed=0,
        freeze_encoder=False,
        sample_steps=50,
        t_end=1e-3,
        init_model=None,
    ):
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.freeze_encoder = freeze_encoder
        self.sample_steps = sample_steps
        self.t_end = t_end
        self.init_model = init_model

    def fit(self, X, y, routes):
        """Fit on paired source/target slices ``(n, S, S)`` with one route id per pair."""
        X = check_slices(X)
        y = check_slices(y, X.shape[1], name="y")
        check_paired(X, y)
        route_idx = np.array([ROUTE_INDEX[r] for r in check_routes(routes, len(X))])
        if self.init_model is not None:
            self.model_ = self.init_model.copy()
        else:
            self.model_ = SynergyModel(rng=RngStream(self.seed, ["model"]))
            self.model_.fit_input_scaler(encoder_view(X))
        cfg = TrainConfig(
            seed=self.seed,
            stage2_steps=self.steps,
            stage2_lr=self.lr,
            stage2_batch=self.batch_size,
            freeze_encoder=self.freeze_encoder,
        )
        result = train_stage2(self.model_, self.model_.prepare(X), latent_of(y), route_idx, cfg)
        self.loss_curve_ = result.loss_curve
        self.size_ = X.shape[1]
        return self

    def sample_latents(self, X, routes) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_slices(X, self.size_)
        route_idx = np.array([ROUTE_INDEX[r] for r in check_routes(routes, len(X))])
        return sample_latents(self.model_, self.model_.prepare(X), route_idx, self.seed, self.sample_steps, self.t_end)

    def predict(self, X, routes) -> np.ndarray:
        """Synthesised target slices ``(n, S, S)``: sampled latents, bilinearly upsampled."""
        return decode_latent(self.sample_latents(X, routes), self.size_)

    def score(self, X, y, routes) -> float:
        """Mean SSIM x100 (window 5) between upsampled sampled and reference latents."""
        y = check_slices(y, self.size_, name="y")
        pred = self.sample_latents(X, routes)
        return float(np.mean(latent_metrics(pred, latent_of(y), self.size_, TOY_SSIM)["ssim"]))
