"""Four-schedule ablation and the CTS window-size sweep.

Schedules
---------
baseline
    Untrained encoder and velocity net.
stage2_only
    Fresh encoder, then conditional flow matching.
stage1_only
    Stage-I encoder with an untrained velocity net. Kept for completeness: it
    stays near baseline here because no pretrained generator exists.
stage1_plus_2
    Stage-I encoder, then the same Stage-II budget as ``stage2_only``.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from ..forge import ForgeConfig, forge_corpus
from ..metrics import SsimParams, psnr, ssim, mae, summarize
from ..rng import RngStream
from .model import ROUTE_IDS, ModelShape, SynergyModel, decode_latent
from .store import SliceStore, patient_of
from .train import (
    TrainConfig,
    fm_validation_loss,
    instance_arrays,
    sample_latents,
    stage1_accuracy,
    train_stage1,
    train_stage2,
)

SCHEDULES = ("baseline", "stage2_only", "stage1_only", "stage1_plus_2")
NEEDS_STAGE1 = {"stage1_only", "stage1_plus_2"}
NEEDS_STAGE2 = {"stage2_only", "stage1_plus_2"}
SCHEDULE_NOTES = {
    "baseline": "untrained encoder and velocity net",
    "stage2_only": "fresh encoder, stage II only",
    "stage1_only": "stage-I encoder, untrained velocity net (no pretrained generator: expected near baseline)",
    "stage1_plus_2": "stage-I encoder, then stage II at the stage2_only budget",
}
METRICS = ("ssim", "psnr", "mae")
# larger is better for SSIM and PSNR, smaller for MAE
BETTER_HIGH = {"ssim": True, "psnr": True, "mae": False}
TOY_SSIM = SsimParams(window=5)


def toy_forge_config(seed: int = 0, k_window: int = 5) -> ForgeConfig:
    """Forge settings for the toy corpus: every slice of a pair anchors one CTS instance."""
    return ForgeConfig(
        seed=seed, k_window=k_window, instances_per_pair={"cts": 32, "mi": 16, "tia": 16}
    )


def latent_metrics(pred: np.ndarray, gt: np.ndarray, size: int, p: SsimParams = TOY_SSIM) -> dict[str, list[float]]:
    """Per-sample SSIM x100 on upsampled ``size`` images, PSNR and MAE on the 8x8 latents."""
    up_pred, up_gt = decode_latent(pred, size), decode_latent(gt, size)
    out = {"ssim": [], "psnr": [], "mae": []}
    for i in range(len(pred)):
        out["ssim"].append(100.0 * ssim(up_pred[i], up_gt[i], p))
        out["psnr"].append(psnr(pred[i], gt[i]))
        out["mae"].append(mae(pred[i], gt[i]))
    return out


def _mean(values: Sequence[float]) -> float:
    finite = [v for v in values if not math.isinf(v)]
    return summarize(finite).mean if finite else math.inf


@dataclass
class SeedContext:
    """Everything one seed's schedules share: split, scaler, data views."""

    seed: int
    train_patients: list[str]
    heldout_patients: list[str]
    inputs: np.ndarray
    init: SynergyModel
    train_rows: np.ndarray  # (n, 3) src row, tgt row, route index
    eval_rows: np.ndarray


def seed_context(store: SliceStore, seed: int, cfg: TrainConfig, shape: ModelShape | None = None) -> SeedContext:
    train_p, held_p = store.split_patients(seed, cfg.holdout_fraction)
    keep = set(train_p)
    fit_rows = [
        store.row(v.volume_id, k)
        for v in store.manifest.volumes
        if patient_of(v.volume_id) in keep
        for k in range(v.n_slices)
    ]
    init = SynergyModel(shape, RngStream(seed, ["model"]))
    raw = store.raw_inputs()
    init.fit_input_scaler(raw[fit_rows])
    inputs = (raw - init.input_mean) / init.input_scale
    return SeedContext(
        seed=seed,
        train_patients=train_p,
        heldout_patients=held_p,
        inputs=inputs,
        init=init,
        train_rows=store.pair_rows(store.sub_manifest(train_p).pairs),
        eval_rows=store.pair_rows(store.sub_manifest(held_p).pairs, stride=cfg.eval_stride),
    )


def forge_split(store: SliceStore, patients, forge_cfg: ForgeConfig):
    return instance_arrays(forge_corpus(store.sub_manifest(patients), forge_cfg), store)


def evaluate_schedule(store: SliceStore, ctx: SeedContext, model: SynergyModel, cfg: TrainConfig) -> dict:
    """Per-route and pooled synthesis metrics on the held-out split."""
    rows = ctx.eval_rows
    pred = sample_latents(model, ctx.inputs[rows[:, 0]], rows[:, 2], ctx.seed, cfg.sample_steps, cfg.t_end)
    gt = store.latents()[rows[:, 1]]
    per = latent_metrics(pred, gt, store.size)
    routes = {}
    for r in np.unique(rows[:, 2]):
        sel = np.flatnonzero(rows[:, 2] == r)
        routes[ROUTE_IDS[r]] = {"n": int(len(sel)), **{m: _mean([per[m][i] for i in sel]) for m in METRICS}}
    overall = {"n": int(len(rows)), **{m: _mean(per[m]) for m in METRICS}}
    fm = fm_validation_loss(model, ctx.inputs[rows[:, 0]], gt, rows[:, 2], seed=ctx.seed)
    return {"routes": routes, "overall": overall, "fm_loss": fm}


def run_seed(
    store: SliceStore,
    seed: int,
    schedules: Sequence[str] = SCHEDULES,
    forge_cfg: ForgeConfig | None = None,
    train_cfg: TrainConfig | None = None,
    shape: ModelShape | None = None,
) -> dict:
    """All requested schedules for one seed, from one shared split and init."""
    forge_cfg = forge_cfg or toy_forge_config()
    cfg = replace(train_cfg or TrainConfig(), seed=seed)
    ctx = seed_context(store, seed, cfg, shape)
    heldout = forge_split(store, ctx.heldout_patients, forge_cfg)
    src = ctx.inputs[ctx.train_rows[:, 0]]
    z0 = store.latents()[ctx.train_rows[:, 1]]
    routes = ctx.train_rows[:, 2]
    stage1 = None
    if NEEDS_STAGE1 & set(schedules):
        train = forge_split(store, ctx.train_patients, forge_cfg)
        stage1 = train_stage1(ctx.init.copy(), train, ctx.inputs, cfg, heldout)
    out = {}
    for name in schedules:
        model = (stage1.model if name in NEEDS_STAGE1 else ctx.init).copy()
        curve = []
        if name in NEEDS_STAGE2:
            curve = train_stage2(model, src, z0, routes, cfg).loss_curve
        else:
            model.fit_cond_scaler(src)
            model.fit_latent_scaler(z0)
        entry = evaluate_schedule(store, ctx, model, cfg)
        entry["gau_accuracy"] = stage1_accuracy(model, heldout, ctx.inputs)
        entry["stage2_curve"] = curve
        if name in NEEDS_STAGE1:
            entry["stage1_epoch_loss"] = stage1.epoch_loss
            entry["stage1_heldout_accuracy"] = stage1.heldout_accuracy
        out[name] = entry
    return out


@dataclass
class AblationReport:
    """Per-seed results plus seed means and the ordering checks."""

    schedules: list[str]
    seeds: list[int]
    per_seed: dict[int, dict]
    config: dict = field(default_factory=dict)

    @property
    def routes(self) -> list[str]:
        found = {r for res in self.per_seed.values() for e in res.values() for r in e["routes"]}
        return [r for r in ROUTE_IDS if r in found]

    def seed_metric(self, schedule: str, metric: str) -> list[float]:
        return [self.per_seed[s][schedule]["overall"][metric] for s in self.seeds]

    def summary(self) -> dict:
        out = {}
        for name in self.schedules:
            routes = {
                r: {m: _mean([self.per_seed[s][name]["routes"][r][m] for s in self.seeds]) for m in METRICS}
                for r in self.routes
            }
            gau_tasks = sorted({t for s in self.seeds for t in self.per_seed[s][name]["gau_accuracy"]})
            out[name] = {
                "note": SCHEDULE_NOTES.get(name, ""),
                "overall": {m: _mean(self.seed_metric(name, m)) for m in METRICS},
                "routes": routes,
                "gau_accuracy": {
                    t: _mean([self.per_seed[s][name]["gau_accuracy"][t] for s in self.seeds]) for t in gau_tasks
                },
            }
        return out

    def checks(self) -> dict:
        """Ordering properties between schedules, on pooled held-out metrics."""
        out: dict = {}
        if {"stage1_plus_2", "stage2_only"} <= set(self.schedules):
            a = self.seed_metric("stage1_plus_2", "ssim")
            b = self.seed_metric("stage2_only", "ssim")
            wins = sum(x > y for x, y in zip(a, b))
            out["stage1_plus_2_mean_ssim"] = _mean(a)
            out["stage2_only_mean_ssim"] = _mean(b)
            out["stage1_plus_2_strict_wins"] = wins
            out["synergy_ordering_holds"] = bool(_mean(a) >= _mean(b) and wins >= math.ceil(0.8 * len(a)))
        if "baseline" in self.schedules:
            trained = [s for s in self.schedules if s in NEEDS_STAGE2]
            last = True
            for m in METRICS:
                base = _mean(self.seed_metric("baseline", m))
                for s in trained:
                    other = _mean(self.seed_metric(s, m))
                    last &= other > base if BETTER_HIGH[m] else other < base
            out["baseline_last_vs_trained"] = bool(last)
        return out

    def to_dict(self) -> dict:
        return {
            "schedules": self.schedules,
            "seeds": self.seeds,
            "routes": self.routes,
            "notes": {s: SCHEDULE_NOTES.get(s, "") for s in self.schedules},
            "summary": self.summary(),
            "checks": self.checks(),
            "per_seed": {str(s): self.per_seed[s] for s in self.seeds},
            "config": self.config,
        }

    CSV_HEADER = ("seed", "schedule", "route_id", "n", "ssim", "psnr", "mae", "cts_acc", "mi_acc", "tia_acc")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)

        def fmt(x):
            return "inf" if math.isinf(x) else f"{x:.4f}"

        for s in self.seeds:
            for name in self.schedules:
                e = self.per_seed[s][name]
                acc = [fmt(e["gau_accuracy"].get(t, math.nan)) for t in ("CTS", "MI", "TIA")]
                for r in self.routes:
                    c = e["routes"][r]
                    w.writerow([s, name, r, c["n"], fmt(c["ssim"]), fmt(c["psnr"]), fmt(c["mae"]), *acc])
                o = e["overall"]
                w.writerow([s, name, "all", o["n"], fmt(o["ssim"]), fmt(o["psnr"]), fmt(o["mae"]), *acc])
        return buf.getvalue()


def run_ablation(
    store: SliceStore,
    schedules: Sequence[str] = SCHEDULES,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    forge_cfg: ForgeConfig | None = None,
    train_cfg: TrainConfig | None = None,
    shape: ModelShape | None = None,
    jobs: int = 1,
) -> AblationReport:
    """Run every schedule for every seed; seeds are independent jobs.

    Raises
    ------
    ConfigError
        Fewer than two schedules, fewer than three seeds, or an unknown schedule.
    """
    schedules = list(schedules)
    seeds = [int(s) for s in seeds]
    unknown = set(schedules) - set(SCHEDULES)
    if unknown:
        raise ConfigError(f"unknown schedules {sorted(unknown)}")
    if len(schedules) < 2 or len(seeds) < 3:
        raise ConfigError("an ablation needs at least 2 schedules and 3 seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    forge_cfg = forge_cfg or toy_forge_config()
    train_cfg = train_cfg or TrainConfig()

    def job(seed):
        return run_seed(store, seed, schedules, forge_cfg, train_cfg, shape)

    if jobs <= 1:
        results = [job(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(job, seeds))
    config = {"forge": forge_cfg.to_dict(), "train": train_cfg.to_dict()}
    return AblationReport(schedules, seeds, dict(zip(seeds, results)), config)


def check_k_values(store: SliceStore, k_values: Sequence[int]) -> None:
    """Reject any K whose candidate window cannot fit: S < 2K + 2."""
    shortest = min(p.n_slices for p in store.manifest.pairs)
    for k in k_values:
        if k < 1 or shortest < 2 * k + 2:
            raise ConfigError(f"K={k} needs at least {2 * k + 2} slices per volume, corpus has {shortest}")


def k_sensitivity(
    store: SliceStore,
    k_values: Sequence[int] = (2, 5, 10),
    forge_cfg: ForgeConfig | None = None,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
    shape: ModelShape | None = None,
) -> list[dict]:
    """Stage I then stage I + II per CTS window size K; one row per K.

    An edge slice has only K window candidates, so CTS questions at that K
    carry at most K + 1 options; ``cts_options`` records the count used.
    """
    check_k_values(store, k_values)
    forge_cfg = forge_cfg or toy_forge_config()
    rows = []
    for k in k_values:
        n_opt = min(forge_cfg.cts_options, int(k) + 1)
        cfg_k = replace(forge_cfg, k_window=int(k), cts_options=n_opt)
        res = run_seed(store, seed, ["stage1_plus_2"], cfg_k, train_cfg, shape)["stage1_plus_2"]
        rows.append(
            {
                "k_window": int(k),
                "cts_options": n_opt,
                **{f"{t.lower()}_acc": v for t, v in sorted(res["stage1_heldout_accuracy"].items())},
                **{m: res["overall"][m] for m in METRICS},
            }
        )
    return rows
