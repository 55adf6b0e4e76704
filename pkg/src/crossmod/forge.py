"""Construction of CTS / MI / TIA multiple-choice instances from paired volumes.

All sampling is keyed per work unit (pair, anchor) from the configured seed,
and the final instance list is sorted by ``instance_id``, so the output does
not depend on thread count or iteration order.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .domain import (
    LETTERS,
    TEMPLATE_VERSION,
    Modality,
    UnderstandingInstance,
    letter,
)
from .errors import (
    ConfigError,
    DataError,
    DistractorExhausted,
    NoVolumes,
    PoolMissing,
    WindowTooSmall,
)
from .ingest import CorpusManifest, VolumePair, VolumeRef
from .prompts import RouteDescriptionPools, default_pools, render_question
from .rng import RngStream, stream

TASKS = ("CTS", "MI", "TIA")
JSONL_KEYS = (
    "instance_id",
    "task",
    "prompt",
    "image_refs",
    "options",
    "answer_index",
    "answer_letter",
    "meta",
)


@dataclass
class ForgeConfig:
    seed: int = 0
    k_window: int = 5
    cts_options: int = 4
    tia_options: int = 4
    mi_options: int = 4
    mi_confusable_weight: float = 0.5
    instances_per_pair: dict = field(default_factory=lambda: {"cts": 8, "mi": 4, "tia": 4})
    balance_by: str = "route"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.k_window < 1:
            raise ConfigError("k_window must be >= 1")
        for name in ("cts_options", "tia_options", "mi_options"):
            n = getattr(self, name)
            if not 2 <= n <= len(LETTERS):
                raise ConfigError(f"{name} must be in [2, 26], got {n}")
        if not 0.0 <= self.mi_confusable_weight <= 1.0:
            raise ConfigError("mi_confusable_weight must be in [0, 1]")
        if self.balance_by not in ("route", "dataset"):
            raise ConfigError("balance_by must be 'route' or 'dataset'")
        unknown = set(self.instances_per_pair) - {"cts", "mi", "tia"}
        if unknown:
            raise ConfigError(f"unknown instances_per_pair keys {sorted(unknown)}")
        for key, n in self.instances_per_pair.items():
            if int(n) < 0:
                raise ConfigError(f"instances_per_pair.{key} must be >= 0")

    def count(self, task: str) -> int:
        return int(self.instances_per_pair.get(task.lower(), 0))

    def to_dict(self) -> dict:
        return asdict(self)


def root_stream(cfg: ForgeConfig) -> RngStream:
    return stream(cfg.seed, ["forge"])


def window_candidates(k: int, k_window: int, n_slices: int) -> list[int]:
    """Indices ``k + d`` for ``d`` in ``+-1..+-K``, clipped to the volume."""
    out = [k + d for d in range(-k_window, k_window + 1) if d != 0]
    return [j for j in out if 0 <= j < n_slices]


def _anchors(rng: RngStream, n_slices: int, count: int) -> list[tuple[int, int]]:
    """``count`` (anchor, repeat) pairs cycling through a shuffled slice order."""
    order = rng.permutation(n_slices)
    return [(order[i % n_slices], i // n_slices) for i in range(count)]


def _finish(draft: UnderstandingInstance) -> UnderstandingInstance:
    prompt = render_question(draft)
    return UnderstandingInstance(**{**draft.__dict__, "prompt": prompt})


def _cts_instance(
    pair: VolumePair, k: int, seq: int, cfg: ForgeConfig, rng: RngStream
) -> UnderstandingInstance:
    n_neg = cfg.cts_options - 1
    window = window_candidates(k, cfg.k_window, pair.n_slices)
    if len(window) < n_neg:
        raise WindowTooSmall(pair.pair_id, k, len(window), n_neg)
    unit = rng.child("cts", pair.pair_id, k, seq)
    negatives = unit.sample(window, n_neg)
    slots = [k] + negatives
    unit.shuffle(slots)
    answer = slots.index(k)
    options = tuple(pair.tgt.ref(j) for j in slots)
    draft = UnderstandingInstance(
        instance_id=f"cts/{pair.pair_id}/{k:04d}/{seq}",
        task="CTS",
        prompt="",
        image_refs=(pair.src.ref(k),) + options,
        options=options,
        answer_index=answer,
        answer_letter=letter(answer),
        meta={
            "route_id": pair.route.route_id,
            "pair_id": pair.pair_id,
            "volume_id": pair.tgt.volume_id,
            "slice_index": k,
            "k_window": cfg.k_window,
            "target_modality": pair.route.tgt.name,
            "template_version": TEMPLATE_VERSION,
        },
    )
    return _finish(draft)


def forge_cts(
    pair: VolumePair,
    cfg: ForgeConfig,
    rng: RngStream | None = None,
    anchors: Sequence[int] | None = None,
    count: int | None = None,
) -> list[UnderstandingInstance]:
    """CTS instances for one pair.

    Anchors are drawn from the pair's slices unless given explicitly; each
    anchor gets ``cts_options - 1`` hard negatives from its clipped window.
    """
    rng = rng or root_stream(cfg)
    if anchors is not None:
        seen: Counter = Counter()
        units = []
        for k in anchors:
            units.append((int(k), seen[k]))
            seen[k] += 1
    else:
        n = cfg.count("cts") if count is None else count
        units = _anchors(rng.child("cts-anchors", pair.pair_id), pair.n_slices, n)
    return [_cts_instance(pair, k, seq, cfg, rng) for k, seq in units]


# ---------------------------------------------------------------- MI

_CONFUSABLE_COARSE = {Modality.CT: {Modality.CBCT}, Modality.CBCT: {Modality.CT}}


def mi_label(volume: VolumeRef) -> Modality:
    """Label granularity: MR sequences only where the dataset distinguishes them."""
    if volume.dataset.fine_grained_mr:
        return volume.modality
    return volume.modality.coarse


def _excluded(truth: Modality, label: Modality) -> bool:
    # a fine MR truth must not offer plain "MRI" and vice versa (both would be correct)
    if truth is Modality.MR:
        return label.is_mr
    if truth.is_mr:
        return label is Modality.MR or label is truth
    return label is truth


def confusable_set(truth: Modality, universe: Iterable[Modality]) -> list[Modality]:
    if truth.is_mr and truth is not Modality.MR:
        pool = {m for m in universe if m.is_mr and m is not Modality.MR and m is not truth}
    else:
        pool = _CONFUSABLE_COARSE.get(truth, set()) & set(universe)
    return sorted(pool, key=lambda m: list(Modality).index(m))


def _mi_instance(
    volume: VolumeRef,
    k: int,
    seq: int,
    universe: list[Modality],
    cfg: ForgeConfig,
    rng: RngStream,
) -> UnderstandingInstance:
    truth = mi_label(volume)
    remaining = [m for m in universe if not _excluded(truth, m)]
    confusable = confusable_set(truth, remaining)
    n_distractors = min(cfg.mi_options - 1, len(remaining))
    if n_distractors < 1:
        raise DistractorExhausted(
            f"volume {volume.volume_id!r}: no modality label other than {truth.label}"
        )
    unit = rng.child("mi", volume.volume_id, k, seq)
    chosen: list[Modality] = []
    for _ in range(n_distractors):
        use_conf = unit.uniform() < cfg.mi_confusable_weight
        conf_left = [m for m in confusable if m not in chosen]
        pool = conf_left if use_conf and conf_left else [m for m in remaining if m not in chosen]
        chosen.append(pool[unit.below(len(pool))])
    slots = [truth] + chosen
    unit.shuffle(slots)
    answer = slots.index(truth)
    draft = UnderstandingInstance(
        instance_id=f"mi/{volume.volume_id}/{k:04d}/{seq}",
        task="MI",
        prompt="",
        image_refs=(volume.ref(k),),
        options=tuple(m.label for m in slots),
        answer_index=answer,
        answer_letter=letter(answer),
        meta={
            "volume_id": volume.volume_id,
            "dataset": volume.dataset.value,
            "slice_index": k,
            "modality": truth.name,
            "option_modalities": [m.name for m in slots],
            "template_version": TEMPLATE_VERSION,
        },
    )
    return _finish(draft)


def mi_universe(volumes: Iterable[VolumeRef]) -> list[Modality]:
    labels = {mi_label(v) for v in volumes}
    return sorted(labels, key=lambda m: list(Modality).index(m))


def forge_mi(
    manifest: CorpusManifest,
    cfg: ForgeConfig,
    rng: RngStream | None = None,
    counts: dict[str, int] | None = None,
) -> list[UnderstandingInstance]:
    """Modality-identification instances, ``instances_per_pair['mi']`` per volume."""
    rng = rng or root_stream(cfg)
    if not manifest.volumes:
        raise NoVolumes("manifest has no volumes")
    universe = mi_universe(manifest.volumes)
    out = []
    for volume in manifest.volumes:
        n = cfg.count("mi") if counts is None else counts.get(volume.volume_id, 0)
        units = _anchors(rng.child("mi-anchors", volume.volume_id), volume.n_slices, n)
        out += [_mi_instance(volume, k, seq, universe, cfg, rng) for k, seq in units]
    return out


# ---------------------------------------------------------------- TIA


def _tia_instance(
    pair: VolumePair,
    k: int,
    seq: int,
    pools: RouteDescriptionPools,
    cfg: ForgeConfig,
    rng: RngStream,
) -> UnderstandingInstance:
    true_id = pair.route.route_id
    positive_pool = pools.pool(true_id)
    if not positive_pool:
        raise PoolMissing(true_id)
    reverse_id = pair.route.reversed().route_id
    n_dis = cfg.tia_options - 1
    others = [rid for rid in pools.route_ids if rid not in (true_id, reverse_id)]
    has_reverse = bool(pools.pool(reverse_id))
    if len(others) + int(has_reverse) < n_dis:
        raise DistractorExhausted(
            f"route {true_id!r}: {len(others) + int(has_reverse)} distractor routes, need {n_dis}"
        )
    unit = rng.child("tia", pair.pair_id, k, seq)
    positive = positive_pool[unit.below(len(positive_pool))]
    distractor_routes = [reverse_id] if has_reverse else []
    distractor_routes += unit.sample(others, n_dis - len(distractor_routes))
    entries = [(true_id, positive)]
    for rid in distractor_routes:
        pool = pools.pool(rid)
        entries.append((rid, pool[unit.below(len(pool))]))
    unit.shuffle(entries)
    answer = next(i for i, (rid, _) in enumerate(entries) if rid == true_id)
    draft = UnderstandingInstance(
        instance_id=f"tia/{pair.pair_id}/{k:04d}/{seq}",
        task="TIA",
        prompt="",
        image_refs=(pair.src.ref(k), pair.tgt.ref(k)),
        options=tuple(text for _, text in entries),
        answer_index=answer,
        answer_letter=letter(answer),
        meta={
            "route_id": true_id,
            "pair_id": pair.pair_id,
            "volume_id": pair.tgt.volume_id,
            "slice_index": k,
            "distractor_route_ids": sorted(distractor_routes),
            "option_route_ids": [rid for rid, _ in entries],
            "template_version": TEMPLATE_VERSION,
        },
    )
    return _finish(draft)


def forge_tia(
    pairs: Sequence[VolumePair],
    pools: RouteDescriptionPools | None,
    cfg: ForgeConfig,
    rng: RngStream | None = None,
    counts: dict[str, int] | None = None,
) -> list[UnderstandingInstance]:
    """TIA instances; one distractor is the swapped direction whenever its pool exists."""
    rng = rng or root_stream(cfg)
    pools = pools or default_pools()
    out = []
    for pair in pairs:
        n = cfg.count("tia") if counts is None else counts.get(pair.pair_id, 0)
        units = _anchors(rng.child("tia-anchors", pair.pair_id), pair.n_slices, n)
        out += [_tia_instance(pair, k, seq, pools, cfg, rng) for k, seq in units]
    return out


# ---------------------------------------------------------------- balancing / driver


def balanced_counts(pairs: Sequence[VolumePair], per_pair: int, balance_by: str) -> dict[str, int]:
    """Spread instances so every route (or dataset) gets the same total.

    The group total is ``per_pair`` times the largest group size; inside a
    group it is split over pairs as evenly as possible, in pair order.
    """
    if balance_by == "route":
        key = lambda p: p.route.route_id  # noqa: E731
    else:
        key = lambda p: p.route.dataset.value  # noqa: E731
    groups: dict[str, list[VolumePair]] = defaultdict(list)
    for p in pairs:
        groups[key(p)].append(p)
    if not groups:
        return {}
    total = per_pair * max(len(g) for g in groups.values())
    counts = {}
    for members in groups.values():
        base, extra = divmod(total, len(members))
        for i, p in enumerate(members):
            counts[p.pair_id] = base + (1 if i < extra else 0)
    return counts


def forge_corpus(
    manifest: CorpusManifest,
    cfg: ForgeConfig,
    pools: RouteDescriptionPools | None = None,
    jobs: int = 1,
    tasks: Iterable[str] = TASKS,
) -> dict[str, list[UnderstandingInstance]]:
    """Forge every requested task over the corpus, balanced per ``cfg.balance_by``."""
    pools = pools or default_pools()
    rng = root_stream(cfg)
    pairs = list(manifest.pairs)
    tasks = [t.upper() for t in tasks]
    out: dict[str, list[UnderstandingInstance]] = {}

    def run(units, fn):
        if jobs <= 1:
            parts = [fn(u) for u in units]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as ex:
                parts = list(ex.map(fn, units))
        return sorted((x for part in parts for x in part), key=lambda i: i.instance_id)

    if "CTS" in tasks:
        counts = balanced_counts(pairs, cfg.count("cts"), cfg.balance_by)
        out["CTS"] = run(pairs, lambda p: forge_cts(p, cfg, rng, count=counts[p.pair_id]))
    if "MI" in tasks:
        vol_counts = {v.volume_id: cfg.count("mi") for v in manifest.volumes}
        if not manifest.volumes:
            raise NoVolumes("manifest has no volumes")
        universe = mi_universe(manifest.volumes)

        def mi_unit(volume):
            n = vol_counts[volume.volume_id]
            units = _anchors(rng.child("mi-anchors", volume.volume_id), volume.n_slices, n)
            return [_mi_instance(volume, k, s, universe, cfg, rng) for k, s in units]

        out["MI"] = run(list(manifest.volumes), mi_unit)
    if "TIA" in tasks:
        counts = balanced_counts(pairs, cfg.count("tia"), cfg.balance_by)
        out["TIA"] = run(pairs, lambda p: forge_tia([p], pools, cfg, rng, counts=counts))
    return out


def summarize(instances: dict[str, list[UnderstandingInstance]]) -> dict:
    summary: dict = {"tasks": {}, "routes": {}}
    for task, items in sorted(instances.items()):
        summary["tasks"][task] = len(items)
        per_route = Counter(i.meta.get("route_id", i.meta.get("dataset", "")) for i in items)
        summary["routes"][task] = dict(sorted(per_route.items()))
    return summary


# ---------------------------------------------------------------- JSONL


def instance_line(inst: UnderstandingInstance) -> str:
    d = inst.to_dict()
    return json.dumps({k: d[k] for k in JSONL_KEYS}, ensure_ascii=False, sort_keys=False)


def emit_jsonl(instances: Iterable[UnderstandingInstance], path) -> int:
    """Write instances sorted by id, one JSON object per ``\\n``-terminated line."""
    items = sorted(instances, key=lambda i: i.instance_id)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for inst in items:
                fh.write(instance_line(inst) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return len(items)


def read_jsonl(path) -> list[UnderstandingInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(UnderstandingInstance.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def check_cts(inst: UnderstandingInstance) -> bool:
    """Exactly one option is the paired target and every negative is 1..K slices away."""
    k = inst.meta["slice_index"]
    K = inst.meta["k_window"]
    vol = inst.meta["volume_id"]
    idx = [int(o.rpartition("#")[2]) for o in inst.options]
    vols = [o.rpartition("#")[0] for o in inst.options]
    positives = [i for i, j in enumerate(idx) if j == k]
    if positives != [inst.answer_index] or any(v != vol for v in vols):
        return False
    return all(1 <= abs(j - k) <= K for i, j in enumerate(idx) if i != inst.answer_index)


def letter_frequencies(instances: Sequence[UnderstandingInstance]) -> dict[int, dict[str, float]]:
    """Answer-letter frequencies grouped by option count."""
    groups: dict[int, Counter] = defaultdict(Counter)
    for inst in instances:
        groups[len(inst.options)][inst.answer_letter] += 1
    out = {}
    for n, counter in sorted(groups.items()):
        total = sum(counter.values())
        out[n] = {LETTERS[i]: counter[LETTERS[i]] / total for i in range(n)}
    return out
