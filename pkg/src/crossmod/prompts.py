"""Textual surface: TIA description pools, long-form synthesis prompts, MCQ rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .domain import (
    LETTERS,
    TEMPLATE_VERSION,
    DatasetTag,
    Modality,
    Route,
    UnderstandingInstance,
    get_route,
    route_catalog,
)
from .errors import ConstraintError, SchemaError, UnknownRoute

_REGION = {
    DatasetTag.SYNTHRAD_BRAIN: "brain",
    DatasetTag.SYNTHRAD_PELVIS: "pelvic",
    DatasetTag.AUTOPET: "whole-body",
    DatasetTag.BRATS: "brain-tumor",
}

# What each target modality should look like after conversion.
_TRAITS = {
    Modality.CT: "CT attenuation ordering with bright bone and near-black air",
    Modality.CBCT: "reduced soft-tissue contrast with cone-beam noise and mild streaks",
    Modality.PET: "tracer-uptake intensities with a smooth, low-resolution look",
    Modality.MR: "MRI soft-tissue contrast with dark cortical bone and air",
    Modality.MR_T1: "dark CSF and white matter brighter than gray matter",
    Modality.MR_T1CE: "a T1 baseline plus enhancement of vessels and enhancing tumor",
    Modality.MR_T2: "bright CSF and fluid with white matter darker than gray matter",
    Modality.MR_FLAIR: "suppressed CSF signal with hyperintense edema",
}

# Long-form conditioning prompts shipped verbatim for six routes.
_VERBATIM = {
    "synthrad_pelvis/ct_to_cbct": (
        "Convert a non-contrast pelvic CT slice to a CBCT-like appearance. Keep anatomy, "
        "voxel grid, field-of-view, slice position, and lesion morphology strictly unchanged "
        "(1:1 mapping). Modify only photometric/texture properties. CBCT appearance "
        "constraints (ONLY IF VISIBLE): • Lower soft-tissue contrast vs diagnostic CT; "
        "HU compression acceptable. • Add realistic, moderate CBCT texture: granular "
        "noise, mild cone-beam streaks/flare, slight ring artifacts; must not hide organ "
        "boundaries. • Gentle scatter shading/cupping permissible; avoid strong "
        "vignetting or truncation that alters anatomy. Preserve stones/hardware geometry "
        "and position. No hallucinated anatomy or warping."
    ),
    "autopet/pet_to_ct": (
        "Convert an PET whole-body slice to a non-contrast diagnostic CT appearance. Keep "
        "anatomy, voxel grid, field-of-view, slice position, and lesion morphology strictly "
        "unchanged (1:1 mapping). Modify ONLY contrast to emulate CT attenuation. CT "
        "constraints (ONLY IF VISIBLE): • Cortical/trabecular bone → bright to "
        "very bright; air spaces → near-black. • Soft-tissue HU ordering: fat < "
        "water (mid-gray) < muscle/solid organs < bone. • Remove PET blur/halo "
        "appearance; produce realistic diagnostic CT noise/edge sharpness. No "
        "iodinated-contrast patterns or invented anatomy; preserve exact geometry."
    ),
    "synthrad_brain/ct_to_mr": (
        "Convert a non-contrast brain CT slice to a non-contrast structural MRI (T1-like) "
        "appearance. Keep anatomy, voxel grid, field-of-view, slice position and lesion "
        "morphology strictly unchanged (1:1 mapping). Modify ONLY soft-tissue signal "
        "relationships to emulate MRI. MRI (T1-like) constraints (ONLY IF VISIBLE): "
        "• Cortical bone and air → near-black. • White matter slightly "
        "brighter than gray matter. • Ventricles/sulci → CSF dark with sharp "
        "boundaries. • Remove CT-specific streaks/beam hardening cues. No gadolinium "
        "enhancement patterns, no invented anatomy; preserve exact geometry and realistic "
        "MRI-like texture."
    ),
    "brats/flair_to_t1ce": (
        "Generate a post-contrast MRI FLAIR (T1-weighted Contrast-Enhanced Magnetic "
        "Resonance Imaging) depiction from the MRI FLAIR (Fluid-Attenuated Inversion "
        "Recovery (FLAIR) Magnetic Resonance Imaging) slice while rigorously preserving "
        "anatomy. Remove FLAIR-specific CSF suppression characteristics, enforce T1-like "
        "baseline (dark CSF), and add anatomically plausible enhancement (vessels, dura, "
        "genuinely enhancing tumor regions) without altering lesion size or shape. No "
        "artificial structures; maintain resolution and field-of-view."
    ),
    "brats/t2_to_t1": (
        "Render a faithful MRI T1 (T1-weighted Magnetic Resonance Imaging) version from the "
        "MRI T2 (T2-weighted Magnetic Resonance Imaging) slice by changing contrast only. In "
        "MRI T1, CSF should be dark; white matter typically brighter than gray matter; no "
        "contrast-agent signatures should appear. Exact geometry, field-of-view, and lesion "
        "morphology must be preserved; avoid hallucinations."
    ),
    "brats/t1_to_t2": (
        "Convert this MRI T1 (T1-weighted Magnetic Resonance Imaging) slice into a "
        "fluid-sensitive MRI T2 (T2-weighted Magnetic Resonance Imaging) depiction. Preserve "
        "geometry exactly; alter only signal relationships so CSF/free fluid becomes bright, "
        "vasogenic edema and many lesions trend hyperintense, and—on MRI T2—white "
        "matter appears darker than gray matter (contrast direction reversed from T1). "
        "Exclude any contrast-agent effects; no structure may be added, removed, or reshaped."
    ),
}


def _schema_prompt(route: Route) -> str:
    region = _REGION[route.dataset]
    src, tgt = route.src.label, route.tgt.label
    return (
        f"Convert a {region} {src} slice to a {tgt} appearance. "
        f"Change only the intensity and texture relationships to show {_TRAITS[route.tgt]}. "
        f"Anatomy, voxel grid, field-of-view, slice position and lesion shape stay exactly "
        f"as in the {src} input (1:1 mapping). No hallucinated anatomy or warping."
    )


def _default_descriptions(route: Route) -> list[str]:
    region = _REGION[route.dataset]
    src, tgt = route.src.label, route.tgt.label
    traits = _TRAITS[route.tgt]
    return [
        f"{src} to {tgt} ({region}): re-render the slice with {traits}; geometry is unchanged.",
        f"Turns a {region} {src} image into its {tgt} counterpart without moving any anatomy.",
        f"The {region} {src} input gains {tgt} contrast while every structure keeps its "
        f"position and shape.",
    ]


@dataclass(frozen=True)
class RouteDescriptionPools:
    """Concise per-route descriptions (for TIA options) and long synthesis prompts."""

    descriptions: Mapping[str, tuple[str, ...]]
    synthesis_prompts: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for route_id, pool in self.descriptions.items():
            if len(set(pool)) != len(pool):
                raise ConstraintError(f"pool {route_id!r} has duplicate descriptions")

    def pool(self, route_id: str) -> tuple[str, ...]:
        return tuple(self.descriptions.get(route_id, ()))

    def route_of(self, description: str) -> str | None:
        for route_id, pool in self.descriptions.items():
            if description in pool:
                return route_id
        return None

    @property
    def route_ids(self) -> list[str]:
        return [rid for rid, pool in self.descriptions.items() if pool]

    def to_dict(self) -> dict:
        return {rid: list(pool) for rid, pool in self.descriptions.items()}


def default_pools() -> RouteDescriptionPools:
    routes = route_catalog()
    return RouteDescriptionPools(
        descriptions={r.route_id: tuple(_default_descriptions(r)) for r in routes},
        synthesis_prompts={r.route_id: render_synthesis_prompt(r) for r in routes},
    )


def load_pools(path) -> RouteDescriptionPools:
    """Load ``{route_id: [description, ...]}`` from JSON."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("pools file must be a JSON object")
    pools = {}
    for route_id, entries in doc.items():
        get_route(route_id)
        if not isinstance(entries, list) or not all(isinstance(e, str) for e in entries):
            raise SchemaError("pool must be a list of strings", f"/{route_id}")
        pools[route_id] = tuple(entries)
    return RouteDescriptionPools(
        descriptions=pools,
        synthesis_prompts={rid: render_synthesis_prompt(rid) for rid in pools},
    )


def render_synthesis_prompt(route: Route | str) -> str:
    """Long-form conditioning prompt for a catalog route."""
    route = get_route(route) if isinstance(route, str) else route
    if route not in route_catalog():
        raise UnknownRoute(f"route {route} not in catalog")
    return _VERBATIM.get(route.route_id) or _schema_prompt(route)


def _option_lines(options, placeholders=None) -> list[str]:
    if placeholders is not None:
        return [f"{LETTERS[i]}. {ph}" for i, ph in enumerate(placeholders)]
    return [f"{LETTERS[i]}. {opt}" for i, opt in enumerate(options)]


def render_question(instance: UnderstandingInstance) -> str:
    """Deterministic multiple-choice text for an instance (its ``prompt`` is ignored)."""
    placeholders = [f"<image_{i + 1}>" for i in range(len(instance.image_refs))]
    letters = f"{LETTERS[0]}-{LETTERS[len(instance.options) - 1]}"
    lines = [f"[template v{instance.meta.get('template_version', TEMPLATE_VERSION)}]"]
    if instance.task == "CTS":
        target = Modality.parse(instance.meta["target_modality"]).label
        lines += [
            "Task: conditional target selection.",
            f"Source slice: {placeholders[0]}",
            f"Requested target modality: {target}.",
            f"Which candidate is the {target} slice that corresponds exactly to the source slice?",
        ]
        lines += _option_lines(instance.options, placeholders[1:])
    elif instance.task == "MI":
        lines += [
            "Task: modality identification.",
            f"Image: {placeholders[0]}",
            "Which imaging modality produced this image?",
        ]
        lines += _option_lines(instance.options)
    else:
        lines += [
            "Task: transformation instruction alignment.",
            f"Input slice: {placeholders[0]}",
            f"Output slice: {placeholders[1]}",
            "Which description matches the change from the input slice to the output slice?",
        ]
        lines += _option_lines(instance.options)
    lines.append(f"Answer with a single letter ({letters}).")
    return "\n".join(lines)
