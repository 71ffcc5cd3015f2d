"""Toy-scale quantitative evaluation.

Shape detection is threshold + connected components + template matching
against the six shape kinds; region adherence is plain mask IoU; prompt
fidelity is the dual-object success rate.  The ablation runner sweeps
guidance toggle combinations and aggregates per-cell metrics into a
report whose raw per-run rows are kept alongside the aggregates.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import statistics
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from . import scenes
from .errors import ShapeError, ValidationError
from .guidance import ControlMask, GuidanceConfig
from .sampler import GuidanceToggles, sample

__all__ = [
    "Detection", "detect_shapes", "iou", "condition_edge_agreement",
    "dual_object_success", "Scenario", "two_object_scenario",
    "AblationReport", "TABLE_TOGGLE_ROWS", "run_ablation",
    "write_report_csv", "write_raw_csv",
]

DETECT_THRESHOLD = 96    # uint8 level between background (0) and shapes
MATCH_THRESHOLD = 0.6    # template score counted as a confident detection
MIN_COMPONENT_AREA = 8

_TEMPLATE_SIZES = range(3, 11)


@dataclass(frozen=True)
class Detection:
    kind: str
    centroid: tuple          # (row, col)
    mask: np.ndarray
    score: float
    size: int

    @property
    def diameter(self) -> float:
        ys, xs = np.nonzero(self.mask)
        return float(max(ys.max() - ys.min(), xs.max() - xs.min()) + 1)


def _template_patches():
    patches = {}
    for kind in scenes.SHAPE_KINDS:
        for size in _TEMPLATE_SIZES:
            canvas = 2 * size + 3
            inst = scenes.ShapeInstance(kind, canvas // 2, canvas // 2,
                                        size, 255)
            patches[(kind, size)] = scenes.rasterize(inst, canvas)
    return patches


_PATCHES = _template_patches()


def _place(patch: np.ndarray, cy: int, cx: int, shape) -> np.ndarray:
    """Paste a template patch centered at (cy, cx), clipped to the canvas."""
    out = np.zeros(shape, dtype=bool)
    ph, pw = patch.shape
    oy, ox = cy - ph // 2, cx - pw // 2
    y0, x0 = max(0, oy), max(0, ox)
    y1, x1 = min(shape[0], oy + ph), min(shape[1], ox + pw)
    if y1 <= y0 or x1 <= x0:
        return out
    out[y0:y1, x0:x1] = patch[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
    return out


def detect_shapes(image: np.ndarray) -> list:
    """Detect shape instances in a uint8 canvas image.

    Deterministic: components are scanned in label order and templates
    in vocabulary order; results come back sorted by score (descending),
    centroid as the tie-break.
    """
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {arr.shape}")
    binary = arr >= DETECT_THRESHOLD
    labels, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    detections = []
    for lab in range(1, n + 1):
        comp = labels == lab
        if comp.sum() < MIN_COMPONENT_AREA:
            continue
        ys, xs = np.nonzero(comp)
        cy = int(round(float(ys.mean())))
        cx = int(round(float(xs.mean())))
        best = None
        for kind in scenes.SHAPE_KINDS:
            for size in _TEMPLATE_SIZES:
                patch = _PATCHES[(kind, size)]
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        placed = _place(patch, cy + dy, cx + dx, comp.shape)
                        score = iou(comp, placed)
                        if best is None or score > best[0]:
                            best = (score, kind, size)
        score, kind, size = best
        detections.append(Detection(kind=kind, centroid=(cy, cx), mask=comp,
                                    score=score, size=size))
    detections.sort(key=lambda d: (-d.score, d.centroid))
    return detections


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks (0 when both empty)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def condition_edge_agreement(image: np.ndarray, condition,
                             mask: ControlMask) -> Optional[float]:
    """Edge-level IoU between the in-region generation and the condition.

    Returns None (missing value) when the condition carries no edges
    inside the control region.
    """
    cond_edges = condition.edges if isinstance(condition, scenes.ConditionImage) \
        else np.asarray(condition).astype(bool)
    region = mask.image
    cond_in = cond_edges & region
    if not cond_in.any():
        return None
    detections = detect_shapes(image)
    union = np.zeros_like(region, dtype=bool)
    for det in detections:
        cy, cx = det.centroid
        if region[cy, cx]:
            union |= det.mask
    gen_edges = scenes.edge_condition([union]).edges & region
    return iou(gen_edges, cond_in)


def dual_object_success(detections: Sequence[Detection],
                        kinds: Sequence[str],
                        score_threshold: float = MATCH_THRESHOLD) -> bool:
    """Both prompted kinds detected confidently, as distinct instances.

    Distinctness requires the two centroids to sit at least half a mean
    shape diameter apart.
    """
    kind_a, kind_b = kinds
    best = {}
    for det in detections:
        if det.score >= score_threshold and det.kind in (kind_a, kind_b):
            if det.kind not in best or det.score > best[det.kind].score:
                best[det.kind] = det
    if kind_a not in best or kind_b not in best:
        return False
    a, b = best[kind_a], best[kind_b]
    sep = float(np.hypot(a.centroid[0] - b.centroid[0],
                         a.centroid[1] - b.centroid[1]))
    return sep >= 0.5 * (a.diameter + b.diameter) / 2.0


# --- scenarios and the ablation sweep --------------------------------------

@dataclass(frozen=True)
class Scenario:
    """One local-control evaluation case."""

    name: str
    prompt_tokens: tuple
    condition: scenes.ConditionImage
    mask: ControlMask
    target_mask: np.ndarray       # ground-truth pixels of the conditioned shape
    target_kinds: tuple


def two_object_scenario(seed_key, kinds=("circle", "square"),
                        dilation: int = 10) -> Scenario:
    """Prompt both kinds, condition and mask only the first one.

    The conditioned instance is placed pseudo-randomly from ``seed_key``;
    the second kind appears in the prompt alone.
    """
    spec = scenes.random_scene(f"scenario:{seed_key}", n_instances=1,
                               kinds=(kinds[0],))
    _, _, masks = scenes.generate_scene(spec)
    condition = scenes.edge_condition(masks, (0,))
    mask = scenes.mask_from_instance(masks[0], dilation_radius=dilation)
    return Scenario(name=f"{kinds[0]}+{kinds[1]}:{seed_key}",
                    prompt_tokens=tuple(kinds), condition=condition,
                    mask=mask, target_mask=masks[0], target_kinds=tuple(kinds))


TABLE_TOGGLE_ROWS = (
    GuidanceToggles(),
    GuidanceToggles(rdloss=True),
    GuidanceToggles(fmc=True),
    GuidanceToggles(rdloss=True, fmc=True),
    GuidanceToggles(rdloss=True, ftr=True),
    GuidanceToggles(rdloss=True, ftr=True, fmc=True),
)

_METRICS = ("iou", "dual_object", "edge_agreement", "runtime_s")


@dataclass
class AblationReport:
    rows: list                    # aggregated per-toggle rows
    raw: list                     # per-run records
    seeds: tuple
    failures: list = field(default_factory=list)


def evaluate_run(result, scenario: Scenario) -> dict:
    """Metrics of one sampling run against its scenario."""
    detections = detect_shapes(result.image)
    region = scenario.mask.image
    union = np.zeros_like(region, dtype=bool)
    for det in detections:
        cy, cx = det.centroid
        if region[cy, cx]:
            union |= det.mask
    cea = condition_edge_agreement(result.image, scenario.condition,
                                   scenario.mask)
    return {
        "iou": iou(union, scenario.target_mask),
        "dual_object": float(dual_object_success(detections,
                                                 scenario.target_kinds)),
        "edge_agreement": cea if cea is not None else float("nan"),
        "runtime_s": result.runtime_s,
    }


def run_ablation(model, schedule, scenarios: Sequence[Scenario],
                 seeds: Sequence[int], toggle_rows=TABLE_TOGGLE_ROWS,
                 config: Optional[GuidanceConfig] = None,
                 checkpoint_hash: str = "", jobs: int = 1) -> AblationReport:
    """Sweep toggle rows over scenarios and seeds.

    Per-cell failures are recorded without aborting the sweep; the
    aggregates are recomputable from the raw rows exactly.  Cells are
    independent, so ``jobs > 1`` runs them on a thread pool without
    changing the result or its ordering.
    """
    if len(seeds) < 2:
        raise ValidationError("ablation needs at least 2 seeds")
    if not toggle_rows:
        raise ValidationError("nothing to run: empty toggle list")
    config = config or GuidanceConfig()
    cells = [(toggles, scenario, seed) for toggles in toggle_rows
             for scenario in scenarios for seed in seeds]

    def run_cell(cell):
        toggles, scenario, seed = cell
        record = {"toggles": toggles.label(),
                  "rdloss": toggles.rdloss, "ftr": toggles.ftr,
                  "fmc": toggles.fmc, "scenario": scenario.name,
                  "seed": seed}
        try:
            cond = torch.from_numpy(
                scenario.condition.edges.astype(np.float64))
            prompt = model.embed_prompt(scenario.prompt_tokens)
            result = sample(model, schedule, prompt, cond,
                            scenario.mask, config, mode="toggles",
                            toggles=toggles, seed=seed,
                            checkpoint_hash=checkpoint_hash)
            record.update(evaluate_run(result, scenario))
        except Exception as e:  # per-cell failure, sweep continues
            record["error"] = f"{type(e).__name__}: {e}"
        return record

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(run_cell, cells))
    else:
        raw = [run_cell(c) for c in cells]
    failures = [r for r in raw if "error" in r]
    rows = []
    for toggles in toggle_rows:
        label = toggles.label()
        cells = [r for r in raw if r["toggles"] == label and "error" not in r]
        row = {"toggles": label, "rdloss": toggles.rdloss,
               "ftr": toggles.ftr, "fmc": toggles.fmc, "n": len(cells)}
        for metric in _METRICS:
            vals = [r[metric] for r in cells
                    if not np.isnan(r[metric])]
            row[f"{metric}_mean"] = statistics.mean(vals) if vals else float("nan")
            row[f"{metric}_std"] = (statistics.pstdev(vals)
                                    if len(vals) > 1 else 0.0)
        rows.append(row)
    return AblationReport(rows=rows, raw=raw, seeds=tuple(seeds),
                          failures=failures)


def write_raw_csv(path, report: AblationReport) -> None:
    fields = ["toggles", "rdloss", "ftr", "fmc", "scenario", "seed",
              *_METRICS, "error"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in report.raw:
            w.writerow(r)


def write_report_csv(path, report: AblationReport) -> None:
    fields = ["toggles", "rdloss", "ftr", "fmc", "n"]
    for metric in _METRICS:
        fields += [f"{metric}_mean", f"{metric}_std"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in report.rows:
            w.writerow(r)


def write_report_json(path, report: AblationReport) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"rows": report.rows, "seeds": list(report.seeds),
                   "failures": report.failures}, f, indent=2, sort_keys=True)
        f.write("\n")
