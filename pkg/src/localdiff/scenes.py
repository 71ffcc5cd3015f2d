"""Synthetic shape scenes: generation, edge conditions, mask and image I/O.

Scenes are sampled with integer-only arithmetic from :mod:`random` so a
seed yields the identical sequence on every platform, and shapes are
rasterized with exact integer predicates.  Edge maps (the toy analogue
of a canny condition) are morphological gradients of instance masks.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FileFormatError, ValidationError
from .guidance import ControlMask

__all__ = [
    "SHAPE_KINDS",
    "CANVAS",
    "ShapeInstance",
    "SceneSpec",
    "ConditionImage",
    "rasterize",
    "generate_scene",
    "random_scene",
    "scene_for_index",
    "edge_condition",
    "mask_from_instance",
    "save_png",
    "load_png",
    "save_pgm",
    "load_pgm",
    "save_mask",
    "load_mask",
    "write_dataset_manifest",
]

SHAPE_KINDS = ("circle", "square", "triangle", "star", "cross", "diamond")
CANVAS = 32

_MIN_SIZE, _MAX_SIZE = 5, 9
_MIN_INTENSITY = 160  # keeps shapes well above the detection threshold


@dataclass(frozen=True)
class ShapeInstance:
    kind: str
    cx: int
    cy: int
    size: int        # bounding "radius" in pixels
    intensity: int   # 8-bit foreground level

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValidationError(f"unknown shape kind {self.kind!r}")
        if not 0 <= self.intensity <= 255:
            raise ValidationError(f"intensity {self.intensity} outside 8-bit range")
        if self.size < 2:
            raise ValidationError(f"shape size {self.size} too small")


@dataclass(frozen=True)
class SceneSpec:
    instances: tuple
    canvas: int = CANVAS
    background: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        if not 1 <= len(self.instances) <= 3:
            raise ValidationError(
                f"scene must have 1..3 instances, got {len(self.instances)}")
        for inst in self.instances:
            lo, hi = inst.size, self.canvas - 1 - inst.size
            if not (lo <= inst.cx <= hi and lo <= inst.cy <= hi):
                raise ValidationError(
                    f"{inst.kind} at ({inst.cx},{inst.cy}) size {inst.size} "
                    "extends outside the canvas")
        for i, a in enumerate(self.instances):
            for b in self.instances[i + 1:]:
                d2 = (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2
                # distance >= 0.8 * (ra + rb), compared in integers
                if 25 * d2 < 16 * (a.size + b.size) ** 2:
                    raise ValidationError(
                        f"instances {a.kind} and {b.kind} overlap beyond the "
                        "allowed bound")


def rasterize(inst: ShapeInstance, canvas: int) -> np.ndarray:
    """Exact integer rasterization of one shape instance."""
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    dx = xs - inst.cx
    dy = ys - inst.cy
    r = inst.size
    kind = inst.kind
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if kind == "triangle":
        # apex up: half-width grows linearly from 0 at the top row to r
        hw = ((dy + r) * r) // (2 * r)
        return (np.abs(dy) <= r) & (np.abs(dx) <= hw) & (hw >= 0)
    if kind == "cross":
        arm = max(1, r // 3)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "star":
        # 8-pointed: diamond plus an inscribed axis-aligned square
        s = (3 * r) // 4
        return (np.abs(dx) + np.abs(dy) <= r) | \
               ((np.abs(dx) <= s) & (np.abs(dy) <= s))
    raise ValidationError(f"unknown shape kind {kind!r}")


def generate_scene(spec: SceneSpec):
    """Render a spec to ``(image uint8, caption tokens, instance masks)``.

    Later instances overwrite earlier pixels, so each returned mask
    covers exactly the pixels the instance actually owns in the image.
    """
    image = np.full((spec.canvas, spec.canvas), spec.background, dtype=np.uint8)
    rasters = [rasterize(inst, spec.canvas) for inst in spec.instances]
    for inst, mask in zip(spec.instances, rasters):
        image[mask] = inst.intensity
    masks = []
    for i, mask in enumerate(rasters):
        owned = mask.copy()
        for later in rasters[i + 1:]:
            owned &= ~later
        masks.append(owned)
    caption = [inst.kind for inst in spec.instances]
    return image, caption, masks


def random_scene(seed_key, n_instances: Optional[int] = None,
                 kinds: Optional[Sequence[str]] = None,
                 canvas: int = CANVAS) -> SceneSpec:
    """Sample a well-separated scene from a string or integer seed key."""
    rng = random.Random(seed_key)
    kinds = tuple(kinds) if kinds else SHAPE_KINDS
    n = n_instances if n_instances is not None else rng.choice((1, 2, 2))
    instances = []
    for _ in range(n):
        for _attempt in range(200):
            kind = rng.choice(kinds)
            size = rng.randint(_MIN_SIZE, _MAX_SIZE)
            cx = rng.randint(size + 1, canvas - 2 - size)
            cy = rng.randint(size + 1, canvas - 2 - size)
            # strict separation: at least (ra + rb + 2) apart in both
            # Euclidean and Chebyshev distance, so no two rasters touch
            # even diagonally and components never merge
            ok = all((cx - o.cx) ** 2 + (cy - o.cy) ** 2
                     >= (size + o.size + 2) ** 2
                     and max(abs(cx - o.cx), abs(cy - o.cy))
                     >= size + o.size + 2 for o in instances)
            if ok:
                intensity = rng.randint(_MIN_INTENSITY, 255)
                instances.append(ShapeInstance(kind, cx, cy, size, intensity))
                break
        else:
            break  # canvas too crowded; keep what fits
    return SceneSpec(instances=tuple(instances), canvas=canvas,
                     seed=seed_key if isinstance(seed_key, int) else None)


def scene_for_index(seed: int, index: int, **kwargs) -> SceneSpec:
    """Deterministic i-th scene of the stream for a dataset seed."""
    return random_scene(f"scene:{seed}:{index}", **kwargs)


@dataclass(frozen=True)
class ConditionImage:
    """Binary edge map used as the spatial control condition."""

    edges: np.ndarray
    provenance: tuple = ()

    @property
    def degenerate(self) -> bool:
        return not self.edges.any()


def edge_condition(instance_masks: Sequence[np.ndarray],
                   selector: Optional[Sequence[int]] = None) -> ConditionImage:
    """Morphological gradient of the union of the selected instance masks."""
    if selector is None:
        selector = range(len(instance_masks))
    selector = tuple(selector)
    if not instance_masks or not selector:
        shape = instance_masks[0].shape if instance_masks else (CANVAS, CANVAS)
        return ConditionImage(edges=np.zeros(shape, dtype=bool), provenance=())
    union = np.zeros_like(instance_masks[0], dtype=bool)
    for i in selector:
        union |= instance_masks[i].astype(bool)
    eroded = ndimage.binary_erosion(union, border_value=0)
    return ConditionImage(edges=union & ~eroded, provenance=selector)


def mask_from_instance(instance_mask: np.ndarray, dilation_radius: int = 0,
                       resolutions: Sequence[int] = (16, 8)) -> ControlMask:
    """Dilate an instance mask into a control region and derive low-res grids."""
    arr = np.asarray(instance_mask).astype(bool)
    if not arr.any():
        raise ValidationError("instance mask is empty")
    for _ in range(dilation_radius):
        arr = ndimage.binary_dilation(arr)
    return ControlMask.from_image(arr.astype(np.uint8), resolutions=resolutions)


# --- serialization ---------------------------------------------------------

def save_png(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ValidationError("save_png expects a uint8 image")
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_pgm(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValidationError("save_pgm expects a 2-D uint8 image")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _read_pgm_token(data: bytes, pos: int):
    while pos < len(data):
        c = data[pos:pos + 1]
        if c == b"#":  # comment to end of line
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= len(data):
        raise FileFormatError("unexpected end of PGM header", offset=pos)
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P5":
        raise FileFormatError("not a binary PGM (missing P5 magic)", offset=0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_pgm_token(data, pos)
        if not tok.isdigit():
            raise FileFormatError(f"expected integer, got {tok!r}",
                                  offset=pos - len(tok))
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FileFormatError(f"unsupported maxval {maxval}", offset=pos)
    pos += 1  # single whitespace after maxval
    expected = w * h
    if len(data) - pos < expected:
        raise FileFormatError(
            f"pixel payload truncated: need {expected} bytes", offset=len(data))
    return np.frombuffer(data[pos:pos + expected],
                         dtype=np.uint8).reshape(h, w).copy()


def save_mask(path, mask: np.ndarray) -> None:
    arr = np.asarray(mask).astype(bool)
    save_pgm(path, (arr.astype(np.uint8) * 255))


def load_mask(path) -> np.ndarray:
    arr = load_pgm(path)
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 255))):
        raise ValidationError(
            "PGM is not a binary mask (values other than 0/255 found); "
            "threshold it at 128 first")
    return arr == 255


def write_dataset_manifest(path, seed: int, count: int, params: dict) -> None:
    manifest = {
        "kind": "localdiff-dataset",
        "seed": seed,
        "count": count,
        "shape_kinds": list(SHAPE_KINDS),
        "canvas": CANVAS,
        "params": params,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
