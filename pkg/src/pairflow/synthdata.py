"""Procedural scenes, captions, and edit pairs with exact ground truth.

Everything here is pure and seeded: the same rng state always yields the
same sample, so workers with disjoint seeds can synthesize in parallel.
Rendering is done with point-in-shape predicates on the pixel grid with
anti-aliasing disabled, so edit masks and color checks are exact set
operations rather than thresholded heuristics.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import GenerationError, ValidationError

# ---------------------------------------------------------------------------
# Palettes. Values live on the 1/255 grid so PNG round-trips are lossless.
# ---------------------------------------------------------------------------

OBJECT_COLORS: dict[str, tuple[int, int, int]] = {
    "red": (230, 30, 30),
    "green": (30, 180, 30),
    "blue": (40, 60, 230),
    "yellow": (240, 220, 40),
    "purple": (150, 40, 200),
    "orange": (250, 140, 20),
}

BACKGROUND_COLORS: dict[str, tuple[int, int, int]] = {
    "white": (255, 255, 255),
    "gray": (190, 190, 190),
    "cream": (250, 240, 210),
    "sky": (210, 230, 250),
}

SHAPES = ("circle", "square", "triangle", "star")

COLOR_NAMES = tuple(OBJECT_COLORS)
BACKGROUND_NAMES = tuple(BACKGROUND_COLORS)

COUNT_WORDS = {2: "two", 3: "three", 4: "four"}
PLURALS = {s: s + "s" for s in SHAPES}
RELATIONS = ("left", "right", "above", "below")
MOVE_REGIONS = ("left", "right", "top", "bottom")

DIFFICULTIES = ("1obj", "2obj", "count", "position", "color-attr")
EDIT_KINDS = (
    "add",
    "remove",
    "recolor",
    "replace",
    "move",
    "background",
    "global-invert",
    "global-outline",
)
GLOBAL_KINDS = ("background", "global-invert", "global-outline")

# Mix mirrors the corpus proportions this data stands in for: local edits
# 48% (split over four kinds), move 33% (understanding 25% + view 8%),
# global 17% (background + invert), outline-style 2%.
DEFAULT_EDIT_WEIGHTS: dict[str, float] = {
    "add": 0.12,
    "remove": 0.12,
    "recolor": 0.12,
    "replace": 0.12,
    "move": 0.33,
    "background": 0.085,
    "global-invert": 0.085,
    "global-outline": 0.02,
}

VALID_SIDES = (32, 64, 128)

_OVERLAP_MARGIN = 0.07
_PLACE_MARGIN = 0.02
_MAX_TRIES = 1000


def color_value(name: str) -> np.ndarray:
    table = OBJECT_COLORS if name in OBJECT_COLORS else BACKGROUND_COLORS
    return np.asarray(table[name], dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# Scene and edit specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    center: tuple[float, float]  # (x, y) fractions in [0, 1]
    radius: float  # fraction of the image side

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise ValidationError(f"unknown shape {self.shape!r}")
        if self.color not in OBJECT_COLORS:
            raise ValidationError(f"unknown object color {self.color!r}")
        cx, cy = self.center
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise ValidationError(f"center {self.center} outside [0,1]^2")
        if not (0.0 < self.radius <= 0.5):
            raise ValidationError(f"radius {self.radius} outside (0, 0.5]")


@dataclass(frozen=True)
class BackgroundSpec:
    kind: str = "solid"  # "solid" | "vgradient"
    colors: tuple[str, ...] = ("white",)

    def validate(self) -> None:
        if self.kind not in ("solid", "vgradient"):
            raise ValidationError(f"unknown background kind {self.kind!r}")
        n = 1 if self.kind == "solid" else 2
        if len(self.colors) != n:
            raise ValidationError(f"background kind {self.kind!r} needs {n} colors")
        for c in self.colors:
            if c not in BACKGROUND_COLORS:
                raise ValidationError(f"unknown background color {c!r}")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...] = ()
    background: BackgroundSpec = field(default_factory=BackgroundSpec)

    def validate(self) -> None:
        if len(self.objects) > 4:
            raise ValidationError(f"{len(self.objects)} objects; at most 4 allowed")
        self.background.validate()
        for obj in self.objects:
            obj.validate()
        for i in range(len(self.objects)):
            for j in range(i + 1, len(self.objects)):
                a, b = self.objects[i], self.objects[j]
                d = float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))
                if d <= a.radius + b.radius:
                    raise ValidationError(
                        f"objects {i} and {j} overlap (center distance {d:.3f} "
                        f"<= radius sum {a.radius + b.radius:.3f})"
                    )

    def to_dict(self) -> dict:
        return {
            "objects": [dataclasses.asdict(o) for o in self.objects],
            "background": dataclasses.asdict(self.background),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = tuple(
            ObjectSpec(o["shape"], o["color"], tuple(o["center"]), o["radius"])
            for o in d["objects"]
        )
        bg = BackgroundSpec(d["background"]["kind"], tuple(d["background"]["colors"]))
        return cls(objects=objs, background=bg)


@dataclass(frozen=True)
class EditSpec:
    kind: str
    scope: str  # "local" | "global"
    target_index: int | None = None  # source object acted on (remove/recolor/replace/move)
    new_object: ObjectSpec | None = None  # add/replace/move result
    new_color: str | None = None  # recolor target color
    new_background: BackgroundSpec | None = None
    region: str | None = None  # move destination region name

    def validate(self, scene: SceneSpec | None = None) -> None:
        if self.kind not in EDIT_KINDS:
            raise ValidationError(f"unknown edit kind {self.kind!r}")
        is_global = self.kind in GLOBAL_KINDS
        if is_global != (self.scope == "global"):
            raise ValidationError(
                f"kind {self.kind!r} requires scope "
                f"{'global' if is_global else 'local'}, got {self.scope!r}"
            )
        if self.kind in ("remove", "recolor", "replace", "move"):
            if self.target_index is None:
                raise ValidationError(f"kind {self.kind!r} needs a target object index")
            if scene is not None and not (0 <= self.target_index < len(scene.objects)):
                raise ValidationError(
                    f"target index {self.target_index} out of range for scene "
                    f"with {len(scene.objects)} objects"
                )
        if self.kind in ("add", "replace", "move") and self.new_object is None:
            raise ValidationError(f"kind {self.kind!r} needs new-object parameters")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "scope": self.scope, "target_index": self.target_index,
             "new_color": self.new_color, "region": self.region}
        d["new_object"] = dataclasses.asdict(self.new_object) if self.new_object else None
        d["new_background"] = (
            dataclasses.asdict(self.new_background) if self.new_background else None
        )
        return d


@dataclass
class TrainSample:
    """One training example: target raster, visual condition, and caption.

    Generation samples carry an all-black condition and no mask; edit
    samples carry the source render as condition and the exact pixel
    difference support as gt_mask.
    """

    target: np.ndarray  # [H, W, 3] float32 in [0, 1]
    condition: np.ndarray  # same shape; zeros for generation
    task: str  # "generate" | "edit"
    caption: list[str]
    gt_mask: np.ndarray | None = None  # [H, W] bool
    scope: str | None = None
    scene: SceneSpec | None = None  # target scene when one exists
    source_scene: SceneSpec | None = None
    edit: EditSpec | None = None
    difficulty: str | None = None
    relation: str | None = None  # spatial relation word for position prompts
    seed: int | None = None

    def validate(self) -> None:
        if self.task not in ("generate", "edit"):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.target.shape != self.condition.shape:
            raise ValidationError("target/condition shape mismatch")
        if self.task == "generate":
            if self.gt_mask is not None:
                raise ValidationError("generation samples must not carry a gt_mask")
            if np.any(self.condition != 0.0):
                raise ValidationError("generation condition must be all zeros")
        else:
            if self.scope not in ("local", "global"):
                raise ValidationError(f"edit sample needs a scope, got {self.scope!r}")
            if self.scope == "local" and self.gt_mask is None:
                raise ValidationError("local edit samples must carry a gt_mask")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _pixel_grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(side, dtype=np.float64) + 0.5) / side
    return np.meshgrid(coords, coords)  # xx[r, c], yy[r, c]


def _shape_mask(obj: ObjectSpec, xx: np.ndarray, yy: np.ndarray,
                scale: float = 1.0) -> np.ndarray:
    """Boolean support of the (optionally radially scaled) shape."""
    cx, cy = obj.center
    r = obj.radius * scale
    dx, dy = xx - cx, yy - cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        h = r / np.sqrt(2.0)
        return np.maximum(np.abs(dx), np.abs(dy)) <= h
    if obj.shape == "triangle":
        # equilateral, apex up (image y axis points down)
        angles = np.deg2rad([-90.0, 30.0, 150.0])
        vx = cx + r * np.cos(angles)
        vy = cy + r * np.sin(angles)
        inside = np.ones_like(xx, dtype=bool)
        for i in range(3):
            x1, y1 = vx[i], vy[i]
            x2, y2 = vx[(i + 1) % 3], vy[(i + 1) % 3]
            cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
            inside &= cross >= 0
        return inside
    if obj.shape == "star":
        # five-point star, apex up: alternating outer/inner vertices
        angles = np.deg2rad(-90.0 + 36.0 * np.arange(10))
        radii = np.where(np.arange(10) % 2 == 0, r, 0.45 * r)
        vx = cx + radii * np.cos(angles)
        vy = cy + radii * np.sin(angles)
        # even-odd crossing test against the 10-gon
        inside = np.zeros_like(xx, dtype=bool)
        for i in range(10):
            x1, y1 = vx[i], vy[i]
            x2, y2 = vx[(i + 1) % 10], vy[(i + 1) % 10]
            crosses = (y1 > yy) != (y2 > yy)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (yy - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (xx < xint)
        return inside
    raise ValidationError(f"unknown shape {obj.shape!r}")


def _render_background(bg: BackgroundSpec, side: int) -> np.ndarray:
    if bg.kind == "solid":
        c = color_value(bg.colors[0])
        return np.broadcast_to(c, (side, side, 3)).astype(np.float32).copy()
    top = color_value(bg.colors[0]).astype(np.float64)
    bottom = color_value(bg.colors[1]).astype(np.float64)
    w = ((np.arange(side) + 0.5) / side)[:, None]
    rows = ((1.0 - w) * top + w * bottom).astype(np.float32)  # [side, 3]
    return np.repeat(rows[:, None, :], side, axis=1)


def render_scene(spec: SceneSpec, side: int, outline: bool = False) -> np.ndarray:
    """Rasterize a scene deterministically; object pixels take exact palette values.

    With outline=True objects are drawn as rings of their color (the shape
    support minus the same shape scaled to 65% radius), used by the
    outline-style global edit.
    """
    if side not in VALID_SIDES:
        raise ValidationError(f"side must be one of {VALID_SIDES}, got {side}")
    spec.validate()
    img = _render_background(spec.background, side)
    xx, yy = _pixel_grid(side)
    for obj in spec.objects:
        mask = _shape_mask(obj, xx, yy)
        if outline:
            mask &= ~_shape_mask(obj, xx, yy, scale=0.65)
        img[mask] = color_value(obj.color)
    return img


def invert_raster(img: np.ndarray) -> np.ndarray:
    return (1.0 - img).astype(np.float32)


def exact_diff_mask(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Support of the exact pixelwise difference between two rasters."""
    return np.any(a != b, axis=-1)


# ---------------------------------------------------------------------------
# Captions
# ---------------------------------------------------------------------------


def caption_t2i(scene: SceneSpec, difficulty: str, relation: str | None = None) -> list[str]:
    objs = scene.objects
    if difficulty == "count":
        n = len(objs)
        return [COUNT_WORDS[n], objs[0].color, PLURALS[objs[0].shape]]
    if difficulty == "position":
        a, b = objs
        return ["a", a.color, a.shape, relation, "of", b.color, b.shape]
    if difficulty == "1obj":
        (a,) = objs
        return ["a", a.color, a.shape]
    a, b = objs  # 2obj and color-attr share the pair template
    return ["a", a.color, a.shape, "and", "a", b.color, b.shape]


def caption_edit(edit: EditSpec, source: SceneSpec) -> list[str]:
    if edit.kind == "add":
        o = edit.new_object
        return ["add", "a", o.color, o.shape]
    if edit.kind == "remove":
        o = source.objects[edit.target_index]
        return ["remove", "the", o.color, o.shape]
    if edit.kind == "recolor":
        o = source.objects[edit.target_index]
        return ["recolor", "the", o.color, o.shape, "to", edit.new_color]
    if edit.kind == "replace":
        o = source.objects[edit.target_index]
        n = edit.new_object
        return ["replace", "the", o.color, o.shape, "with", "a", n.color, n.shape]
    if edit.kind == "move":
        o = source.objects[edit.target_index]
        return ["move", "the", o.color, o.shape, "to", "the", edit.region]
    if edit.kind == "background":
        return ["change", "the", "background", "to", edit.new_background.colors[0]]
    if edit.kind == "global-invert":
        return ["invert", "the", "colors"]
    if edit.kind == "global-outline":
        return ["outline", "every", "shape"]
    raise ValidationError(f"unknown edit kind {edit.kind!r}")


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------


def _sample_background(rng: np.random.Generator, gradient_prob: float = 0.25) -> BackgroundSpec:
    if rng.random() < gradient_prob:
        names = rng.choice(len(BACKGROUND_NAMES), size=2, replace=False)
        return BackgroundSpec("vgradient", tuple(BACKGROUND_NAMES[i] for i in names))
    return BackgroundSpec("solid", (BACKGROUND_NAMES[rng.integers(len(BACKGROUND_NAMES))],))


def _try_place(rng: np.random.Generator, existing: tuple[ObjectSpec, ...],
               shape: str, color: str, radius: float,
               x_range: tuple[float, float] | None = None,
               y_range: tuple[float, float] | None = None,
               min_dist_from: tuple[tuple[float, float], float] | None = None
               ) -> ObjectSpec | None:
    lo, hi = radius + _PLACE_MARGIN, 1.0 - radius - _PLACE_MARGIN
    xlo, xhi = x_range if x_range else (lo, hi)
    ylo, yhi = y_range if y_range else (lo, hi)
    xlo, xhi = max(xlo, lo), min(xhi, hi)
    ylo, yhi = max(ylo, lo), min(yhi, hi)
    if xlo >= xhi or ylo >= yhi:
        return None
    cx = float(rng.uniform(xlo, xhi))
    cy = float(rng.uniform(ylo, yhi))
    if min_dist_from is not None:
        (px, py), dmin = min_dist_from
        if np.hypot(cx - px, cy - py) < dmin:
            return None
    for other in existing:
        d = np.hypot(cx - other.center[0], cy - other.center[1])
        if d <= radius + other.radius + _OVERLAP_MARGIN:
            return None
    return ObjectSpec(shape, color, (cx, cy), radius)


def _place_or_raise(rng, existing, shape, color, radius, what,
                    x_range=None, y_range=None, min_dist_from=None) -> ObjectSpec:
    for _ in range(_MAX_TRIES):
        obj = _try_place(rng, existing, shape, color, radius, x_range, y_range,
                         min_dist_from)
        if obj is not None:
            return obj
    raise GenerationError(f"could not place {what} after {_MAX_TRIES} tries")


def _retry_scene(build, what: str, tries: int = 50):
    """Scene-level rejection: sequential placement can paint itself into a
    corner even when a valid configuration exists."""
    for _ in range(tries):
        try:
            return build()
        except GenerationError:
            continue
    raise GenerationError(f"could not assemble {what} after {tries} scene attempts")


def _radius(rng: np.random.Generator, lo: float, hi: float, side: int) -> float:
    """Radius draw with a floor of 5 rendered pixels so shapes stay
    classifiable at every supported resolution."""
    lo = max(lo, 5.0 / side)
    hi = max(hi, lo + 0.02)
    return float(rng.uniform(lo, hi))


def _rand_shape(rng) -> str:
    return SHAPES[rng.integers(len(SHAPES))]


def _rand_color(rng) -> str:
    return COLOR_NAMES[rng.integers(len(COLOR_NAMES))]


def sample_scene(rng: np.random.Generator, difficulty: str,
                 side_hint: int = 64) -> tuple[SceneSpec, str | None]:
    """Draw a scene for one difficulty axis; returns (scene, relation)."""
    bg = _sample_background(rng)
    relation = None
    side = side_hint
    if difficulty == "1obj":
        r = _radius(rng, 0.14, 0.24, side)
        objs = (_place_or_raise(rng, (), _rand_shape(rng), _rand_color(rng), r, "object"),)
    elif difficulty in ("2obj", "color-attr"):
        s1 = _rand_shape(rng)
        s2 = _rand_shape(rng)
        while s2 == s1:
            s2 = _rand_shape(rng)
        c1 = _rand_color(rng)
        c2 = _rand_color(rng)
        if difficulty == "color-attr":
            while c2 == c1:
                c2 = _rand_color(rng)
        objs = []
        for s, c in ((s1, c1), (s2, c2)):
            r = _radius(rng, 0.12, 0.18, side)
            objs.append(_place_or_raise(rng, tuple(objs), s, c, r, "object"))
        objs = tuple(objs)
    elif difficulty == "count":
        n = int(rng.integers(2, 5))
        shape, color = _rand_shape(rng), _rand_color(rng)
        # jittered quadrant grid: guarantees separation for up to 4 objects
        cells = [(0.28, 0.28), (0.72, 0.28), (0.28, 0.72), (0.72, 0.72)]
        order = rng.permutation(4)[:n]
        objs = []
        for ci in order:
            gx, gy = cells[ci]
            r = _radius(rng, 0.12, min(0.15, 5.0 / side + 0.005), side)
            cx = float(np.clip(gx + rng.uniform(-0.025, 0.025), r + _PLACE_MARGIN,
                               1 - r - _PLACE_MARGIN))
            cy = float(np.clip(gy + rng.uniform(-0.025, 0.025), r + _PLACE_MARGIN,
                               1 - r - _PLACE_MARGIN))
            objs.append(ObjectSpec(shape, color, (cx, cy), r))
        objs = tuple(objs)
    elif difficulty == "position":
        relation = RELATIONS[rng.integers(len(RELATIONS))]
        s1, c1 = _rand_shape(rng), _rand_color(rng)
        s2, c2 = _rand_shape(rng), _rand_color(rng)
        while (s2, c2) == (s1, c1):
            s2, c2 = _rand_shape(rng), _rand_color(rng)
        r1 = _radius(rng, 0.12, 0.17, side)
        r2 = _radius(rng, 0.12, 0.17, side)
        # separation >= 0.15 of the image side on the relation axis, well
        # past the checker's 10% margin
        if relation in ("left", "right"):
            near = (0.05, 0.38)
            far = (0.62, 0.95)
            xr1, xr2 = (near, far) if relation == "left" else (far, near)
            a = _place_or_raise(rng, (), s1, c1, r1, "object", x_range=xr1)
            b = _place_or_raise(rng, (a,), s2, c2, r2, "object", x_range=xr2)
        else:
            near = (0.05, 0.38)
            far = (0.62, 0.95)
            yr1, yr2 = (near, far) if relation == "above" else (far, near)
            a = _place_or_raise(rng, (), s1, c1, r1, "object", y_range=yr1)
            b = _place_or_raise(rng, (a,), s2, c2, r2, "object", y_range=yr2)
        objs = (a, b)
    else:
        raise ValidationError(f"unknown difficulty {difficulty!r}")
    scene = SceneSpec(objects=objs, background=bg)
    scene.validate()
    return scene, relation


def sample_t2i(rng: np.random.Generator, difficulty: str, side: int = 64) -> TrainSample:
    """Generation sample: all-black condition, template caption."""
    scene, relation = sample_scene(rng, difficulty, side)
    target = render_scene(scene, side)
    sample = TrainSample(
        target=target,
        condition=np.zeros_like(target),
        task="generate",
        caption=caption_t2i(scene, difficulty, relation),
        scene=scene,
        difficulty=difficulty,
        relation=relation,
    )
    sample.validate()
    return sample


# ---------------------------------------------------------------------------
# Edit sampling
# ---------------------------------------------------------------------------


def _edit_source_scene(rng: np.random.Generator, kind: str, side: int) -> SceneSpec:
    n = int(rng.integers(1, 4))

    def build():
        objs = []
        for _ in range(n):
            r = _radius(rng, 0.12, 0.18, side)
            objs.append(_place_or_raise(rng, tuple(objs), _rand_shape(rng),
                                        _rand_color(rng), r, "object"))
        return tuple(objs)

    objs = _retry_scene(build, f"{n}-object edit source")
    return SceneSpec(objects=objs, background=_sample_background(rng))


_REGION_RANGES = {
    "left": {"x_range": (0.0, 0.33)},
    "right": {"x_range": (0.67, 1.0)},
    "top": {"y_range": (0.0, 0.33)},
    "bottom": {"y_range": (0.67, 1.0)},
}


def _in_region(obj: ObjectSpec, region: str) -> bool:
    cx, cy = obj.center
    return {
        "left": cx < 0.33, "right": cx > 0.67, "top": cy < 0.33, "bottom": cy > 0.67,
    }[region]


def _build_edit(rng: np.random.Generator, kind: str,
                side: int) -> tuple[SceneSpec, SceneSpec | None, EditSpec]:
    """Returns (source scene, target scene or None for non-scene targets, edit)."""
    src = _edit_source_scene(rng, kind, side)
    objs = list(src.objects)
    if kind == "add":
        r = _radius(rng, 0.12, 0.18, side)
        new = _place_or_raise(rng, src.objects, _rand_shape(rng), _rand_color(rng), r, "added object")
        edit = EditSpec("add", "local", new_object=new)
        tgt = SceneSpec(tuple(objs + [new]), src.background)
    elif kind == "remove":
        idx = int(rng.integers(len(objs)))
        edit = EditSpec("remove", "local", target_index=idx)
        tgt = SceneSpec(tuple(o for i, o in enumerate(objs) if i != idx), src.background)
    elif kind == "recolor":
        idx = int(rng.integers(len(objs)))
        old = objs[idx]
        new_color = _rand_color(rng)
        while new_color == old.color:  # recolor always changes color
            new_color = _rand_color(rng)
        objs[idx] = dataclasses.replace(old, color=new_color)
        edit = EditSpec("recolor", "local", target_index=idx, new_color=new_color)
        tgt = SceneSpec(tuple(objs), src.background)
    elif kind == "replace":
        idx = int(rng.integers(len(objs)))
        old = objs[idx]
        new_shape = _rand_shape(rng)
        while new_shape == old.shape:
            new_shape = _rand_shape(rng)
        new = dataclasses.replace(old, shape=new_shape, color=_rand_color(rng))
        objs[idx] = new
        edit = EditSpec("replace", "local", target_index=idx, new_object=new)
        tgt = SceneSpec(tuple(objs), src.background)
    elif kind == "move":
        idx = int(rng.integers(len(objs)))
        old = objs[idx]
        candidates = [reg for reg in MOVE_REGIONS if not _in_region(old, reg)]
        region = candidates[rng.integers(len(candidates))]
        others = tuple(o for i, o in enumerate(objs) if i != idx)
        moved = _place_or_raise(
            rng, others, old.shape, old.color, old.radius,
            "moved object", min_dist_from=(old.center, 0.30),
            **_REGION_RANGES[region],
        )
        objs[idx] = moved
        edit = EditSpec("move", "local", target_index=idx, new_object=moved, region=region)
        tgt = SceneSpec(tuple(objs), src.background)
    elif kind == "background":
        current = src.background.colors
        choices = [c for c in BACKGROUND_NAMES if (src.background.kind != "solid" or c != current[0])]
        new_bg = BackgroundSpec("solid", (choices[rng.integers(len(choices))],))
        edit = EditSpec("background", "global", new_background=new_bg)
        tgt = SceneSpec(src.objects, new_bg)
    elif kind in ("global-invert", "global-outline"):
        edit = EditSpec(kind, "global")
        tgt = None  # raster-level transform, no target scene spec
    else:
        raise ValidationError(f"unknown edit kind {kind!r}")
    edit.validate(src)
    return src, tgt, edit


def sample_edit(rng: np.random.Generator, kind: str, side: int = 64) -> TrainSample:
    """Edit pair: condition = source render, target = post-edit render.

    gt_mask is the exact symmetric pixel-difference support; local edits
    are regenerated until the mask covers under half the image.
    """
    for _ in range(_MAX_TRIES):
        try:
            src_scene, tgt_scene, edit = _build_edit(rng, kind, side)
        except GenerationError:
            continue  # crowded source scene; redraw
        source = render_scene(src_scene, side)
        if edit.kind == "global-invert":
            target = invert_raster(source)
        elif edit.kind == "global-outline":
            target = render_scene(src_scene, side, outline=True)
        else:
            target = render_scene(tgt_scene, side)
        mask = exact_diff_mask(source, target)
        if not mask.any():
            continue  # degenerate pair (e.g. object fully hidden); redraw
        if edit.scope == "local" and mask.mean() >= 0.5:
            continue
        sample = TrainSample(
            target=target,
            condition=source,
            task="edit",
            caption=caption_edit(edit, src_scene),
            gt_mask=mask,
            scope=edit.scope,
            scene=tgt_scene,
            source_scene=src_scene,
            edit=edit,
        )
        sample.validate()
        return sample
    raise GenerationError(f"no valid {kind!r} edit pair after {_MAX_TRIES} tries")


def sample_edit_weighted(rng: np.random.Generator, side: int = 64,
                         weights: dict[str, float] | None = None) -> TrainSample:
    w = weights or DEFAULT_EDIT_WEIGHTS
    kinds = list(w)
    p = np.asarray([w[k] for k in kinds], dtype=np.float64)
    kind = kinds[rng.choice(len(kinds), p=p / p.sum())]
    return sample_edit(rng, kind, side)


# ---------------------------------------------------------------------------
# Corpus assembly and export
# ---------------------------------------------------------------------------


@dataclass
class Corpus:
    """Materialized sample bank split by task."""

    t2i: list[TrainSample]
    edit: list[TrainSample]
    side: int
    seed: int

    def draw(self, rng: np.random.Generator, task: str) -> TrainSample:
        bank = self.t2i if task == "generate" else self.edit
        if not bank:
            raise ValidationError(f"corpus has no {task!r} samples")
        return bank[rng.integers(len(bank))]


def build_corpus(seed: int, n_t2i: int, n_edit: int, side: int = 64,
                 difficulties: tuple[str, ...] = DIFFICULTIES,
                 edit_weights: dict[str, float] | None = None) -> Corpus:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    t2i = []
    for i in range(n_t2i):
        s = sample_t2i(rng, difficulties[i % len(difficulties)], side)
        s.seed = seed
        t2i.append(s)
    edit = []
    for _ in range(n_edit):
        s = sample_edit_weighted(rng, side, edit_weights)
        s.seed = seed
        edit.append(s)
    return Corpus(t2i=t2i, edit=edit, side=side, seed=seed)


def raster_to_png(img: np.ndarray, path: Path) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def png_to_raster(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def export_corpus(corpus: Corpus, out_dir: Path) -> Path:
    """Write PNG triples plus a JSON-lines index; byte-stable across reruns."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "index.jsonl"
    records = []
    for i, sample in enumerate(corpus.t2i + corpus.edit):
        stem = f"{i:06d}"
        raster_to_png(sample.target, out_dir / f"{stem}_target.png")
        raster_to_png(sample.condition, out_dir / f"{stem}_source.png")
        rec = {
            "id": stem,
            "task": sample.task,
            "caption": sample.caption,
            "scope": sample.scope,
            "difficulty": sample.difficulty,
            "seed": sample.seed,
            "edit_kind": sample.edit.kind if sample.edit else None,
            "scene": sample.scene.to_dict() if sample.scene else None,
            "source_scene": sample.source_scene.to_dict() if sample.source_scene else None,
            "mask": None,
        }
        if sample.gt_mask is not None:
            rec["mask"] = f"{stem}_mask.png"
            mask_img = np.repeat(sample.gt_mask[:, :, None].astype(np.float32), 3, axis=2)
            raster_to_png(mask_img, out_dir / rec["mask"])
        records.append(rec)
    with open(index_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return index_path
