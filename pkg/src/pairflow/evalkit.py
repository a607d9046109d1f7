"""Programmatic, detector-free analogs of generation and editing benchmarks.

A palette-nearest segmenter plus circularity / polygon-corner shape
classification recovers (shape, color, center) triples from rendered or
generated images; category checkers turn those detections into per-prompt
pass booleans. Ground-truth renders must score 100% on every category
(oracle soundness), and identical inputs always produce identical results.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import measure, morphology

from . import synthdata
from .errors import ContractError, MissingArtifactError, ValidationError
from .maskpipe import dilate

_OBJECT_PALETTE = np.stack([synthdata.color_value(c) for c in synthdata.COLOR_NAMES])
_BG_PALETTE = np.stack([synthdata.color_value(c) for c in synthdata.BACKGROUND_NAMES])
_FULL_PALETTE = np.concatenate([_OBJECT_PALETTE, _BG_PALETTE], axis=0)

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class EvalParams:
    palette_threshold: float = 0.30  # max RGB distance for an object pixel
    min_area_frac: float = 0.004  # of the image area, floored at 8 px
    position_margin: float = 0.10  # of the image side
    global_err_threshold: float = 0.12  # mean abs error for global predicates
    psnr_pass_db: float = 22.0
    psnr_cap_db: float = 99.0


# ---------------------------------------------------------------------------
# Object detection
# ---------------------------------------------------------------------------


@dataclass
class Detection:
    shape: str
    color: str
    center: tuple[float, float]  # (x, y) in pixels
    area: int
    circularity: float
    corners: int
    extent: float

    def brief(self) -> dict:
        return {"shape": self.shape, "color": self.color,
                "center": [round(self.center[0], 2), round(self.center[1], 2)],
                "area": self.area}


def _classify_shape(mask: np.ndarray) -> tuple[str, float, int, float]:
    """Shape from contour circularity and polygon-approximation corner count.

    Concavity (area over convex hull area) splits off stars first, since
    they are the only non-convex shape; bbox extent is the final tie-break.
    """
    area = float(mask.sum())
    rows = np.any(mask, axis=1).nonzero()[0]
    cols = np.any(mask, axis=0).nonzero()[0]
    bbox_area = float((rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1))
    extent = area / bbox_area
    solidity = area / max(float(morphology.convex_hull_image(mask).sum()), 1.0)

    padded = np.pad(mask, 1).astype(float)
    contours = measure.find_contours(padded, 0.5)
    contour = max(contours, key=len)
    seg = np.diff(contour, axis=0)
    perimeter = float(np.sqrt((seg ** 2).sum(axis=1)).sum())
    circularity = 4.0 * np.pi * area / max(perimeter ** 2, 1e-9)

    r_equiv = np.sqrt(area / np.pi)
    tol = max(1.0, 0.22 * r_equiv)
    approx = measure.approximate_polygon(contour, tolerance=tol)
    corners = max(len(approx) - 1, 0)

    if solidity < 0.825:
        shape = "star"
    elif corners == 4 and extent >= 0.95:
        shape = "square"  # digital squares fill their bbox exactly
    elif circularity >= 0.85:
        shape = "circle"
    elif corners == 3:
        shape = "triangle"
    elif corners == 4:
        shape = "square" if extent >= 0.72 else "triangle"
    elif extent >= 0.85:
        shape = "square"
    elif circularity >= 0.72 and extent >= 0.68:
        shape = "circle"
    else:
        shape = "triangle"
    return shape, float(circularity), int(corners), float(extent)


def detect_objects(image: np.ndarray, params: EvalParams | None = None) -> list[Detection]:
    """Palette-nearest segmentation, component filtering, shape classification."""
    params = params or EvalParams()
    h, w = image.shape[:2]
    flat = image.reshape(-1, 3).astype(np.float64)
    d = np.linalg.norm(flat[:, None, :] - _FULL_PALETTE[None, :, :], axis=-1)
    nearest = d.argmin(axis=1).reshape(h, w)
    nearest_dist = d.min(axis=1).reshape(h, w)
    min_area = max(8, int(round(params.min_area_frac * h * w)))

    detections: list[Detection] = []
    for ci, cname in enumerate(synthdata.COLOR_NAMES):
        color_mask = (nearest == ci) & (nearest_dist < params.palette_threshold)
        if not color_mask.any():
            continue
        labels, n = ndimage.label(color_mask, structure=_EIGHT)
        for comp in range(1, n + 1):
            comp_mask = labels == comp
            area = int(comp_mask.sum())
            if area < min_area:
                continue
            ys, xs = np.nonzero(comp_mask)
            center = (float(xs.mean() + 0.5), float(ys.mean() + 0.5))
            shape, circ, corners, extent = _classify_shape(comp_mask)
            detections.append(Detection(shape, cname, center, area, circ, corners, extent))
    detections.sort(key=lambda det: (-det.area, det.center))
    return detections


# ---------------------------------------------------------------------------
# Generation checking
# ---------------------------------------------------------------------------

GEN_CATEGORIES = ("single_obj", "two_obj", "counting", "colors", "position", "color_attr")

_DIFFICULTY_CATEGORIES = {
    "1obj": ("single_obj", "colors"),
    "2obj": ("two_obj",),
    "count": ("counting",),
    "position": ("position",),
    "color-attr": ("color_attr",),
}


@dataclass
class GenCheckResult:
    passes: dict[str, bool | None]  # None = category not attempted
    overall: float
    trace: dict = field(default_factory=dict)


def _has(dets: list[Detection], shape: str | None = None, color: str | None = None) -> bool:
    return any((shape is None or d.shape == shape) and (color is None or d.color == color)
               for d in dets)


def _count(dets: list[Detection], shape: str, color: str) -> int:
    return sum(1 for d in dets if d.shape == shape and d.color == color)


def check_generation(image: np.ndarray, prompt: synthdata.TrainSample,
                     params: EvalParams | None = None) -> GenCheckResult:
    """Category rules over the detections for one prompt.

    The prompt sample carries the structured scene intent (objects,
    difficulty, spatial relation); its rendered target is never consulted.
    """
    params = params or EvalParams()
    if prompt.scene is None or prompt.difficulty is None:
        raise ContractError("generation prompt must carry a scene spec and difficulty")
    dets = detect_objects(image, params)
    objs = prompt.scene.objects
    side = image.shape[0]
    passes: dict[str, bool | None] = {c: None for c in GEN_CATEGORIES}

    if prompt.difficulty == "1obj":
        passes["single_obj"] = _has(dets, shape=objs[0].shape)
        passes["colors"] = _has(dets, shape=objs[0].shape, color=objs[0].color)
    elif prompt.difficulty == "2obj":
        passes["two_obj"] = all(_has(dets, shape=o.shape) for o in objs)
    elif prompt.difficulty == "count":
        o = objs[0]
        passes["counting"] = _count(dets, o.shape, o.color) == len(objs)
    elif prompt.difficulty == "position":
        a, b = objs
        da = [d for d in dets if d.shape == a.shape and d.color == a.color]
        db = [d for d in dets if d.shape == b.shape and d.color == b.color]
        ok = False
        margin = params.position_margin * side
        if da and db:
            ax, ay = da[0].center
            bx, by = db[0].center
            ok = {
                "left": ax <= bx - margin,
                "right": ax >= bx + margin,
                "above": ay <= by - margin,
                "below": ay >= by + margin,
            }[prompt.relation]
        passes["position"] = ok
    elif prompt.difficulty == "color-attr":
        passes["color_attr"] = all(_has(dets, shape=o.shape, color=o.color) for o in objs)
    else:
        raise ValidationError(f"unknown difficulty {prompt.difficulty!r}")

    attempted = [v for v in passes.values() if v is not None]
    overall = float(np.mean(attempted)) if attempted else 0.0
    trace = {"detections": [d.brief() for d in dets],
             "prompt": prompt.caption, "difficulty": prompt.difficulty}
    return GenCheckResult(passes=passes, overall=overall, trace=trace)


# ---------------------------------------------------------------------------
# Edit checking
# ---------------------------------------------------------------------------

EDIT_CATEGORY_OF_KIND = {
    "add": "add", "remove": "remove", "replace": "replace",
    "recolor": "adjust", "move": "adjust",
    "background": "background", "global-invert": "global", "global-outline": "global",
}


@dataclass
class EditCheckResult:
    edit_success: bool
    background_psnr: float | None  # None when nothing lies outside the mask
    category: str
    trace: dict = field(default_factory=dict)


def background_psnr(src: np.ndarray, out: np.ndarray, gt_mask: np.ndarray,
                    params: EvalParams | None = None) -> float | None:
    """PSNR over the complement of the mask dilated by radius 2, capped."""
    params = params or EvalParams()
    keep = ~dilate(gt_mask, 2)
    if not keep.any():
        return None
    mse = float(((src[keep] - out[keep]) ** 2).mean())
    if mse <= 0.0:
        return params.psnr_cap_db
    return min(10.0 * np.log10(1.0 / mse), params.psnr_cap_db)


def _near(det: Detection, center_px: tuple[float, float], radius_px: float) -> bool:
    return float(np.hypot(det.center[0] - center_px[0], det.center[1] - center_px[1])) <= radius_px


def _in_region_px(det: Detection, region: str, side: int) -> bool:
    x, y = det.center
    return {"left": x < 0.40 * side, "right": x > 0.60 * side,
            "top": y < 0.40 * side, "bottom": y > 0.60 * side}[region]


def check_edit(output: np.ndarray, sample: synthdata.TrainSample,
               params: EvalParams | None = None) -> EditCheckResult:
    """Kind-specific success predicate plus background preservation PSNR."""
    params = params or EvalParams()
    edit = sample.edit
    if edit is None:
        raise ContractError("sample carries no edit spec")
    if edit.scope == "local" and sample.gt_mask is None:
        raise ContractError("local edit checking requires a gt_mask")
    src = sample.condition
    side = output.shape[0]
    scene = sample.source_scene
    dets = detect_objects(output, params)
    trace: dict = {"detections": [d.brief() for d in dets], "kind": edit.kind}

    def obj_px(o: synthdata.ObjectSpec) -> tuple[tuple[float, float], float]:
        return (o.center[0] * side, o.center[1] * side), o.radius * side

    if edit.kind == "remove":
        # absence is judged on color + location; non-overlap guarantees no
        # other same-colored object can sit this close to the removed one
        old = scene.objects[edit.target_index]
        c, r = obj_px(old)
        success = not any(
            d.color == old.color and _near(d, c, 1.5 * r) for d in dets
        )
    elif edit.kind == "recolor":
        old = scene.objects[edit.target_index]
        c, r = obj_px(old)
        success = any(d.color == edit.new_color and _near(d, c, 1.5 * r) for d in dets)
    elif edit.kind == "add":
        new = edit.new_object
        before = sum(1 for o in scene.objects
                     if o.shape == new.shape and o.color == new.color)
        success = _count(dets, new.shape, new.color) >= before + 1
    elif edit.kind == "replace":
        old = scene.objects[edit.target_index]
        new = edit.new_object
        c, r = obj_px(old)
        got_new = any(d.shape == new.shape and d.color == new.color and _near(d, c, 1.5 * r)
                      for d in dets)
        old_gone = not any(d.shape == old.shape and d.color == old.color
                           and _near(d, c, 1.0 * r) for d in dets)
        success = got_new and old_gone
    elif edit.kind == "move":
        old = scene.objects[edit.target_index]
        c, r = obj_px(old)
        matches = [d for d in dets if d.shape == old.shape and d.color == old.color]
        in_dest = any(_in_region_px(d, edit.region, side) for d in matches)
        at_old = any(d.color == old.color and _near(d, c, 1.0 * r) for d in dets)
        success = in_dest and not at_old
    elif edit.kind == "background":
        xx, yy = np.meshgrid((np.arange(side) + 0.5) / side, (np.arange(side) + 0.5) / side)
        obj_support = np.zeros((side, side), dtype=bool)
        for o in scene.objects:
            obj_support |= synthdata._shape_mask(o, xx, yy, scale=1.15)
        bg_pixels = output[~obj_support]
        mean = bg_pixels.mean(axis=0)
        d = np.linalg.norm(_BG_PALETTE - mean, axis=1)
        success = synthdata.BACKGROUND_NAMES[int(d.argmin())] == edit.new_background.colors[0]
        trace["mean_background"] = [round(float(v), 3) for v in mean]
    elif edit.kind == "global-invert":
        err = float(np.abs(output - synthdata.invert_raster(src)).mean())
        success = err < params.global_err_threshold
        trace["mean_abs_err"] = round(err, 4)
    elif edit.kind == "global-outline":
        target = synthdata.render_scene(scene, side, outline=True)
        err = float(np.abs(output - target).mean())
        success = err < params.global_err_threshold
        trace["mean_abs_err"] = round(err, 4)
    else:
        raise ValidationError(f"unknown edit kind {edit.kind!r}")

    psnr = None
    if sample.gt_mask is not None:
        psnr = background_psnr(src, output, sample.gt_mask, params)
    return EditCheckResult(edit_success=bool(success), background_psnr=psnr,
                           category=EDIT_CATEGORY_OF_KIND[edit.kind], trace=trace)


# ---------------------------------------------------------------------------
# Suites, aggregation, reports
# ---------------------------------------------------------------------------


def build_generation_suite(seed: int, n: int, side: int,
                           difficulties: tuple[str, ...] = synthdata.DIFFICULTIES
                           ) -> list[synthdata.TrainSample]:
    """n prompts split evenly over the difficulty axes; seed-deterministic."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7A1)))
    return [synthdata.sample_t2i(rng, difficulties[i % len(difficulties)], side)
            for i in range(n)]


def build_edit_suite(seed: int, n: int, side: int,
                     kinds: tuple[str, ...] = synthdata.EDIT_KINDS
                     ) -> list[synthdata.TrainSample]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xED17)))
    return [synthdata.sample_edit(rng, kinds[i % len(kinds)], side) for i in range(n)]


def aggregate_generation(results: list[GenCheckResult]) -> dict:
    """Per-category pass rates; unattempted categories report n/a and are
    excluded from the overall mean."""
    per_category = {}
    for cat in GEN_CATEGORIES:
        vals = [r.passes[cat] for r in results if r.passes[cat] is not None]
        per_category[cat] = float(np.mean(vals)) if vals else None
    overall = float(np.mean([r.overall for r in results])) if results else 0.0
    return {"per_category": per_category, "overall": overall, "n": len(results)}


def aggregate_editing(results: list[EditCheckResult]) -> dict:
    per_category = {}
    for cat in sorted(set(EDIT_CATEGORY_OF_KIND.values())):
        vals = [r.edit_success for r in results if r.category == cat]
        per_category[cat] = float(np.mean(vals)) if vals else None
    psnrs = [r.background_psnr for r in results if r.background_psnr is not None]
    overall = float(np.mean([r.edit_success for r in results])) if results else 0.0
    return {
        "per_category": per_category,
        "overall": overall,
        "median_background_psnr": float(np.median(psnrs)) if psnrs else None,
        "n": len(results),
    }


def _image_grid(images: list[np.ndarray]) -> np.ndarray:
    n = len(images)
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    h, w = images[0].shape[:2]
    grid = np.ones((rows * h, cols * w, 3), dtype=np.float32)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    return grid


def report(results: dict, out_dir: Path) -> list[Path]:
    """Emit metrics.json, per_category.csv, and sample grids.

    results keys: 'generation' -> (list[GenCheckResult], list[images]),
    'editing' -> (list[EditCheckResult], list[images]); either may be absent.
    Reruns on identical inputs produce identical files.
    """
    if not results:
        raise ValidationError("nothing to report")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise MissingArtifactError(f"cannot write report dir {out_dir}: {exc}") from exc

    metrics: dict = {}
    rows: list[tuple[str, str, str]] = []
    written: list[Path] = []
    if "generation" in results:
        gen_results, gen_images = results["generation"]
        metrics["generation"] = aggregate_generation(gen_results)
        for cat, val in metrics["generation"]["per_category"].items():
            rows.append(("generation", cat, "n/a" if val is None else f"{val:.4f}"))
        rows.append(("generation", "overall", f"{metrics['generation']['overall']:.4f}"))
        if gen_images:
            grid_path = out_dir / "grid_generation.png"
            synthdata.raster_to_png(_image_grid(list(gen_images)[:64]), grid_path)
            written.append(grid_path)
    if "editing" in results:
        edit_results, edit_images = results["editing"]
        metrics["editing"] = aggregate_editing(edit_results)
        for cat, val in metrics["editing"]["per_category"].items():
            rows.append(("editing", cat, "n/a" if val is None else f"{val:.4f}"))
        rows.append(("editing", "overall", f"{metrics['editing']['overall']:.4f}"))
        med = metrics["editing"]["median_background_psnr"]
        rows.append(("editing", "median_background_psnr",
                     "n/a" if med is None else f"{med:.2f}"))
        if edit_images:
            grid_path = out_dir / "grid_editing.png"
            synthdata.raster_to_png(_image_grid(list(edit_images)[:64]), grid_path)
            written.append(grid_path)

    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    csv_path = out_dir / "per_category.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["suite", "category", "value"])
        writer.writerows(rows)
    return [metrics_path, csv_path] + written
