"""Synthetic scene generator and oracle evaluators for conditioning fidelity.

Scenes are flat-color rectangles and ellipses on a gray background. The
renderer, the semantic mask, and the annotation all derive from one coverage
function, so they agree pixel for pixel by construction. Draw order follows
object index (later objects sit in front), and every overlapping pair records
an in-front/behind relationship.

Colors live in the annotation as attributes; the six-color vocabulary is
maximally separated in RGB so nearest-color classification stays unambiguous
under moderate sampler noise.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .graph import SceneAnnotation, SceneObject, load_annotation, save_annotation

COLOR_VOCAB: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
BACKGROUND_RGB = (0.5, 0.5, 0.5)
SHAPES = ("rectangle", "ellipse")

# training-scale encoding: zero mean, std ~0.5 for default-config scenes
DATA_MEAN = 0.5
DATA_SCALE = 1.55


def encode_image(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - DATA_MEAN) * DATA_SCALE


def decode_image(x: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=np.float64) / DATA_SCALE + DATA_MEAN, 0.0, 1.0)


@dataclass(frozen=True)
class SceneConfig:
    grid: tuple[int, int] = (16, 16)          # (H, W)
    min_objects: int = 1
    max_objects: int = 3
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLOR_VOCAB)
    min_size: int = 4
    max_size: int = 10
    overlap: str = "limited"                  # "free" | "disjoint" | "limited"
    max_occlusion: float = 0.5
    disjoint_prob: float = 0.65               # chance a new object avoids all others
    relation_prob: float = 0.5                # chance to record a spatial relation
    max_retries: int = 200

    def __post_init__(self):
        rgbs = [COLOR_VOCAB[c] for c in self.colors]
        if len(set(rgbs)) != len(rgbs):
            raise ValueError("vocabulary colors must be distinct in RGB")
        if self.overlap not in ("free", "disjoint", "limited"):
            raise ValueError(f"unknown overlap policy {self.overlap!r}")
        if not 1 <= self.min_objects <= self.max_objects <= len(self.colors):
            raise ValueError("bad object count range")


def coverage_mask(shape: str, bbox, grid) -> np.ndarray:
    """Boolean (H, W) pixel coverage; ellipses use a pixel-center test against
    the ellipse inscribed in the half-open bbox."""
    h, w = grid
    x0, y0, x1, y1 = bbox
    cov = np.zeros((h, w), dtype=bool)
    if shape == "rectangle":
        cov[y0:y1, x0:x1] = True
        return cov
    if shape != "ellipse":
        raise ValueError(f"unknown shape {shape!r}")
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    rx, ry = (x1 - x0) / 2.0, (y1 - y0) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    cov = (((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2) <= 1.0
    return cov


def _visible_fractions(covs: list[np.ndarray]) -> list[float]:
    """Fraction of each object's coverage not hidden by later (on-top) objects."""
    out = []
    for i, cov in enumerate(covs):
        above = np.zeros_like(cov)
        for later in covs[i + 1 :]:
            above |= later
        total = cov.sum()
        out.append(1.0 if total == 0 else float((cov & ~above).sum() / total))
    return out


def generate_scene(rng: np.random.Generator, cfg: SceneConfig):
    """One scene: returns (rgb image (3,H,W) in [0,1], SceneAnnotation)."""
    h, w = cfg.grid
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    colors = list(rng.choice(cfg.colors, size=n, replace=False))

    objects: list[SceneObject] = []
    covs: list[np.ndarray] = []
    for i in range(n):
        want_disjoint = cfg.overlap == "disjoint" or (
            cfg.overlap == "limited" and rng.random() < cfg.disjoint_prob
        )
        for attempt in range(cfg.max_retries + 1):
            if attempt == cfg.max_retries:
                if cfg.overlap == "disjoint":
                    raise RuntimeError(
                        "could not place objects under the overlap policy"
                    )
                want_disjoint = False  # fall back to limited overlap
            bw = int(rng.integers(cfg.min_size, min(cfg.max_size, w) + 1))
            bh = int(rng.integers(cfg.min_size, min(cfg.max_size, h) + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            bbox = (x0, y0, x0 + bw, y0 + bh)
            shape = str(rng.choice(cfg.shapes))
            cov = coverage_mask(shape, bbox, cfg.grid)
            if want_disjoint and any((cov & c).any() for c in covs):
                continue
            if cfg.overlap == "limited" and not want_disjoint:
                if min(_visible_fractions(covs + [cov])) < 1.0 - cfg.max_occlusion:
                    continue
            objects.append(SceneObject(shape, bbox, [colors[i]]))
            covs.append(cov)
            break

    # relationships: overlap order is definitional, lateral ones are sampled
    relationships: list[tuple[int, str, int]] = []
    for i in range(n):
        for j in range(i + 1, n):
            if (covs[i] & covs[j]).any():
                if rng.random() < 0.5:
                    relationships.append((j, "in-front", i))
                else:
                    relationships.append((i, "behind", j))
            else:
                bi, bj = objects[i].bbox, objects[j].bbox
                if bi[2] <= bj[0] and rng.random() < cfg.relation_prob:
                    relationships.append((i, "left-of", j))
                elif bj[2] <= bi[0] and rng.random() < cfg.relation_prob:
                    relationships.append((j, "left-of", i))
                if bi[3] <= bj[1] and rng.random() < cfg.relation_prob:
                    relationships.append((i, "above", j))
                elif bj[3] <= bi[1] and rng.random() < cfg.relation_prob:
                    relationships.append((j, "above", i))

    caption = " and ".join(
        f"a {obj.attributes[0]} {obj.label}" for obj in objects
    )
    ann = SceneAnnotation(
        width=w,
        height=h,
        objects=objects,
        relationships=relationships,
        caption=caption,
    )
    ann.mask = _semantic_mask(ann, covs)
    ann.validate()
    return render_scene(ann, covs), ann


def _semantic_mask(ann: SceneAnnotation, covs: list[np.ndarray]) -> np.ndarray:
    names = ann.class_names()
    mask = np.zeros((ann.height, ann.width), dtype=np.int64)
    for obj, cov in zip(ann.objects, covs):  # later objects overwrite: on top
        mask[cov] = names.index(obj.label)
    return mask


def render_scene(ann: SceneAnnotation, covs=None) -> np.ndarray:
    """Analytic flat-fill render of an annotation, (3, H, W) floats in [0,1]."""
    if covs is None:
        covs = [
            coverage_mask(o.label, o.bbox, (ann.height, ann.width))
            for o in ann.objects
        ]
    img = np.empty((3, ann.height, ann.width))
    img[:] = np.asarray(BACKGROUND_RGB)[:, None, None]
    for obj, cov in zip(ann.objects, covs):
        rgb = COLOR_VOCAB[_object_color(obj)]
        for c in range(3):
            img[c][cov] = rgb[c]
    return img


def _object_color(obj: SceneObject) -> str:
    for attr in obj.attributes:
        if attr in COLOR_VOCAB:
            return attr
    raise ValueError(f"object {obj.label} has no color attribute")


# ----------------------------------------------------------------------------
# dataset generation


def generate_dataset(n: int, cfg: SceneConfig, out_dir, seed: int = 0) -> dict:
    """Write n scene triplets (PNG, raw float dump, annotation JSON) plus a
    manifest of SHA-256 hashes; deterministic from (seed, cfg)."""
    from .sampler import save_float_dump, save_png

    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        img, ann = generate_scene(rng, cfg)
        stem = f"scene_{i:05d}"
        png = os.path.join(out_dir, stem + ".png")
        dump = os.path.join(out_dir, stem + ".npy")
        annp = os.path.join(out_dir, stem + ".json")
        save_png(png, img)
        save_float_dump(dump, img)
        save_annotation(ann, annp)
        entries.append(
            {
                "index": i,
                "png": os.path.basename(png),
                "float": os.path.basename(dump),
                "annotation": os.path.basename(annp),
                "sha256": {
                    os.path.basename(p): _sha256(p) for p in (png, dump, annp)
                },
            }
        )
    manifest = {
        "count": n,
        "seed": seed,
        "grid": list(cfg.grid),
        "entries": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def load_dataset(data_dir):
    """(images (N,3,H,W) in [0,1], annotations) from a generated directory."""
    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    images, anns = [], []
    for entry in manifest["entries"]:
        images.append(np.load(os.path.join(data_dir, entry["float"])))
        anns.append(load_annotation(os.path.join(data_dir, entry["annotation"])))
    return np.stack(images) if images else np.zeros((0,)), anns


# ----------------------------------------------------------------------------
# oracle evaluators


def nearest_color(rgb) -> str:
    """Vocabulary color closest in RGB; ties resolve by vocabulary order."""
    rgb = np.asarray(rgb, dtype=np.float64)
    best, best_d = None, np.inf
    for name, ref in COLOR_VOCAB.items():
        d = float(np.sum((rgb - np.asarray(ref)) ** 2))
        if d < best_d - 1e-12:
            best, best_d = name, d
    return best


def _occluders(ann: SceneAnnotation, covs) -> list[np.ndarray]:
    """Per object, the union coverage of objects recorded in front of it."""
    fronts = [np.zeros((ann.height, ann.width), dtype=bool) for _ in ann.objects]
    for s, pred, o in ann.relationships:
        if pred == "in-front":
            fronts[o] |= covs[s]
        elif pred == "behind":
            fronts[s] |= covs[o]
    return fronts


def attribute_fidelity(image: np.ndarray, ann: SceneAnnotation,
                       return_details: bool = False):
    """Fraction of objects whose visible bbox interior classifies to their
    color attribute. Pixels occluded per the recorded relations are excluded;
    fully occluded objects are skipped and reported in the details."""
    image = np.asarray(image)
    if image.shape[1:] != (ann.height, ann.width):
        raise ValueError("image dims do not match the annotation")
    covs = [
        coverage_mask(o.label, o.bbox, (ann.height, ann.width))
        for o in ann.objects
    ]
    fronts = _occluders(ann, covs)

    matched, counted, skipped = 0, 0, []
    details = []
    for i, obj in enumerate(ann.objects):
        x0, y0, x1, y1 = obj.bbox
        box = np.zeros((ann.height, ann.width), dtype=bool)
        box[y0:y1, x0:x1] = True
        visible = box & ~fronts[i]
        if not visible.any():
            skipped.append(i)
            details.append({"object": i, "skipped": True})
            continue
        mean_rgb = image[:, visible].mean(axis=1)
        got = nearest_color(mean_rgb)
        want = _object_color(obj)
        counted += 1
        matched += got == want
        details.append(
            {"object": i, "skipped": False, "predicted": got, "expected": want}
        )
    fraction = matched / counted if counted else 0.0
    if return_details:
        return fraction, {"skipped": skipped, "objects": details}
    return fraction


def relation_fidelity(image: np.ndarray, ann: SceneAnnotation):
    """(respected, total) over recorded in-front/behind pairs: the overlap
    region must classify to the front object's color."""
    covs = [
        coverage_mask(o.label, o.bbox, (ann.height, ann.width))
        for o in ann.objects
    ]
    respected, total = 0, 0
    for s, pred, o in ann.relationships:
        if pred == "in-front":
            front, back = s, o
        elif pred == "behind":
            front, back = o, s
        else:
            continue
        overlap = covs[front] & covs[back]
        if not overlap.any():
            continue
        total += 1
        mean_rgb = np.asarray(image)[:, overlap].mean(axis=1)
        respected += nearest_color(mean_rgb) == _object_color(ann.objects[front])
    return respected, total


def layout_iou(image: np.ndarray, ann: SceneAnnotation,
               background_rgb=BACKGROUND_RGB, threshold: float = 0.25) -> float:
    """Mean best-IoU between thresholded connected components and the
    annotated boxes, matched greedily, unmatched boxes scoring zero."""
    image = np.asarray(image)
    dist = np.sqrt(
        ((image - np.asarray(background_rgb)[:, None, None]) ** 2).sum(axis=0)
    )
    fg = dist > threshold
    labels, n_comp = ndimage.label(fg)
    if n_comp == 0 or not ann.objects:
        return 0.0

    comps = [labels == k for k in range(1, n_comp + 1)]
    boxes = []
    for obj in ann.objects:
        x0, y0, x1, y1 = obj.bbox
        b = np.zeros_like(fg)
        b[y0:y1, x0:x1] = True
        boxes.append(b)

    iou = np.zeros((len(comps), len(boxes)))
    for i, c in enumerate(comps):
        for j, b in enumerate(boxes):
            inter = float((c & b).sum())
            union = float((c | b).sum())
            iou[i, j] = inter / union if union else 0.0

    best = np.zeros(len(boxes))
    used_c, used_b = set(), set()
    while True:
        masked = iou.copy()
        for i in used_c:
            masked[i, :] = -1
        for j in used_b:
            masked[:, j] = -1
        i, j = np.unravel_index(np.argmax(masked), masked.shape)
        if masked[i, j] <= 0:
            break
        best[j] = masked[i, j]
        used_c.add(int(i))
        used_b.add(int(j))
        if len(used_c) == len(comps) or len(used_b) == len(boxes):
            break
    return float(best.mean())
