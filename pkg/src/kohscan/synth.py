"""Deterministic synthetic KOH-slide corpus.

Slides are noisy bright-field grayscale images. Fungus-class slides carry
septate filaments (smooth curved tubes with periodic transverse cross-walls)
drawn over the same keratin-blob texture that keratin-class slides carry, so
mean intensity alone stays weakly informative and the classes differ by
shape. All geometry is recorded per slide, and patch labels are derived by
intersecting filament centerlines with the tile grid:

  fungus   centerline chord inside the tile >= MIN_CHORD_PX
  keratin  centerline stays MARGIN_PX clear of the tile
  (tiles grazed in between are excluded, mirroring expert curation)

Randomness comes from numpy's PCG64; each slide draws from
SeedSequence(seed, spawn_key=(slide_index,)), so parallel and serial
generation agree bit for bit.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import Manifest, PatchRecord, SlideImage

MIN_CHORD_PX = 40.0
MARGIN_PX = 10.0


@dataclass(frozen=True)
class FilamentParams:
    count: tuple[int, int] = (5, 10)
    width_px: tuple[float, float] = (4.0, 7.0)
    curvature: float = 0.12
    septum_spacing_px: tuple[float, float] = (22.0, 40.0)
    length_px: tuple[float, float] = (450.0, 1300.0)
    branch_prob: float = 0.35
    depth: float = 32.0  # darkening of the tube body relative to background


@dataclass(frozen=True)
class BlobParams:
    count: tuple[int, int] = (6, 14)
    radius_px: tuple[float, float] = (18.0, 45.0)
    depth: float = 30.0


@dataclass(frozen=True)
class SynthConfig:
    n_slides_per_class: int = 55
    slide_size_px: tuple[int, int] = (3000, 2000)  # (width, height)
    filament: FilamentParams = field(default_factory=FilamentParams)
    blob: BlobParams = field(default_factory=BlobParams)
    noise_sigma: float = 6.0
    vignette: bool = True
    seed: int = 7
    patch_size_px: int = 500
    min_content: float = 0.5

    def __post_init__(self):
        if self.n_slides_per_class < 1:
            raise ValueError("n_slides_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for lo, hi in (self.filament.count, self.filament.width_px,
                       self.filament.septum_spacing_px, self.filament.length_px,
                       self.blob.count, self.blob.radius_px):
            if hi < lo or hi <= 0:
                raise ValueError("parameter ranges must be non-empty and positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, lohi):
    lo, hi = lohi
    return float(rng.uniform(lo, hi))


def _int_uniform(rng, lohi):
    lo, hi = lohi
    return int(rng.integers(lo, hi + 1))


def _stamp_disks(mask: np.ndarray, xs, ys, radius: float) -> None:
    """Set mask True within `radius` of each (x, y) center."""
    h, w = mask.shape
    r = int(math.ceil(radius))
    offs = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    foot = (dx * dx + dy * dy) <= radius * radius
    fdy = dy[foot]
    fdx = dx[foot]
    cy = np.round(np.asarray(ys)).astype(np.int64)
    cx = np.round(np.asarray(xs)).astype(np.int64)
    yy = (cy[:, None] + fdy[None, :]).ravel()
    xx = (cx[:, None] + fdx[None, :]).ravel()
    ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    mask[yy[ok], xx[ok]] = True


def _densify(points: np.ndarray, step: float = 1.0) -> np.ndarray:
    """Resample a polyline at roughly `step` spacing."""
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        seg = b - a
        dist = float(np.hypot(*seg))
        n = max(1, int(dist / step))
        for t in range(1, n + 1):
            out.append(a + seg * (t / n))
    return np.asarray(out)


def _walk(rng, canvas_shape, start, heading, length, curvature, field_r=None,
          center=None, step=6.0, margin=20.0):
    """Random smooth walk; veers back toward the field center when it nears
    the field boundary or the canvas edge."""
    h, w = canvas_shape
    cx, cy = (w / 2, h / 2) if center is None else center
    limit = field_r if field_r is not None else 0.49 * min(w, h)

    def off_bounds(p):
        x, y = p
        if not (margin <= x <= w - margin and margin <= y <= h - margin):
            return True
        return math.hypot(x - cx, y - cy) > 0.92 * limit

    pts = [np.asarray(start, dtype=float)]
    pos = pts[0].copy()
    n = max(2, int(length / step))
    for _ in range(n):
        heading += rng.normal(0.0, curvature)
        nxt = pos + step * np.array([math.cos(heading), math.sin(heading)])
        if off_bounds(nxt):
            heading = math.atan2(cy - pos[1], cx - pos[0]) + rng.normal(0.0, 0.4)
            nxt = pos + step * np.array([math.cos(heading), math.sin(heading)])
        pos = nxt
        pts.append(pos.copy())
    return np.asarray(pts)


def draw_hypha(canvas: np.ndarray, params: FilamentParams, rng,
               field_r: float | None = None, center=None) -> dict:
    """Render one septate filament onto the float canvas (in place).

    Returns the geometry record: rendered width, the centerline polylines
    (main plus branches) and the septum centers, all in (x, y) pixels.
    """
    h, w = canvas.shape
    if min(h, w) < 64:
        raise ValueError("canvas too small for a filament")
    width = _uniform(rng, params.width_px)
    if width <= 0:
        raise ValueError("filament width must be positive")
    length = _uniform(rng, params.length_px)
    if length <= 0:
        raise ValueError("filament length must be positive")

    if center is None:
        center = (w / 2, h / 2)
    r_limit = field_r if field_r is not None else 0.49 * min(w, h)
    margin = 40.0
    start = (rng.uniform(margin, w - margin), rng.uniform(margin, h - margin))
    while math.hypot(start[0] - center[0], start[1] - center[1]) > 0.85 * r_limit:
        start = (rng.uniform(margin, w - margin), rng.uniform(margin, h - margin))
    heading = rng.uniform(0, 2 * math.pi)

    polylines = [_walk(rng, canvas.shape, start, heading, length, params.curvature,
                       field_r, center)]
    if rng.uniform() < params.branch_prob and len(polylines[0]) > 4:
        k = int(rng.integers(1, len(polylines[0]) - 2))
        bstart = polylines[0][k]
        bhead = math.atan2(*(polylines[0][k + 1] - polylines[0][k])[::-1])
        bhead += rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.2)
        polylines.append(_walk(rng, canvas.shape, bstart, bhead,
                               length * rng.uniform(0.25, 0.5), params.curvature,
                               field_r, center))

    tube = np.zeros(canvas.shape, dtype=bool)
    inner = np.zeros(canvas.shape, dtype=bool)
    sep_mask = np.zeros(canvas.shape, dtype=bool)
    septa = []
    sep_spacing = _uniform(rng, params.septum_spacing_px)
    for poly in polylines:
        dense = _densify(poly, step=1.0)
        _stamp_disks(tube, dense[:, 0], dense[:, 1], width / 2)
        if width > 2.5:
            _stamp_disks(inner, dense[:, 0], dense[:, 1], width / 2 - 1.4)
        # septa at even arclength intervals
        d = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(dense, axis=0).T))])
        sep_pts = []
        for s in np.arange(sep_spacing, d[-1] - sep_spacing / 2, sep_spacing):
            i = int(np.searchsorted(d, s))
            p = dense[min(i, len(dense) - 1)]
            t = dense[min(i + 2, len(dense) - 1)] - dense[max(i - 2, 0)]
            norm = np.hypot(*t)
            if norm < 1e-9:
                continue
            nvec = np.array([-t[1], t[0]]) / norm
            half = width / 2 + 1.0
            sep_pts.append(np.linspace(p - nvec * half, p + nvec * half, int(2 * half) + 1))
            septa.append([float(p[0]), float(p[1])])
        if sep_pts:
            pts = np.concatenate(sep_pts)
            _stamp_disks(sep_mask, pts[:, 0], pts[:, 1], 0.9)

    canvas[tube] -= params.depth
    canvas[inner] += params.depth * 0.45  # lighter lumen, darker walls
    canvas[sep_mask] -= params.depth * 0.8

    return {"kind": "filament", "width": width,
            "polylines": [poly.round(3).tolist() for poly in polylines],
            "septa": septa}


def draw_keratin(canvas: np.ndarray, params: BlobParams, rng, count: int | None = None,
                 field_r: float | None = None, center=None) -> dict:
    """Render `count` amorphous keratin blobs (default: sampled from
    params.count) onto the float canvas. Returns the geometry record."""
    h, w = canvas.shape
    if count is None:
        count = _int_uniform(rng, params.count)
    if count < 0:
        raise ValueError("blob count must be >= 0")
    if center is None:
        center = (w / 2, h / 2)
    r_limit = field_r if field_r is not None else 0.49 * min(w, h)

    blobs = []
    for _ in range(count):
        radius = _uniform(rng, params.radius_px)
        if radius <= 0:
            raise ValueError("blob radius must be positive")
        pad = radius * 1.2
        cx = rng.uniform(pad, w - pad)
        cy = rng.uniform(pad, h - pad)
        if math.hypot(cx - center[0], cy - center[1]) > r_limit - pad:
            ang = math.atan2(cy - center[1], cx - center[0])
            cx = center[0] + (r_limit - pad) * math.cos(ang)
            cy = center[1] + (r_limit - pad) * math.sin(ang)

        # radial wobble, rescaled so the outline stays within 4% of the radius
        ks = np.arange(2, 6)
        amps = rng.normal(0.0, 1.0, size=len(ks))
        phases = rng.uniform(0, 2 * math.pi, size=len(ks))
        theta_probe = np.linspace(0, 2 * math.pi, 256)
        dev = (amps[:, None] * np.cos(ks[:, None] * theta_probe + phases[:, None])).sum(axis=0)
        peak = np.abs(dev).max()
        scale = 0.04 / peak if peak > 1e-9 else 0.0

        r_out = int(math.ceil(radius * 1.05)) + 2
        y0, y1 = max(0, int(cy) - r_out), min(h, int(cy) + r_out + 1)
        x0, x1 = max(0, int(cx) - r_out), min(w, int(cx) + r_out + 1)
        if y1 <= y0 or x1 <= x0:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy = yy - cy
        dx = xx - cx
        dist = np.hypot(dx, dy)
        theta = np.arctan2(dy, dx)
        rtheta = radius * (1.0 + scale *
                           (amps[:, None, None] *
                            np.cos(ks[:, None, None] * theta + phases[:, None, None])).sum(axis=0))
        edge = np.clip((rtheta - dist) / 2.5, 0.0, 1.0)
        depth = params.depth * rng.uniform(0.8, 1.3)
        texture = 1.0 + 0.25 * rng.standard_normal(edge.shape)
        canvas[y0:y1, x0:x1] -= depth * edge * texture
        blobs.append({"cx": float(cx), "cy": float(cy), "radius": float(radius)})

    return {"kind": "blobs", "blobs": blobs}


# ---------------------------------------------------------------------------
# geometry -> labels


def _chord_in_rect(p0, p1, x0, y0, x1, y1) -> float:
    """Length of segment p0-p1 inside the axis-aligned rect (Liang-Barsky)."""
    dx = p1[0] - p0[0]
    dy = p1[1] - p0[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, p0[0] - x0), (dx, x1 - p0[0]),
                 (-dy, p0[1] - y0), (dy, y1 - p0[1])):
        if p == 0:
            if q < 0:
                return 0.0
            continue
        t = q / p
        if p < 0:
            if t > t1:
                return 0.0
            t0 = max(t0, t)
        else:
            if t < t0:
                return 0.0
            t1 = min(t1, t)
    if t0 >= t1:
        return 0.0
    return (t1 - t0) * math.hypot(dx, dy)


def filament_chord(geometry: dict, x: int, y: int, size: int, margin: float = 0.0) -> float:
    """Total filament-centerline length inside the tile (grown by margin)."""
    x0, y0 = x - margin, y - margin
    x1, y1 = x + size + margin, y + size + margin
    total = 0.0
    for rec in geometry.get("filaments", []):
        for poly in rec["polylines"]:
            pts = np.asarray(poly)
            if (pts[:, 0].max() < x0 or pts[:, 0].min() > x1 or
                    pts[:, 1].max() < y0 or pts[:, 1].min() > y1):
                continue
            for p0, p1 in zip(pts[:-1], pts[1:]):
                total += _chord_in_rect(p0, p1, x0, y0, x1, y1)
    return total


def label_for_tile(geometry: dict, x: int, y: int, size: int) -> str | None:
    """fungus / keratin / None (excluded as an ambiguous graze)."""
    chord = filament_chord(geometry, x, y, size)
    if chord >= MIN_CHORD_PX:
        return "fungus"
    if chord == 0.0 and filament_chord(geometry, x, y, size, margin=MARGIN_PX) == 0.0:
        return "keratin"
    return None


def field_circle(config: SynthConfig) -> tuple[float, float, float] | None:
    """(cx, cy, r) of the illuminated field, or None without a vignette.

    The field is wider than the sensor's short side, so only the frame
    corners fall outside it (as in real ocular photographs)."""
    if not config.vignette:
        return None
    w, h = config.slide_size_px
    return w / 2.0, h / 2.0, 0.75 * min(w, h)


def _outside_circle(shape, cx, cy, r) -> np.ndarray:
    h, w = shape
    dx2 = (np.arange(w, dtype=np.float64) - cx) ** 2
    dy2 = (np.arange(h, dtype=np.float64) - cy) ** 2
    return np.add.outer(dy2, dx2) > r * r


def field_mask_array(config: SynthConfig) -> np.ndarray | None:
    circ = field_circle(config)
    if circ is None:
        return None
    w, h = config.slide_size_px
    cx, cy, r = circ
    return ~_outside_circle((h, w), cx, cy, r)


# ---------------------------------------------------------------------------
# slide + corpus generation


def generate_slide(config: SynthConfig, slide_index: int, slide_class: str
                   ) -> tuple[np.ndarray, dict]:
    """One slide image (uint8) plus its geometry record. Deterministic in
    (config.seed, slide_index)."""
    w, h = config.slide_size_px
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(slide_index,)))
    base = rng.uniform(150.0, 200.0)
    canvas = np.full((h, w), base, dtype=np.float64)
    if config.noise_sigma > 0:
        canvas += rng.normal(0.0, config.noise_sigma, size=canvas.shape)

    circ = field_circle(config)
    field_r = circ[2] if circ else None
    center = (circ[0], circ[1]) if circ else None

    geometry = {"image_id": None, "slide_class": slide_class, "base_level": base,
                "field": ({"cx": circ[0], "cy": circ[1], "r": circ[2]} if circ else None),
                "filaments": [], "blobs": []}

    kp = draw_keratin(canvas, config.blob, rng, field_r=field_r, center=center)
    geometry["blobs"] = kp["blobs"]
    if slide_class == "fungus_positive":
        for _ in range(_int_uniform(rng, config.filament.count)):
            geometry["filaments"].append(
                draw_hypha(canvas, config.filament, rng, field_r=field_r, center=center))

    if circ is not None:
        cx, cy, r = circ
        outside = _outside_circle((h, w), cx, cy, r)
        canvas[outside] = 8.0 + 2.0 * rng.standard_normal(int(outside.sum()))

    return np.clip(canvas, 0, 255).astype(np.uint8), geometry


def _slide_task(args):
    config, index, slide_class = args
    return index, generate_slide(config, index, slide_class)


def tile_and_label(config: SynthConfig, slide: SlideImage, geometry: dict,
                   mask: np.ndarray | None = None) -> list[PatchRecord]:
    """Grid-tile one synthetic slide and label patches from its geometry."""
    size = config.patch_size_px
    if mask is None and config.vignette:
        mask = field_mask_array(config)
    records = []
    for y in range(0, slide.height_px - size + 1, size):
        for x in range(0, slide.width_px - size + 1, size):
            cf = float(mask[y:y + size, x:x + size].mean()) if mask is not None else 1.0
            if cf < config.min_content:
                continue
            label = label_for_tile(geometry, x, y, size)
            if label is None:
                continue
            records.append(PatchRecord(
                patch_id=f"{slide.image_id}_x{x:06d}_y{y:06d}",
                image_id=slide.image_id, x=x, y=y, size_px=size,
                label=label, content_fraction=round(cf, 6)))
    return records


def generate_corpus(config: SynthConfig, out_dir, workers: int = 1) -> Manifest:
    """Write slides, per-slide geometry and a labeled patch manifest.

    Layout: out_dir/slides/*.png, out_dir/geometry/*.json,
    out_dir/manifest.jsonl. Deterministic for a fixed config.
    """
    out_dir = Path(out_dir)
    (out_dir / "slides").mkdir(parents=True, exist_ok=True)
    (out_dir / "geometry").mkdir(parents=True, exist_ok=True)

    n = config.n_slides_per_class
    tasks = []
    for i in range(n):
        tasks.append((config, i, "fungus_positive"))
    for i in range(n):
        tasks.append((config, n + i, "keratin_only"))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(_slide_task, tasks))
    else:
        results = dict(_slide_task(t) for t in tasks)

    w, h = config.slide_size_px
    cases_per_class = max(1, min(5, n))
    per_case = math.ceil(n / cases_per_class)
    shared_mask = field_mask_array(config)
    slides, patches = [], []
    for index in sorted(results):
        pixels, geometry = results[index]
        slide_class = geometry["slide_class"]
        short = "fungus" if slide_class == "fungus_positive" else "keratin"
        k = index if index < n else index - n
        image_id = f"syn_{short}_{k:04d}"
        geometry["image_id"] = image_id
        slide = SlideImage(image_id=image_id, path=f"slides/{image_id}.png",
                           width_px=w, height_px=h,
                           case_id=f"case_{short}_{k // per_case}",
                           slide_class=slide_class)
        Image.fromarray(pixels, mode="L").save(out_dir / slide.path)
        with open(out_dir / "geometry" / f"{image_id}.json", "w", encoding="utf-8") as fh:
            json.dump(geometry, fh, separators=(",", ":"))
        slides.append(slide)
        patches.extend(tile_and_label(config, slide, geometry, mask=shared_mask))

    manifest = Manifest(slides=slides, patches=patches, root=out_dir)
    manifest.validate()
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def load_geometry(corpus_dir, image_id: str) -> dict:
    with open(Path(corpus_dir) / "geometry" / f"{image_id}.json", encoding="utf-8") as fh:
        return json.load(fh)
