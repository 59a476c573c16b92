"""Procedural handwritten-digit corpus.

Renders MNIST-like 28x28 grayscale digits from per-class stroke skeletons
with randomized affine jitter, control-point noise, stroke thickness and a
few shape variants per class. Used wherever the experiments need image data
without fetching anything from the network.
"""

from __future__ import annotations

import math

import numpy as np

from .dataset_io import Dataset, GrayImage, LabeledExample
from .errors import InvalidParams
from .rng import rng_stream

SIDE = 28

_STREAM_DIGITS = 21


def _arc(cx, cy, rx, ry, deg_from, deg_to, n=10):
    """Polyline approximation of an ellipse arc (angles in degrees, y down)."""
    ts = np.linspace(math.radians(deg_from), math.radians(deg_to), n)
    return [(cx + rx * math.cos(t), cy + ry * math.sin(t)) for t in ts]


def _circle(cx, cy, r, n=14):
    return _arc(cx, cy, r, r, 0, 360, n)


def _skeleton(label: int, variant: float) -> list[list[tuple[float, float]]]:
    """Strokes (polylines of (x, y) with y down) for one digit class."""
    if label == 0:
        return [_arc(14, 14, 5.3, 7.6, 0, 360, 18)]
    if label == 1:
        strokes = [[(14.5, 6.5), (13.8, 21.5)]]
        if variant < 0.7:
            strokes.append([(11.3, 9.3), (14.5, 6.5)])
        return strokes
    if label == 2:
        top = _arc(13.8, 10.0, 4.3, 4.3, 185, 350, 9)
        slope = [top[-1], (15.5, 14.0), (12.0, 17.5), (9.6, 21.4)]
        base = [(9.6, 21.4), (18.6, 21.3)]
        return [top + slope[1:], base]
    if label == 3:
        top = _arc(13.2, 9.2, 4.3, 3.6, 150, 365, 9)
        bottom = _arc(13.0, 17.2, 4.8, 4.4, -5, 205, 10)
        return [top, bottom]
    if label == 4:
        return [[(14.8, 6.2), (8.6, 16.4)],
                [(8.6, 16.4), (19.2, 16.4)],
                [(16.2, 10.2), (15.8, 21.8)]]
    if label == 5:
        bar = [(17.6, 6.4), (10.4, 6.4)]
        left = [(10.4, 6.4), (9.9, 12.6)]
        belly = [(9.9, 12.6)] + _arc(13.2, 16.6, 4.7, 4.6, -60, 200, 10)
        return [bar, left, belly]
    if label == 6:
        spine = [(16.6, 6.2), (13.6, 8.0), (11.4, 11.0), (10.3, 14.4), (10.1, 16.8)]
        loop = _arc(13.7, 16.9, 3.7, 3.8, 180, 540, 13)
        return [spine, loop]
    if label == 7:
        strokes = [[(9.3, 6.9), (18.5, 6.5)], [(18.5, 6.5), (12.1, 21.6)]]
        if variant < 0.4:
            strokes.append([(11.6, 14.0), (16.6, 14.0)])
        return strokes
    if label == 8:
        return [_circle(14, 10.1, 3.8, 13), _circle(14, 17.4, 4.5, 13)]
    if label == 9:
        loop = _circle(14.1, 10.3, 3.9, 13)
        if variant < 0.5:
            tail = [(18.0, 10.7), (17.5, 15.8), (15.6, 21.4)]
        else:
            tail = [(18.0, 10.7), (17.1, 21.5)]
        return [loop, tail]
    raise InvalidParams(f"no skeleton for label {label}")


def _segment_distances(points: np.ndarray, a, b) -> np.ndarray:
    """Distance from each (x, y) point row to segment a-b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def render_digit(label: int, rng: np.random.Generator) -> GrayImage:
    """One jittered sample of the class skeleton.

    Besides a global affine jitter, each stroke drifts, rescales and varies
    its thickness on its own; alignment can undo the global part, so the
    per-stroke variation is what makes two renderings genuinely differ.
    """
    variant = rng.random()
    strokes = [list(s) for s in _skeleton(label, variant)]
    # entry/exit flourishes: short hooks off stroke endpoints, as in real
    # handwriting; they carry no class information
    for _ in range(int(rng.random() < 0.75) + int(rng.random() < 0.35)):
        stroke = strokes[int(rng.integers(len(strokes)))]
        end = stroke[-1] if rng.random() < 0.5 else stroke[0]
        ang = rng.uniform(0.0, 2.0 * math.pi)
        length = rng.uniform(1.5, 3.5)
        hook = [end, (end[0] + length * math.cos(ang),
                      end[1] + length * math.sin(ang))]
        strokes.append(hook)
    rot = math.radians(rng.uniform(-9.0, 9.0))
    scale = rng.uniform(0.88, 1.08)
    shear = rng.uniform(-0.08, 0.08)
    dx, dy = rng.uniform(-1.3, 1.3, size=2)
    cos_r, sin_r = math.cos(rot), math.sin(rot)
    cols, rows = np.meshgrid(np.arange(SIDE, dtype=np.float64),
                             np.arange(SIDE, dtype=np.float64))
    grid = np.stack([cols.ravel(), rows.ravel()], axis=1)
    ink = np.zeros(SIDE * SIDE)
    for stroke in strokes:
        sdx, sdy = rng.uniform(-1.4, 1.4, size=2)
        sscale = rng.uniform(0.86, 1.16)
        srot = math.radians(rng.uniform(-7.0, 7.0))
        scos, ssin = math.cos(srot), math.sin(srot)
        thickness = rng.uniform(1.0, 1.6)
        mx = sum(p[0] for p in stroke) / len(stroke)
        my = sum(p[1] for p in stroke) / len(stroke)
        pts = []
        for x, y in stroke:
            rx, ry = (x - mx) * sscale, (y - my) * sscale
            x = mx + rx * scos - ry * ssin + sdx
            y = my + rx * ssin + ry * scos + sdy
            u, v = (x - 14.0) * scale, (y - 14.0) * scale
            u = u + shear * v
            u, v = u * cos_r - v * sin_r, u * sin_r + v * cos_r
            jx, jy = rng.normal(0.0, 0.5, size=2)
            pts.append((u + 14.0 + dx + jx, v + 14.0 + dy + jy))
        dist = np.full(SIDE * SIDE, np.inf)
        for a, b in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distances(grid, a, b))
        ink = np.maximum(ink, np.clip((thickness - dist) / 0.8 + 0.5, 0.0, 1.0))
    return GrayImage(ink.reshape(SIDE, SIDE).astype(np.float32))


def make_dataset(n: int, seed: int, num_categories: int = 10) -> Dataset:
    """n random digits with uniform labels, reproducible by seed."""
    if n < 1:
        raise InvalidParams("n must be >= 1")
    if not 1 <= num_categories <= 10:
        raise InvalidParams("num_categories must be in [1, 10]")
    rng = rng_stream(seed, _STREAM_DIGITS)
    labels = rng.integers(0, num_categories, size=n)
    examples = [LabeledExample(render_digit(int(lab), rng), int(lab))
                for lab in labels]
    return Dataset(examples, num_categories)
