"""Crop-row simulator rendering geometry-only binary image sequences.

Crops sit on a row lattice (rows ``inter_row`` cm apart, plants ``intra_row``
cm apart) perturbed by Gaussian noise. Weeds are scattered uniformly; those
landing close to a row centerline but off the lattice are intra-row weeds.
Every plant is drawn as a disk of one shared area, so neither shape nor
appearance separates the classes: only the arrangement does.

World coordinates are in cm; rows run along the world x axis.
"""
from dataclasses import dataclass, field
from typing import List

import numpy as np
from shapely.geometry import Polygon

from .network import SequenceSample

__all__ = [
    "BACKGROUND", "CROP", "WEED", "INTRA_ROW_WEED",
    "FieldModel", "CameraModel", "PlantInstance",
    "sample_field_model", "render_sequence", "footprint_polygon",
    "select_nonoverlapping", "InsufficientHistoryError", "blob_radius_px",
    "generate_dataset", "shift_blob_brightness", "write_pgm",
]

BACKGROUND, CROP, WEED, INTRA_ROW_WEED = 0, 1, 2, 3

INTRA_ROW_RANGE = (15.0, 25.0)
INTER_ROW_RANGE = (30.0, 60.0)
WEED_PRESSURE_RANGE = (0.0, 2.0)
BLOB_AREA_RANGE = (0.5, 8.0)

# intra-row band: lateral offset below this fraction of the inter-row distance
BAND_FRACTION = 0.25
# intra-row weeds keep at least this fraction of the intra-row distance from lattice points
LATTICE_CLEARANCE = 0.3


@dataclass
class FieldModel:
    intra_row: float
    inter_row: float
    weed_pressure: float
    blob_area: float
    noise_sigma: float
    row_heading: float = 0.0

    def validate(self):
        checks = [
            ("intra_row", self.intra_row, INTRA_ROW_RANGE),
            ("inter_row", self.inter_row, INTER_ROW_RANGE),
            ("weed_pressure", self.weed_pressure, WEED_PRESSURE_RANGE),
            ("blob_area", self.blob_area, BLOB_AREA_RANGE),
        ]
        for name, value, (lo, hi) in checks:
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        return self


@dataclass
class CameraModel:
    """Nadir camera; ``resolution`` is the ground sampling distance in mm/pixel."""

    width: int = 128
    height: int = 96
    resolution: float = 4.0
    steering_jitter: float = np.deg2rad(2.0)

    @property
    def footprint(self):
        """Ground footprint (width, height) in cm."""
        return self.width * self.resolution / 10.0, self.height * self.resolution / 10.0

    @property
    def pixel_cm(self):
        return self.resolution / 10.0


@dataclass
class PlantInstance:
    position: np.ndarray
    kind: int
    area: float


class InsufficientHistoryError(ValueError):
    """Raised when the history holds fewer non-overlapping frames than requested."""


def sample_field_model(rng, noise_fraction=0.1):
    """Draw a field uniformly within the documented parameter ranges.

    The lattice noise standard deviation is ``noise_fraction`` times the
    intra-row distance.
    """
    intra = rng.uniform(*INTRA_ROW_RANGE)
    return FieldModel(
        intra_row=intra,
        inter_row=rng.uniform(*INTER_ROW_RANGE),
        weed_pressure=rng.uniform(*WEED_PRESSURE_RANGE),
        blob_area=rng.uniform(*BLOB_AREA_RANGE),
        noise_sigma=noise_fraction * intra,
    )


def blob_radius_px(area_cm2, camera):
    """Disk radius in pixels for a blob of ``area_cm2``."""
    return np.sqrt(area_cm2 / np.pi) / camera.pixel_cm


def footprint_polygon(pose, camera):
    """Ground rectangle seen from ``pose = (x, y, heading)``."""
    fw, fh = camera.footprint
    x, y, th = pose
    c, s = np.cos(th), np.sin(th)
    corners = [(-fw / 2, -fh / 2), (fw / 2, -fh / 2), (fw / 2, fh / 2), (-fw / 2, fh / 2)]
    return Polygon([(x + c * u - s * v, y + s * u + c * v) for u, v in corners])


def select_nonoverlapping(poses, camera, count, tol=1e-9):
    """Pick ``count`` frames whose ground footprints are pairwise disjoint.

    Starts from the most recent pose (last entry) and walks back through the
    history, keeping a frame only if its footprint does not overlap (positive
    intersection area) any frame already kept. Returns the chosen indices in
    chronological order.
    """
    poses = np.asarray(poses, dtype=np.float64)
    if len(poses) == 0:
        raise InsufficientHistoryError("empty history")
    chosen = [len(poses) - 1]
    polys = [footprint_polygon(poses[-1], camera)]
    for i in range(len(poses) - 2, -1, -1):
        if len(chosen) == count:
            break
        poly = footprint_polygon(poses[i], camera)
        if all(poly.intersection(p).area <= tol for p in polys):
            chosen.append(i)
            polys.append(poly)
    if len(chosen) < count:
        raise InsufficientHistoryError(
            f"insufficient history: {len(chosen)} non-overlapping frames, {count} requested"
        )
    return sorted(chosen)


def _trajectory(camera, s, rng, start):
    """Poses advancing along the jittered heading just far enough that
    consecutive footprints cannot overlap (separating-axis bound)."""
    fw, fh = camera.footprint
    heads = rng.uniform(-camera.steering_jitter, camera.steering_jitter, s)
    poses = np.zeros((s, 3))
    x, y = start
    for t in range(s):
        poses[t] = x, y, heads[t]
        if t + 1 < s:
            rel = heads[t + 1] - heads[t]
            step = fw / 2 + fw / 2 * abs(np.cos(rel)) + fh / 2 * abs(np.sin(rel)) + 1e-6
            x += step * np.cos(heads[t])
            y += step * np.sin(heads[t])
    return poses


def _place_plants(field, bounds, radius_cm, rng):
    x0, x1, y0, y1 = bounds
    d, r = field.intra_row, field.inter_row
    row_phase = rng.uniform(0, r)
    col_phase = rng.uniform(0, d)
    rows = np.arange(y0 - r + row_phase, y1 + r, r)
    lattice = np.arange(x0 - d + col_phase, x1 + d, d)
    gap = 2 * radius_cm + 0.3  # blobs never touch, even diagonally
    plants: List[PlantInstance] = []
    centers = []

    def free(p):
        return all(np.hypot(*(p - q)) >= gap for q in centers)

    for ry in rows:
        for lx in lattice:
            for _ in range(20):
                p = np.array([lx, ry]) + rng.normal(0.0, field.noise_sigma, 2)
                if free(p):
                    break
            else:
                continue
            centers.append(p)
            plants.append(PlantInstance(p, CROP, field.blob_area))

    n_crops = len(plants)
    expected = field.weed_pressure * n_crops
    n_weeds = int(np.floor(expected)) + int(rng.random() < expected - np.floor(expected))
    placed = 0
    for _ in range(n_weeds * 50):
        if placed == n_weeds:
            break
        p = np.array([rng.uniform(x0 - d, x1 + d), rng.uniform(y0 - r, y1 + r)])
        lateral = np.min(np.abs(rows - p[1]))
        kind = WEED
        if lateral < BAND_FRACTION * r:
            if np.min(np.abs(lattice - p[0])) < LATTICE_CLEARANCE * d:
                continue
            kind = INTRA_ROW_WEED
        if not free(p):
            continue
        centers.append(p)
        plants.append(PlantInstance(p, kind, field.blob_area))
        placed += 1
    return plants


def _render_frame(pose, plants, camera, radius_px):
    h, w = camera.height, camera.width
    img = np.zeros((h, w))
    lab = np.zeros((h, w), dtype=np.uint8)
    x, y, th = pose
    c, s = np.cos(th), np.sin(th)
    pc = camera.pixel_cm
    reach = int(np.ceil(radius_px)) + 1
    for plant in plants:
        dx, dy = plant.position[0] - x, plant.position[1] - y
        # world -> camera frame (rotation by -heading), then to pixel coordinates
        u = (c * dx + s * dy) / pc + w / 2.0
        v = (-s * dx + c * dy) / pc + h / 2.0
        if u < -reach or u > w + reach or v < -reach or v > h + reach:
            continue
        c0, c1 = max(int(np.floor(u - reach)), 0), min(int(np.ceil(u + reach)), w)
        r0, r1 = max(int(np.floor(v - reach)), 0), min(int(np.ceil(v + reach)), h)
        if c0 >= c1 or r0 >= r1:
            continue
        cc, rr = np.meshgrid(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5)
        disk = (cc - u) ** 2 + (rr - v) ** 2 <= radius_px ** 2
        img[r0:r1, c0:c1][disk] = 1.0
        lab[r0:r1, c0:c1][disk] = plant.kind
    return img, lab


def render_sequence(field, camera, s, rng, return_plants=False):
    """Render ``s`` consecutive frames along a row.

    The camera advances about one footprint per frame along its current
    heading, which jitters uniformly within ``camera.steering_jitter``, so
    consecutive footprints touch but never overlap. Frames are
    binary ``[s, 1, H, W]``; labels use 0 background, 1 crop, 2 weed,
    3 intra-row weed.
    """
    if s < 1:
        raise ValueError("sequence length must be >= 1")
    field.validate()
    radius_px = blob_radius_px(field.blob_area, camera)
    if radius_px > min(camera.width, camera.height) / 2:
        raise ValueError("blob radius exceeds half the camera footprint")
    fw, fh = camera.footprint
    start = (0.0, rng.uniform(0, field.inter_row))
    poses = _trajectory(camera, s, rng, start)
    margin = np.hypot(fw, fh) / 2 + 1.0
    bounds = (
        poses[:, 0].min() - margin, poses[:, 0].max() + margin,
        poses[:, 1].min() - margin, poses[:, 1].max() + margin,
    )
    plants = _place_plants(field, bounds, radius_px * camera.pixel_cm, rng)
    frames = np.zeros((s, 1, camera.height, camera.width))
    labels = np.zeros((s, camera.height, camera.width), dtype=np.uint8)
    for t in range(s):
        frames[t, 0], labels[t] = _render_frame(poses[t], plants, camera, radius_px)
    sample = SequenceSample(frames, labels, poses)
    return (sample, plants) if return_plants else sample


def generate_dataset(n, camera, s, seed):
    """``n`` sequences from independently sampled fields; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        field = sample_field_model(rng)
        out.append(render_sequence(field, camera, s, rng))
    return out


def shift_blob_brightness(samples, offset):
    """Copies of ``samples`` with ``offset`` added to every plant pixel."""
    out = []
    for smp in samples:
        plant = (smp.labels > 0)[:, None].astype(smp.frames.dtype)
        out.append(SequenceSample(smp.frames + offset * plant, smp.labels, smp.poses))
    return out


def write_pgm(path, image, maxval=255):
    """Write a 2D array as binary PGM (P5); values are clipped to [0, maxval]."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, maxval).astype(np.uint8)
    if arr.ndim != 2:
        raise ValueError("PGM export needs a 2D image")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(arr.tobytes())
