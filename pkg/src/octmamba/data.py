"""Point-cloud ingestion, synthetic shape generation, and augmentations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SHAPE_KINDS = ("sphere", "cube", "torus", "cylinder")


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3)
    normals: np.ndarray | None = None  # (N, 3) unit vectors
    label: object = None  # class id, or per-point (N,) int array


def _as_rng(seed) -> np.random.Generator:
    if hasattr(seed, "uniform"):  # a Generator (or a stand-in with the same draws)
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# ASCII XYZ format: "x y z" or "x y z nx ny nz" per line, '#' starts a comment


def load_xyz_ascii(path: str) -> PointCloud:
    rows: list[list[float]] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) not in (3, 6):
                raise ValueError(f"{path}:{lineno}: expected 3 or 6 columns, got {len(tokens)}")
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise ValueError(
                    f"{path}:{lineno}: inconsistent column count {len(tokens)} (file started with {width})"
                )
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                bad = next(t for t in tokens if not _is_float(t))
                raise ValueError(f"{path}:{lineno}: non-numeric value {bad!r}") from None
    if not rows:
        raise ValueError(f"{path}: no points")
    arr = np.asarray(rows, dtype=np.float64)
    if width == 6:
        normals = arr[:, 3:6]
        norms = np.linalg.norm(normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"{path}: normals are not unit length (max deviation {np.abs(norms - 1).max():.2e})")
        return PointCloud(positions=arr[:, :3], normals=normals)
    return PointCloud(positions=arr)


def _is_float(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def save_xyz_ascii(path: str, cloud: PointCloud) -> None:
    """Full-precision emission: reloading reproduces the arrays bitwise."""
    cols = cloud.positions if cloud.normals is None else np.concatenate(
        [cloud.positions, cloud.normals], axis=1
    )
    with open(path, "w", encoding="utf-8") as fh:
        for row in cols:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_manifest(path: str) -> list[tuple[str, str]]:
    """One sample per line: "path,label". Label may be an int or a file path."""
    entries: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "," not in line:
                raise ValueError(f"{path}:{lineno}: expected 'path,label'")
            p, label = (part.strip() for part in line.split(",", 1))
            entries.append((p, label))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries


def write_manifest(path: str, entries: list[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p, label in entries:
            fh.write(f"{p},{label}\n")


# ---------------------------------------------------------------------------
# Synthetic shapes with analytic normals


def synth_shape(kind: str, n_points: int, seed) -> PointCloud:
    """Uniform surface samples of a canonical shape; deterministic per seed."""
    if kind not in SHAPE_KINDS:
        raise ValueError(f"kind must be one of {SHAPE_KINDS}, got {kind!r}")
    if n_points < 8:
        raise ValueError(f"n_points must be >= 8, got {n_points}")
    rng = _as_rng(seed)
    if kind == "sphere":
        return _synth_sphere(n_points, rng)
    if kind == "cube":
        return _synth_cube(n_points, rng)
    if kind == "torus":
        return _synth_torus(n_points, rng)
    return _synth_cylinder(n_points, rng)


def _synth_sphere(n: int, rng: np.random.Generator) -> PointCloud:
    v = rng.normal(size=(n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    while np.any(norms == 0):  # astronomically unlikely, but keep it exact
        bad = norms[:, 0] == 0
        v[bad] = rng.normal(size=(int(bad.sum()), 3))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
    p = v / norms
    return PointCloud(positions=p, normals=p.copy())


def _synth_cube(n: int, rng: np.random.Generator) -> PointCloud:
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pos = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for i in range(n):
        a = axis[i]
        others = [j for j in range(3) if j != a]
        pos[i, a] = 0.5 * sign[i]
        pos[i, others[0]] = uv[i, 0]
        pos[i, others[1]] = uv[i, 1]
        nrm[i, a] = sign[i]
    return PointCloud(positions=pos, normals=nrm)


def _synth_torus(
    n: int, rng: np.random.Generator, ring: float = 0.7, tube: float = 0.25
) -> PointCloud:
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    # area element depends on phi: rejection-sample against (R + r cos phi)
    phi = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(-math.pi, math.pi, size=2 * (n - filled))
        u = rng.uniform(0.0, 1.0, size=cand.size)
        ok = cand[u <= (ring + tube * np.cos(cand)) / (ring + tube)]
        take = min(ok.size, n - filled)
        phi[filled : filled + take] = ok[:take]
        filled += take
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    pos = np.stack([(ring + tube * cphi) * cth, (ring + tube * cphi) * sth, tube * sphi], axis=1)
    nrm = np.stack([cphi * cth, cphi * sth, sphi], axis=1)
    return PointCloud(positions=pos, normals=nrm)


def _synth_cylinder(
    n: int, rng: np.random.Generator, radius: float = 0.4, height: float = 1.0
) -> PointCloud:
    lateral_area = 2.0 * math.pi * radius * height
    cap_area = math.pi * radius * radius
    total = lateral_area + 2.0 * cap_area
    part = rng.uniform(0.0, total, size=n)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pos = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for i in range(n):
        c, s = math.cos(theta[i]), math.sin(theta[i])
        if part[i] < lateral_area:
            z = rng.uniform(-0.5 * height, 0.5 * height)
            pos[i] = (radius * c, radius * s, z)
            nrm[i] = (c, s, 0.0)
        else:
            top = part[i] < lateral_area + cap_area
            rr = radius * math.sqrt(rng.uniform(0.0, 1.0))
            z = 0.5 * height if top else -0.5 * height
            pos[i] = (rr * c, rr * s, z)
            nrm[i] = (0.0, 0.0, 1.0 if top else -1.0)
    return PointCloud(positions=pos, normals=nrm)


def make_shape_dataset(
    per_class: int, n_points: int, seed, kinds: tuple[str, ...] = SHAPE_KINDS
) -> list[PointCloud]:
    """per_class clouds of each kind, labeled by kind index."""
    rng = _as_rng(seed)
    clouds = []
    for label, kind in enumerate(kinds):
        for _ in range(per_class):
            cloud = synth_shape(kind, n_points, rng)
            cloud.label = label
            clouds.append(cloud)
    return clouds


def octant_labels(positions: np.ndarray) -> np.ndarray:
    """Per-point label 0..7: which octant of the cloud's bounding-box center."""
    positions = np.asarray(positions, dtype=np.float64)
    center = 0.5 * (positions.min(axis=0) + positions.max(axis=0))
    bits = (positions >= center).astype(np.int64)
    return bits[:, 0] * 4 + bits[:, 1] * 2 + bits[:, 2]


def make_octant_seg_dataset(
    n_clouds: int, n_points: int, seed, kinds: tuple[str, ...] = SHAPE_KINDS
) -> list[PointCloud]:
    """Shape clouds with per-point octant labels (8-class toy segmentation)."""
    rng = _as_rng(seed)
    clouds = []
    for i in range(n_clouds):
        cloud = synth_shape(kinds[i % len(kinds)], n_points, rng)
        cloud.label = octant_labels(cloud.positions)
        clouds.append(cloud)
    return clouds


# ---------------------------------------------------------------------------
# Augmentation: anisotropic scale, rotation about z, translation


def augment(
    cloud: PointCloud,
    seed,
    scale_range: tuple[float, float] = (2.0 / 3.0, 1.5),
    angle_range: tuple[float, float] = (-math.pi, math.pi),
    shift_range: tuple[float, float] = (-0.2, 0.2),
) -> PointCloud:
    """Random per-axis scale, rotation about the up axis, per-axis shift.

    Normals are rotated (not scaled) and renormalized. Ranges collapsed to a
    point make the transform an exact identity.
    """
    rng = _as_rng(seed)
    scale = rng.uniform(scale_range[0], scale_range[1], size=3)
    angle = rng.uniform(angle_range[0], angle_range[1])
    shift = rng.uniform(shift_range[0], shift_range[1], size=3)

    p = cloud.positions * scale
    c, s = math.cos(angle), math.sin(angle)
    p = _rotate_z(p, c, s) + shift

    normals = None
    if cloud.normals is not None:
        normals = _rotate_z(cloud.normals, c, s)
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(positions=p, normals=normals, label=cloud.label)


def _rotate_z(v: np.ndarray, c: float, s: float) -> np.ndarray:
    out = np.empty_like(v)
    out[:, 0] = c * v[:, 0] - s * v[:, 1]
    out[:, 1] = s * v[:, 0] + c * v[:, 1]
    out[:, 2] = v[:, 2]
    return out
