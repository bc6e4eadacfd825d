"""Surface point sampling, visibility filtering, and even subsampling.

Mirrors the train/test point protocol: draw area-weighted points, discard the
externally invisible ones, then thin to a fixed count with farthest-point
subsampling. All randomness flows through an explicit seed.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .bvh import TriangleBvh
from .errors import EmptyMeshError
from .materials import EMPTY_LABELS, MaterialLabelSet
from .mesh import LabeledMesh

logger = logging.getLogger(__name__)

VISIBILITY_RAYS = 64
VISIBILITY_OFFSET = 1e-4
RELAX_ITERATIONS = 20
_RELAX_CANDIDATES = 8


@dataclass
class SurfaceSample:
    """A point on a mesh face.

    ``features`` stays None until the descriptor stage fills it; ``visible``
    is unknown (True) until the visibility filter runs.
    """

    position: np.ndarray
    face: int
    barycentric: np.ndarray
    normal: np.ndarray
    labels: MaterialLabelSet = field(default_factory=lambda: EMPTY_LABELS)
    visible: bool = True
    features: np.ndarray | None = None


def positions_of(samples: list[SurfaceSample]) -> np.ndarray:
    return np.array([s.position for s in samples]).reshape(-1, 3)


def sample_surface_points(
    mesh: LabeledMesh,
    n: int,
    seed: int,
    relax_iterations: int = RELAX_ITERATIONS,
) -> list[SurfaceSample]:
    """Draw ``n`` area-weighted surface points, then even them out.

    The relaxation repeatedly replaces the most crowded sample (smallest
    nearest-neighbor distance) with the best of a few fresh candidate draws,
    farthest-point style. Samples inherit the label set of their face's
    component.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    total = mesh.total_area()
    if total <= 0.0:
        raise EmptyMeshError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    probs = mesh.face_areas / total

    faces, bary = _draw(mesh, rng, probs, n)
    if relax_iterations > 0 and n >= 3:
        faces, bary = _relax(mesh, rng, probs, faces, bary, relax_iterations)
    return _make_samples(mesh, faces, bary)


def _draw(mesh, rng, probs, count):
    faces = rng.choice(mesh.n_faces, size=count, p=probs)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return faces, bary


def _bary_positions(mesh, faces, bary):
    return np.einsum("ik,ikj->ij", bary, mesh.vertices[mesh.faces[faces]])


def _relax(mesh, rng, probs, faces, bary, iterations):
    pos = _bary_positions(mesh, faces, bary)
    for _ in range(iterations):
        tree = cKDTree(pos)
        dist, _ = tree.query(pos, k=2)
        crowded = int(np.argmin(dist[:, 1]))
        others = np.delete(pos, crowded, axis=0)
        other_tree = cKDTree(others)
        cand_faces, cand_bary = _draw(mesh, rng, probs, _RELAX_CANDIDATES)
        cand_pos = _bary_positions(mesh, cand_faces, cand_bary)
        cand_dist, _ = other_tree.query(cand_pos)
        best = int(np.argmax(cand_dist))
        if cand_dist[best] > dist[crowded, 1]:
            faces = faces.copy()
            bary = bary.copy()
            faces[crowded] = cand_faces[best]
            bary[crowded] = cand_bary[best]
            pos[crowded] = cand_pos[best]
    return faces, bary


def _make_samples(mesh, faces, bary):
    pos = _bary_positions(mesh, faces, bary)
    samples = []
    for i in range(len(faces)):
        f = int(faces[i])
        labels = mesh.face_label_set(f)
        samples.append(
            SurfaceSample(
                position=pos[i],
                face=f,
                barycentric=bary[i],
                normal=mesh.face_normals[f].copy(),
                labels=labels if labels is not None else EMPTY_LABELS,
            )
        )
    return samples


def _fibonacci_directions(count: int) -> np.ndarray:
    k = np.arange(count, dtype=np.float64)
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    y = 1.0 - 2.0 * (k + 0.5) / count
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    theta = 2.0 * np.pi * k / phi
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def visibility_filter(
    mesh: LabeledMesh,
    samples: list[SurfaceSample],
    n_rays: int = VISIBILITY_RAYS,
    offset: float = VISIBILITY_OFFSET,
    bvh: TriangleBvh | None = None,
) -> list[SurfaceSample]:
    """Keep samples that can see past the bounding sphere along some ray.

    A sample is visible iff at least one of ``n_rays`` directions (covering
    the sphere evenly) escapes to the bounding sphere unobstructed. Origins
    are nudged off the surface along the sample normal. Every input sample
    gets its ``visible`` flag set; the visible subset is returned.
    """
    if not samples:
        return []
    if bvh is None:
        bvh = TriangleBvh(mesh.vertices, mesh.faces)
    dirs = _fibonacci_directions(n_rays)
    radius = mesh.bounding_radius
    pos = positions_of(samples)
    normals = np.array([s.normal for s in samples])
    origins = pos + offset * radius * normals

    n = len(samples)
    ray_origins = np.repeat(origins, n_rays, axis=0)
    ray_dirs = np.tile(dirs, (n, 1))
    t_exit = _sphere_exit(ray_origins, ray_dirs, mesh.bounding_center, radius * 1.001 + offset * radius)
    blocked = bvh.any_hit(ray_origins, ray_dirs, t_max=t_exit, t_min=1e-12 * radius)
    escaped = ~blocked.reshape(n, n_rays)
    visible = escaped.any(axis=1)

    out = []
    for i, s in enumerate(samples):
        s.visible = bool(visible[i])
        if s.visible:
            out.append(s)
    return out


def _sphere_exit(origins, dirs, center, radius):
    """Ray parameter at which each (unit-direction) ray leaves the sphere."""
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    t = -b + np.sqrt(np.maximum(disc, 0.0))
    # origin outside the sphere pointing away: nothing to escape through
    return np.where(disc > 0.0, np.maximum(t, 0.0), 0.0)


def subsample_even(samples: list[SurfaceSample], k: int, seed: int) -> list[SurfaceSample]:
    """Greedy farthest-point subsample of exactly ``k`` samples.

    Starts from a seeded random sample and repeatedly adds the sample
    farthest from the current selection. Asking for more samples than exist
    returns everything and warns.
    """
    if k < 1:
        raise ValueError("need k >= 1")
    if k > len(samples):
        warnings.warn(
            f"requested {k} samples but only {len(samples)} available; returning all",
            stacklevel=2,
        )
        return list(samples)
    rng = np.random.default_rng(seed)
    pos = positions_of(samples)
    chosen = [int(rng.integers(len(samples)))]
    dist = np.linalg.norm(pos - pos[chosen[0]], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pos - pos[nxt], axis=1))
    return [samples[i] for i in chosen]


def save_samples(path: str, samples: list[SurfaceSample]) -> None:
    """Write samples as JSON lines: {position, face, barycentric, labels, visible}."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "position": [float(x) for x in s.position],
                "face": int(s.face),
                "barycentric": [float(x) for x in s.barycentric],
                "labels": list(s.labels),
                "visible": bool(s.visible),
            }
            fh.write(json.dumps(rec) + "\n")


def load_samples(path: str, mesh: LabeledMesh | None = None) -> list[SurfaceSample]:
    """Read samples written by save_samples; normals recomputed from the mesh."""
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            face = int(rec["face"])
            normal = mesh.face_normals[face].copy() if mesh is not None else np.zeros(3)
            samples.append(
                SurfaceSample(
                    position=np.array(rec["position"], dtype=np.float64),
                    face=face,
                    barycentric=np.array(rec["barycentric"], dtype=np.float64),
                    normal=normal,
                    labels=MaterialLabelSet(rec.get("labels", [])),
                    visible=bool(rec.get("visible", True)),
                )
            )
    return samples
