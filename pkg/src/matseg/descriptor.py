"""Point features, the descriptor network, and its multi-task training.

Geometric statistics at three radii stand in for rendered views; a small
dense net maps them to a descriptor and per-material sigmoid
probabilities. Training is Siamese: both ends of every pair go through the
same weights, with a multi-label cross-entropy term on the sigmoid head
and a contrastive term on L2-normalized descriptors. All gradients are
hand-derived and checked against finite differences in the tests.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .bvh import TriangleBvh
from .errors import MissingDataError
from .materials import MATERIALS, NUM_MATERIALS
from .mesh import LabeledMesh
from .sampling import SurfaceSample, positions_of

FEATURE_DIM = 64
FEATURE_RADII = (0.25, 0.5, 1.0)
DEFAULT_LAYER_SIZES = (64, 128, 64, 32)
MARGIN = math.sqrt(0.2) - 0.2
LAMBDA_PRESETS = {"multitask": (0.016, 1.0), "classification": (1.0, 0.0)}
ADAM_LR = 0.001
_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8
_THICKNESS_CONE = 4
_NET_FORMAT = "descriptor-net-v1"
_PER_RADIUS = 17


def extract_features(
    mesh: LabeledMesh,
    samples: list[SurfaceSample],
    bvh: TriangleBvh | None = None,
) -> np.ndarray:
    """Fill and return 64-dim feature vectors for every sample.

    Per radius (0.25/0.5/1.0 of the bounding radius): neighbor density,
    covariance eigen statistics, a 4-bin histogram of normal deviation
    angles, and first-order shape moments. Globally: height, radial
    placement, normal orientation, inward-ray thickness, and component
    size statistics. Empty neighborhoods contribute zeros.
    """
    if not samples:
        return np.zeros((0, FEATURE_DIM))
    if bvh is None:
        bvh = TriangleBvh(mesh.vertices, mesh.faces)
    pos = positions_of(samples)
    normals = np.array([s.normal for s in samples])
    radius = mesh.bounding_radius
    center = mesh.bounding_center
    tree = cKDTree(pos)
    n = len(samples)
    out = np.zeros((n, FEATURE_DIM))

    for ri, frac in enumerate(FEATURE_RADII):
        hood = tree.query_ball_point(pos, frac * radius)
        base = ri * _PER_RADIUS
        for i in range(n):
            idx = np.array(hood[i], dtype=np.int64)
            idx = idx[idx != i]
            if len(idx) == 0:
                continue
            rel = pos[idx] - pos[i]
            out[i, base + 0] = len(idx) / n
            cov = rel.T @ rel / len(idx)
            ev = np.linalg.eigvalsh(cov)[::-1]
            ev = np.maximum(ev, 0.0)
            total = ev.sum()
            if total > 0.0:
                out[i, base + 1 : base + 4] = ev / total
            if ev[0] > 0.0:
                out[i, base + 4] = ev[1] / ev[0]
                out[i, base + 5] = ev[2] / ev[0]
                out[i, base + 6] = (ev[0] - ev[1]) / ev[0]
                out[i, base + 7] = (ev[1] - ev[2]) / ev[0]
                out[i, base + 8] = (ev[0] - ev[2]) / ev[0]
            cos = np.clip(normals[idx] @ normals[i], -1.0, 1.0)
            ang = np.arccos(cos)
            hist, _ = np.histogram(ang, bins=4, range=(0.0, np.pi))
            out[i, base + 9 : base + 13] = hist / len(idx)
            out[i, base + 13] = float(np.mean(np.abs(cos)))
            rr = frac * radius
            out[i, base + 14] = float(np.linalg.norm(rel.mean(axis=0))) / rr
            out[i, base + 15] = float(np.sqrt(np.mean(np.sum(rel * rel, axis=1)))) / rr
            out[i, base + 16] = float(np.mean(rel @ normals[i])) / rr

    g = 3 * _PER_RADIUS
    min_y = float(mesh.vertices[:, 1].min())
    out[:, g + 0] = (pos[:, 1] - min_y) / (2.0 * radius)
    out[:, g + 1] = (pos[:, 1] - center[1]) / radius
    out[:, g + 2] = np.linalg.norm(pos[:, [0, 2]] - center[[0, 2]], axis=1) / radius
    out[:, g + 3] = (radius - np.linalg.norm(pos - center, axis=1)) / radius
    out[:, g + 4] = normals[:, 1]
    out[:, g + 5] = np.abs(normals[:, 1])
    out[:, g + 6] = _thickness(bvh, pos, normals, radius, cone=False)
    out[:, g + 7] = _thickness(bvh, pos, normals, radius, cone=True)

    total_area = mesh.total_area()
    comp_area = np.zeros(mesh.n_components)
    comp_count = np.zeros(mesh.n_components)
    centroids = mesh.face_centroids()
    comp_centroid = np.zeros((mesh.n_components, 3))
    for c in range(mesh.n_components):
        faces = mesh.component_faces(c)
        comp_area[c] = mesh.face_areas[faces].sum()
        comp_count[c] = len(faces)
        w = mesh.face_areas[faces]
        if w.sum() > 0:
            comp_centroid[c] = (centroids[faces] * w[:, None]).sum(axis=0) / w.sum()
    comp_lo = np.zeros((mesh.n_components, 3))
    comp_hi = np.zeros((mesh.n_components, 3))
    for c in range(mesh.n_components):
        verts = mesh.vertices[np.unique(mesh.faces[mesh.component_faces(c)])]
        comp_lo[c] = verts.min(axis=0)
        comp_hi[c] = verts.max(axis=0)

    comp = np.array([mesh.face_component[s.face] for s in samples])
    out[:, g + 8] = comp_area[comp] / total_area
    out[:, g + 9] = comp_count[comp] / mesh.n_faces
    out[:, g + 10] = np.linalg.norm(pos - comp_centroid[comp], axis=1) / radius
    diag = np.linalg.norm(comp_hi - comp_lo, axis=1)
    out[:, g + 11] = diag[comp] / (2.0 * radius)
    out[:, g + 12] = (comp_hi[:, 1] - comp_lo[:, 1])[comp] / (2.0 * radius)

    for i, s in enumerate(samples):
        s.features = out[i]
    return out


def _thickness(bvh, pos, normals, radius, cone: bool) -> np.ndarray:
    """Normalized distance of an inward ray (or small inward cone) to the
    opposite wall; misses read as the full 2R cap."""
    cap = 2.0 * radius
    origins = pos - 1e-5 * radius * normals
    if not cone:
        t = bvh.first_hit(origins, -normals, t_min=1e-9 * radius)
        return np.minimum(np.where(np.isfinite(t), t, cap), cap) / cap
    acc = np.zeros(len(pos))
    up = np.array([0.0, 1.0, 0.0])
    for k in range(_THICKNESS_CONE):
        side = np.cross(normals, up + 1e-3 * (k + 1))
        nrm = np.linalg.norm(side, axis=1, keepdims=True)
        side = np.where(nrm > 1e-9, side / np.maximum(nrm, 1e-12), 0.0)
        angle = 2.0 * np.pi * k / _THICKNESS_CONE
        tilt = 0.3
        dirs = -normals + tilt * (np.cos(angle) * side + np.sin(angle) * np.cross(normals, side))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t = bvh.first_hit(origins, dirs, t_min=1e-9 * radius)
        acc += np.minimum(np.where(np.isfinite(t), t, cap), cap)
    return acc / (_THICKNESS_CONE * cap)


def extract_point_features(
    mesh: LabeledMesh, sample: SurfaceSample, context: list[SurfaceSample]
) -> np.ndarray:
    """Feature vector of one sample given the sampled population it sits in."""
    if sample in context:
        pool = list(context)
        pos = pool.index(sample)
    else:
        pool = [sample] + list(context)
        pos = 0
    return extract_features(mesh, pool)[pos]


def label_matrix(samples: list[SurfaceSample], materials=MATERIALS) -> np.ndarray:
    """Multi-hot (S, M) ground-truth matrix from sample label sets."""
    out = np.zeros((len(samples), len(materials)))
    index = {name: k for k, name in enumerate(materials)}
    for i, s in enumerate(samples):
        for name in s.labels.names():
            if name in index:
                out[i, index[name]] = 1.0
    return out


class DescriptorNet:
    """Dense net 64->128->64->descriptor with a sigmoid material head.

    tanh on the two hidden layers; the descriptor layer is linear. The head
    reads the raw descriptor; retrieval and the contrastive loss use the
    L2-normalized descriptor.
    """

    def __init__(self, layer_sizes=DEFAULT_LAYER_SIZES, n_classes: int = NUM_MATERIALS, seed: int = 0):
        self.layer_sizes = tuple(layer_sizes)
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        dims = list(self.layer_sizes) + [n_classes]
        names = ["1", "2", "3", "h"]
        for k in range(4):
            fan_in, fan_out = dims[k], dims[k + 1]
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            self.params[f"W{names[k]}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            self.params[f"b{names[k]}"] = np.zeros(fan_out)

    def forward(self, x: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.layer_sizes[0])
        h1 = np.tanh(x @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        desc = h2 @ p["W3"] + p["b3"]
        logits = desc @ p["Wh"] + p["bh"]
        probs = 1.0 / (1.0 + np.exp(-logits))
        norms = np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
        return {
            "x": x,
            "h1": h1,
            "h2": h2,
            "desc": desc,
            "norms": norms,
            "unit": desc / norms,
            "logits": logits,
            "probs": probs,
        }

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def backward(self, cache: dict, d_desc: np.ndarray, d_logits: np.ndarray) -> dict:
        """Backprop given upstream gradients on the raw descriptor and logits."""
        p = self.params
        grads = {}
        grads["Wh"] = cache["desc"].T @ d_logits
        grads["bh"] = d_logits.sum(axis=0)
        dd = d_desc + d_logits @ p["Wh"].T
        grads["W3"] = cache["h2"].T @ dd
        grads["b3"] = dd.sum(axis=0)
        dh2 = (dd @ p["W3"].T) * (1.0 - cache["h2"] ** 2)
        grads["W2"] = cache["h1"].T @ dh2
        grads["b2"] = dh2.sum(axis=0)
        dh1 = (dh2 @ p["W2"].T) * (1.0 - cache["h1"] ** 2)
        grads["W1"] = cache["x"].T @ dh1
        grads["b1"] = dh1.sum(axis=0)
        return grads

    def save(self, path: str) -> None:
        flat = []
        for name in sorted(self.params):
            flat.extend(float(v) for v in self.params[name].ravel())
        doc = {
            "format": _NET_FORMAT,
            "layer_sizes": list(self.layer_sizes),
            "n_classes": self.n_classes,
            "params": flat,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "DescriptorNet":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != _NET_FORMAT:
            raise ValueError(f"unsupported checkpoint format: {doc.get('format')!r}")
        net = cls(tuple(doc["layer_sizes"]), int(doc["n_classes"]))
        flat = np.array(doc["params"], dtype=np.float64)
        at = 0
        for name in sorted(net.params):
            size = net.params[name].size
            net.params[name] = flat[at : at + size].reshape(net.params[name].shape)
            at += size
        if at != len(flat):
            raise ValueError("checkpoint parameter count mismatch")
        return net


@dataclass
class PairBatch:
    """Feature/label arrays for P sample pairs plus which are positive."""

    xa: np.ndarray
    xb: np.ndarray
    ya: np.ndarray
    yb: np.ndarray
    positive: np.ndarray
    idx_a: np.ndarray
    idx_b: np.ndarray
    combos: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.positive)


class PairSampler:
    """Draws pairs at a 1:4 positive:negative ratio with combination cycling.

    Positives cycle the 5 same-material combinations; negatives cycle the
    10 unordered distinct-material combinations. A drawn negative whose two
    samples share any ground-truth label is rejected and redrawn; after
    1000 rejections the combination is skipped with a warning.
    """

    MAX_REJECTS = 1000

    def __init__(self, features: np.ndarray, labels: np.ndarray, seed: int = 0):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        m = self.labels.shape[1]
        self.rng = np.random.default_rng(seed)
        self.by_material = [np.flatnonzero(self.labels[:, k] > 0) for k in range(m)]
        self.pos_combos = [(k, k) for k in range(m)]
        self.neg_combos = [(a, b) for a in range(m) for b in range(a + 1, m)]
        self._pos_at = 0
        self._neg_at = 0

    def _draw_positive(self, m: int):
        pool = self.by_material[m]
        if len(pool) < 2:
            return None
        for _ in range(self.MAX_REJECTS):
            a, b = self.rng.choice(pool, size=2, replace=False)
            return int(a), int(b)
        return None

    def _draw_negative(self, m1: int, m2: int):
        pool_a = self.by_material[m1]
        pool_b = self.by_material[m2]
        if len(pool_a) == 0 or len(pool_b) == 0:
            return None
        for _ in range(self.MAX_REJECTS):
            a = int(self.rng.choice(pool_a))
            b = int(self.rng.choice(pool_b))
            if a != b and not np.any((self.labels[a] > 0) & (self.labels[b] > 0)):
                return a, b
        return None

    def draw(self, n_pairs: int) -> PairBatch:
        idx_a, idx_b, positive, combos = [], [], [], []
        produced = 0
        while produced < n_pairs:
            want_positive = produced % 5 == 0
            if want_positive:
                combo = self.pos_combos[self._pos_at % len(self.pos_combos)]
                self._pos_at += 1
                pair = self._draw_positive(combo[0])
            else:
                combo = self.neg_combos[self._neg_at % len(self.neg_combos)]
                self._neg_at += 1
                pair = self._draw_negative(*combo)
            produced += 1
            if pair is None:
                warnings.warn(
                    f"could not draw a {'positive' if want_positive else 'negative'} "
                    f"pair for combination {combo}; skipping",
                    stacklevel=2,
                )
                continue
            idx_a.append(pair[0])
            idx_b.append(pair[1])
            positive.append(want_positive)
            combos.append(combo)
        ia = np.array(idx_a, dtype=np.int64)
        ib = np.array(idx_b, dtype=np.int64)
        return PairBatch(
            xa=self.features[ia],
            xb=self.features[ib],
            ya=self.labels[ia],
            yb=self.labels[ib],
            positive=np.array(positive, dtype=bool),
            idx_a=ia,
            idx_b=ib,
            combos=combos,
        )


def sample_pairs(features: np.ndarray, labels: np.ndarray, n_pairs: int, seed: int) -> PairBatch:
    return PairSampler(features, labels, seed).draw(n_pairs)


def multitask_loss(
    net: DescriptorNet,
    batch: PairBatch,
    lambda_class: float,
    lambda_contr: float,
    margin: float = MARGIN,
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Loss and analytic parameter gradients for one Siamese batch.

    The class term is the summed multi-label binary cross-entropy over both
    pair sides; the contrastive term is sum of squared descriptor distances
    on positives and squared hinge max(margin - D, 0)^2 on negatives, with
    D the distance between unit descriptors. Returns (loss, grads, parts).
    """
    if len(batch) == 0:
        raise MissingDataError("empty pair batch")
    p = len(batch)
    x = np.vstack([batch.xa, batch.xb])
    t = np.vstack([batch.ya, batch.yb])
    cache = net.forward(x)

    probs = np.clip(cache["probs"], 1e-12, 1.0 - 1e-12)
    class_term = float(-(t * np.log(probs) + (1.0 - t) * np.log(1.0 - probs)).sum())
    d_logits = lambda_class * (cache["probs"] - t)

    unit = cache["unit"]
    diff = unit[:p] - unit[p:]
    dist = np.linalg.norm(diff, axis=1)
    pos = batch.positive
    hinge = np.maximum(margin - dist, 0.0)
    contr_term = float((dist[pos] ** 2).sum() + (hinge[~pos] ** 2).sum())

    d_unit_a = np.zeros_like(diff)
    d_unit_a[pos] = 2.0 * diff[pos]
    active = (~pos) & (hinge > 0.0) & (dist > 1e-12)
    d_unit_a[active] = (-2.0 * hinge[active] / dist[active])[:, None] * diff[active]
    d_unit = lambda_contr * np.vstack([d_unit_a, -d_unit_a])

    # through u = v / ||v||: dv = (du - (du . u) u) / ||v||
    inner = (d_unit * unit).sum(axis=1, keepdims=True)
    d_desc = (d_unit - inner * unit) / cache["norms"]

    grads = net.backward(cache, d_desc, d_logits)
    loss = lambda_class * class_term + lambda_contr * contr_term
    parts = {"class": class_term, "contrastive": contr_term, "total": loss}
    return loss, grads, parts


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k in params:
            g = grads[k]
            self.m[k] = _ADAM_B1 * self.m[k] + (1.0 - _ADAM_B1) * g
            self.v[k] = _ADAM_B2 * self.v[k] + (1.0 - _ADAM_B2) * g * g
            mhat = self.m[k] / (1.0 - _ADAM_B1**self.t)
            vhat = self.v[k] / (1.0 - _ADAM_B2**self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + _ADAM_EPS)


def train_descriptor(
    features: np.ndarray,
    labels: np.ndarray,
    variant: str = "multitask",
    epochs: int = 30,
    seed: int = 0,
    pairs_per_step: int = 64,
    steps_per_epoch: int = 4,
    lr: float = ADAM_LR,
    layer_sizes=DEFAULT_LAYER_SIZES,
    margin: float = MARGIN,
    lambdas: tuple[float, float] | None = None,
) -> tuple[DescriptorNet, list[dict[str, float]]]:
    """Siamese training with adaptive-moment updates; deterministic per seed.

    ``variant`` selects the loss mix: multitask (0.016 class / 1.0
    contrastive) or classification (1.0 / 0.0); ``lambdas`` overrides the
    preset. In the multitask mix the classification head's gradients are
    rescaled by 1/lambda_class, mirroring a per-layer learning-rate
    multiplier. Returns the net and a per-epoch trace of loss parts.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(features) == 0:
        raise MissingDataError("no training samples")
    if variant not in LAMBDA_PRESETS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(LAMBDA_PRESETS)}")
    lambda_class, lambda_contr = LAMBDA_PRESETS[variant] if lambdas is None else lambdas
    head_scale = 1.0 / lambda_class if variant == "multitask" and lambda_class > 0 else 1.0

    net = DescriptorNet(layer_sizes=layer_sizes, n_classes=labels.shape[1], seed=seed)
    sampler = PairSampler(features, labels, seed=seed + 1)
    adam = _Adam(net.params, lr)
    trace = []
    for _ in range(epochs):
        totals = {"class": 0.0, "contrastive": 0.0, "total": 0.0}
        for _ in range(steps_per_epoch):
            batch = sampler.draw(pairs_per_step)
            _, grads, parts = multitask_loss(net, batch, lambda_class, lambda_contr, margin)
            grads["Wh"] = grads["Wh"] * head_scale
            grads["bh"] = grads["bh"] * head_scale
            adam.step(net.params, grads)
            for k in totals:
                totals[k] += parts[k]
        trace.append({k: v / steps_per_epoch for k, v in totals.items()})
    return net, trace


def predict_probs(net: DescriptorNet, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid material probabilities and unit retrieval descriptors."""
    cache = net.forward(np.atleast_2d(features))
    return cache["probs"], cache["unit"]
