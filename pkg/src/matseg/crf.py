"""Binary CRF over (material, face) variables with symmetry-aware factors.

Each material m gets one binary variable per face. Unaries come from the
nearest sampled point's predicted probabilities. Three pairwise factor
families couple faces: surface adjacency (coefficient = dihedral angle
over pi), geodesic proximity (normalized distance), and detected symmetry
(normalized residual). For a family with squared coefficient k and weights
(scale W, symmetric 2x2 table T):

    log phi(l, l)  = -W * T[l, l] * k
    log phi(l, l') = -W * T[l, l'] * (1 - k)   for l != l'

Inference is damped synchronous mean field; training is gradient ascent on
the mean-field-approximated log-likelihood. Because every factor couples
only same-material variables, the model decomposes into independent
per-material subproblems and is solved that way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree
from scipy.special import expit

from .errors import MissingDataError, MissingUnariesError, OracleSizeError
from .geodesics import DistancePair
from .materials import MATERIALS
from .mesh import FaceAdjacency, LabeledMesh
from .symmetry import SymmetryPair

FAMILIES = ("adj", "dist", "sym")
PROB_CLAMP = 1e-6
DAMPING = 0.5
_ORACLE_LIMIT = 20
_WEIGHTS_FORMAT = "crf-weights-v1"


class CrfWeights:
    """Per-material factor weights: a scale and a symmetric 2x2 table per family."""

    __slots__ = ("materials", "scales", "tables")

    def __init__(self, materials, scales, tables):
        self.materials = tuple(materials)
        m = len(self.materials)
        self.scales = {f: np.asarray(scales[f], dtype=np.float64).reshape(m) for f in FAMILIES}
        self.tables = {f: np.asarray(tables[f], dtype=np.float64).reshape(m, 2, 2) for f in FAMILIES}

    @classmethod
    def ones(cls, materials=MATERIALS) -> "CrfWeights":
        m = len(materials)
        return cls(
            materials,
            {f: np.ones(m) for f in FAMILIES},
            {f: np.ones((m, 2, 2)) for f in FAMILIES},
        )

    def copy(self) -> "CrfWeights":
        return CrfWeights(
            self.materials,
            {f: self.scales[f].copy() for f in FAMILIES},
            {f: self.tables[f].copy() for f in FAMILIES},
        )

    def project(self) -> None:
        """Clip to nonnegative and re-symmetrize the tables in place."""
        for f in FAMILIES:
            np.maximum(self.scales[f], 0.0, out=self.scales[f])
            t = self.tables[f]
            off = 0.5 * (t[:, 0, 1] + t[:, 1, 0])
            t[:, 0, 1] = off
            t[:, 1, 0] = off
            np.maximum(t, 0.0, out=t)

    def to_obj(self) -> dict:
        return {
            "format": _WEIGHTS_FORMAT,
            "materials": list(self.materials),
            "scales": {f: self.scales[f].tolist() for f in FAMILIES},
            "tables": {f: self.tables[f].tolist() for f in FAMILIES},
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "CrfWeights":
        if obj.get("format") != _WEIGHTS_FORMAT:
            raise ValueError(f"unsupported weights format: {obj.get('format')!r}")
        w = cls(tuple(obj["materials"]), obj["scales"], obj["tables"])
        w.project()
        return w

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_obj(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "CrfWeights":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_obj(json.load(fh))


@dataclass
class CrfGraph:
    """Factor graph data: unaries, per-family edge lists, and weights.

    ``unary`` holds P(C=1) per (material, face), already clamped away from
    0 and 1. ``coeffs`` store the squared coefficient per edge (omega^2,
    d^2, or s^2), each in [0, 1]. ``truth`` optionally carries binary
    ground-truth labels for training.
    """

    materials: tuple[str, ...]
    n_faces: int
    unary: np.ndarray
    edges: dict[str, np.ndarray]
    coeffs: dict[str, np.ndarray]
    weights: CrfWeights
    truth: np.ndarray | None = None

    def __post_init__(self):
        m = len(self.materials)
        self.unary = np.asarray(self.unary, dtype=np.float64).reshape(m, self.n_faces)
        self.unary = np.clip(self.unary, PROB_CLAMP, 1.0 - PROB_CLAMP)
        for f in FAMILIES:
            e = np.asarray(self.edges.get(f, np.zeros((0, 2))), dtype=np.int64).reshape(-1, 2)
            c = np.asarray(self.coeffs.get(f, np.zeros(0)), dtype=np.float64).reshape(-1)
            if len(e) != len(c):
                raise ValueError(f"{f}: edge/coefficient length mismatch")
            if len(e) and (e.min() < 0 or e.max() >= self.n_faces):
                raise ValueError(f"{f}: edge references an invalid face")
            if len(c) and (c.min() < -1e-12 or c.max() > 1.0 + 1e-12):
                raise ValueError(f"{f}: coefficients must lie in [0, 1]")
            self.edges[f] = e
            self.coeffs[f] = np.clip(c, 0.0, 1.0)
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.float64).reshape(m, self.n_faces)

    @property
    def n_materials(self) -> int:
        return len(self.materials)

    @property
    def n_variables(self) -> int:
        return self.n_materials * self.n_faces


@dataclass
class Marginals:
    """Mean-field beliefs q = P(C=1) per (material, face)."""

    q: np.ndarray
    converged: bool
    sweeps: int
    free_energy: list[float] = field(default_factory=list)


def face_label_matrix(mesh: LabeledMesh, materials=MATERIALS) -> np.ndarray:
    """Binary (material, face) matrix from the mesh's component label sets."""
    out = np.zeros((len(materials), mesh.n_faces))
    index = {name: k for k, name in enumerate(materials)}
    for f in range(mesh.n_faces):
        labels = mesh.face_label_set(f)
        if labels is None:
            continue
        for name in labels.names():
            if name in index:
                out[index[name], f] = 1.0
    return out


def build_crf(
    mesh: LabeledMesh,
    sample_positions: np.ndarray,
    sample_probs: np.ndarray,
    adjacency: FaceAdjacency | None = None,
    dist_pairs: list[DistancePair] | None = None,
    sym_pairs: list[SymmetryPair] | None = None,
    weights: CrfWeights | None = None,
    materials=MATERIALS,
    truth: np.ndarray | None = None,
) -> CrfGraph:
    """Assemble the graph: nearest-sample unaries plus three edge families.

    Each face takes the probabilities of the sample nearest its centroid.
    Edge coefficients are squared here, so downstream code only sees k and
    (1 - k).
    """
    positions = np.asarray(sample_positions, dtype=np.float64).reshape(-1, 3)
    probs = np.asarray(sample_probs, dtype=np.float64).reshape(len(positions), len(materials))
    if len(positions) == 0:
        raise MissingUnariesError("no unary samples provided")
    _, nearest = cKDTree(positions).query(mesh.face_centroids())
    unary = probs[nearest].T

    edges: dict[str, np.ndarray] = {}
    coeffs: dict[str, np.ndarray] = {}
    if adjacency is not None and len(adjacency.pairs):
        edges["adj"] = adjacency.pairs.astype(np.int64)
        coeffs["adj"] = adjacency.omega.astype(np.float64) ** 2
    if dist_pairs:
        edges["dist"] = np.array([[p.face_a, p.face_b] for p in dist_pairs], dtype=np.int64)
        coeffs["dist"] = np.array([p.distance for p in dist_pairs]) ** 2
    if sym_pairs:
        edges["sym"] = np.array([[p.face_a, p.face_b] for p in sym_pairs], dtype=np.int64)
        coeffs["sym"] = np.array([p.s for p in sym_pairs]) ** 2

    if weights is None:
        weights = CrfWeights.ones(materials)
    return CrfGraph(
        materials=tuple(materials),
        n_faces=mesh.n_faces,
        unary=unary,
        edges=edges,
        coeffs=coeffs,
        weights=weights,
        truth=truth,
    )


def _family_matrices(graph: CrfGraph, family: str):
    """Sparse (F, F) matrices of k and (1 - k) over the family's edges."""
    e = graph.edges[family]
    k = graph.coeffs[family]
    n = graph.n_faces
    if len(e) == 0:
        return None
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    same = csr_matrix((np.concatenate([k, k]), (rows, cols)), shape=(n, n))
    diff = csr_matrix((np.concatenate([1.0 - k, 1.0 - k]), (rows, cols)), shape=(n, n))
    return same, diff


def _material_sweep(q1, log_u0, log_u1, ops):
    """One synchronous damped update for a single material's beliefs."""
    q0 = 1.0 - q1
    r0 = log_u0.copy()
    r1 = log_u1.copy()
    for same, diff, w00, w01, w11 in ops:
        s_q0 = same @ q0
        s_q1 = same @ q1
        d_q0 = diff @ q0
        d_q1 = diff @ q1
        r0 += -w00 * s_q0 - w01 * d_q1
        r1 += -w01 * d_q0 - w11 * s_q1
    # expit is overflow-safe; the clip keeps saturated beliefs off exact
    # 0/1 so the entropy term stays finite
    fresh = expit(r1 - r0)
    mixed = DAMPING * q1 + (1.0 - DAMPING) * fresh
    return np.clip(mixed, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _material_free_energy(q1, log_u0, log_u1, ops):
    q0 = 1.0 - q1
    energy = -(q0 @ log_u0 + q1 @ log_u1)
    for same, diff, w00, w01, w11 in ops:
        # each edge appears twice in the symmetric matrices; halve the sums
        energy += 0.5 * (
            w00 * (q0 @ (same @ q0))
            + w11 * (q1 @ (same @ q1))
            + w01 * (q0 @ (diff @ q1))
            + w01 * (q1 @ (diff @ q0))
        )
    ent = -(q0 * np.log(q0) + q1 * np.log(q1))
    return float(energy - ent.sum())


def _material_ops(graph: CrfGraph, m: int):
    ops = []
    for family in FAMILIES:
        mats = _family_matrices(graph, family)
        if mats is None:
            continue
        same, diff = mats
        w = graph.weights.scales[family][m]
        t = graph.weights.tables[family][m]
        ops.append((same, diff, w * t[0, 0], w * t[0, 1], w * t[1, 1]))
    return ops


def mean_field_infer(graph: CrfGraph, max_iter: int = 200, tol: float = 1e-8) -> Marginals:
    """Damped synchronous mean-field sweeps, run independently per material.

    Beliefs start at the unaries. Each sweep recomputes every belief from
    the previous sweep's values and mixes with damping 0.5, stopping when
    the largest belief change falls below ``tol``. The free-energy trace
    sums per-material traces, padding materials that stop early with their
    final value. Non-convergence is reported through the flag, not raised.
    """
    m_count = graph.n_materials
    q_out = np.empty_like(graph.unary)
    traces = []
    all_converged = True
    max_sweeps = 0
    for m in range(m_count):
        ops = _material_ops(graph, m)
        log_u1 = np.log(graph.unary[m])
        log_u0 = np.log(1.0 - graph.unary[m])
        q1 = graph.unary[m].copy()
        trace = [_material_free_energy(q1, log_u0, log_u1, ops)]
        converged = False
        sweeps = 0
        for _ in range(max_iter):
            new = _material_sweep(q1, log_u0, log_u1, ops)
            delta = float(np.max(np.abs(new - q1))) if len(new) else 0.0
            q1 = new
            sweeps += 1
            trace.append(_material_free_energy(q1, log_u0, log_u1, ops))
            if delta < tol:
                converged = True
                break
        q_out[m] = q1
        traces.append(trace)
        all_converged = all_converged and converged
        max_sweeps = max(max_sweeps, sweeps)

    total = []
    for k in range(max_sweeps + 1):
        total.append(sum(t[min(k, len(t) - 1)] for t in traces))
    return Marginals(q=q_out, converged=all_converged, sweeps=max_sweeps, free_energy=total)


def free_energy(graph: CrfGraph, q: np.ndarray) -> float:
    """Variational free energy E_q[energy] - H(q) of factorized beliefs q."""
    q = np.clip(np.asarray(q, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    total = 0.0
    for m in range(graph.n_materials):
        ops = _material_ops(graph, m)
        total += _material_free_energy(
            q[m], np.log(1.0 - graph.unary[m]), np.log(graph.unary[m]), ops
        )
    return total


def assignment_scores(graph: CrfGraph, labels: np.ndarray) -> np.ndarray:
    """Per-material log of the unnormalized probability of a binary labeling."""
    labels = np.asarray(labels, dtype=np.float64).reshape(graph.n_materials, graph.n_faces)
    scores = (labels * np.log(graph.unary) + (1.0 - labels) * np.log(1.0 - graph.unary)).sum(axis=1)
    for family in FAMILIES:
        e = graph.edges[family]
        if len(e) == 0:
            continue
        k = graph.coeffs[family]
        w = graph.weights.scales[family]
        t = graph.weights.tables[family]
        la = labels[:, e[:, 0]]
        lb = labels[:, e[:, 1]]
        both1 = la * lb
        both0 = (1.0 - la) * (1.0 - lb)
        differ = 1.0 - both1 - both0
        scores += -(
            (w * t[:, 0, 0])[:, None] * both0 * k
            + (w * t[:, 1, 1])[:, None] * both1 * k
            + (w * t[:, 0, 1])[:, None] * differ * (1.0 - k)
        ).sum(axis=1)
    return scores


def _enumerate_material(graph: CrfGraph, m: int):
    """Log unnormalized score of every joint assignment for one material."""
    f = graph.n_faces
    bits = (np.arange(2**f, dtype=np.int64)[:, None] >> np.arange(f)) & 1
    bits = bits.astype(np.float64)
    logp = bits @ np.log(graph.unary[m]) + (1.0 - bits) @ np.log(1.0 - graph.unary[m])
    for family in FAMILIES:
        e = graph.edges[family]
        if len(e) == 0:
            continue
        k = graph.coeffs[family]
        w = graph.weights.scales[family][m]
        t = graph.weights.tables[family][m]
        la = bits[:, e[:, 0]]
        lb = bits[:, e[:, 1]]
        both1 = la * lb
        both0 = (1.0 - la) * (1.0 - lb)
        differ = 1.0 - both1 - both0
        logp += -(
            w * t[0, 0] * both0 * k + w * t[1, 1] * both1 * k + w * t[0, 1] * differ * (1.0 - k)
        ).sum(axis=1)
    return bits, logp


def _logsumexp(x: np.ndarray) -> float:
    hi = float(np.max(x))
    return hi + float(np.log(np.sum(np.exp(x - hi))))


def brute_force_marginals(graph: CrfGraph) -> Marginals:
    """Exact marginals by enumeration; refuses more than 20 binary variables."""
    if graph.n_variables > _ORACLE_LIMIT:
        raise OracleSizeError(
            f"{graph.n_variables} variables exceed the enumeration limit of {_ORACLE_LIMIT}"
        )
    q = np.empty_like(graph.unary)
    for m in range(graph.n_materials):
        bits, logp = _enumerate_material(graph, m)
        log_z = _logsumexp(logp)
        p = np.exp(logp - log_z)
        q[m] = p @ bits
    return Marginals(q=q, converged=True, sweeps=0)


def exact_log_likelihood(graph: CrfGraph, labels: np.ndarray) -> float:
    """log P(labels) with the partition function computed by enumeration."""
    if graph.n_variables > _ORACLE_LIMIT:
        raise OracleSizeError(
            f"{graph.n_variables} variables exceed the enumeration limit of {_ORACLE_LIMIT}"
        )
    scores = assignment_scores(graph, labels)
    total = 0.0
    for m in range(graph.n_materials):
        _, logp = _enumerate_material(graph, m)
        total += scores[m] - _logsumexp(logp)
    return float(total)


@dataclass
class PredictedLabels:
    """Per-face argmax material plus the thresholded multi-label sets."""

    top1: np.ndarray
    label_sets: list[tuple[int, ...]]


def predict_labels(marginals: Marginals, threshold: float = 0.5) -> PredictedLabels:
    """argmax material per face; label set = {m : q >= threshold} or the argmax.

    Ties take the lowest material index.
    """
    q = marginals.q
    top1 = np.argmax(q, axis=0)
    sets = []
    for f in range(q.shape[1]):
        chosen = tuple(int(m) for m in np.flatnonzero(q[:, f] >= threshold))
        if not chosen:
            chosen = (int(top1[f]),)
        sets.append(chosen)
    return PredictedLabels(top1=top1.astype(np.int64), label_sets=sets)


def _pair_stats(graph: CrfGraph, family: str, values: np.ndarray):
    """Expected (or observed) edge statistics under factorized values."""
    e = graph.edges[family]
    k = graph.coeffs[family]
    va = values[:, e[:, 0]]
    vb = values[:, e[:, 1]]
    both1 = va * vb
    both0 = (1.0 - va) * (1.0 - vb)
    differ = va * (1.0 - vb) + (1.0 - va) * vb
    return both0, both1, differ, k


def _score_gradient(graph: CrfGraph, values: np.ndarray):
    """Gradient of the assignment score wrt every weight, with pairwise terms
    factorized through ``values`` (exact for binary labels)."""
    g_scales = {}
    g_tables = {}
    w = graph.weights
    for family in FAMILIES:
        m_count = graph.n_materials
        if len(graph.edges[family]) == 0:
            g_scales[family] = np.zeros(m_count)
            g_tables[family] = np.zeros((m_count, 2, 2))
            continue
        both0, both1, differ, k = _pair_stats(graph, family, values)
        t = w.tables[family]
        scale = w.scales[family]
        g_scales[family] = -(
            t[:, 0, 0][:, None] * both0 * k
            + t[:, 1, 1][:, None] * both1 * k
            + t[:, 0, 1][:, None] * differ * (1.0 - k)
        ).sum(axis=1)
        g = np.zeros((m_count, 2, 2))
        g[:, 0, 0] = -scale * (both0 * k).sum(axis=1)
        g[:, 1, 1] = -scale * (both1 * k).sum(axis=1)
        off = -scale * (differ * (1.0 - k)).sum(axis=1)
        g[:, 0, 1] = off
        g[:, 1, 0] = off
        g_tables[family] = g
    return g_scales, g_tables


def crf_gradient(graph: CrfGraph, max_iter: int = 200, tol: float = 1e-8):
    """(data - model) gradient of log P(truth) wrt the graph's weights.

    The model expectation uses mean-field marginals with pairwise terms
    factorized as q_a * q_b. Returns (gradient scales, gradient tables,
    approximate log-likelihood) where the likelihood approximates log Z by
    the negative final free energy.
    """
    if graph.truth is None:
        raise MissingDataError("training graph lacks ground-truth labels")
    marg = mean_field_infer(graph, max_iter=max_iter, tol=tol)
    data_s, data_t = _score_gradient(graph, graph.truth)
    model_s, model_t = _score_gradient(graph, marg.q)
    g_scales = {f: data_s[f] - model_s[f] for f in FAMILIES}
    g_tables = {f: data_t[f] - model_t[f] for f in FAMILIES}
    approx_ll = float(assignment_scores(graph, graph.truth).sum() + marg.free_energy[-1])
    return g_scales, g_tables, approx_ll


def train_crf(
    dataset: list[CrfGraph],
    init: CrfWeights | None = None,
    lr: float = 0.01,
    iters: int = 50,
    infer_iter: int = 200,
    infer_tol: float = 1e-8,
) -> tuple[CrfWeights, list[float]]:
    """Gradient ascent on the dataset-mean approximate log-likelihood.

    All graphs share one weight object; weights start at ones unless given,
    and are projected to nonnegative after every step. The trace holds the
    mean approximate log-likelihood evaluated before each step.
    """
    if not dataset:
        raise MissingDataError("no training graphs")
    for g in dataset:
        if g.truth is None:
            raise MissingDataError("training graph lacks ground-truth labels")
    materials = dataset[0].materials
    weights = init.copy() if init is not None else CrfWeights.ones(materials)
    trace = []
    for _ in range(iters):
        acc_s = {f: np.zeros(len(materials)) for f in FAMILIES}
        acc_t = {f: np.zeros((len(materials), 2, 2)) for f in FAMILIES}
        ll = 0.0
        for g in dataset:
            g.weights = weights
            g_s, g_t, g_ll = crf_gradient(g, max_iter=infer_iter, tol=infer_tol)
            for f in FAMILIES:
                acc_s[f] += g_s[f]
                acc_t[f] += g_t[f]
            ll += g_ll
        trace.append(ll / len(dataset))
        for f in FAMILIES:
            weights.scales[f] += lr * acc_s[f] / len(dataset)
            weights.tables[f] += lr * acc_t[f] / len(dataset)
        weights.project()
    for g in dataset:
        g.weights = weights
    return weights, trace


def save_sample_probs(path: str, probs: np.ndarray, materials=MATERIALS) -> None:
    """JSON-lines {sample_index, probs: {material: p}} per sample."""
    probs = np.asarray(probs, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(probs)):
            rec = {
                "sample_index": i,
                "probs": {name: float(probs[i, k]) for k, name in enumerate(materials)},
            }
            fh.write(json.dumps(rec) + "\n")


def load_sample_probs(path: str, materials=MATERIALS) -> np.ndarray:
    rows = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            rows[int(rec["sample_index"])] = [rec["probs"][name] for name in materials]
    if not rows:
        raise MissingUnariesError(f"no unary records in {path}")
    out = np.zeros((max(rows) + 1, len(materials)))
    for i, row in rows.items():
        out[i] = row
    return out


def save_face_predictions(
    path: str, marginals: Marginals, predictions: PredictedLabels, materials=MATERIALS
) -> None:
    """JSON-lines {face, top1, label_set, marginals} per face."""
    q = marginals.q
    with open(path, "w", encoding="utf-8") as fh:
        for f in range(q.shape[1]):
            rec = {
                "face": f,
                "top1": materials[int(predictions.top1[f])],
                "label_set": [materials[m] for m in predictions.label_sets[f]],
                "marginals": {name: float(q[k, f]) for k, name in enumerate(materials)},
            }
            fh.write(json.dumps(rec) + "\n")

def load_face_predictions(path: str, materials=MATERIALS):
    """Read prediction lines back as (top1 indices, label-set index tuples, q)."""
    index = {name: i for i, name in enumerate(materials)}
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    rows.sort(key=lambda r: r["face"])
    top1 = np.array([index[r["top1"]] for r in rows], dtype=np.int64)
    label_sets = [tuple(index[name] for name in r["label_set"]) for r in rows]
    q = np.zeros((len(materials), len(rows)))
    for f, r in enumerate(rows):
        for name, p in r["marginals"].items():
            q[index[name], f] = float(p)
    return top1, label_sets, q
