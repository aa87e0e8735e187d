"""Activation cluster statistics and the ACM overfitting indicator.

An activation set maps each class label to an ``(n_i, d)`` array of
penultimate-layer activations. Everything is computed in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.spatial.distance import cdist

from .errors import CorruptPayload, DegenerateCluster, EmptyClass, IoFailure, SameClass, TooFewClasses
from .nn import Network, forward

DEGENERACY_FLOOR = 1e-12


class ActivationSet(dict):
    """``{label: (n, d) float64 array}`` with a uniform feature dimension."""

    @classmethod
    def from_arrays(cls, activations: np.ndarray, labels, num_classes: int | None = None):
        activations = np.asarray(activations, dtype=np.float64)
        labels = np.asarray(labels)
        k = int(labels.max()) + 1 if num_classes is None else num_classes
        out = cls()
        for c in range(k):
            out[c] = activations[labels == c].reshape(-1, activations.shape[1])
        return out

    @property
    def dim(self) -> int:
        return next(iter(self.values())).shape[1]

    def members(self, i) -> np.ndarray:
        a = self.get(i)
        if a is None or len(a) == 0:
            raise EmptyClass(f"class {i} has no activations")
        return np.asarray(a, dtype=np.float64)


@dataclass
class ClusterStats:
    centers: np.ndarray  # (k, d)
    intra: np.ndarray  # sigma(i)
    radius: np.ndarray  # R(i)
    inter: np.ndarray  # (k, k) L(i, j), zero diagonal


def cluster_center(acts: Mapping, i) -> np.ndarray:
    return _members(acts, i).mean(axis=0)


def _members(acts, i):
    if isinstance(acts, ActivationSet):
        return acts.members(i)
    return ActivationSet(acts).members(i)


def _center_distances(acts, i) -> np.ndarray:
    a = _members(acts, i)
    return np.linalg.norm(a - a.mean(axis=0), axis=1)


def intra_class_distance(acts: Mapping, i) -> float:
    """Mean Euclidean distance of class members to their center."""
    return float(_center_distances(acts, i).mean())


def class_radius(acts: Mapping, i) -> float:
    """Largest Euclidean distance of a class member to its center."""
    return float(_center_distances(acts, i).max())


def inter_class_distance(acts: Mapping, i, j) -> float:
    """Smallest Euclidean distance over all cross-class pairs (exact)."""
    if i == j:
        raise SameClass(f"inter-class distance needs two different classes, got {i} twice")
    return float(cdist(_members(acts, i), _members(acts, j)).min())


def cluster_stats(acts: Mapping) -> ClusterStats:
    labels = sorted(acts)
    k = len(labels)
    centers, intra, radius = [], [], []
    for c in labels:
        a = _members(acts, c)
        center = a.mean(axis=0)
        dist = np.linalg.norm(a - center, axis=1)
        centers.append(center)
        intra.append(dist.mean())
        radius.append(dist.max())
    inter = np.zeros((k, k))
    for a in range(k):
        for b in range(a + 1, k):
            inter[a, b] = inter[b, a] = inter_class_distance(acts, labels[a], labels[b])
    return ClusterStats(np.array(centers), np.array(intra), np.array(radius), inter)


def acm(acts: Mapping) -> float:
    """Mean over ordered class pairs of ``L(i,j) / (R(i)sigma(i) + R(j)sigma(j))``."""
    k = len(acts)
    if k < 2:
        raise TooFewClasses(f"ACM needs at least two classes, got {k}")
    st = cluster_stats(acts)
    spread = st.radius * st.intra
    total = 0.0
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            denom = spread[i] + spread[j]
            if denom <= DEGENERACY_FLOOR:
                raise DegenerateCluster(f"classes {i} and {j} have collapsed clusters (R*sigma sum {denom:g})")
            total += st.inter[i, j] / denom
    return float(total / (k * (k - 1)))


def penultimate_activations(net: Network, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Post-nonlinearity output of the layer that feeds the classifier."""
    out = []
    idx = net.penultimate_index
    for start in range(0, len(images), batch_size):
        _, acts = forward(net, images[start:start + batch_size], record=True)
        out.append(acts[idx].reshape(len(acts[idx]), -1).astype(np.float64))
    net.clear_state()
    return np.concatenate(out)


def acm_of_model(net: Network, images: np.ndarray, labels) -> float:
    """ACM of ``net``'s penultimate activations on a label-complete subset."""
    labels = np.asarray(labels)
    acts = ActivationSet.from_arrays(penultimate_activations(net, images), labels, net.num_classes)
    return acm(acts)


# STACT1 activation dump: header, u32 k, u32 d, then per record u32 label + d f32.
ACT_MAGIC = b"STACT1"


def dump_activations(path, activations: np.ndarray, labels, num_classes: int) -> Path:
    activations = np.asarray(activations, dtype="<f4")
    labels = np.asarray(labels, dtype="<u4")
    n, d = activations.shape
    rec = np.empty(n, dtype=[("label", "<u4"), ("x", "<f4", (d,))])
    rec["label"] = labels
    rec["x"] = activations
    path = Path(path)
    try:
        path.write_bytes(ACT_MAGIC + struct.pack("<II", num_classes, d) + rec.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


def load_activations(path):
    """Return ``(activations (n, d) float32, labels (n,), k)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if not data.startswith(ACT_MAGIC) or len(data) < len(ACT_MAGIC) + 8:
        raise CorruptPayload("missing STACT1 header")
    k, d = struct.unpack_from("<II", data, len(ACT_MAGIC))
    body = data[len(ACT_MAGIC) + 8:]
    rec_size = 4 + 4 * d
    if len(body) % rec_size:
        raise CorruptPayload("activation dump body is not a whole number of records")
    rec = np.frombuffer(body, dtype=[("label", "<u4"), ("x", "<f4", (d,))])
    return rec["x"].astype(np.float32), rec["label"].astype(np.int64), k
