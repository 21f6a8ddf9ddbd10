"""Synthetic heterogeneous federations.

Classification federations draw a balanced pool of examples from per-class
unit-covariance Gaussians and split it across clients with a Dirichlet label
skew. Quadratic federations give every client its own center around a shared
offset; examples are noisy copies of that center.

Binary dump layout (all little-endian)::

    header  16 bytes  magic b"FSIM", uint32 version (=1), uint32 m, uint32 d
    then m client blocks, each a run of float64 values:
        client_id, nu, has_features (1.0 or 0.0)
        has_features == 1: nu*d feature values (row-major), then nu labels
        has_features == 0: nu*d target values (row-major)

``d`` is the row width shared by all clients: the feature count for
classification data, the target dimension for quadratic data.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FSIM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class ClientDataset:
    client_id: int
    features: np.ndarray | None
    targets: np.ndarray

    def __post_init__(self):
        if self.features is not None and len(self.features) != len(self.targets):
            raise ValueError("features and targets disagree on example count")

    @property
    def size(self) -> int:
        return len(self.targets)


@dataclass
class FederationSpec:
    num_clients: int = 100
    size_law: str = "lognormal"
    size_median: int = 100
    size_sigma: float = 0.5
    min_size: int = 1
    max_size: int = 1000
    dirichlet_beta: float = 0.5
    n_features: int = 9
    n_classes: int = 2
    class_sep: float = 1.0
    feature_offset: float = 0.0
    dispersion: float = 1.0
    spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.dirichlet_beta <= 0:
            raise ValueError("dirichlet_beta must be > 0")
        if self.size_law not in ("fixed", "lognormal"):
            raise ValueError(f"unknown size_law {self.size_law!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# named sub-streams of the data seed
_MEANS, _SIZES, _PARTITION, _POOL, _EVAL = range(5)


def client_sizes(spec: FederationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng or _stream(spec.seed, _SIZES)
    m = spec.num_clients
    if spec.size_law == "fixed":
        raw = np.full(m, int(spec.size_median))
    else:
        draws = rng.lognormal(np.log(spec.size_median), spec.size_sigma, size=m)
        raw = np.rint(draws).astype(np.int64)
    if np.any(raw < 1):
        warnings.warn(f"{int(np.sum(raw < 1))} client size(s) below 1 clamped to 1", RuntimeWarning)
    return np.clip(raw, max(1, spec.min_size), max(1, spec.max_size))


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    quota = total * weights / weights.sum()
    counts = np.floor(quota).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_label_partition(labels, num_clients: int, beta: float, seed: int,
                              sizes=None) -> list[np.ndarray]:
    """Split pooled examples across clients with Dirichlet label skew.

    Without ``sizes`` each class is divided across clients by proportions drawn
    from ``Dir(beta)``. With ``sizes`` each client draws its own class mix from
    ``Dir(beta)`` and receives exactly ``sizes[i]`` examples, falling back to
    whatever classes remain when its preferred ones run out.

    Returns one ascending index array per client. Every pooled example is
    assigned to exactly one client and every client gets at least one.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("empty pool")
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if num_clients > n:
        raise ValueError("more clients than pooled examples")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)

    if sizes is None:
        parts: list[list[int]] = [[] for _ in range(num_clients)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(num_clients, beta))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for i, chunk in enumerate(np.split(idx, cuts)):
                parts[i].extend(chunk.tolist())
        for i in range(num_clients):
            if not parts[i]:
                donor = max(range(num_clients), key=lambda j: (len(parts[j]), -j))
                parts[i].append(parts[donor].pop())
        return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]

    sizes = np.asarray(sizes, dtype=np.int64)
    if len(sizes) != num_clients or sizes.sum() != n or np.any(sizes < 1):
        raise ValueError("sizes must be positive and sum to the pool size")
    queues = [list(rng.permutation(np.flatnonzero(labels == c))) for c in classes]
    out = []
    for i in range(num_clients):
        mix = rng.dirichlet(np.full(len(classes), beta))
        want = _largest_remainder(int(sizes[i]), mix)
        avail = np.array([len(q) for q in queues])
        take = np.minimum(want, avail)
        short = int(sizes[i] - take.sum())
        for c in np.argsort(-mix, kind="stable"):
            if short == 0:
                break
            extra = min(short, int(avail[c] - take[c]))
            take[c] += extra
            short -= extra
        picked = []
        for c, k in enumerate(take):
            picked.extend(queues[c][:k])
            del queues[c][:k]
        out.append(np.sort(np.asarray(picked, dtype=np.int64)))
    return out


def _offset(spec: FederationSpec, rng: np.random.Generator) -> np.ndarray:
    shift = rng.standard_normal(spec.n_features)
    return shift * (spec.feature_offset / np.linalg.norm(shift))


def class_means(spec: FederationSpec) -> np.ndarray:
    """Class centers: a shared offset of norm ``feature_offset`` plus spread ``class_sep``.

    A nonzero offset leaves features uncentered, which couples the bias with
    the weights and slows gradient methods down.
    """
    rng = _stream(spec.seed, _MEANS)
    z = rng.standard_normal((spec.n_classes, spec.n_features))
    return _offset(spec, rng) + spec.class_sep * z / np.sqrt(spec.n_features)


def _classification_pool(spec: FederationSpec, n: int, rng: np.random.Generator):
    labels = rng.permutation(np.arange(n) % spec.n_classes)
    feats = class_means(spec)[labels] + rng.standard_normal((n, spec.n_features))
    return feats, labels


def synth_federation(spec: FederationSpec, kind: str) -> list[ClientDataset]:
    """Build ``spec.num_clients`` client datasets for an objective ``kind``.

    Identical ``spec`` gives identical arrays.
    """
    sizes = client_sizes(spec)
    if kind == "quadratic":
        rng = _stream(spec.seed, _POOL)
        shift = _offset(spec, _stream(spec.seed, _MEANS))
        clients = []
        for i, nu in enumerate(sizes):
            center = shift + spec.dispersion * rng.standard_normal(spec.n_features)
            noise = spec.spread * rng.standard_normal((int(nu), spec.n_features))
            clients.append(ClientDataset(i, None, center + noise))
        return clients
    if kind not in ("logistic", "mlp"):
        raise ValueError(f"unknown objective kind {kind!r}")
    feats, labels = _classification_pool(spec, int(sizes.sum()), _stream(spec.seed, _POOL))
    parts = dirichlet_label_partition(labels, spec.num_clients, spec.dirichlet_beta,
                                      seed=int(_stream(spec.seed, _PARTITION).integers(2**63)),
                                      sizes=sizes)
    return [ClientDataset(i, feats[idx], labels[idx]) for i, idx in enumerate(parts)]


def fresh_eval_pool(spec: FederationSpec, kind: str, n_examples: int) -> ClientDataset:
    """Pool ``n_examples`` drawn from unseen clients of the same federation.

    The pooled label mix of fresh skewed clients is balanced in expectation,
    so the pool is drawn balanced directly from the shared class means.
    """
    n_examples = max(1, int(n_examples))
    rng = _stream(spec.seed, _EVAL)
    if kind == "quadratic":
        n_fresh = max(1, int(np.ceil(n_examples / spec.size_median)))
        shift = _offset(spec, _stream(spec.seed, _MEANS))
        centers = shift + spec.dispersion * rng.standard_normal((n_fresh, spec.n_features))
        owner = np.arange(n_examples) % n_fresh
        targets = centers[owner] + spec.spread * rng.standard_normal((n_examples, spec.n_features))
        return ClientDataset(-1, None, targets)
    feats, labels = _classification_pool(spec, n_examples, rng)
    return ClientDataset(-1, feats, labels)


def holdout_split(clients, fraction: float, seed: int):
    """Move ``fraction`` of each client's examples into one pooled eval set."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    rng = _stream(seed, _EVAL)
    train, held_f, held_t = [], [], []
    for c in clients:
        perm = rng.permutation(c.size)
        n_out = int(np.floor(fraction * c.size)) if c.size > 1 else 0
        keep, out = np.sort(perm[n_out:]), np.sort(perm[:n_out])
        feats = None if c.features is None else c.features[keep]
        train.append(ClientDataset(c.client_id, feats, c.targets[keep]))
        if c.features is not None:
            held_f.append(c.features[out])
        held_t.append(c.targets[out])
    feats = None if clients[0].features is None else np.concatenate(held_f)
    return train, ClientDataset(-1, feats, np.concatenate(held_t))


def label_histogram(data: ClientDataset, n_classes: int) -> np.ndarray:
    counts = np.bincount(data.targets, minlength=n_classes).astype(float)
    return counts / counts.sum()


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def mean_pairwise_tv(clients, n_classes: int) -> float:
    hists = [label_histogram(c, n_classes) for c in clients]
    vals = [total_variation(hists[i], hists[j])
            for i in range(len(hists)) for j in range(i + 1, len(hists))]
    return float(np.mean(vals)) if vals else 0.0


def save_federation(path, clients) -> None:
    clients = list(clients)
    if not clients:
        raise ValueError("nothing to save")
    first = clients[0]
    width = (first.features if first.features is not None else first.targets).shape[1]
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(clients), width)]
    for c in clients:
        has_feats = c.features is not None
        body = [np.array([c.client_id, c.size, 1.0 if has_feats else 0.0])]
        if has_feats:
            body += [c.features.ravel(), c.targets.astype(float)]
        else:
            body.append(c.targets.ravel())
        chunks.append(np.concatenate(body).astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_federation(path) -> list[ClientDataset]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("file too short for header")
    magic, version, m, width = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    clients, pos = [], 0
    for _ in range(m):
        cid, nu, has_feats = vals[pos:pos + 3]
        nu, pos = int(nu), pos + 3
        if has_feats:
            feats = vals[pos:pos + nu * width].reshape(nu, width).copy()
            pos += nu * width
            labels = vals[pos:pos + nu].astype(np.int64)
            pos += nu
            clients.append(ClientDataset(int(cid), feats, labels))
        else:
            targets = vals[pos:pos + nu * width].reshape(nu, width).copy()
            pos += nu * width
            clients.append(ClientDataset(int(cid), None, targets))
    if pos != len(vals):
        raise ValueError("trailing data after last client block")
    return clients
