"""Triplet hinge loss over PK mini-batches.

The gradient of the mean loss over active triplets is assembled from one
weight vector per sample (``alpha``): with ``alpha_n`` known, each sample
needs a single backward pass seeded with ``alpha_n / active``, instead of
one backward per triplet. ``naive_loss_and_grad`` keeps the per-triplet
route around as an oracle and for benchmarking.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ndgrad as nd
from . import partnet as pn

DEFAULT_MARGIN = 0.2


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray
    flips: np.ndarray = None
    indices: np.ndarray = None
    masks: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.flips is None:
            self.flips = np.zeros(len(self.labels), dtype=bool)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def singleton_ids(self) -> List[int]:
        """Identities with one image only; they yield no positive pair."""
        ids, counts = np.unique(self.labels, return_counts=True)
        return [int(i) for i in ids[counts < 2]]


@dataclass
class TripletStats:
    total: int
    active: int
    mean_loss: float

    @property
    def degenerate(self) -> bool:
        return self.active == 0


@dataclass
class AlphaWeights:
    alpha: np.ndarray
    active: int
    total: int
    loss_sum: float

    @property
    def stats(self) -> TripletStats:
        mean = self.loss_sum / self.active if self.active else 0.0
        return TripletStats(self.total, self.active, mean)


@dataclass
class GradResult:
    loss: float
    grads: Dict[str, np.ndarray]
    stats: TripletStats
    backward_passes: int
    alpha: Optional[np.ndarray] = None
    embeddings: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)


def squared_euclidean(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"width mismatch: {x.shape} vs {y.shape}")
    diff = x - y
    return float(diff @ diff)


def triplet_loss(d_pos: float, d_neg: float, m: float = DEFAULT_MARGIN) -> float:
    return max(d_pos - d_neg + m, 0.0)


def pairwise_sq_dists(E: np.ndarray) -> np.ndarray:
    diff = E[:, None, :] - E[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def enumerate_triplets(labels: Sequence) -> Iterator[Tuple[int, int, int]]:
    """All (anchor, positive, negative) index triples of a labelled batch."""
    labels = np.asarray(labels)
    idx = np.arange(len(labels))
    for i in idx:
        same = labels == labels[i]
        pos = idx[same & (idx != i)]
        neg = idx[~same]
        for j in pos:
            for k in neg:
                yield int(i), int(j), int(k)


def count_triplets(labels: Sequence) -> int:
    """Closed form: sum over anchors of (#positives * #negatives)."""
    labels = np.asarray(labels)
    _, counts = np.unique(labels, return_counts=True)
    m = len(labels)
    return int(sum(c * (c - 1) * (m - c) for c in counts))


def compute_alpha(E: np.ndarray, labels: Sequence, m: float = DEFAULT_MARGIN) -> AlphaWeights:
    """Per-sample weight vectors for the triplet-loss gradient.

    ``alpha[n]`` is the derivative of the summed hinge loss over active
    triplets with respect to ``E[n]``; dividing by the active count gives
    the derivative of the mean. Distances are tabulated once; per anchor,
    the active (positive, negative) pairs are counted by row and column.
    """
    E = np.asarray(E, dtype=float)
    labels = np.asarray(labels)
    n = len(labels)
    D = pairwise_sq_dists(E)
    alpha = np.zeros_like(E)
    idx = np.arange(n)
    active = 0
    total = 0
    loss_sum = 0.0
    for a in range(n):
        same = labels == labels[a]
        pos = idx[same & (idx != a)]
        neg = idx[~same]
        if len(pos) == 0 or len(neg) == 0:
            continue
        total += len(pos) * len(neg)
        hinge = D[a, pos][:, None] - D[a, neg][None, :] + m
        act = hinge > 0
        n_act = int(act.sum())
        if n_act == 0:
            continue
        active += n_act
        loss_sum += float(hinge[act].sum())
        b = act.sum(axis=1).astype(float)  # per positive
        c = act.sum(axis=0).astype(float)  # per negative
        alpha[a] += c @ E[neg] - b @ E[pos]
        alpha[pos] += b[:, None] * (E[pos] - E[a])
        alpha[neg] += c[:, None] * (E[a] - E[neg])
    return AlphaWeights(2.0 * alpha, active, total, loss_sum)


def brute_force_alpha(E: np.ndarray, labels: Sequence, m: float = DEFAULT_MARGIN) -> AlphaWeights:
    """Reference: visit every triplet and add its three role contributions."""
    E = np.asarray(E, dtype=float)
    alpha = np.zeros_like(E)
    active = total = 0
    loss_sum = 0.0
    for i, j, k in enumerate_triplets(labels):
        total += 1
        ell = squared_euclidean(E[i], E[j]) - squared_euclidean(E[i], E[k]) + m
        if ell > 0:
            active += 1
            loss_sum += ell
            alpha[i] += 2 * (E[k] - E[j])
            alpha[j] += 2 * (E[j] - E[i])
            alpha[k] += 2 * (E[i] - E[k])
    return AlphaWeights(alpha, active, total, loss_sum)


def triplet_loss_tensor(E: nd.Tensor, labels: Sequence, m: float = DEFAULT_MARGIN) -> nd.Tensor:
    """Differentiable mean loss over the currently active triplets.

    Builds the whole triplet graph explicitly; meant for gradient checks
    on small batches, not for training.
    """
    trip = np.array(list(enumerate_triplets(labels)), dtype=np.intp).reshape(-1, 3)
    if len(trip) == 0:
        return nd.scale(nd.sum_all(E), 0.0)
    Ed = E.data
    dp = ((Ed[trip[:, 0]] - Ed[trip[:, 1]]) ** 2).sum(-1)
    dn = ((Ed[trip[:, 0]] - Ed[trip[:, 2]]) ** 2).sum(-1)
    act = trip[dp - dn + m > 0]
    if len(act) == 0:
        return nd.scale(nd.sum_all(E), 0.0)
    a, p, q = nd.take(E, act[:, 0]), nd.take(E, act[:, 1]), nd.take(E, act[:, 2])
    ell = nd.add(nd.sub(nd.squared_distance(a, p), nd.squared_distance(a, q)), nd.Tensor(m))
    return nd.scale(nd.sum_all(nd.relu(ell)), 1.0 / len(act))


def _named(model: pn.Model, grads: Dict[nd.Tensor, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: grads.get(p, np.zeros_like(p.data)) for name, p in model.params.items()}


def _zero_grads(model: pn.Model) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(p.data) for name, p in model.params.items()}


def _sample_masks(masks, i):
    return None if masks is None else masks[i:i + 1]


def loss_and_grad(batch: LabeledBatch, model: pn.Model, margin: float = DEFAULT_MARGIN,
                  mode: str = "per-sample", threads: int = 1,
                  deterministic: bool = True) -> GradResult:
    """Mean active-triplet loss and its parameter gradient.

    ``per-sample``: one forward tape per image, then exactly one backward
    per image seeded with ``alpha_n / active``.
    ``batched``: the same seeds stacked into one tape over the batch;
    since image n only influences row n, this equals the per-sample sum.
    Parallel per-sample passes are merged in batch order when
    ``deterministic``, else in completion order.
    """
    if mode not in ("per-sample", "batched"):
        raise ValueError(f"unknown mode {mode!r}")
    for p in model.params.values():
        p.requires_grad = True
    images = np.asarray(batch.images, dtype=float)
    n = len(batch)

    if mode == "batched":
        with nd.Tape() as tape:
            E = pn.embed(images, model, batch.masks)
        aw = compute_alpha(E.data, batch.labels, margin)
        if aw.active == 0:
            return GradResult(0.0, _zero_grads(model), aw.stats, 0, aw.alpha, E.data)
        grads = tape.backward(E, seed=aw.alpha / aw.active, accumulate=False)
        return GradResult(aw.stats.mean_loss, _named(model, grads), aw.stats, n, aw.alpha, E.data,
                          {"reduction": "batched"})

    def forward(i):
        with nd.Tape() as tape:
            e = pn.embed(images[i], model, _sample_masks(batch.masks, i))
        return tape, e

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        fwd = list(pool.map(forward, range(n))) if pool else [forward(i) for i in range(n)]
        E = np.concatenate([e.data for _, e in fwd], axis=0)
        aw = compute_alpha(E, batch.labels, margin)
        if aw.active == 0:
            return GradResult(0.0, _zero_grads(model), aw.stats, 0, aw.alpha, E)
        seeds = aw.alpha / aw.active

        def back(i):
            tape, e = fwd[i]
            return tape.backward(e, seed=seeds[i:i + 1], accumulate=False)

        if pool is None:
            parts = [back(i) for i in range(n)]
        elif deterministic:
            parts = list(pool.map(back, range(n)))
        else:
            parts = [f.result() for f in as_completed([pool.submit(back, i) for i in range(n)])]
    finally:
        if pool is not None:
            pool.shutdown()
    grads = nd.merge_grads(parts)
    return GradResult(aw.stats.mean_loss, _named(model, grads), aw.stats, len(parts), aw.alpha, E,
                      {"reduction": "ordered" if deterministic or pool is None else "unordered"})


def naive_loss_and_grad(batch: LabeledBatch, model: pn.Model,
                        margin: float = DEFAULT_MARGIN) -> GradResult:
    """Oracle: backpropagate every active triplet on its own tape."""
    for p in model.params.values():
        p.requires_grad = True
    images = np.asarray(batch.images, dtype=float)
    E = pn.embed_numpy(images, model, batch.masks)
    D = pairwise_sq_dists(E)
    active = []
    total = 0
    for i, j, k in enumerate_triplets(batch.labels):
        total += 1
        if D[i, j] - D[i, k] + margin > 0:
            active.append((i, j, k))
    if not active:
        return GradResult(0.0, _zero_grads(model), TripletStats(total, 0, 0.0), 0, embeddings=E)
    parts = []
    loss_sum = 0.0
    for trip in active:
        idx = list(trip)
        m3 = None if batch.masks is None else batch.masks[idx]
        with nd.Tape() as tape:
            h = pn.embed(images[idx], model, m3)
            a, p, q = nd.take(h, [0]), nd.take(h, [1]), nd.take(h, [2])
            ell = nd.add(nd.sub(nd.squared_distance(a, p), nd.squared_distance(a, q)), nd.Tensor(margin))
            root = nd.sum_all(nd.relu(ell))
        loss_sum += float(root.data)
        parts.append(tape.backward(root, accumulate=False))
    grads = nd.merge_grads(parts)
    scale = 1.0 / len(active)
    named = {k: v * scale for k, v in _named(model, grads).items()}
    stats = TripletStats(total, len(active), loss_sum / len(active))
    return GradResult(stats.mean_loss, named, stats, len(parts), embeddings=E,
                      extra={"sample_backwards": 3 * len(parts)})


def pk_sample(labels: Sequence, P: int, K_img: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a P×K_img mini-batch, grouped by identity.

    Identities are drawn without replacement; images of an identity with
    fewer than ``K_img`` samples are drawn with replacement.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < P:
        raise ValueError(f"dataset has {len(ids)} identities, batch needs P={P}")
    chosen = rng.choice(ids, size=P, replace=False)
    out = []
    for pid in chosen:
        pool = np.flatnonzero(labels == pid)
        out.append(rng.choice(pool, size=K_img, replace=len(pool) < K_img))
    return np.concatenate(out)


def bench_aggregation(sizes: Sequence[int], model: pn.Model, margin: float = DEFAULT_MARGIN,
                      K_img: int = 4, seed: int = 0, images: Optional[np.ndarray] = None,
                      labels: Optional[np.ndarray] = None, mode: str = "per-sample") -> List[dict]:
    """Time per-triplet backprop against alpha aggregation on the same batches."""
    rng = np.random.default_rng(seed)
    hw = model.backbone.input_hw
    rows = []
    for m_size in sizes:
        P = max(2, m_size // K_img)
        if images is None:
            lab = np.repeat(np.arange(P), K_img)[:m_size]
            imgs = rng.random((len(lab),) + hw + (model.backbone.in_channels,))
        else:
            sel = pk_sample(labels, P, K_img, rng)[:m_size]
            imgs, lab = images[sel], labels[sel]
        batch = LabeledBatch(imgs, lab)
        t0 = time.perf_counter()
        agg = loss_and_grad(batch, model, margin, mode=mode)
        t1 = time.perf_counter()
        naive = naive_loss_and_grad(batch, model, margin)
        t2 = time.perf_counter()
        diff = max(float(np.max(np.abs(agg.grads[k] - naive.grads[k]))) for k in agg.grads)
        rows.append({
            "M": len(lab),
            "triplets": agg.stats.total,
            "active": agg.stats.active,
            "ms_naive": (t2 - t1) * 1e3,
            "ms_aggregated": (t1 - t0) * 1e3,
            "max_grad_diff": diff,
            "backward_aggregated": agg.backward_passes,
            "backward_naive": naive.backward_passes,
        })
    return rows
