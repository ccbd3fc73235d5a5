"""Guided graph neural network over FPN node features.

Each spatial position of an FPN level is a node.  Nodes are linked to their k
nearest neighbours in feature space (squared L2, self excluded, lower index wins
ties) and updated with a max-relative graph convolution.  During training a
guided mask labels every node real/fake and a triplet loss pulls same-label
nodes together and pushes different-label nodes apart; the graph itself is
built the same way with or without the mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Linear, Module
from .tensor import ShapeError, Tensor, concat, gather_rows
from .vssd import from_tokens, to_tokens

DEFAULT_K = 9
DEFAULT_MARGIN = 10.0
MAX_ANCHORS = 1024


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour downsampling: out[r, c] = mask[r*H // h, c*W // w]."""
    mask = np.asarray(mask)
    H, W = mask.shape[-2:]
    h, w = target
    if h > H or w > W:
        raise ShapeError(f"downsample_mask: target {target} larger than source {(H, W)}")
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    return (mask[..., rows[:, None], cols[None, :]] != 0).astype(np.uint8)


def pairwise_sq_dists(features: np.ndarray) -> np.ndarray:
    diff = features[:, None, :] - features[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn_indices(features: np.ndarray, k: int) -> np.ndarray:
    """(M, k) neighbour table; stable sort gives the lower index on ties."""
    M = features.shape[0]
    if k >= M:
        raise ValueError(f"k={k} must be smaller than the node count {M}")
    d = pairwise_sq_dists(np.asarray(features))
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


@dataclass
class NodeGraph:
    features: np.ndarray  # (M, D)
    neighbors: np.ndarray  # (M, k)
    k: int
    level: int = 1


def build_knn_graph(features, k: int = DEFAULT_K, level: int = 1) -> NodeGraph:
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    return NodeGraph(feats, knn_indices(feats, k), k, level)


def same_class_edge_fraction(neighbors: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels).reshape(-1)
    return float((labels[neighbors] == labels[:, None]).mean())


def partition_pnh(features, labels, anchor: int):
    """Positive, negative and hard-negative index sets for one anchor."""
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    d = ((feats - feats[anchor]) ** 2).sum(axis=1)
    idx = np.arange(len(labels))
    P = idx[(labels == labels[anchor]) & (idx != anchor)]
    N = idx[labels != labels[anchor]]
    if len(P) == 0:
        return P, N, N[:0]
    Hset = N[d[N] < d[P].max()]
    return P, N, Hset


def anchor_subset(M: int, max_anchors: int = MAX_ANCHORS) -> np.ndarray:
    if M <= max_anchors:
        return np.arange(M)
    return np.linspace(0, M - 1, max_anchors).round().astype(np.int64)


def level_triplet_loss(nodes: Tensor, labels: np.ndarray, margin: float = DEFAULT_MARGIN,
                       max_anchors: int = MAX_ANCHORS) -> Tensor:
    """Hinge triplet loss for one level, averaged over anchors and batch.

    nodes: (B, M, D) or (M, D); labels: matching (B, M) or (M,).
    """
    if nodes.ndim == 2:
        nodes = nodes.reshape((1,) + nodes.shape)
    B, M, D = nodes.shape
    labels = np.asarray(labels).reshape(B, M)
    anchors = anchor_subset(M, max_anchors)
    A = len(anchors)
    dt = nodes.dtype

    sq = (nodes * nodes).sum(axis=-1)  # (B, M)
    flat = nodes.reshape(B * M, D)
    rows = (np.arange(B)[:, None] * M + anchors[None, :]).reshape(-1)
    anc = gather_rows(flat, rows).reshape(B, A, D)
    anc_sq = gather_rows(sq.reshape(B * M, 1), rows).reshape(B, A, 1)
    d = anc_sq + sq.reshape(B, 1, M) - 2.0 * (anc @ nodes.transpose(0, 2, 1))  # (B, A, M)

    la = labels[:, anchors]
    same = la[:, :, None] == labels[:, None, :]
    not_self = np.ones((B, A, M), dtype=bool)
    not_self[:, np.arange(A), anchors] = False
    pos = same & not_self
    neg = ~same
    dv = d.data
    far_pos = np.where(pos, dv, -np.inf).max(axis=-1, keepdims=True)
    hard = neg & (dv < far_pos)

    n_pos = pos.sum(-1)
    n_neg = neg.sum(-1)
    n_hard = hard.sum(-1)
    pos_term = (d * Tensor(pos.astype(dt))).sum(axis=-1) * Tensor((1.0 / np.maximum(n_pos, 1)).astype(dt))
    neg_mean = (d * Tensor(neg.astype(dt))).sum(axis=-1) * Tensor((1.0 / np.maximum(n_neg, 1)).astype(dt))
    neg_term = (margin - neg_mean).relu() * Tensor((n_neg > 0).astype(dt))
    hard_term = ((margin - d).relu() * Tensor(hard.astype(dt))).sum(axis=-1) * Tensor((1.0 / np.maximum(n_hard, 1)).astype(dt))
    return (pos_term + neg_term + hard_term).mean()


def triplet_loss(levels: Sequence[tuple], margin: float = DEFAULT_MARGIN, max_anchors: int = MAX_ANCHORS) -> Tensor:
    """Sum over levels of the per-level hinge triplet loss.

    ``levels`` holds (node features, labels) pairs; features (M, D) or (B, M, D).
    """
    total = None
    for feats, labels in levels:
        term = level_triplet_loss(feats, labels, margin, max_anchors)
        total = term if total is None else total + term
    return total


class GnnWeights(Module):
    def __init__(self, d, rng=None, zero_update=False, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w_agg = Linear(2 * d, d, rng=rng, dtype=dtype)
        self.w_update = Linear(d, d, rng=rng, std=0.02, dtype=dtype)
        if zero_update:
            self.w_update.weight.data = np.zeros_like(self.w_update.weight.data)


def max_relative_conv(node: Tensor, neighbor_feats: Sequence[Tensor], weights: GnnWeights) -> Tensor:
    """Single-node form: relu(update(agg(node || max_k(neighbor_k - node))))."""
    if len(neighbor_feats) == 0:
        raise ValueError("max_relative_conv needs at least one neighbour")
    D = node.shape[-1]
    stacked = concat([n.reshape(1, D) for n in neighbor_feats], axis=0)
    r = (stacked - node.reshape(1, D)).max(axis=0)
    g = weights.w_agg(concat([node.reshape(D), r], axis=0))
    return weights.w_update(g).relu()


class GGNNBlock(Module):
    def __init__(self, d, k=DEFAULT_K, margin=DEFAULT_MARGIN, rng=None, zero_update=False, dtype=np.float32):
        self.weights = GnnWeights(d, rng=rng, zero_update=zero_update, dtype=dtype)
        self.k = k
        self.margin = margin

    def graph(self, nodes: np.ndarray) -> np.ndarray:
        """(B, M, D) node features -> (B, M, k) neighbour table."""
        B, M, _ = nodes.shape
        k = min(self.k, M - 1)
        return np.stack([knn_indices(nodes[b], k) for b in range(B)])

    def __call__(self, s: Tensor, guided: np.ndarray | None = None):
        """s: (B, D, h, w); guided: optional (B, h, w) binary labels.

        Returns (out, level loss or None); the loss uses the pre-convolution nodes.
        """
        B, D, h, w = s.shape
        nodes = to_tokens(s)  # (B, M, D)
        M = h * w
        if M < 2:
            return s, None if guided is None else level_triplet_loss(nodes, np.asarray(guided), self.margin)
        nbr = self.graph(nodes.data)
        k = nbr.shape[-1]
        gidx = nbr + (np.arange(B) * M)[:, None, None]
        neigh = gather_rows(nodes.reshape(B * M, D), gidx)  # (B, M, k, D)
        r = (neigh - nodes.reshape(B, M, 1, D)).max(axis=2)
        g = self.weights.w_agg(concat([nodes, r], axis=-1))
        out = nodes + self.weights.w_update(g).relu()
        loss = None
        if guided is not None:
            loss = level_triplet_loss(nodes, np.asarray(guided).reshape(B, M), self.margin)
        return from_tokens(out, h, w), loss


@dataclass
class ShapingTrial:
    edge_fraction_before: float
    edge_fraction_after: float
    distance_ratio_before: float
    distance_ratio_after: float


def intra_inter_ratio(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared distance between same-label pairs over that of different-label pairs."""
    labels = np.asarray(labels).reshape(-1)
    d = pairwise_sq_dists(features)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    return float(d[same].mean() / d[diff].mean())


def guidance_shaping_trial(seed: int, steps: int = 200, M: int = 64, D: int = 16, lr: float = 0.1,
                           separation: float = 0.5, k: int = DEFAULT_K, margin: float = DEFAULT_MARGIN) -> ShapingTrial:
    """Gradient descent on the triplet loss alone over two balanced Gaussian classes.

    Class 1 is shifted by ``separation`` times a random standard-normal direction.
    Records the same-label k-NN edge fraction and the intra/inter distance ratio before and after.
    """
    from .tensor import Tape, backward

    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], M // 2)
    rng.shuffle(labels)
    x = rng.normal(size=(M, D)) + separation * labels[:, None] * rng.normal(size=D)
    before = (same_class_edge_fraction(knn_indices(x, k), labels), intra_inter_ratio(x, labels))
    for _ in range(steps):
        t = Tensor(x, requires_grad=True)
        with Tape():
            grad = backward(level_triplet_loss(t, labels, margin), accumulate=False)[id(t)]
        x = x - lr * grad
    return ShapingTrial(before[0], same_class_edge_fraction(knn_indices(x, k), labels),
                        before[1], intra_inter_ratio(x, labels))
