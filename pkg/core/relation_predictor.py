import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import networkx as nx
import numpy as np
import pandas as pd
from scipy import sparse
from scipy.spatial import cKDTree

from core.errors import ShapeMismatchError
from core.geo import RoadGraph
from core.keypoint_extractor import KeypointSet
from core.nn import functional as F
from core.nn.layers import Linear, Module, MultiHeadSelfAttention
from core.nn.tensor import Tensor, as_tensor, get_default_dtype

FEATURE_STRIDE = 4


@dataclass
class KeypointFeatures:
    raw: Tensor  # (n, C) sampled from the enhanced keypoint representation
    enriched: Tensor  # (n, 2C) raw || attention output
    xy: np.ndarray  # (n, 2) tile-local (x, y) cells

    def __len__(self) -> int:
        return self.xy.shape[0]


@dataclass
class LinkCandidates:
    """Ordered keypoint pairs, stored column-wise; row p is the candidate (src[p], dst[p])."""

    src: np.ndarray
    dst: np.ndarray
    link_embed: Optional[Tensor] = None  # (P, C)
    pair_embed: Optional[Tensor] = None  # (P, 5C)
    enriched: Optional[Tensor] = None  # (P, 10C)
    probability: Optional[np.ndarray] = None  # (P,)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        if self.src.shape != self.dst.shape:
            raise ShapeMismatchError(f"candidate endpoints differ in length: {self.src.shape} vs {self.dst.shape}")
        if np.any(self.src == self.dst):
            raise ValueError("a link candidate cannot join a keypoint to itself")

    def __len__(self) -> int:
        return len(self.src)


@dataclass
class AttentionMask:
    """
    Link-attention mask over candidates. `allowed` holds the zero entries of the binary mask
    (candidate pairs that may attend to each other) as a sparse boolean matrix.
    """

    allowed: sparse.csr_matrix
    d_l: float

    @property
    def pairs(self):
        coo = self.allowed.tocoo()
        keep = coo.data != 0
        rows, cols = coo.row[keep], coo.col[keep]
        order = np.lexsort((cols, rows))
        return rows[order].astype(np.int64), cols[order].astype(np.int64)

    def dense(self) -> np.ndarray:
        """Binary mask with 1 where attention is blocked."""
        return 1 - self.allowed.toarray().astype(np.int64)

    def attended_pairs(self) -> int:
        return int(self.allowed.nnz)


@dataclass
class SampleSet:
    positives: np.ndarray  # (k, 2) keypoint index pairs
    hard_negatives: np.ndarray  # (m, 2)
    n_r: int
    d_kp: float

    def candidates(self) -> LinkCandidates:
        pairs = np.concatenate([self.positives, self.hard_negatives]).reshape(-1, 2)
        return LinkCandidates(pairs[:, 0], pairs[:, 1])

    def labels(self) -> np.ndarray:
        return np.concatenate([np.ones(len(self.positives)), np.zeros(len(self.hard_negatives))])


# ------------------ KEYPOINT-WISE ENRICHMENT ------------------

def _feature_map(e_ek: Tensor) -> Tensor:
    if e_ek.ndim == 4:
        if e_ek.shape[0] != 1:
            raise ShapeMismatchError(f"expected a single-tile feature map, got shape {e_ek.shape}")
        return e_ek[0]
    if e_ek.ndim != 3:
        raise ShapeMismatchError(f"feature map must be (h, w, C), got shape {e_ek.shape}")
    return e_ek


def enrich_keypoints(e_ek: Tensor, kps: KeypointSet, attn: MultiHeadSelfAttention, ablated: bool = False) -> KeypointFeatures:
    """
    Samples each keypoint's feature from the stride-4 map and concatenates it with the
    self-attention output over all keypoints (sinusoidal positions added). With the
    enrichment ablated the raw feature is repeated instead.
    """
    grid = _feature_map(e_ek)
    channels = grid.shape[2]
    xy = kps.xy()
    if len(xy) == 0:
        empty = Tensor(np.zeros((0, channels)))
        return KeypointFeatures(empty, Tensor(np.zeros((0, 2 * channels))), xy)
    raw = F.bilinear_sample(grid, xy / FEATURE_STRIDE)
    if ablated:
        return KeypointFeatures(raw, F.concat([raw, raw]), xy)
    positions = as_tensor(F.sinusoidal_encoding(xy, channels), raw.dtype)
    return KeypointFeatures(raw, F.concat([raw, attn(raw + positions)]), xy)


# ------------------ LINK EMBEDDING ------------------

def _sample_counts(lengths: np.ndarray) -> np.ndarray:
    return np.maximum(2, np.ceil(lengths).astype(np.int64) + 1)


def link_embeddings(grid: Tensor, a: np.ndarray, b: np.ndarray) -> Tensor:
    """
    Mean of bilinear samples along each segment a[p] -> b[p] (grid coordinates), taken at
    equal spacing of at most one cell, endpoints included.
    """
    grid = _feature_map(grid)
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0:
        return Tensor(np.zeros((0, grid.shape[2])))
    lengths = np.linalg.norm(b - a, axis=1)
    if np.any(lengths == 0):
        raise ValueError("link embedding needs two distinct endpoints")
    counts = _sample_counts(lengths)
    segment = np.repeat(np.arange(len(a)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    step = np.arange(len(segment)) - np.repeat(starts, counts)
    t = step / np.repeat(counts - 1, counts)
    points = a[segment] + t[:, None] * (b - a)[segment]
    sums = F.segment_sum(F.bilinear_sample(grid, points), segment, len(a))
    return sums * as_tensor((1.0 / counts)[:, None], sums.dtype)


def link_embedding(grid: Tensor, a, b) -> Tensor:
    """Single-segment form of `link_embeddings`; `a` and `b` are (x, y) grid coordinates."""
    return link_embeddings(grid, np.asarray([tuple(a)]), np.asarray([tuple(b)])).reshape(-1)


# ------------------ CANDIDATES AND MASK ------------------

def build_candidates(xy: np.ndarray, d_cand: Optional[float] = None) -> LinkCandidates:
    """All ordered pairs of distinct keypoints, optionally limited to Euclidean distance <= d_cand."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    n = len(xy)
    if n < 2:
        return LinkCandidates(np.zeros(0), np.zeros(0))
    if d_cand is None or math.isinf(d_cand):
        src, dst = np.nonzero(~np.eye(n, dtype=bool))
        return LinkCandidates(src, dst)
    pairs = cKDTree(xy).query_pairs(float(d_cand), output_type="ndarray").reshape(-1, 2)
    both = np.concatenate([pairs, pairs[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    return LinkCandidates(both[order, 0], both[order, 1])


def _near_matrix(xy: np.ndarray, d_l: float) -> sparse.csr_matrix:
    n = len(xy)
    pairs = cKDTree(xy).query_pairs(float(d_l), output_type="ndarray").reshape(-1, 2)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
    return sparse.csr_matrix((np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(n, n))


def attention_mask(cands: LinkCandidates, xy: np.ndarray, d_l: float) -> AttentionMask:
    """
    Candidates (i, j) and (k, l) may attend to each other iff some endpoint of one lies within
    d_l of some endpoint of the other. Built as E N E^T over the endpoint incidence E and the
    keypoint neighbourhood N, so cost follows the number of allowed pairs.
    """
    if d_l <= 0:
        raise ValueError(f"mask radius must be positive, got {d_l}")
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    p = len(cands)
    if p == 0:
        return AttentionMask(sparse.csr_matrix((0, 0), dtype=bool), d_l)
    idx = np.arange(p)
    incidence = sparse.csr_matrix(
        (np.ones(2 * p, dtype=np.int64), (np.concatenate([idx, idx]), np.concatenate([cands.src, cands.dst]))),
        shape=(p, len(xy)),
    )
    allowed = (incidence @ _near_matrix(xy, d_l) @ incidence.T) > 0
    return AttentionMask(allowed.tocsr(), d_l)


def neighbourhood_bound(cands: LinkCandidates, xy: np.ndarray, d_l: float) -> int:
    """
    Upper bound on allowed entries per mask row: with m the largest keypoint neighbourhood,
    a row reaches at most 2m keypoints and each keypoint ends at most 2(n - 1) candidates.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(cands) == 0:
        return 0
    m = int(np.asarray(_near_matrix(xy, d_l).sum(axis=1)).max())
    return 4 * m * (len(xy) - 1)


# ------------------ LINK-WISE ENRICHMENT AND CLASSIFICATION ------------------

class RelationPredictor(Module):
    """Keypoint attention, link attention and the link classifier, sharing one forward path for training and inference."""

    def __init__(self, channels: int = 64, kp_heads: int = 4, link_heads: int = 4, hidden: int = 128,
                 seed: int = 0, ablate_keypoints: bool = False, ablate_links: bool = False):
        self.channels = channels
        self.ablate_keypoints = ablate_keypoints
        self.ablate_links = ablate_links
        self.kp_attn = MultiHeadSelfAttention("relation.kp_attn", channels, kp_heads, seed)
        self.link_proj = Linear("relation.link_proj", 5 * channels, channels, seed)
        self.link_attn = MultiHeadSelfAttention("relation.link_attn", channels, link_heads, seed, out_dim=5 * channels)
        self.fc1 = Linear("relation.fc1", 10 * channels, hidden, seed)
        self.fc2 = Linear("relation.fc2", hidden, 1, seed)

    def enrich_links(self, cands: LinkCandidates, feats: KeypointFeatures, mask: AttentionMask) -> LinkCandidates:
        cands.pair_embed = F.concat([F.take(feats.enriched, cands.src), F.take(feats.enriched, cands.dst),
                                     cands.link_embed])
        projected = self.link_proj(cands.pair_embed)
        if self.ablate_links:
            # each candidate sees only itself
            mixed = self.link_attn.out(self.link_attn.value(projected))
        else:
            rows, cols = mask.pairs
            mixed = self.link_attn.sparse(projected, rows, cols)
        cands.enriched = F.concat([cands.pair_embed, mixed])
        return cands

    def classify_links(self, cands: LinkCandidates) -> Tensor:
        logits = self.fc2(F.relu(self.fc1(cands.enriched)))
        probs = F.sigmoid(logits).reshape(len(cands))
        cands.probability = probs.data.astype(np.float64)
        return probs

    def forward(self, e_ek: Tensor, kps: KeypointSet, cands: LinkCandidates, d_l: float) -> Tensor:
        """Link probabilities (P,) for `cands` over keypoints `kps` of one tile."""
        if len(cands) == 0:
            cands.probability = np.zeros(0)
            return Tensor(np.zeros(0))
        feats = enrich_keypoints(e_ek, kps, self.kp_attn, ablated=self.ablate_keypoints)
        xy = feats.xy
        cands.link_embed = link_embeddings(e_ek, xy[cands.src] / FEATURE_STRIDE, xy[cands.dst] / FEATURE_STRIDE)
        mask = attention_mask(cands, xy, d_l)
        self.enrich_links(cands, feats, mask)
        return self.classify_links(cands)


def build_relation_predictor(settings: Dict[str, Any]) -> RelationPredictor:
    model = settings["model"]
    return RelationPredictor(
        channels=model["channels"],
        kp_heads=model["keypoint_heads"],
        link_heads=model["link_heads"],
        hidden=model["classifier_hidden"],
        seed=settings["seed"],
        ablate_keypoints=settings["ablations"]["ke"],
        ablate_links=settings["ablations"]["le"],
    )


# ------------------ SAMPLING AND LOSS ------------------

def sample_pairs(gt: RoadGraph, n_r: int = 3, d_kp: float = 6.0,
                 vertex_ids: Optional[Sequence[int]] = None) -> SampleSet:
    """
    Positive and hard-negative keypoint pairs of a (densified) ground-truth graph.

    Indices refer to `vertex_ids` (default: all vertices in id order). Hop distances come from
    BFS on the undirected view of the whole graph. Positives are ordered pairs one hop apart;
    hard negatives are pairs 2..n_r hops apart or closer than 3 * d_kp, excluding positives.
    """
    ids = list(gt.sorted_vertex_ids() if vertex_ids is None else vertex_ids)
    n = len(ids)
    if n < 2:
        empty = np.zeros((0, 2), dtype=np.int64)
        return SampleSet(empty, empty.copy(), n_r, d_kp)
    index = {vid: k for k, vid in enumerate(ids)}
    undirected = gt.to_networkx(directed=False)

    hops = np.full((n, n), -1, dtype=np.int64)
    for k, vid in enumerate(ids):
        for other, hop in nx.single_source_shortest_path_length(undirected, vid, cutoff=n_r).items():
            j = index.get(other)
            if j is not None:
                hops[k, j] = hop

    xy = np.array([gt.position(vid) for vid in ids], dtype=np.float64)
    dist = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=2)
    off_diag = ~np.eye(n, dtype=bool)
    positive = (hops == 1) & off_diag
    negative = off_diag & ~positive & (((hops >= 2) & (hops <= n_r)) | (dist < 3 * d_kp))
    return SampleSet(np.argwhere(positive).astype(np.int64), np.argwhere(negative).astype(np.int64), n_r, d_kp)


def relation_loss(probs: Tensor, labels: np.ndarray, n_keypoints: int) -> Tensor:
    """BCE summed over sampled pairs and divided by the number of ground-truth keypoints."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(labels) == 0 or n_keypoints == 0:
        return Tensor(np.zeros((), dtype=get_default_dtype()))
    return F.bce_loss(probs, labels, denominator=n_keypoints)


def total_loss(l_kp: Tensor, l_rel: Tensor, lambda2: float = 1.0) -> Tensor:
    if not lambda2:
        return l_kp
    return l_kp + l_rel * lambda2


# ------------------ DIAGNOSTICS ------------------

def dump_candidates_csv(cands: LinkCandidates, xy: np.ndarray, path: str,
                        labels: Optional[np.ndarray] = None) -> Path:
    """One row per candidate: endpoints, length, predicted probability and label when known."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    frame = pd.DataFrame({
        "src": cands.src,
        "dst": cands.dst,
        "distance": np.linalg.norm(xy[cands.dst] - xy[cands.src], axis=1) if len(cands) else np.zeros(0),
        "probability": cands.probability if cands.probability is not None else np.full(len(cands), np.nan),
    })
    if labels is not None:
        frame["label"] = np.asarray(labels).astype(np.int64)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.6f")
    logging.info(f"Wrote {len(frame)} link candidates to {out}")
    return out
