"""Interaction graph over tracked + detected objects and its message passing.

Nodes are the M tracked and N detected objects; an undirected edge exists
between two nodes iff their 3-D centers are closer than a threshold.  Each
layer updates a node by summing a transform of itself, transforms of its
cross-frame neighbors, and transforms of its same-frame neighbors; ReLU
follows every layer except the final one.  Track-node and detection-node
updates share the per-layer weights.  Edge features are computed for
track-detection edges only, as the plain difference of node features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError

GNN_PREFIX = "gnn"


@dataclass
class InteractionGraph:
    """Distance-thresholded edges over M + N nodes.

    `td` holds each track-detection edge once as (track, det).  `tt` and `dd`
    hold same-frame edges in both orientations as (dst, src), ready for
    neighbor aggregation.
    """
    num_tracks: int
    num_dets: int
    threshold: float
    td: np.ndarray  # (P, 2) int
    tt: np.ndarray  # (Q, 2) int, both directions
    dd: np.ndarray  # (R, 2) int, both directions

    @property
    def num_td_edges(self) -> int:
        return len(self.td)


def _close_pairs(pos_a: np.ndarray, pos_b: np.ndarray, threshold: float) -> np.ndarray:
    if len(pos_a) == 0 or len(pos_b) == 0:
        return np.zeros((0, 2), dtype=np.intp)
    diff = pos_a[:, None, :] - pos_b[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    rows, cols = np.nonzero(dist < threshold)
    return np.stack([rows, cols], axis=1).astype(np.intp)


def build_graph(track_pos: np.ndarray, det_pos: np.ndarray,
                threshold: float) -> InteractionGraph:
    """Edges between all node pairs (track-track, det-det, track-det) whose
    centers are within `threshold` meters in 3-D; no self edges."""
    if threshold <= 0:
        raise ContractError("distance threshold must be positive")
    track_pos = np.asarray(track_pos, dtype=np.float64).reshape(-1, 3)
    det_pos = np.asarray(det_pos, dtype=np.float64).reshape(-1, 3)
    td = _close_pairs(track_pos, det_pos, threshold)
    tt = _close_pairs(track_pos, track_pos, threshold)
    tt = tt[tt[:, 0] != tt[:, 1]] if len(tt) else tt
    dd = _close_pairs(det_pos, det_pos, threshold)
    dd = dd[dd[:, 0] != dd[:, 1]] if len(dd) else dd
    return InteractionGraph(num_tracks=len(track_pos), num_dets=len(det_pos),
                            threshold=threshold, td=td, tt=tt, dd=dd)


def make_gnn(store: ad.ParamStore, rng: np.random.Generator, layers: int,
             dim: int = 64) -> None:
    for layer in range(layers):
        for k in (1, 2, 3):
            store.create(f"{GNN_PREFIX}.layer{layer}.sigma{k}.w", (dim, dim), rng)
            store.create(f"{GNN_PREFIX}.layer{layer}.sigma{k}.b", (dim,), init="zeros")


def _neighbor_sum(transformed: ad.Tensor, edges: np.ndarray, num_out: int,
                  src_col: int, dst_col: int) -> ad.Tensor | None:
    if len(edges) == 0:
        return None
    gathered = ad.take_rows(transformed, edges[:, src_col])
    return ad.segment_sum(gathered, edges[:, dst_col], num_segments=num_out)


def propagate(store: ad.ParamStore, graph: InteractionGraph, u0: ad.Tensor,
              v0: ad.Tensor, layers: int) -> tuple[ad.Tensor, ad.Tensor]:
    """Run `layers` rounds of aggregation; layers=0 returns the inputs."""
    u, v = u0, v0
    for layer in range(layers):
        s1w = store[f"{GNN_PREFIX}.layer{layer}.sigma1.w"]
        s1b = store[f"{GNN_PREFIX}.layer{layer}.sigma1.b"]
        s2w = store[f"{GNN_PREFIX}.layer{layer}.sigma2.w"]
        s2b = store[f"{GNN_PREFIX}.layer{layer}.sigma2.b"]
        s3w = store[f"{GNN_PREFIX}.layer{layer}.sigma3.w"]
        s3b = store[f"{GNN_PREFIX}.layer{layer}.sigma3.b"]

        u_new = ad.affine(u, s1w, s1b) if graph.num_tracks else u
        v_new = ad.affine(v, s1w, s1b) if graph.num_dets else v

        if graph.num_tracks and graph.num_dets:
            cross_u = _neighbor_sum(ad.affine(v, s2w, s2b), graph.td,
                                    graph.num_tracks, src_col=1, dst_col=0)
            if cross_u is not None:
                u_new = ad.add(u_new, cross_u)
            cross_v = _neighbor_sum(ad.affine(u, s2w, s2b), graph.td,
                                    graph.num_dets, src_col=0, dst_col=1)
            if cross_v is not None:
                v_new = ad.add(v_new, cross_v)
        if graph.num_tracks:
            same_u = _neighbor_sum(ad.affine(u, s3w, s3b), graph.tt,
                                   graph.num_tracks, src_col=1, dst_col=0)
            if same_u is not None:
                u_new = ad.add(u_new, same_u)
        if graph.num_dets:
            same_v = _neighbor_sum(ad.affine(v, s3w, s3b), graph.dd,
                                   graph.num_dets, src_col=1, dst_col=0)
            if same_v is not None:
                v_new = ad.add(v_new, same_v)

        if layer < layers - 1:
            u_new = ad.relu(u_new) if graph.num_tracks else u_new
            v_new = ad.relu(v_new) if graph.num_dets else v_new
        u, v = u_new, v_new
    return u, v


def edge_features(u_final: ad.Tensor, v_final: ad.Tensor,
                  graph: InteractionGraph) -> ad.Tensor:
    """Per track-detection edge: difference of the two node features."""
    if graph.num_td_edges == 0:
        dim = u_final.shape[1] if u_final.value.ndim == 2 else 0
        return ad.constant(np.zeros((0, dim)))
    u_rows = ad.take_rows(u_final, graph.td[:, 0])
    v_rows = ad.take_rows(v_final, graph.td[:, 1])
    return ad.subtract(u_rows, v_rows)
