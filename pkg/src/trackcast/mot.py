"""Tracking head: affinity regression, affinity loss, optimal assignment, and
the track birth/death lifecycle.

The affinity between a tracked and a detected object is regressed from their
edge feature through two linear maps with a ReLU between and a sigmoid on
top.  Pairs with no graph edge are not associable: their affinity entry is
exactly zero.  Association maximizes total affinity with the Hungarian
algorithm; matches below an acceptance threshold are demoted to unmatched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoders import PastTrajectory
from .errors import ContractError
from .gnn import InteractionGraph
from .scenes import Detection, ObjectState

MOT_PREFIX = "mot"

BCE_EPS = 1e-7

TENTATIVE = "tentative"
CONFIRMED = "confirmed"
DEAD = "dead"


# ---------------------------------------------------------------------------
# affinity head
# ---------------------------------------------------------------------------

def make_affinity_head(store: ad.ParamStore, rng: np.random.Generator,
                       dim: int = 64) -> None:
    store.create(f"{MOT_PREFIX}.sigma3.w", (dim, dim), rng)
    store.create(f"{MOT_PREFIX}.sigma3.b", (dim,), init="zeros")
    store.create(f"{MOT_PREFIX}.sigma4.w", (dim, 1), rng)
    store.create(f"{MOT_PREFIX}.sigma4.b", (1,), init="zeros")


def affinity_scores(store: ad.ParamStore, edge_feats: ad.Tensor) -> ad.Tensor:
    """(P, 1) similarity scores in (0, 1), one per track-detection edge."""
    h = ad.relu(ad.affine(edge_feats, store[f"{MOT_PREFIX}.sigma3.w"],
                          store[f"{MOT_PREFIX}.sigma3.b"]))
    return ad.sigmoid(ad.affine(h, store[f"{MOT_PREFIX}.sigma4.w"],
                                store[f"{MOT_PREFIX}.sigma4.b"]))


def affinity_matrix(scores: ad.Tensor, graph: InteractionGraph) -> ad.Tensor:
    """Scatter edge scores into a dense (M, N) matrix; non-edge entries are 0."""
    m, n = graph.num_tracks, graph.num_dets
    if graph.num_td_edges == 0:
        return ad.constant(np.zeros((m, n)))
    flat_idx = graph.td[:, 0] * n + graph.td[:, 1]
    flat = ad.segment_sum(scores, flat_idx, num_segments=m * n)
    return ad.reshape(flat, (m, n))


# ---------------------------------------------------------------------------
# ground-truth affinity + affinity loss
# ---------------------------------------------------------------------------

@dataclass
class GtAffinity:
    """Binary ground-truth matrix with its one-hot row and column index sets.

    Rows/columns with no match (dead tracks, false-positive detections) are
    all-zero and excluded from the one-hot sets.
    """
    matrix: np.ndarray
    one_hot_rows: list[int]
    one_hot_cols: list[int]

    @classmethod
    def from_ids(cls, track_ids, det_src_ids) -> "GtAffinity":
        m, n = len(track_ids), len(det_src_ids)
        matrix = np.zeros((m, n))
        for i, tid in enumerate(track_ids):
            for j, src in enumerate(det_src_ids):
                if src is not None and src == tid:
                    matrix[i, j] = 1.0
        rows = [i for i in range(m) if matrix[i].sum() == 1.0]
        cols = [j for j in range(n) if matrix[:, j].sum() == 1.0]
        return cls(matrix, rows, cols)


def _clamp_unit(x: ad.Tensor, eps: float = BCE_EPS) -> ad.Tensor:
    low = ad.add(x, ad.relu(ad.subtract(ad.constant(eps), x)))
    return ad.subtract(low, ad.relu(ad.subtract(low, ad.constant(1.0 - eps))))


def _one_hot_ce(a: ad.Tensor, gt_rows: np.ndarray) -> ad.Tensor:
    """Softmax cross-entropy along each row of `a` against one-hot targets,
    each row's term scaled by 1 / row_length, summed over rows."""
    length = a.shape[1]
    e = ad.exp(a)
    log_z = ad.log(ad.sum_reduce(e, axis=1))
    hot = ad.sum_reduce(ad.multiply(a, ad.constant(gt_rows)), axis=1)
    per_row = ad.multiply(ad.subtract(log_z, hot), ad.constant(1.0 / length))
    return ad.sum_reduce(per_row)


def affinity_loss_parts(a: ad.Tensor, gt: GtAffinity
                        ) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """(total, bce, ce) affinity losses.

    BCE is averaged over every entry; CE is softmax cross-entropy over each
    one-hot row and column; both weighted 1.  Entries are clamped to
    [eps, 1-eps] before the logs.  Note the CE term has an irreducible floor
    because the softmax is taken over values in [0, 1].
    """
    m, n = a.shape
    if gt.matrix.shape != (m, n):
        raise ContractError(f"affinity shapes differ: {a.shape} vs {gt.matrix.shape}")
    ac = _clamp_unit(a)
    target = ad.constant(gt.matrix)
    pos = ad.multiply(target, ad.log(ac))
    neg = ad.multiply(ad.subtract(ad.constant(1.0), target),
                      ad.log(ad.subtract(ad.constant(1.0), ac)))
    bce = ad.multiply(ad.mean_reduce(ad.add(pos, neg)), ad.constant(-1.0))
    ce = ad.constant(0.0)
    if gt.one_hot_rows:
        rows = ad.take_rows(ac, gt.one_hot_rows)
        ce = ad.add(ce, _one_hot_ce(rows, gt.matrix[gt.one_hot_rows]))
    if gt.one_hot_cols:
        cols = ad.take_rows(ad.transpose(ac), gt.one_hot_cols)
        ce = ad.add(ce, _one_hot_ce(cols, gt.matrix.T[gt.one_hot_cols]))
    return ad.add(bce, ce), bce, ce


def affinity_loss(a: ad.Tensor, gt: GtAffinity) -> ad.Tensor:
    total, _, _ = affinity_loss_parts(a, gt)
    return total


def affinity_ce_floor(gt: GtAffinity) -> float:
    """The cross-entropy value a perfect (clamped) prediction would pay."""
    m, n = gt.matrix.shape
    floor = 0.0
    eps = BCE_EPS
    hi, lo = math.exp(1.0 - eps), math.exp(eps)
    for _ in gt.one_hot_rows:
        floor += math.log((hi + (n - 1) * lo) / hi) / n
    for _ in gt.one_hot_cols:
        floor += math.log((hi + (m - 1) * lo) / hi) / m
    return floor


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

def _hungarian_min(cost: np.ndarray) -> list[int]:
    """Optimal assignment of a square cost matrix (minimization).

    Classic O(n^3) shortest-augmenting-path formulation with dual potentials.
    Returns col_of_row.
    """
    n = cost.shape[0]
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)      # p[j]: row matched to column j (1-based, 0 = free)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, n + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def hungarian_max(matrix: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-total-value assignment on a rectangular matrix.

    The matrix is padded to square with zeros; pairs involving padding are
    discarded, so the result is a maximum assignment over real entries.
    """
    a = np.asarray(matrix, dtype=np.float64)
    m, n = a.shape
    if m == 0 or n == 0:
        return []
    size = max(m, n)
    padded = np.zeros((size, size))
    padded[:m, :n] = -a  # negate: maximize value = minimize cost
    col_of_row = _hungarian_min(padded)
    return [(i, col_of_row[i]) for i in range(m) if col_of_row[i] < n]


def associate(affinity: np.ndarray, accept_threshold: float
              ) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Hungarian association; matches under the threshold are demoted.

    Returns (matches, unmatched_track_rows, unmatched_det_cols), a partition
    of the rows and columns.
    """
    a = np.asarray(affinity, dtype=np.float64)
    m, n = a.shape
    matches = [(i, j) for i, j in hungarian_max(a) if a[i, j] >= accept_threshold]
    matched_rows = {i for i, _ in matches}
    matched_cols = {j for _, j in matches}
    unmatched_rows = [i for i in range(m) if i not in matched_rows]
    unmatched_cols = [j for j in range(n) if j not in matched_cols]
    return matches, unmatched_rows, unmatched_cols


# ---------------------------------------------------------------------------
# track lifecycle
# ---------------------------------------------------------------------------

@dataclass
class TrackState:
    """One maintained track: identity, history, and lifecycle counters."""
    track_id: int
    trajectory: PastTrajectory
    hit_streak: int = 1
    miss_count: int = 0
    status: str = TENTATIVE
    last_score: float = 1.0
    matched_now: bool = True
    born_frame: int = 0


def _extrapolated_state(track: TrackState) -> ObjectState:
    """Constant-velocity continuation from the last two states (or stationary)."""
    states = track.trajectory.states
    last = states[-1]
    if len(states) >= 2:
        prev = states[-2]
        dx, dy, dz = last.x - prev.x, last.y - prev.y, last.z - prev.z
    else:
        dx = dy = dz = 0.0
    return ObjectState(last.x + dx, last.y + dy, last.z + dz,
                       last.l, last.w, last.h, last.theta, last.obj_id)


class Tracker:
    """Birth/death memory: confirm after `f_min` consecutive hits, delete
    after more than `age_max` consecutive misses.  Track ids are never reused
    within a scene."""

    def __init__(self, f_min: int = 3, age_max: int = 2):
        self.f_min = f_min
        self.age_max = age_max
        self.tracks: list[TrackState] = []
        self._next_id = 1

    def active(self) -> list[TrackState]:
        """Alive tracks in stable order; affinity row i refers to active()[i]."""
        return self.tracks

    def step(self, detections: list[Detection],
             matches: list[tuple[int, int]],
             unmatched_tracks: list[int],
             unmatched_dets: list[int],
             frame: int) -> None:
        """Advance the lifecycle one frame given an association result."""
        seen_dets = [j for _, j in matches] + list(unmatched_dets)
        if len(set(seen_dets)) != len(seen_dets):
            raise ContractError("a detection was matched more than once")
        seen_tracks = [i for i, _ in matches] + list(unmatched_tracks)
        if len(set(seen_tracks)) != len(seen_tracks):
            raise ContractError("a track was matched more than once")

        if sorted(seen_tracks) != list(range(len(self.tracks))):
            raise ContractError("matches + unmatched tracks must cover all tracks")

        survivors: list[TrackState] = []
        for i, j in matches:
            track = self.tracks[i]
            det = detections[j]
            track.trajectory.states.append(ObjectState(
                det.x, det.y, det.z, det.l, det.w, det.h, det.theta,
                track.track_id))
            track.miss_count = 0
            track.hit_streak += 1
            track.matched_now = True
            track.last_score = det.confidence
            if track.status == TENTATIVE and track.hit_streak >= self.f_min:
                track.status = CONFIRMED
            survivors.append(track)
        for i in unmatched_tracks:
            track = self.tracks[i]
            track.miss_count += 1
            track.hit_streak = 0
            track.matched_now = False
            if track.miss_count > self.age_max:
                track.status = DEAD
                continue
            track.trajectory.states.append(_extrapolated_state(track))
            survivors.append(track)
        for j in unmatched_dets:
            det = detections[j]
            state = ObjectState(det.x, det.y, det.z, det.l, det.w, det.h,
                                det.theta, self._next_id)
            survivors.append(TrackState(
                track_id=self._next_id,
                trajectory=PastTrajectory([state]),
                hit_streak=1, miss_count=0, status=TENTATIVE,
                last_score=det.confidence, matched_now=True, born_frame=frame))
            self._next_id += 1
        self.tracks = survivors

    def reportable(self, frame: int) -> list[TrackState]:
        """Tracks emitted to the output stream at this frame.

        Confirmed tracks are reported while alive (including short coasting
        gaps); tentative tracks are reported only during the first `f_min`
        frames of the scene so a perfect start loses nothing to warm-up.
        """
        out = []
        for track in self.tracks:
            if track.status == CONFIRMED or (track.status == TENTATIVE
                                             and frame < self.f_min):
                out.append(track)
        return out
