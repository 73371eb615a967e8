"""Shared feature extraction: an LSTM over past trajectories and an MLP over
current detections.  Both emit 64-dimensional node features that seed the
interaction graph; their parameter sets are disjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .scenes import wrap_angle

FEATURE_DIM = 7
NODE_DIM = 64

TRACK_PREFIX = "enc.track"
DET_PREFIX = "enc.det"


def normalize_state(x, y, z, l, w, h, theta, reference) -> np.ndarray:
    """Per-frame input features: translated center, size, wrapped heading.

    The object's identity is never part of the feature.
    """
    rx, ry, rz = reference
    return np.array([x - rx, y - ry, z - rz, l, w, h, wrap_angle(theta)])


@dataclass
class PastTrajectory:
    """Up to `horizon` most-recent states of one tracked object.

    The validity mask marks a contiguous suffix: real states occupy the last
    `len(states)` slots, earlier slots are padding the encoder skips.
    """
    states: list = field(default_factory=list)

    def features(self, horizon: int, reference) -> tuple[np.ndarray, np.ndarray]:
        """(horizon, 7) padded features plus (horizon,) validity mask."""
        if not self.states:
            raise ContractError("trajectory has no valid frames")
        recent = self.states[-horizon:]
        feats = np.zeros((horizon, FEATURE_DIM))
        mask = np.zeros(horizon)
        offset = horizon - len(recent)
        for i, s in enumerate(recent):
            feats[offset + i] = normalize_state(s.x, s.y, s.z, s.l, s.w, s.h,
                                                s.theta, reference)
            mask[offset + i] = 1.0
        return feats, mask

    def last_xz(self) -> np.ndarray:
        s = self.states[-1]
        return np.array([s.x, s.z])

    def last_step_xz(self) -> np.ndarray:
        """Displacement of the most recent frame (zeros for length-1 tracks)."""
        if len(self.states) < 2:
            return np.zeros(2)
        a, b = self.states[-2], self.states[-1]
        return np.array([b.x - a.x, b.z - a.z])


# ---------------------------------------------------------------------------
# track encoder: 2-layer LSTM, hidden 64, final top-layer hidden state
# ---------------------------------------------------------------------------

def make_track_encoder(store: ad.ParamStore, rng: np.random.Generator,
                       input_dim: int = FEATURE_DIM, hidden: int = NODE_DIM,
                       layers: int = 2) -> None:
    in_dim = input_dim
    for k in range(1, layers + 1):
        store.create(f"{TRACK_PREFIX}.l{k}.w", (in_dim + hidden, 4 * hidden), rng)
        bias = store.create(f"{TRACK_PREFIX}.l{k}.b", (4 * hidden,), init="zeros")
        bias.value[hidden:2 * hidden] = 1.0  # open forget gates initially
        in_dim = hidden


def _lstm_cell(w: ad.Tensor, b: ad.Tensor, x: ad.Tensor, h: ad.Tensor,
               c: ad.Tensor, hidden: int) -> tuple[ad.Tensor, ad.Tensor]:
    # gate layout [i, f, o, g]: one sigmoid covers the three sigmoid gates
    gates = ad.affine(ad.concat([x, h], axis=1), w, b)
    ifo = ad.sigmoid(ad.slice_axis(gates, 1, 0, 3 * hidden))
    i = ad.slice_axis(ifo, 1, 0, hidden)
    f = ad.slice_axis(ifo, 1, hidden, 2 * hidden)
    o = ad.slice_axis(ifo, 1, 2 * hidden, 3 * hidden)
    g = ad.tanh(ad.slice_axis(gates, 1, 3 * hidden, 4 * hidden))
    c_new = ad.add(ad.multiply(f, c), ad.multiply(i, g))
    h_new = ad.multiply(o, ad.tanh(c_new))
    return h_new, c_new


def encode_tracks(store: ad.ParamStore, feats: np.ndarray, mask: np.ndarray,
                  layers: int = 2) -> ad.Tensor:
    """Encode (M, H, 7) padded trajectories into (M, 64) features.

    Masked steps pass the hidden state through unchanged, which is equivalent
    to running the LSTM on the valid suffix alone.
    """
    m, horizon, _ = feats.shape
    hidden = store[f"{TRACK_PREFIX}.l1.w"].shape[1] // 4
    if m == 0:
        return ad.constant(np.zeros((0, hidden)))
    params = [(store[f"{TRACK_PREFIX}.l{k}.w"], store[f"{TRACK_PREFIX}.l{k}.b"])
              for k in range(1, layers + 1)]
    hs = [ad.constant(np.zeros((m, hidden))) for _ in range(layers)]
    cs = [ad.constant(np.zeros((m, hidden))) for _ in range(layers)]
    for t in range(horizon):
        keep = ad.constant(mask[:, t:t + 1])
        drop = ad.constant(1.0 - mask[:, t:t + 1])
        x = ad.constant(feats[:, t, :])
        for k, (w, b) in enumerate(params):
            h_new, c_new = _lstm_cell(w, b, x, hs[k], cs[k], hidden)
            hs[k] = ad.add(ad.multiply(keep, h_new), ad.multiply(drop, hs[k]))
            cs[k] = ad.add(ad.multiply(keep, c_new), ad.multiply(drop, cs[k]))
            x = hs[k]
    return hs[-1]


# ---------------------------------------------------------------------------
# detection encoder: MLP 7 -> 64 -> 64, ReLU between layers
# ---------------------------------------------------------------------------

def make_det_encoder(store: ad.ParamStore, rng: np.random.Generator,
                     dims: tuple[int, ...] = (FEATURE_DIM, NODE_DIM, NODE_DIM)) -> None:
    for k in range(len(dims) - 1):
        store.create(f"{DET_PREFIX}.l{k + 1}.w", (dims[k], dims[k + 1]), rng)
        store.create(f"{DET_PREFIX}.l{k + 1}.b", (dims[k + 1],), init="zeros")


def encode_detections(store: ad.ParamStore, feats: np.ndarray,
                      layers: int = 2) -> ad.Tensor:
    """Encode (N, 7) detection features into (N, 64). Confidence is not an input."""
    n = feats.shape[0]
    if n == 0:
        out_dim = store[f"{DET_PREFIX}.l{layers}.w"].shape[1]
        return ad.constant(np.zeros((0, out_dim)))
    h = ad.constant(feats)
    for k in range(1, layers + 1):
        h = ad.affine(h, store[f"{DET_PREFIX}.l{k}.w"], store[f"{DET_PREFIX}.l{k}.b"])
        if k < layers:
            h = ad.relu(h)
    return h
