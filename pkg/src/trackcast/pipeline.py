"""End-to-end orchestration: dataset generation, two-stage training, parallel
per-frame inference (track + forecast in the same pass), and evaluation.

Per frame the model encodes tracks and detections, runs the interaction
graph, and then branches: the tracking path regresses affinities and
associates, while the forecasting path decodes futures from the
pre-association node features.  Forecasts therefore never depend on the
current frame's association result.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import cvae, dsf, encoders, gnn, metrics, mot
from .encoders import FEATURE_DIM, NODE_DIM, PastTrajectory
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .scenes import (Detection, NoiseConfig, Scene, SceneConfig,
                     corrupt_to_detections, generate_scene,
                     noise_config_from_dict, read_scene,
                     scene_config_from_dict, write_scene)

REFERENCE_POINT = (0.0, 0.0, 0.0)
COND_DIM = NODE_DIM + FEATURE_DIM  # node feature + normalized last state

# sub-stream tags for seed derivation
_STREAM_INIT = 0
_STREAM_TRAIN = 1
_STREAM_DSF = 2
_STREAM_SAMPLE = 3
_STREAM_CORRUPT = 4

ARTIFACT_NAMES = {
    "stage1": "ckpt_stage1.bin",
    "dsf": "ckpt_dsf.bin",
    "tracks": "tracks.jsonl",
    "forecasts": "forecasts.jsonl",
    "report": "report.json",
    "curves": "curves.csv",
}


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, stream]))


@dataclass
class RunConfig:
    """Every knob of the pipeline; loaded from JSON, unknown keys rejected."""
    # horizons and model
    h_past: int = 10
    t_future: int = 30
    edge_threshold: float = 10.0     # graph distance gate, meters
    gnn_layers: int = 2
    samples_per_agent: int = 20
    latent_dim: int = 16
    alpha: float = 1.0
    omega: float | None = None       # None: median heuristic at stage-2 start
    quality_radius: float = 2.0
    # tracker lifecycle
    f_min: int = 3
    age_max: int = 2
    accept_threshold: float = 0.5
    # optimization
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    dsf_epochs: int = 60
    frames_per_scene: int = 0        # per-epoch cap, 0 = all eligible frames
    use_mot_head: bool = True
    use_forecast_head: bool = True
    sampler: str = "dsf"             # "dsf" | "random"
    seed: int = 0
    # data
    data_dir: str = "data"
    num_scenes: int = 20
    scene: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    # evaluation
    iou_threshold: float = 0.25
    recall_steps: int = 40

    def __post_init__(self):
        if self.sampler not in ("dsf", "random"):
            raise ConfigError(f"unknown sampler '{self.sampler}'")
        if self.h_past < 1 or self.t_future < 1:
            raise ConfigError("horizons must be positive")
        if self.gnn_layers < 0:
            raise ConfigError("gnn_layers must be non-negative")
        # validate nested sections eagerly
        scene_config_from_dict(self.scene)
        noise_config_from_dict(self.noise)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def scene_config(self) -> SceneConfig:
        return scene_config_from_dict(self.scene)

    def noise_config(self) -> NoiseConfig:
        return noise_config_from_dict(self.noise)

    def betas(self) -> tuple[float, float]:
        return (self.adam_beta1, self.adam_beta2)


# ---------------------------------------------------------------------------
# dataset handling
# ---------------------------------------------------------------------------

def generate_dataset(config: RunConfig, out_dir) -> list[Path]:
    """Write `num_scenes` corrupted scenes under `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_cfg = config.scene_config()
    noise_cfg = config.noise_config()
    paths = []
    for i in range(config.num_scenes):
        scene_seed = (config.seed * 100003 + i) & 0xFFFFFFFFFFFFFFFF
        scene = generate_scene(scene_cfg, scene_seed)
        scene = corrupt_to_detections(scene, noise_cfg, scene_seed ^ 0x9E3779B9)
        path = out_dir / f"scene_{i:04d}.jsonl"
        write_scene(scene, path)
        paths.append(path)
    return paths


def load_dataset(data_dir) -> list[Scene]:
    paths = sorted(Path(data_dir).glob("*.jsonl"))
    if not paths:
        raise DataError(f"no scene files under {data_dir}")
    return [read_scene(p) for p in paths]


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

def build_model(config: RunConfig) -> ad.ParamStore:
    store = ad.ParamStore()
    rng = _rng(config.seed, _STREAM_INIT)
    encoders.make_track_encoder(store, rng)
    encoders.make_det_encoder(store, rng)
    gnn.make_gnn(store, rng, layers=config.gnn_layers, dim=NODE_DIM)
    mot.make_affinity_head(store, rng, dim=NODE_DIM)
    cvae.make_cvae(store, rng, latent_dim=config.latent_dim, cond_dim=COND_DIM)
    dsf.make_dsf(store, rng, in_dim=NODE_DIM, hidden=128,
                 k=config.samples_per_agent, latent_dim=config.latent_dim)
    return store


def checkpoint_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# per-frame inputs
# ---------------------------------------------------------------------------

@dataclass
class FrameInputs:
    """Everything one frame's forward pass consumes, as plain arrays."""
    track_feats: np.ndarray    # (M, H, 7)
    track_mask: np.ndarray     # (M, H)
    track_pos: np.ndarray      # (M, 3) most recent valid center
    track_summary: np.ndarray  # (M, 7) normalized last state
    track_last_xz: np.ndarray  # (M, 2)
    track_start_disp: np.ndarray  # (M, 2)
    track_ids: list
    det_feats: np.ndarray      # (N, 7)
    det_pos: np.ndarray        # (N, 3)

    @property
    def num_tracks(self) -> int:
        return len(self.track_ids)

    @property
    def num_dets(self) -> int:
        return self.det_feats.shape[0]


def _inputs_from_trajectories(trajectories: list[PastTrajectory], ids: list,
                              detections: list[Detection],
                              h_past: int) -> FrameInputs:
    m = len(trajectories)
    feats = np.zeros((m, h_past, FEATURE_DIM))
    mask = np.zeros((m, h_past))
    pos = np.zeros((m, 3))
    summary = np.zeros((m, FEATURE_DIM))
    last_xz = np.zeros((m, 2))
    start_disp = np.zeros((m, 2))
    for i, traj in enumerate(trajectories):
        feats[i], mask[i] = traj.features(h_past, REFERENCE_POINT)
        last = traj.states[-1]
        pos[i] = last.center()
        summary[i] = encoders.normalize_state(last.x, last.y, last.z, last.l,
                                              last.w, last.h, last.theta,
                                              REFERENCE_POINT)
        last_xz[i] = traj.last_xz()
        start_disp[i] = traj.last_step_xz()
    n = len(detections)
    det_feats = np.zeros((n, FEATURE_DIM))
    det_pos = np.zeros((n, 3))
    for j, det in enumerate(detections):
        det_feats[j] = encoders.normalize_state(det.x, det.y, det.z, det.l,
                                                det.w, det.h, det.theta,
                                                REFERENCE_POINT)
        det_pos[j] = det.center()
    return FrameInputs(feats, mask, pos, summary, last_xz, start_disp,
                       list(ids), det_feats, det_pos)


def training_inputs(scene: Scene, frame: int, config: RunConfig
                    ) -> tuple[FrameInputs, list, np.ndarray, list[int]]:
    """Teacher-forced inputs at `frame`: ground-truth pasts as tracks, the
    frame's detections, plus ground-truth futures.

    Returns (inputs, det_src_ids, futures (M, T, 2), rows_with_full_future).
    """
    past_ids = [s.obj_id for s in scene.frames[frame - 1]] if frame >= 1 else []
    trajectories = []
    for obj_id in past_ids:
        track = scene.track_of(obj_id)
        states = [track[f] for f in range(max(0, frame - config.h_past), frame)
                  if f in track]
        trajectories.append(PastTrajectory(states))
    detections = scene.detections[frame]
    inputs = _inputs_from_trajectories(trajectories, past_ids, detections,
                                       config.h_past)
    det_src = [d.src for d in detections]
    m = len(past_ids)
    futures = np.zeros((m, config.t_future, 2))
    full_rows = []
    for i, obj_id in enumerate(past_ids):
        track = scene.track_of(obj_id)
        states = [track.get(frame + 1 + dt) for dt in range(config.t_future)]
        if all(s is not None for s in states):
            futures[i] = [[s.x, s.z] for s in states]
            full_rows.append(i)
    return inputs, det_src, futures, full_rows


def tracker_inputs(tracks: list[mot.TrackState], detections: list[Detection],
                   config: RunConfig) -> FrameInputs:
    return _inputs_from_trajectories([t.trajectory for t in tracks],
                                     [t.track_id for t in tracks],
                                     detections, config.h_past)


def eligible_frames(scene: Scene, config: RunConfig) -> list[int]:
    """Frames with a full past window and a full future horizon."""
    return list(range(config.h_past, scene.num_frames - config.t_future))


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def frame_features(store: ad.ParamStore, config: RunConfig,
                   inputs: FrameInputs
                   ) -> tuple[ad.Tensor, ad.Tensor, gnn.InteractionGraph]:
    u0 = encoders.encode_tracks(store, inputs.track_feats, inputs.track_mask)
    v0 = encoders.encode_detections(store, inputs.det_feats)
    graph = gnn.build_graph(inputs.track_pos, inputs.det_pos,
                            config.edge_threshold)
    u_final, v_final = gnn.propagate(store, graph, u0, v0, config.gnn_layers)
    return u_final, v_final, graph


def predict_affinity(store: ad.ParamStore, u_final: ad.Tensor,
                     v_final: ad.Tensor,
                     graph: gnn.InteractionGraph) -> ad.Tensor:
    if graph.num_td_edges == 0:
        return ad.constant(np.zeros((graph.num_tracks, graph.num_dets)))
    edges = gnn.edge_features(u_final, v_final, graph)
    scores = mot.affinity_scores(store, edges)
    return mot.affinity_matrix(scores, graph)


def _condition(u_final: ad.Tensor, inputs: FrameInputs,
               rows: list[int] | None = None) -> ad.Tensor:
    summary = inputs.track_summary
    u = u_final
    if rows is not None:
        u = ad.take_rows(u_final, rows)
        summary = summary[rows]
    return ad.concat([u, ad.constant(summary)], axis=1)


# ---------------------------------------------------------------------------
# stage-1 training: affinity + forecasting through the shared backbone
# ---------------------------------------------------------------------------

def _frame_losses(store: ad.ParamStore, config: RunConfig, scene: Scene,
                  frame: int, eps_rng: np.random.Generator
                  ) -> tuple[ad.Tensor | None, dict]:
    parts_log = {"aff": 0.0, "bce": 0.0, "ce_floor": 0.0, "cvae": 0.0}
    inputs, det_src, futures, full_rows = training_inputs(scene, frame, config)
    if inputs.num_tracks == 0:
        return None, parts_log
    u_final, v_final, graph = frame_features(store, config, inputs)
    parts = []
    if config.use_mot_head and inputs.num_dets > 0:
        a = predict_affinity(store, u_final, v_final, graph)
        gt = mot.GtAffinity.from_ids(inputs.track_ids, det_src)
        aff, bce, _ = mot.affinity_loss_parts(a, gt)
        parts.append(aff)
        parts_log["aff"] = aff.item()
        parts_log["bce"] = bce.item()
        parts_log["ce_floor"] = mot.affinity_ce_floor(gt)
    if config.use_forecast_head and full_rows:
        cond = _condition(u_final, inputs, full_rows)
        eps = eps_rng.standard_normal((len(full_rows), config.latent_dim))
        loss_cvae, _, _ = cvae.elbo_loss(
            store, futures[full_rows], cond,
            inputs.track_start_disp[full_rows],
            inputs.track_last_xz[full_rows], config.alpha, eps)
        parts.append(loss_cvae)
        parts_log["cvae"] = loss_cvae.item()
    if not parts:
        return None, parts_log
    total = parts[0]
    for extra in parts[1:]:
        total = ad.add(total, extra)
    return total, parts_log


def _epoch_frames(scene_frames: list[list[int]], epoch: int,
                  cap: int) -> list[tuple[int, int]]:
    """(scene_index, frame) pairs for one epoch, rotating through the
    eligible frames when a per-scene cap is set."""
    chosen = []
    for scene_idx, frames in enumerate(scene_frames):
        if not frames:
            continue
        if cap and len(frames) > cap:
            offset = (epoch * cap) % len(frames)
            picks = [frames[(offset + i) % len(frames)] for i in range(cap)]
        else:
            picks = frames
        chosen.extend((scene_idx, f) for f in picks)
    return chosen


def train_stage1(config: RunConfig, train_scenes: list[Scene],
                 log=None) -> tuple[ad.ParamStore, list[dict]]:
    """Joint training of both heads through the shared encoders and GNN.

    One eligible frame is one optimization step.  Raises DivergenceError
    (carrying the last finite parameter snapshot) if a loss or gradient goes
    non-finite.
    """
    store = build_model(config)
    eps_rng = _rng(config.seed, _STREAM_TRAIN)
    scene_frames = [eligible_frames(s, config) for s in train_scenes]
    if not any(scene_frames):
        raise ConfigError("no eligible training frames: scenes are too short "
                          "for the configured horizons")
    history = []
    last_good = store.values()
    for epoch in range(config.epochs):
        sums = {"aff": 0.0, "bce": 0.0, "ce_floor": 0.0, "cvae": 0.0}
        steps = 0
        try:
            for scene_idx, frame in _epoch_frames(scene_frames, epoch,
                                                  config.frames_per_scene):
                loss, parts = _frame_losses(
                    store, config, train_scenes[scene_idx], frame, eps_rng)
                if loss is None:
                    continue
                ad.backward(loss)
                store.adam_step(lr=config.learning_rate, betas=config.betas(),
                                eps=config.adam_eps)
                for key in sums:
                    sums[key] += parts[key]
                steps += 1
        except (ad.NumericError, FloatingPointError) as exc:
            raise DivergenceError(f"training diverged in epoch {epoch}: {exc}",
                                  last_good_values=last_good) from exc
        last_good = store.values()
        entry = {"epoch": epoch, "steps": steps}
        entry.update({key: val / max(steps, 1) for key, val in sums.items()})
        history.append(entry)
        if log:
            log(f"epoch {epoch:4d}  aff {entry['aff']:.4f}  "
                f"bce {entry['bce']:.4f}  cvae {entry['cvae']:.4f}")
    return store, history


# ---------------------------------------------------------------------------
# stage-2 training: diversity sampler only, backbone frozen
# ---------------------------------------------------------------------------

def _warmup_omega(store: ad.ParamStore, config: RunConfig,
                  scenes: list[Scene]) -> float:
    """1 over the median pairwise squared distance of random decoded samples."""
    rng = _rng(config.seed, _STREAM_DSF)
    distances = []
    for scene in scenes:
        frames = eligible_frames(scene, config)
        if not frames:
            continue
        frame = frames[len(frames) // 2]
        inputs, _, futures, full_rows = training_inputs(scene, frame, config)
        if not full_rows:
            continue
        u_final, _, _ = frame_features(store, config, inputs)
        cond = _condition(u_final, inputs, full_rows)
        samples = cvae.sample_random(
            store, cond.value, inputs.track_start_disp[full_rows],
            inputs.track_last_xz[full_rows], config.t_future,
            config.samples_per_agent, config.latent_dim, rng)
        flat = samples.reshape(samples.shape[0], samples.shape[1], -1)
        for agent in flat:
            diff = agent[:, None, :] - agent[None, :, :]
            sq = np.sum(diff * diff, axis=2)
            distances.extend(sq[np.triu_indices(len(agent), k=1)].tolist())
        if len(distances) > 4000:
            break
    median = float(np.median(distances)) if distances else 0.0
    return 1.0 / median if median > 1e-12 else 1.0


def train_stage2_dsf(config: RunConfig, store: ad.ParamStore,
                     train_scenes: list[Scene],
                     log=None) -> tuple[ad.ParamStore, list[dict], float]:
    """Optimize only `dsf.*` parameters; everything else is frozen and
    verified bit-identical afterwards."""
    frozen_before = {name: store[name].value.copy() for name in store.names()
                     if not name.startswith(dsf.DSF_PREFIX)}
    omega = config.omega if config.omega is not None else _warmup_omega(
        store, config, train_scenes)
    if log:
        log(f"similarity scale omega = {omega:.6g}")
    scene_frames = [eligible_frames(s, config) for s in train_scenes]
    k = config.samples_per_agent
    history = []
    last_good = store.values()
    for epoch in range(config.dsf_epochs):
        loss_sum = 0.0
        steps = 0
        try:
            for scene_idx, frame in _epoch_frames(scene_frames, epoch,
                                                  config.frames_per_scene):
                scene = train_scenes[scene_idx]
                inputs, _, futures, full_rows = training_inputs(
                    scene, frame, config)
                if not full_rows:
                    continue
                u_final, _, _ = frame_features(store, config, inputs)
                u_sel = ad.take_rows(u_final, full_rows)
                cond = _condition(u_final, inputs, full_rows)
                latents = dsf.dsf_forward(store, u_sel, k, config.latent_dim)
                rep = np.repeat(np.arange(len(full_rows)), k)
                cond_rep = ad.take_rows(cond, rep)
                decoded = cvae.decode(
                    store, latents, cond_rep,
                    inputs.track_start_disp[full_rows][rep],
                    inputs.track_last_xz[full_rows][rep], config.t_future)
                per_agent = []
                for idx, row in enumerate(full_rows):
                    sample_rows = list(range(idx * k, (idx + 1) * k))
                    per_agent.append((
                        ad.take_rows(decoded, sample_rows),
                        ad.take_rows(latents, sample_rows),
                        futures[row].reshape(-1)))
                loss = dsf.dsf_loss(per_agent, omega, config.quality_radius)
                ad.backward(loss)
                store.adam_step(lr=config.learning_rate, betas=config.betas(),
                                eps=config.adam_eps, prefix=dsf.DSF_PREFIX)
                loss_sum += loss.item()
                steps += 1
        except (ad.NumericError, FloatingPointError) as exc:
            raise DivergenceError(f"sampler training diverged in epoch "
                                  f"{epoch}: {exc}",
                                  last_good_values=last_good) from exc
        last_good = store.values()
        entry = {"epoch": epoch, "dsf": loss_sum / max(steps, 1), "steps": steps}
        history.append(entry)
        if log:
            log(f"epoch {epoch:4d}  dsf {entry['dsf']:.4f}")
    for name, before in frozen_before.items():
        if store[name].value.tobytes() != before.tobytes():
            raise ContractError(f"frozen parameter '{name}' changed during "
                                "sampler training")
    return store, history, omega


# ---------------------------------------------------------------------------
# inference: tracking and forecasting in the same pass
# ---------------------------------------------------------------------------

def _forecast_samples(store: ad.ParamStore, config: RunConfig,
                      inputs: FrameInputs, u_final: ad.Tensor,
                      rng: np.random.Generator) -> np.ndarray:
    """K future trajectories per live track, (M, K, T, 2)."""
    m = inputs.num_tracks
    k = config.samples_per_agent
    cond = _condition(u_final, inputs)
    if config.sampler == "dsf":
        latents = dsf.dsf_forward(store, u_final, k, config.latent_dim)
        rep = np.repeat(np.arange(m), k)
        decoded = cvae.decode(store, latents, ad.take_rows(cond, rep),
                              inputs.track_start_disp[rep],
                              inputs.track_last_xz[rep], config.t_future)
        return decoded.value.reshape(m, k, config.t_future, 2)
    return cvae.sample_random(store, cond.value, inputs.track_start_disp,
                              inputs.track_last_xz, config.t_future, k,
                              config.latent_dim, rng)


def run_inference(config: RunConfig, store: ad.ParamStore, scene: Scene,
                  out_dir=None, seed: int | None = None,
                  corrupt_frame: int | None = None) -> dict:
    """Track and forecast one scene.

    Forecasts are produced from pre-association state every frame, for every
    track alive entering the frame.  `corrupt_frame` shuffles that frame's
    association result after forecasting (a test hook for the parallelism
    contract).  Writes tracks.jsonl / forecasts.jsonl when `out_dir` is set.
    """
    seed = config.seed if seed is None else seed
    sample_rng = _rng(seed, _STREAM_SAMPLE)
    corrupt_rng = _rng(seed, _STREAM_CORRUPT)
    tracker = mot.Tracker(f_min=config.f_min, age_max=config.age_max)
    track_lines: list[dict] = []
    forecast_lines: list[dict] = []
    for frame, detections in enumerate(scene.detections):
        tracks = tracker.active()
        inputs = tracker_inputs(tracks, detections, config)
        m, n = inputs.num_tracks, inputs.num_dets
        affinity = np.zeros((m, n))
        if m or n:
            u_final, v_final, graph = frame_features(store, config, inputs)
            if m:
                samples = _forecast_samples(store, config, inputs, u_final,
                                            sample_rng)
                for i, track in enumerate(tracks):
                    for s in range(config.samples_per_agent):
                        forecast_lines.append({
                            "frame": frame, "id": track.track_id,
                            "sample_index": s,
                            "trajectory": [[float(x), float(z)]
                                           for x, z in samples[i, s]],
                        })
            if m and n:
                affinity = predict_affinity(store, u_final, v_final,
                                            graph).value
        matches, un_tracks, un_dets = mot.associate(affinity,
                                                    config.accept_threshold)
        if corrupt_frame == frame and len(matches) > 1:
            det_side = [j for _, j in matches]
            perm = corrupt_rng.permutation(len(det_side))
            matches = [(matches[i][0], det_side[perm[i]])
                       for i in range(len(matches))]
        tracker.step(detections, matches, un_tracks, un_dets, frame)
        for track in tracker.reportable(frame):
            state = track.trajectory.states[-1]
            track_lines.append({
                "frame": frame, "id": track.track_id,
                "x": state.x, "y": state.y, "z": state.z,
                "l": state.l, "w": state.w, "h": state.h,
                "theta": state.theta, "score": track.last_score,
            })
    result = {"tracks": track_lines, "forecasts": forecast_lines}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for key in ("tracks", "forecasts"):
            with open(out_dir / ARTIFACT_NAMES[key], "w") as fh:
                for line in result[key]:
                    fh.write(json.dumps(line) + "\n")
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def gt_frames_of(scene: Scene) -> list[list[tuple[int, np.ndarray]]]:
    return [[(s.obj_id, s.box7()) for s in frame] for frame in scene.frames]


def _read_jsonl(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from exc
    return records


def _tracks_by_frame(records: list[dict], num_frames: int):
    """Scored per-frame prediction lists; frames outside range are an error."""
    bad = sorted({r["frame"] for r in records
                  if not 0 <= r["frame"] < num_frames})
    if bad:
        raise DataError(f"tracking output refers to frames outside the scene: "
                        f"{bad}")
    frames = [[] for _ in range(num_frames)]
    for r in records:
        box = np.array([r["x"], r["y"], r["z"], r["l"], r["w"], r["h"],
                        r["theta"]])
        frames[r["frame"]].append((r["id"], box, r["score"]))
    return frames


def _forecast_entries(scene: Scene, forecast_records: list[dict],
                      pred_frames, config: RunConfig) -> list:
    """Pair emitted forecasts with ground-truth futures.

    A forecast at frame t for predicted track p is scored against the future
    of the ground-truth object CLEAR-matched to p at frame t; forecasts of
    unmatched tracks or with truncated futures are skipped.
    """
    num_frames = scene.num_frames
    bad = sorted({r["frame"] for r in forecast_records
                  if not 0 <= r["frame"] < num_frames})
    if bad:
        raise DataError(f"forecast output refers to frames outside the scene: "
                        f"{bad}")
    matches_per_frame = _clear_correspondences(
        gt_frames_of(scene), [[(pid, b) for pid, b, _ in fr] for fr in pred_frames],
        config.iou_threshold)
    grouped: dict[tuple[int, int], dict[int, list]] = {}
    for r in forecast_records:
        grouped.setdefault((r["frame"], r["id"]), {})[r["sample_index"]] = \
            r["trajectory"]
    entries = []
    for (frame, pid), samples_by_idx in sorted(grouped.items()):
        gt_id = matches_per_frame[frame].get(pid)
        if gt_id is None:
            continue
        track = scene.track_of(gt_id)
        future_states = [track.get(frame + 1 + dt)
                         for dt in range(config.t_future)]
        if any(s is None for s in future_states):
            continue
        gt_future = np.array([[s.x, s.z] for s in future_states])
        samples = np.array([samples_by_idx[i]
                            for i in sorted(samples_by_idx)])
        entries.append((samples, gt_future))
    return entries


def _clear_correspondences(gt_frames, pred_frames, iou_threshold):
    """Per-frame pred_id -> gt_id maps under the CLEAR matching rules."""
    out = []
    prev: dict = {}
    for gts, preds in zip(gt_frames, pred_frames):
        gt_ids = [g for g, _ in gts]
        pred_ids = [p for p, _ in preds]
        iou = np.zeros((len(gts), len(preds)))
        for i, (_, gbox) in enumerate(gts):
            for j, (_, pbox) in enumerate(preds):
                iou[i, j] = metrics.iou3d(gbox, pbox)
        matched: dict[int, int] = {}
        used: set[int] = set()
        for i, gid in enumerate(gt_ids):
            pid = prev.get(gid)
            if pid is not None and pid in pred_ids:
                j = pred_ids.index(pid)
                if iou[i, j] >= iou_threshold and j not in used:
                    matched[i] = j
                    used.add(j)
        free_gt = [i for i in range(len(gts)) if i not in matched]
        free_pred = [j for j in range(len(preds)) if j not in used]
        if free_gt and free_pred:
            sub = iou[np.ix_(free_gt, free_pred)]
            for a, b in mot.hungarian_max(sub):
                if sub[a, b] >= iou_threshold:
                    matched[free_gt[a]] = free_pred[b]
                    used.add(free_pred[b])
        prev = {gt_ids[i]: pred_ids[j] for i, j in matched.items()}
        out.append({pred_ids[j]: gt_ids[i] for i, j in matched.items()})
    return out


def evaluate_run(config: RunConfig, scene: Scene, tracks_path,
                 forecasts_path=None, out_dir=None) -> dict:
    """Score one scene's tracking (and, when present, forecasting) output."""
    pred_frames = _tracks_by_frame(_read_jsonl(tracks_path), scene.num_frames)
    report, curve = metrics.mot_report([(gt_frames_of(scene), pred_frames)],
                                       recall_steps=config.recall_steps,
                                       iou_threshold=config.iou_threshold)
    if forecasts_path is not None and Path(forecasts_path).exists():
        entries = _forecast_entries(scene, _read_jsonl(forecasts_path),
                                    pred_frames, config)
        if entries:
            report["forecast"] = metrics.forecast_metrics(entries)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics.write_report(out_dir / ARTIFACT_NAMES["report"], report)
        metrics.write_curves(out_dir / ARTIFACT_NAMES["curves"], curve)
    return report


# ---------------------------------------------------------------------------
# suite-level helpers (ablations, acceptance)
# ---------------------------------------------------------------------------

def tracking_suite(config: RunConfig, store: ad.ParamStore,
                   scenes: list[Scene], seed: int | None = None
                   ) -> tuple[dict, list[dict]]:
    """Run inference over a scene list and report aggregated MOT metrics."""
    sequences = []
    for i, scene in enumerate(scenes):
        result = run_inference(config, store, scene,
                               seed=(config.seed if seed is None else seed) + i)
        pred_frames = _tracks_by_frame(result["tracks"], scene.num_frames)
        sequences.append((gt_frames_of(scene), pred_frames))
    return metrics.mot_report(sequences, recall_steps=config.recall_steps,
                              iou_threshold=config.iou_threshold)


def association_accuracy(config: RunConfig, store: ad.ParamStore,
                         scenes: list[Scene]) -> float:
    """Teacher-forced association accuracy: the fraction of ground-truth
    (track, detection) pairs the affinity head + Hungarian recovers."""
    correct = total = 0
    for scene in scenes:
        for frame in eligible_frames(scene, config):
            inputs, det_src, _, _ = training_inputs(scene, frame, config)
            if inputs.num_tracks == 0 or inputs.num_dets == 0:
                continue
            u_final, v_final, graph = frame_features(store, config, inputs)
            affinity = predict_affinity(store, u_final, v_final, graph).value
            matches, _, _ = mot.associate(affinity, config.accept_threshold)
            gt_pairs = {(i, j) for i, tid in enumerate(inputs.track_ids)
                        for j, src in enumerate(det_src) if src == tid}
            correct += len(set(matches) & gt_pairs)
            total += len(gt_pairs)
    return correct / total if total else 0.0


def forecast_protocol(config: RunConfig, store: ad.ParamStore,
                      scenes: list[Scene], sampler: str | None = None,
                      seed: int | None = None, frame_stride: int = 1) -> dict:
    """Teacher-forced forecasting evaluation: ground-truth pasts in, K samples
    per agent out, scored against ground-truth futures."""
    sampler = config.sampler if sampler is None else sampler
    if sampler not in ("dsf", "random"):
        raise ConfigError(f"unknown sampler '{sampler}'")
    rng = _rng(config.seed if seed is None else seed, _STREAM_SAMPLE)
    entries = []
    for scene in scenes:
        for frame in eligible_frames(scene, config)[::frame_stride]:
            inputs, _, futures, full_rows = training_inputs(scene, frame, config)
            if not full_rows:
                continue
            u_final, _, _ = frame_features(store, config, inputs)
            u_sel = ad.take_rows(u_final, full_rows)
            cond = _condition(u_final, inputs, full_rows)
            k = config.samples_per_agent
            if sampler == "dsf":
                latents = dsf.dsf_forward(store, u_sel, k, config.latent_dim)
                rep = np.repeat(np.arange(len(full_rows)), k)
                decoded = cvae.decode(store, latents, ad.take_rows(cond, rep),
                                      inputs.track_start_disp[full_rows][rep],
                                      inputs.track_last_xz[full_rows][rep],
                                      config.t_future)
                samples = decoded.value.reshape(len(full_rows), k,
                                                config.t_future, 2)
            else:
                samples = cvae.sample_random(
                    store, cond.value, inputs.track_start_disp[full_rows],
                    inputs.track_last_xz[full_rows], config.t_future, k,
                    config.latent_dim, rng)
            for idx, row in enumerate(full_rows):
                entries.append((samples[idx], futures[row]))
    if not entries:
        raise DataError("no agents with full futures to evaluate")
    return metrics.forecast_metrics(entries)
