"""Synthetic multi-agent driving scenes: ground truth, noisy detections, JSONL I/O.

Scenes are the desk-scale stand-in for full driving datasets.  Agents move on
the ground plane (y fixed per agent), pick one maneuver at a mid-scene
decision point (the multi-modality downstream forecasting must capture), and
may be born or die mid-scene.  All randomness flows from the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DataError

TWO_PI = 2.0 * math.pi

MANEUVERS = ("straight", "left", "right", "stop")

SCENE_FORMAT_VERSION = 1


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.fmod(theta + math.pi, TWO_PI)
    if r <= 0.0:
        r += TWO_PI
    return r - math.pi


@dataclass(frozen=True)
class ObjectState:
    """One ground-truth box: center, size, heading, identity."""
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float
    obj_id: int

    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def box7(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.theta])


@dataclass(frozen=True)
class Detection:
    """One unassociated detector box plus a confidence score.

    `src` records which ground-truth identity produced the box (None for a
    false positive); it exists for supervision and evaluation, the tracker
    never reads it.
    """
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float
    confidence: float
    src: int | None = None

    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def box7(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.theta])


@dataclass
class SceneConfig:
    """Generator knobs. Defaults give mild, well-separated car-scale scenes."""
    agents_min: int = 4
    agents_max: int = 6
    duration_s: float = 6.0
    frame_rate: float = 10.0
    speed_min: float = 3.0
    speed_max: float = 8.0
    maneuver_mix: dict = field(default_factory=lambda: {
        "straight": 0.4, "left": 0.25, "right": 0.25, "stop": 0.1})
    spawn_extent: float = 40.0      # half-size of the square spawn region, meters
    spawn_separation: float = 10.0  # min pairwise spawn distance, meters
    fixed_heading: float | None = None  # all agents share this heading if set
    decision_frac: float = 0.5      # maneuver kicks in at this fraction of the scene
    turn_rate: float = 0.7854       # rad/s while turning (90 degrees in 2 s)
    turn_total: float = 1.5708      # total heading change of a turn, rad
    stop_duration_s: float = 1.5    # time to brake to a standstill
    late_birth_prob: float = 0.0    # chance an agent enters mid-scene
    early_death_prob: float = 0.0   # chance an agent leaves mid-scene


@dataclass
class NoiseConfig:
    """Detector corruption model."""
    center_sigma: float = 0.0
    heading_sigma: float = 0.0
    miss_rate: float = 0.0
    fp_rate: float = 0.0


@dataclass
class Scene:
    """Ordered ground-truth frames plus (optional) per-frame detections."""
    frame_rate: float
    frames: list  # list[list[ObjectState]]
    detections: list  # list[list[Detection]]
    seed: int
    config: dict

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def bounds(self, margin: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounds of all ground-truth centers, with margin."""
        centers = np.array([[s.x, s.y, s.z] for frame in self.frames for s in frame])
        if centers.size == 0:
            return np.array([-margin] * 3), np.array([margin] * 3)
        return centers.min(axis=0) - margin, centers.max(axis=0) + margin

    def track_of(self, obj_id: int) -> dict[int, ObjectState]:
        """Frame-indexed states of one identity."""
        out = {}
        for f, frame in enumerate(self.frames):
            for s in frame:
                if s.obj_id == obj_id:
                    out[f] = s
        return out


def _validate_config(cfg: SceneConfig) -> None:
    if cfg.agents_min < 1 or cfg.agents_max < cfg.agents_min:
        raise ConfigError("agent count range must satisfy 1 <= min <= max")
    if cfg.duration_s <= 0 or cfg.frame_rate <= 0:
        raise ConfigError("duration and frame rate must be positive")
    if cfg.speed_min < 0 or cfg.speed_max < cfg.speed_min:
        raise ConfigError("speed range must satisfy 0 <= min <= max")
    if not cfg.maneuver_mix:
        raise ConfigError("maneuver mix is empty")
    unknown = set(cfg.maneuver_mix) - set(MANEUVERS)
    if unknown:
        raise ConfigError(f"unknown maneuvers {sorted(unknown)}")
    if any(v < 0 for v in cfg.maneuver_mix.values()) or sum(cfg.maneuver_mix.values()) <= 0:
        raise ConfigError("maneuver weights must be non-negative and not all zero")


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Simulate one scene. Deterministic given (config, seed)."""
    _validate_config(config)
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    num_frames = int(round(config.duration_s * config.frame_rate))
    if num_frames < 2:
        raise ConfigError("scene too short: needs at least 2 frames")
    dt = 1.0 / config.frame_rate
    decision_frame = int(num_frames * config.decision_frac)

    n_agents = int(rng.integers(config.agents_min, config.agents_max + 1))
    names = sorted(config.maneuver_mix)
    weights = np.array([config.maneuver_mix[n] for n in names], dtype=np.float64)
    weights = weights / weights.sum()

    agents = []
    spawns: list[np.ndarray] = []
    for obj_id in range(1, n_agents + 1):
        length = float(rng.uniform(3.6, 5.0))
        width = float(rng.uniform(1.6, 2.0))
        height = float(rng.uniform(1.4, 1.8))
        speed = float(rng.uniform(config.speed_min, config.speed_max))
        if config.fixed_heading is not None:
            heading = wrap_angle(config.fixed_heading)
        else:
            heading = wrap_angle(float(rng.uniform(-math.pi, math.pi)))
        for _ in range(200):
            pos = rng.uniform(-config.spawn_extent, config.spawn_extent, size=2)
            if all(np.linalg.norm(pos - p) >= config.spawn_separation for p in spawns):
                break
        else:
            raise ConfigError("could not place agents at the requested separation")
        spawns.append(pos)
        birth = 0
        death = num_frames
        if rng.random() < config.late_birth_prob:
            birth = int(rng.integers(1, max(2, num_frames // 3)))
        if rng.random() < config.early_death_prob:
            death = int(rng.integers(num_frames - num_frames // 3, num_frames))
        maneuver = names[int(rng.choice(len(names), p=weights))]
        agents.append({
            "id": obj_id, "size": (length, width, height), "speed": speed,
            "heading": heading, "pos": pos.copy(), "birth": birth,
            "death": max(death, birth + 1), "maneuver": maneuver,
        })

    frames: list[list[ObjectState]] = [[] for _ in range(num_frames)]
    for agent in agents:
        x, z = float(agent["pos"][0]), float(agent["pos"][1])
        heading = agent["heading"]
        speed = agent["speed"]
        length, width, height = agent["size"]
        y = height / 2.0
        turned = 0.0
        decel = speed / config.stop_duration_s if config.stop_duration_s > 0 else speed
        for f in range(num_frames):
            if agent["birth"] <= f < agent["death"]:
                frames[f].append(ObjectState(x, y, z, length, width, height,
                                             wrap_angle(heading), agent["id"]))
            # integrate to the next frame
            if f >= max(decision_frame, agent["birth"]):
                m = agent["maneuver"]
                if m == "left" and turned < config.turn_total:
                    step = min(config.turn_rate * dt, config.turn_total - turned)
                    heading = wrap_angle(heading + step)
                    turned += step
                elif m == "right" and turned < config.turn_total:
                    step = min(config.turn_rate * dt, config.turn_total - turned)
                    heading = wrap_angle(heading - step)
                    turned += step
                elif m == "stop":
                    speed = max(0.0, speed - decel * dt)
            x += speed * dt * math.cos(heading)
            z += speed * dt * math.sin(heading)

    return Scene(frame_rate=config.frame_rate, frames=frames,
                 detections=[[] for _ in range(num_frames)],
                 seed=seed, config=asdict(config))


def corrupt_to_detections(scene: Scene, noise: NoiseConfig, seed: int) -> Scene:
    """Fill `scene.detections` with noisy boxes; returns a new Scene."""
    for name in ("miss_rate", "fp_rate"):
        rate = getattr(noise, name)
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"{name} must be in [0, 1)")
    if noise.center_sigma < 0 or noise.heading_sigma < 0:
        raise ConfigError("noise sigmas must be non-negative")
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    lo, hi = scene.bounds()
    detections: list[list[Detection]] = []
    for frame in scene.frames:
        dets: list[Detection] = []
        for state in frame:
            if noise.miss_rate > 0 and rng.random() < noise.miss_rate:
                continue
            if noise.center_sigma > 0:
                offset = rng.normal(0.0, noise.center_sigma, size=3)
                conf = min(1.0, math.exp(-float(np.linalg.norm(offset)) / noise.center_sigma))
            else:
                offset = np.zeros(3)
                conf = 1.0
            dtheta = rng.normal(0.0, noise.heading_sigma) if noise.heading_sigma > 0 else 0.0
            dets.append(Detection(
                x=state.x + offset[0], y=state.y + offset[1], z=state.z + offset[2],
                l=state.l, w=state.w, h=state.h,
                theta=wrap_angle(state.theta + dtheta),
                confidence=conf, src=state.obj_id))
        if noise.fp_rate > 0 and frame:
            for _ in range(int(rng.binomial(len(frame), noise.fp_rate))):
                pos = lo + (hi - lo) * rng.random(3)
                dets.append(Detection(
                    x=float(pos[0]), y=float(pos[1]), z=float(pos[2]),
                    l=float(rng.uniform(3.2, 5.2)), w=float(rng.uniform(1.5, 2.1)),
                    h=float(rng.uniform(1.3, 1.9)),
                    theta=wrap_angle(float(rng.uniform(-math.pi, math.pi))),
                    confidence=float(rng.uniform(0.0, 0.4)), src=None))
        detections.append(dets)
    return Scene(frame_rate=scene.frame_rate, frames=scene.frames,
                 detections=detections, seed=scene.seed, config=scene.config)


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------
# line 1: {"version", "frame_rate", "seed", "config"}
# then per frame: {"frame", "gt": [{id,x,y,z,l,w,h,theta}], "det": [{...,conf,src}]}

def write_scene(scene: Scene, path) -> None:
    with open(path, "w") as fh:
        meta = {"version": SCENE_FORMAT_VERSION, "frame_rate": scene.frame_rate,
                "seed": scene.seed, "config": scene.config}
        fh.write(json.dumps(meta) + "\n")
        for f, frame in enumerate(scene.frames):
            record = {
                "frame": f,
                "gt": [{"id": s.obj_id, "x": s.x, "y": s.y, "z": s.z,
                        "l": s.l, "w": s.w, "h": s.h, "theta": s.theta}
                       for s in frame],
                "det": [{"x": d.x, "y": d.y, "z": d.z, "l": d.l, "w": d.w,
                         "h": d.h, "theta": d.theta, "conf": d.confidence,
                         "src": d.src}
                        for d in scene.detections[f]],
            }
            fh.write(json.dumps(record) + "\n")


def _require(record: dict, keys, line_no: int):
    for key in keys:
        if key not in record:
            raise DataError(f"line {line_no}: missing field '{key}'")
    return [record[k] for k in keys]


def read_scene(path) -> Scene:
    """Parse a scene file; unknown extra fields are accepted and ignored."""
    frames: list[list[ObjectState]] = []
    detections: list[list[Detection]] = []
    meta = None
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise DataError(f"line {line_no}: expected a JSON object")
            if line_no == 1:
                _require(record, ("version", "frame_rate", "seed"), line_no)
                if record["version"] != SCENE_FORMAT_VERSION:
                    raise DataError(
                        f"line 1: unsupported scene version {record['version']}")
                meta = record
                continue
            frame_idx, gt, det = _require(record, ("frame", "gt", "det"), line_no)
            if frame_idx != len(frames):
                raise DataError(
                    f"line {line_no}: frame {frame_idx} out of order "
                    f"(expected {len(frames)})")
            try:
                states = [ObjectState(g["x"], g["y"], g["z"], g["l"], g["w"],
                                      g["h"], g["theta"], g["id"]) for g in gt]
                dets = [Detection(d["x"], d["y"], d["z"], d["l"], d["w"], d["h"],
                                  d["theta"], d["conf"], d.get("src"))
                        for d in det]
            except (KeyError, TypeError) as exc:
                raise DataError(f"line {line_no}: malformed record ({exc})") from exc
            frames.append(states)
            detections.append(dets)
    if meta is None:
        raise DataError("line 1: missing metadata record")
    return Scene(frame_rate=meta["frame_rate"], frames=frames,
                 detections=detections, seed=meta["seed"],
                 config=meta.get("config", {}))


def scene_config_from_dict(data: dict) -> SceneConfig:
    """Build a SceneConfig rejecting unknown keys."""
    allowed = {f.name for f in fields(SceneConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
    return SceneConfig(**data)


def noise_config_from_dict(data: dict) -> NoiseConfig:
    allowed = {f.name for f in fields(NoiseConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown noise config keys: {sorted(unknown)}")
    return NoiseConfig(**data)
