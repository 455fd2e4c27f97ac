"""Scene data model: agent-centric transforms, sampling, file ingestion.

Scenarios are 50 steps at 10 Hz: steps 0..19 observed (19 is "current"),
steps 20..49 future.  All geometry is float64; relative quantities feed the
32-bit model.

Scene file schema (JSON lines, one scenario per line):

    {"schema_version": 1, "scene_id": str, "av_index": int,
     "agents": [{"id": int, "xy": [[x, y] * (20|50)], "mask": [bool * same]}],
     "lanes": [{"pts": [[x, y] * 10], "intersection": bool,
                "control": bool, "turn": "none"|"left"|"right"}]}

Records with 20 steps are inference inputs (no future ground truth).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from fimp.errors import SceneFormatError

T_HISTORY = 20
T_FUTURE = 30
T_TOTAL = T_HISTORY + T_FUTURE
CURRENT = T_HISTORY - 1
DT = 0.1

SCHEMA_VERSION = 1
TURN_KINDS = ("none", "left", "right")

# Lane segment feature: start (2) + end-start (2) + attribute multi-hot
# (intersection, control, left, right, no-turn).
LANE_ATTR_DIM = 5
LANE_FEATURE_DIM = 4 + LANE_ATTR_DIM
SEGMENTS_PER_LANE = 9


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    r = math.atan2(math.sin(theta), math.cos(theta))
    return math.pi if r <= -math.pi else r


@dataclass(frozen=True)
class LanePolyline:
    points: np.ndarray  # [10, 2]
    intersection: bool = False
    control: bool = False
    turn: str = "none"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (10, 2):
            raise SceneFormatError(f"lane needs exactly 10 control points, got {pts.shape}")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise SceneFormatError("lane has coincident consecutive points")
        if self.turn not in TURN_KINDS:
            raise SceneFormatError(f"unknown turn kind {self.turn!r}")
        object.__setattr__(self, "points", pts)

    def attr_onehot(self) -> np.ndarray:
        return np.array([
            float(self.intersection),
            float(self.control),
            float(self.turn == "left"),
            float(self.turn == "right"),
            float(self.turn == "none"),
        ])


@dataclass(frozen=True)
class AgentTrack:
    agent_id: int
    xy: np.ndarray    # [50, 2] global meters
    mask: np.ndarray  # [50] bool, True where the position is valid

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if xy.shape != (T_TOTAL, 2) or mask.shape != (T_TOTAL,):
            raise SceneFormatError(
                f"track needs {T_TOTAL} steps, got xy {xy.shape} mask {mask.shape}")
        if not np.isfinite(xy[mask]).all():
            raise SceneFormatError(f"agent {self.agent_id}: non-finite masked-valid position")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "mask", mask)

    @property
    def valid_now(self) -> bool:
        return bool(self.mask[CURRENT])

    @property
    def position(self) -> np.ndarray:
        return self.xy[CURRENT]

    @property
    def has_full_future(self) -> bool:
        return bool(self.mask[T_HISTORY:].all())


@dataclass(frozen=True)
class RelativePose:
    translation: np.ndarray  # [2], meters in the target agent's frame
    heading: float           # radians, wrapped to (-pi, pi]

    def encode(self) -> np.ndarray:
        """[dx, dy, cos(dtheta), sin(dtheta)] input encoding."""
        return np.array([self.translation[0], self.translation[1],
                         math.cos(self.heading), math.sin(self.heading)])


@dataclass(frozen=True)
class SceneFrame:
    scene_id: str
    agents: tuple
    lanes: tuple
    av_index: int

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "lanes", tuple(self.lanes))
        if not 0 <= self.av_index < len(self.agents):
            raise SceneFormatError(
                f"av_index {self.av_index} out of range for {len(self.agents)} agents")
        if not self.agents[self.av_index].valid_now:
            raise SceneFormatError("reference (AV) agent is invalid at the current step")

    @property
    def num_agents(self) -> int:
        return len(self.agents)


@dataclass
class AgentLocalView:
    """Per-agent agent-centric inputs."""

    agent_index: int
    heading: float
    position: np.ndarray
    motion: np.ndarray        # [T_HISTORY, 2] deltas in agent frame
    motion_pad: np.ndarray    # [T_HISTORY] True where the delta is padding
    neighbors: np.ndarray     # agent indices within the history radius
    neighbor_poses: list      # RelativePose per neighbor
    lane_segments: np.ndarray = field(
        default_factory=lambda: np.zeros((0, LANE_FEATURE_DIM)))


# -- frames -----------------------------------------------------------------

def _rotation(heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, -s], [s, c]])


def to_agent_frame(point: np.ndarray, position: np.ndarray, heading: float) -> np.ndarray:
    """Translate by -position, then rotate by -heading.  Broadcasts over
    leading axes of `point`."""
    rel = np.asarray(point, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    return rel @ _rotation(heading)  # R(-h) x == x @ R(h)


def from_agent_frame(point: np.ndarray, position: np.ndarray, heading: float) -> np.ndarray:
    return np.asarray(point, dtype=np.float64) @ _rotation(heading).T + np.asarray(
        position, dtype=np.float64)


def current_heading(track: AgentTrack) -> float:
    """Direction of the last valid nonzero observed motion delta; 0 if the
    agent never moved."""
    xy, mask = track.xy, track.mask
    for t in range(CURRENT, 0, -1):
        if mask[t] and mask[t - 1]:
            d = xy[t] - xy[t - 1]
            if d @ d > 1e-16:
                return wrap_angle(math.atan2(d[1], d[0]))
    return 0.0


def motion_vectors(track: AgentTrack) -> tuple[np.ndarray, np.ndarray]:
    """Agent-frame motion deltas for the observed window.

    Returns (vectors [T_HISTORY, 2], padding [T_HISTORY]).  Step t holds
    p[t] - p[t-1]; step 0 has no predecessor and is always padding, as is
    any step with an invalid endpoint.
    """
    if not track.valid_now:
        raise SceneFormatError(f"agent {track.agent_id} invalid at the current step")
    heading = current_heading(track)
    rot = _rotation(heading)
    vecs = np.zeros((T_HISTORY, 2))
    pad = np.ones(T_HISTORY, dtype=bool)
    for t in range(1, T_HISTORY):
        if track.mask[t] and track.mask[t - 1]:
            vecs[t] = (track.xy[t] - track.xy[t - 1]) @ rot
            pad[t] = False
    if pad.all():
        # Stationary-from-the-start agents still expose the current step.
        pad[CURRENT] = False
    return vecs, pad


def relative_pose(target: AgentTrack, other: AgentTrack) -> RelativePose:
    """Pose of `other` expressed in `target`'s agent-centric frame."""
    if not (target.valid_now and other.valid_now):
        raise SceneFormatError("relative_pose needs both agents valid at the current step")
    th = current_heading(target)
    trans = to_agent_frame(other.position, target.position, th)
    return RelativePose(trans, wrap_angle(current_heading(other) - th))


def lane_segments(lane: LanePolyline, position: np.ndarray, heading: float) -> np.ndarray:
    """The 9 consecutive-point segments of a lane in an agent's frame.

    Each row: [start_x, start_y, dx, dy, attr * 5].
    """
    pts = to_agent_frame(lane.points, position, heading)
    starts = pts[:-1]
    deltas = pts[1:] - pts[:-1]
    attrs = np.tile(lane.attr_onehot(), (SEGMENTS_PER_LANE, 1))
    return np.concatenate([starts, deltas, attrs], axis=1)


# -- sampling ---------------------------------------------------------------

def sample_neighbors(scene: SceneFrame, target: int, radius: float) -> list[int]:
    """Agents (excluding `target`) valid now and within `radius` (inclusive)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = scene.agents[target].position
    out = []
    for j, other in enumerate(scene.agents):
        if j == target or not other.valid_now:
            continue
        d = other.position - center
        if d @ d <= radius * radius:
            out.append(j)
    return out


def sample_lanes(scene: SceneFrame, target: int, radius: float) -> list[int]:
    """Lanes with any control point within `radius` of the target agent."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = scene.agents[target].position
    out = []
    for w, lane in enumerate(scene.lanes):
        d = lane.points - center
        if (np.einsum("ij,ij->i", d, d) <= radius * radius).any():
            out.append(w)
    return out


def build_local_view(scene: SceneFrame, target: int, agent_radius: float = 50.0,
                     lane_radius: float = 50.0) -> AgentLocalView:
    track = scene.agents[target]
    heading = current_heading(track)
    vecs, pad = motion_vectors(track)
    nbrs = sample_neighbors(scene, target, agent_radius)
    poses = [relative_pose(track, scene.agents[j]) for j in nbrs]
    lanes = sample_lanes(scene, target, lane_radius)
    if lanes:
        segs = np.concatenate(
            [lane_segments(scene.lanes[w], track.position, heading) for w in lanes])
    else:
        segs = np.zeros((0, LANE_FEATURE_DIM))
    return AgentLocalView(
        agent_index=target, heading=heading, position=track.position.copy(),
        motion=vecs, motion_pad=pad, neighbors=np.array(nbrs, dtype=np.int64),
        neighbor_poses=poses, lane_segments=segs)


def rigid_transform_scene(scene: SceneFrame, angle: float,
                          translation: np.ndarray) -> SceneFrame:
    """Apply one global rotation+translation to every position in the scene."""
    rot = _rotation(angle).T  # row-vector convention: x' = x @ R^T
    t = np.asarray(translation, dtype=np.float64)
    agents = tuple(
        replace(a, xy=a.xy @ rot + t) for a in scene.agents)
    lanes = tuple(
        replace(l, points=l.points @ rot + t) for l in scene.lanes)
    return SceneFrame(scene.scene_id, agents, lanes, scene.av_index)


# -- file I/O ---------------------------------------------------------------

def _require(record: dict, key: str, where: str):
    if key not in record:
        raise SceneFormatError(f"{where}: missing field {key!r}")
    return record[key]


def scene_to_record(scene: SceneFrame, include_future: bool = True) -> dict:
    steps = T_TOTAL if include_future else T_HISTORY
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene.scene_id,
        "av_index": scene.av_index,
        "agents": [
            {"id": int(a.agent_id),
             "xy": [[float(x), float(y)] for x, y in a.xy[:steps]],
             "mask": [bool(m) for m in a.mask[:steps]]}
            for a in scene.agents
        ],
        "lanes": [
            {"pts": [[float(x), float(y)] for x, y in l.points],
             "intersection": bool(l.intersection),
             "control": bool(l.control),
             "turn": l.turn}
            for l in scene.lanes
        ],
    }


def scene_from_record(record: dict, where: str = "record") -> SceneFrame:
    version = _require(record, "schema_version", where)
    if version != SCHEMA_VERSION:
        raise SceneFormatError(f"{where}: unknown schema_version {version}")
    scene_id = str(_require(record, "scene_id", where))
    av_index = _require(record, "av_index", where)
    if not isinstance(av_index, int):
        raise SceneFormatError(f"{where}: av_index must be an integer")
    agents = []
    for ai, a in enumerate(_require(record, "agents", where)):
        aw = f"{where}, agent {ai}"
        xy = np.asarray(_require(a, "xy", aw), dtype=np.float64)
        mask = np.asarray(_require(a, "mask", aw), dtype=bool)
        if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] not in (T_HISTORY, T_TOTAL):
            raise SceneFormatError(
                f"{aw}: expected {T_HISTORY} or {T_TOTAL} xy steps, got {xy.shape}")
        if mask.shape != (xy.shape[0],):
            raise SceneFormatError(f"{aw}: mask length {mask.shape} != xy steps")
        if xy.shape[0] == T_HISTORY:  # inference input: future absent
            xy = np.concatenate([xy, np.zeros((T_FUTURE, 2))])
            mask = np.concatenate([mask, np.zeros(T_FUTURE, dtype=bool)])
        try:
            agents.append(AgentTrack(int(_require(a, "id", aw)), xy, mask))
        except SceneFormatError as e:
            raise SceneFormatError(f"{aw}: {e}") from e
    lanes = []
    for li, l in enumerate(_require(record, "lanes", where)):
        lw = f"{where}, lane {li}"
        try:
            lanes.append(LanePolyline(
                np.asarray(_require(l, "pts", lw), dtype=np.float64),
                bool(l.get("intersection", False)),
                bool(l.get("control", False)),
                str(l.get("turn", "none"))))
        except SceneFormatError as e:
            raise SceneFormatError(f"{lw}: {e}") from e
    try:
        return SceneFrame(scene_id, tuple(agents), tuple(lanes), av_index)
    except SceneFormatError as e:
        raise SceneFormatError(f"{where}: {e}") from e


def save_scene_file(path, scenes, include_future: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for scene in scenes:
            f.write(json.dumps(scene_to_record(scene, include_future)))
            f.write("\n")


def load_scene_file(path) -> list[SceneFrame]:
    scenes = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise SceneFormatError(f"{path}:{ln}: invalid JSON ({e})") from e
            scenes.append(scene_from_record(record, where=f"{path}:{ln}"))
    return scenes
