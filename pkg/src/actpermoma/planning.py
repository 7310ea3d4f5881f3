"""Candidate base goals, grid A*, camera waypoints and receding-horizon selection.

Every control step the planner samples base goals on a ring around the
target, plans one grid path per goal, decorates each path with target-facing
camera views, scores every path by distance-weighted information gain plus
length-weighted grasp executability, and picks the best one under a momentum
hysteresis that suppresses goal oscillation.  Only the first motion of the
winning path is ever executed.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import Aabb, CellState, OccupancyGrid2, Pose2, Pose3, look_at, wrap_angle
from .grasping import Grasp, MapPair, exec_utility
from .perception import TsdfGrid, rear_side_ig_batch
from .scene import CameraIntrinsics, ROBOT_RADIUS


class NoFeasibleGoals(RuntimeError):
    """Every candidate base goal collided with observed occupancy."""


class NoPath(RuntimeError):
    """Grid search exhausted without reaching the goal."""


@dataclass(frozen=True)
class PlannerConfig:
    n_b: int = 16                     # candidate base goals per step
    q_th: float = 0.8                 # grasp quality threshold
    n_stab: int = 1                   # stability window (steps)
    w_ig: float = 0.2                 # IG weight once a grasp is known
    w_exec: float = 1.0
    momentum: float = 800.0           # goal-switch hysteresis, utility units
    reach_radius: float = 0.85        # outer goal ring / "within reach" radius
    exec_threshold: float = 0.3       # minimum goal reachability to attempt a grasp
    cam_spacing: float = 0.5          # meters of arc between camera views
    max_steps: int = 400
    step_size: float = 0.2            # base motion per control step
    utility_scale: float = 1000.0     # exec-to-IG unit conversion
    ig_unit_rays: float = 100.0       # IG counts expressed per this many rays
    torso_band: tuple[float, float] = (1.1, 1.3)
    ig_downsample: int = 2            # sensor-to-IG ray decimation

    def __post_init__(self) -> None:
        if not 0.0 <= self.q_th <= 1.0:
            raise ValueError("q_th outside [0, 1]")
        for name in ("n_b", "n_stab", "reach_radius", "cam_spacing", "max_steps",
                     "step_size", "utility_scale", "ig_unit_rays", "ig_downsample",
                     "w_ig"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("w_exec", "momentum", "exec_threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class PlannerState:
    prev_goal_id: int | None = None
    prev_goal_utility: float = 0.0
    grasp_found: bool = False


@dataclass(frozen=True)
class PathView:
    base: Pose2
    cam: Pose3
    arc: float  # cumulative base travel from the path start


@dataclass
class CandidatePath:
    goal_id: int
    base_path: list[Pose2]   # dense grid waypoints, last one is the goal pose
    views: list[PathView]    # sparse camera views, last one at the goal
    length: float

    @property
    def goal_base(self) -> Pose2:
        return self.base_path[-1]


# ---------------------------------------------------------------------------
# occupancy helpers
# ---------------------------------------------------------------------------

def inflate_occupied(occ: OccupancyGrid2, radius: float = ROBOT_RADIUS) -> np.ndarray:
    """Boolean blocked mask: occupied cells dilated by the robot radius."""
    r = int(np.ceil(radius / occ.cell_size))
    occ_mask = occ.cells == CellState.OCCUPIED
    blocked = np.zeros_like(occ_mask)
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            if di * di + dj * dj > r * r:
                continue
            shifted = occ_mask
            if di:
                shifted = np.roll(shifted, di, axis=0)
                if di > 0:
                    shifted[:di, :] = False
                else:
                    shifted[di:, :] = False
            if dj:
                shifted = np.roll(shifted, dj, axis=1)
                if dj > 0:
                    shifted[:, :dj] = False
                else:
                    shifted[:, dj:] = False
            blocked |= shifted
    return blocked


def _cell_blocked(occ: OccupancyGrid2, blocked: np.ndarray, xy: np.ndarray) -> bool:
    c = occ.world_to_cell(xy)
    if not bool(occ.contains_cell(c)):
        return True
    return bool(blocked[c[0], c[1]])


# ---------------------------------------------------------------------------
# base goal sampling
# ---------------------------------------------------------------------------

def _stable_unit(*keys: int) -> float:
    """Deterministic uniform in [0, 1) from integer keys (platform stable)."""
    h = hashlib.blake2b(np.array(keys, dtype=np.int64).tobytes(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0**64


def sample_base_goal_slots(occ: OccupancyGrid2, target_xy: np.ndarray, n_b: int,
                           seed: int, reach_radius: float = 0.85,
                           blocked: np.ndarray | None = None, epoch: int = 0,
                           ) -> list[tuple[int, Pose2]]:
    """(slot, pose) pairs on the ring around the target, target-facing.

    Slots are stratified angles; jitter and radius are seeded per
    (slot, epoch) so a slot identifies roughly the same approach direction
    across steps (what the selection momentum latches onto) while the exact
    poses drift when the caller advances the epoch.  Slots whose inflated
    footprint overlaps observed-occupied cells are dropped after 10 retries.
    """
    if n_b < 1:
        raise ValueError("n_b must be >= 1")
    if blocked is None:
        blocked = inflate_occupied(occ)
    r_lo = max(reach_radius - 0.3, 0.1)
    goals: list[tuple[int, Pose2]] = []
    for slot in range(n_b):
        base_angle = 2.0 * np.pi * slot / n_b
        for attempt in range(10):
            ja = _stable_unit(seed, slot, attempt, 1, epoch)
            jr = _stable_unit(seed, slot, attempt, 2, epoch)
            angle = base_angle + (ja - 0.5) * (2.0 * np.pi / n_b)
            radius = r_lo + jr * (reach_radius - r_lo)
            xy = target_xy + radius * np.array([np.cos(angle), np.sin(angle)])
            if _cell_blocked(occ, blocked, xy):
                continue
            heading = wrap_angle(float(np.arctan2(target_xy[1] - xy[1], target_xy[0] - xy[0])))
            goals.append((slot, Pose2(float(xy[0]), float(xy[1]), heading)))
            break
    if not goals:
        raise NoFeasibleGoals("all base goal slots blocked")
    return goals


def sample_base_goals(occ: OccupancyGrid2, target_xy: np.ndarray, n_b: int,
                      seed: int, reach_radius: float = 0.85) -> list[Pose2]:
    return [p for _, p in sample_base_goal_slots(occ, target_xy, n_b, seed, reach_radius)]


# ---------------------------------------------------------------------------
# grid A*
# ---------------------------------------------------------------------------

_NEIGHBORS = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
              (1, 1, np.sqrt(2.0)), (1, -1, np.sqrt(2.0)),
              (-1, 1, np.sqrt(2.0)), (-1, -1, np.sqrt(2.0))]
UNKNOWN_COST = 1.05


def _octile(a: tuple[int, int], b: tuple[int, int]) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dx, dy) + (np.sqrt(2.0) - 1.0) * min(dx, dy)


def plan_path(occ: OccupancyGrid2, start: Pose2, goal: Pose2,
              blocked: np.ndarray | None = None) -> list[Pose2]:
    """8-connected A* over the occupancy grid, obstacle cells inflated by the
    robot radius, unknown cells traversable at a 1.05 step-cost multiplier.

    Returns cell-center waypoints from the start cell to the goal cell; the
    start cell itself is always treated as traversable.  Raises NoPath.
    """
    if blocked is None:
        blocked = inflate_occupied(occ)
    nx, ny = occ.dims
    s = tuple(occ.world_to_cell(start.xy))
    g = tuple(occ.world_to_cell(goal.xy))
    for c in (s, g):
        if not (0 <= c[0] < nx and 0 <= c[1] < ny):
            raise NoPath(f"cell {c} outside the grid")
    if blocked[g]:
        raise NoPath("goal cell blocked")
    unknown = occ.cells == CellState.UNKNOWN
    cell = occ.cell_size

    if s == g:
        c = occ.cell_to_world_center(np.array(s))
        return [Pose2(float(c[0]), float(c[1]), start.theta)]

    g_cost = {s: 0.0}
    came: dict[tuple[int, int], tuple[int, int]] = {}
    tie = 0
    open_heap: list[tuple[float, int, tuple[int, int]]] = [(_octile(s, g) * cell, tie, s)]
    closed: set[tuple[int, int]] = set()
    while open_heap:
        f, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == g:
            cells = [cur]
            while cur in came:
                cur = came[cur]
                cells.append(cur)
            cells.reverse()
            waypoints: list[Pose2] = []
            for i, c in enumerate(cells):
                w = occ.cell_to_world_center(np.array(c))
                if i + 1 < len(cells):
                    nxt = occ.cell_to_world_center(np.array(cells[i + 1]))
                    th = float(np.arctan2(nxt[1] - w[1], nxt[0] - w[0]))
                else:
                    th = waypoints[-1].theta if waypoints else start.theta
                waypoints.append(Pose2(float(w[0]), float(w[1]), th))
            return waypoints
        closed.add(cur)
        cg = g_cost[cur]
        for di, dj, base in _NEIGHBORS:
            nb = (cur[0] + di, cur[1] + dj)
            if not (0 <= nb[0] < nx and 0 <= nb[1] < ny) or blocked[nb] or nb in closed:
                continue
            step_cost = base * cell * (UNKNOWN_COST if unknown[nb] else 1.0)
            ng = cg + step_cost
            if ng < g_cost.get(nb, np.inf) - 1e-12:
                g_cost[nb] = ng
                came[nb] = cur
                tie += 1
                heapq.heappush(open_heap, (ng + _octile(nb, g) * cell, tie, nb))
    raise NoPath("goal unreachable")


def path_cost(occ: OccupancyGrid2, waypoints: list[Pose2]) -> float:
    """Traversal cost of a waypoint sequence under the planner's cost model."""
    unknown = occ.cells == CellState.UNKNOWN
    total = 0.0
    for a, b in zip(waypoints, waypoints[1:]):
        step = float(np.linalg.norm(b.xy - a.xy))
        c = occ.world_to_cell(b.xy)
        mult = UNKNOWN_COST if bool(occ.contains_cell(c)) and unknown[c[0], c[1]] else 1.0
        total += step * mult
    return total


# ---------------------------------------------------------------------------
# camera views along a path
# ---------------------------------------------------------------------------

def torso_height(xy: np.ndarray, seed: int, band: tuple[float, float],
                 cell_size: float = 0.1) -> float:
    """Seeded camera height, constant per ground cell so that paths sharing a
    prefix share their views (and their cached gains)."""
    c = np.floor(np.asarray(xy, dtype=float) / cell_size).astype(np.int64)
    u = _stable_unit(seed, int(c[0]), int(c[1]), 3)
    return band[0] + u * (band[1] - band[0])


_CAMERA_CACHE: dict[tuple, Pose3] = {}


def camera_at(xy: np.ndarray, target: np.ndarray, seed: int,
              band: tuple[float, float]) -> Pose3:
    key = (round(float(xy[0]), 9), round(float(xy[1]), 9), int(seed),
           round(float(band[0]), 9), round(float(band[1]), 9),
           round(float(target[0]), 9), round(float(target[1]), 9),
           round(float(target[2]), 9))
    hit = _CAMERA_CACHE.get(key)
    if hit is not None:
        return hit
    h = torso_height(xy, seed, band)
    pose = look_at(np.array([xy[0], xy[1], h]), np.asarray(target, dtype=float))
    if len(_CAMERA_CACHE) > 200_000:
        _CAMERA_CACHE.clear()
    _CAMERA_CACHE[key] = pose
    return pose


def sample_camera_poses(base_path: list[Pose2], target: np.ndarray, cam_spacing: float,
                        torso_band: tuple[float, float], seed: int = 0,
                        goal_id: int = -1) -> CandidatePath:
    """Decorate a base path with target-facing camera views.

    Views are placed every cam_spacing meters of arc length starting at the
    path start, plus one at the goal.  Camera position is the base position
    lifted by a seeded torso height; orientation is an exact look-at."""
    if not base_path:
        raise ValueError("base_path is empty")
    target = np.asarray(target, dtype=float)
    segs = [float(np.linalg.norm(b.xy - a.xy)) for a, b in zip(base_path, base_path[1:])]
    length = float(sum(segs))

    def base_at(arc: float) -> Pose2:
        left = arc
        for a, b, s in zip(base_path, base_path[1:], segs):
            if left <= s or s == 0.0:
                t = 0.0 if s == 0.0 else left / s
                xy = a.xy + t * (b.xy - a.xy)
                th = wrap_angle(float(np.arctan2(target[1] - xy[1], target[0] - xy[0])))
                return Pose2(float(xy[0]), float(xy[1]), th)
            left -= s
        return base_path[-1]

    arcs = [float(a) for a in np.arange(0.0, length, cam_spacing)
            if length - a > 1e-9]
    views = []
    for arc in arcs:
        b = base_at(arc)
        views.append(PathView(b, camera_at(b.xy, target, seed, torso_band), float(arc)))
    goal = base_path[-1]
    views.append(PathView(goal, camera_at(goal.xy, target, seed, torso_band), length))
    return CandidatePath(goal_id=goal_id, base_path=list(base_path), views=views,
                         length=length)


# ---------------------------------------------------------------------------
# utility evaluation & receding-horizon selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathUtility:
    path: CandidatePath
    j_ig: float
    j_exec: float
    utility: float


def evaluate_paths(paths: list[CandidatePath], tsdf: TsdfGrid, grasps: list[Grasp],
                   cfg: PlannerConfig, st: PlannerState, intr: CameraIntrinsics,
                   target_bbox: Aabb, map_pair: MapPair,
                   unit_weights: bool = False) -> list[PathUtility]:
    """Score every candidate path; the IG weight switches from 1 to cfg.w_ig
    once any stable grasp has ever been seen (exploit once there is something
    to exploit)."""
    w_ig_eff = cfg.w_ig if (st.grasp_found or grasps) else 1.0
    # deduplicate identical camera views across paths
    keys: dict[tuple, int] = {}
    cams = []
    for p in paths:
        for v in p.views:
            k = tuple(np.round(v.cam.position, 9))
            if k not in keys:
                keys[k] = len(cams)
                cams.append(v.cam)
    counts = rear_side_ig_batch(tsdf, cams, intr, target_bbox)
    # gains enter the utility normalized per ig_unit_rays so the momentum and
    # exec scales do not depend on the IG ray budget
    ig_norm = cfg.ig_unit_rays / float(intr.width * intr.height)

    out = []
    for p in paths:
        j_ig = 0.0
        for v in p.views:
            c = counts[keys[tuple(np.round(v.cam.position, 9))]]
            d = 1.0 if unit_weights else max(v.arc, 0.1)
            j_ig += float(c) / (d * d)
        j_exec = exec_utility(grasps, p, map_pair, unit_length=unit_weights)
        # the cross-scale constant converts the per-meter executability to the
        # voxel-count scale of the gain term; without length weighting the
        # executability is already unitless, so the constant goes too
        scale = 1.0 if unit_weights else cfg.utility_scale
        u = w_ig_eff * ig_norm * j_ig + cfg.w_exec * scale * j_exec
        out.append(PathUtility(p, j_ig, j_exec, u))
    return out


def select_from_utilities(utils: list[PathUtility], cfg: PlannerConfig,
                          st: PlannerState, grasps_present: bool,
                          ) -> tuple[PathUtility, PlannerState, bool]:
    """Argmax with (shorter, lower goal id) tie-breaks and momentum hysteresis.

    While the robot is still traveling toward the previously chosen goal, that
    goal keeps it unless another goal beats its current utility by more than
    cfg.momentum (anti-oscillation).  Once the goal is reached the hold
    releases, so a parked robot is free to follow the plain argmax."""
    if not utils:
        raise ValueError("no candidate paths")
    best = min(utils, key=lambda u: (-u.utility, u.path.length, u.path.goal_id))
    held = False
    if st.prev_goal_id is not None:
        prev = next((u for u in utils if u.path.goal_id == st.prev_goal_id), None)
        if prev is not None and best.path.goal_id != prev.path.goal_id:
            traveling = prev.path.length > cfg.step_size + 1e-9
            if traveling and not best.utility > prev.utility + cfg.momentum:
                best = prev
                held = True
    new_state = PlannerState(prev_goal_id=best.path.goal_id,
                             prev_goal_utility=best.utility,
                             grasp_found=st.grasp_found or grasps_present)
    return best, new_state, held


def select_path(paths: list[CandidatePath], tsdf: TsdfGrid, grasps: list[Grasp],
                cfg: PlannerConfig, st: PlannerState, *, intr: CameraIntrinsics,
                target_bbox: Aabb, map_pair: MapPair,
                unit_weights: bool = False) -> tuple[CandidatePath, PlannerState]:
    utils = evaluate_paths(paths, tsdf, grasps, cfg, st, intr, target_bbox,
                           map_pair, unit_weights)
    best, new_state, _ = select_from_utilities(utils, cfg, st, bool(grasps))
    return best.path, new_state


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def step(robot: Pose2, path: CandidatePath, step_size: float = 0.2) -> Pose2:
    """Kinematic advance of at most step_size along the path polyline.

    The robot is projected onto the path (ties prefer the later segment, so
    passed waypoints are never revisited), then advanced along it with the
    total displacement capped at step_size.  The motion clamps exactly at
    the path end, where the goal heading is adopted; heading during travel is
    the direction of motion."""
    if not path.base_path:
        raise ValueError("empty path")
    goal = path.base_path[-1]
    pts = [np.asarray(w.xy, dtype=float) for w in path.base_path]
    if len(pts) == 1:
        pts = [np.asarray(robot.xy, dtype=float), pts[0]]
    rob = np.asarray(robot.xy, dtype=float)

    # closest point on the polyline
    best_d, best_seg, best_t = np.inf, 0, 0.0
    for i in range(len(pts) - 1):
        seg = pts[i + 1] - pts[i]
        l2 = float(seg @ seg)
        t = 0.0 if l2 == 0.0 else float(np.clip((rob - pts[i]) @ seg / l2, 0.0, 1.0))
        d = float(np.linalg.norm(rob - (pts[i] + t * seg)))
        if d <= best_d + 1e-12:
            best_d, best_seg, best_t = d, i, t
    lateral = best_d
    # advance distance chosen so the straight-line displacement stays <= step_size
    budget = float(np.sqrt(max(step_size**2 - lateral**2, 0.0)))

    pos = pts[best_seg] + best_t * (pts[best_seg + 1] - pts[best_seg])
    heading = robot.theta
    i = best_seg
    while i < len(pts) - 1:
        seg = pts[i + 1] - pos
        d = float(np.linalg.norm(seg))
        if d < 1e-12:
            i += 1
            continue
        if d <= budget:
            budget -= d
            pos = pts[i + 1]
            heading = float(np.arctan2(seg[1], seg[0]))
            i += 1
        else:
            pos = pos + (budget / d) * seg
            heading = float(np.arctan2(seg[1], seg[0]))
            break
    if lateral > 0 and budget == 0.0 and step_size <= lateral:
        # too far off the path: close in on it first
        to_path = pos - rob
        d = float(np.linalg.norm(to_path))
        if d > 1e-12:
            frac = min(step_size / d, 1.0)
            p = rob + frac * to_path
            return Pose2(float(p[0]), float(p[1]), float(np.arctan2(to_path[1], to_path[0])))
    if float(np.linalg.norm(pos - goal.xy)) < 1e-9:
        return Pose2(float(goal.x), float(goal.y), goal.theta)
    return Pose2(float(pos[0]), float(pos[1]), heading)


def should_execute(path: CandidatePath, robot: Pose2, j_exec: float,
                   cfg: PlannerConfig) -> bool:
    """Grasp trigger: the chosen path has collapsed to its goal waypoint (the
    robot is within one step of the goal) and the executability utility
    clears the threshold (inclusive)."""
    del robot  # position is already encoded in the trimmed path
    at_goal = len(path.base_path) == 1 or path.length <= cfg.step_size + 1e-9
    return at_goal and j_exec >= cfg.exec_threshold
