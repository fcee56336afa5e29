"""Synthetic multi-embodiment 2D manipulation world with scripted experts.

Kinematic tabletop in the unit square: planar arms (2 and 3 links) and a
gantry move an end-effector that can sticky-grasp discs (gripper closed
within grasp radius) or plow them by contact.  Links sweep above the table
plane, so only the end-effector interacts with objects.  A point-cursor
"human" appearance re-renders the same scene trajectories without any motor
record, standing in for action-free demonstration video.

Everything is deterministic given (embodiment, task, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import language, render
from .datastore import Episode, Manifest, NormStats, SourceInfo, write_episode

A_MAX = 4
S_MAX = 4

EE_RADIUS = 0.030
OBJECT_RADIUS = 0.045
CONTACT = OBJECT_RADIUS + EE_RADIUS
# grasping must out-range plowing so a closing gripper can latch an object
# that open-gripper contact keeps at CONTACT distance
GRASP_RADIUS = CONTACT + 0.015


class ExpertFailure(RuntimeError):
    """Raised when the scripted expert cannot solve an episode (flagged, excluded)."""


# --------------------------------------------------------------------------
# embodiments and tasks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbodimentSpec:
    id: str
    kind: str  # arm | gantry | cursor
    dof: int
    action_dim: int
    proprio_dim: int
    action_low: tuple
    action_high: tuple
    base: tuple = (0.5, 0.05)
    link_lengths: tuple = ()
    color: tuple = (0.25, 0.25, 0.30)
    tint: tuple = (0.86, 0.86, 0.88)
    gripper: bool = True

    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        am = np.zeros(A_MAX, dtype=bool)
        am[:self.action_dim] = True
        pm = np.zeros(S_MAX, dtype=bool)
        pm[:self.proprio_dim] = True
        return am, pm


EMBODIMENTS: dict[str, EmbodimentSpec] = {
    "arm2": EmbodimentSpec(
        id="arm2", kind="arm", dof=2, action_dim=3, proprio_dim=3,
        action_low=(-0.15, -0.15, 0.0), action_high=(0.15, 0.15, 1.0),
        base=(0.5, 0.04), link_lengths=(0.45, 0.40),
        color=(0.23, 0.24, 0.33), tint=(0.86, 0.86, 0.88)),
    "arm3": EmbodimentSpec(
        id="arm3", kind="arm", dof=3, action_dim=4, proprio_dim=4,
        action_low=(-0.15, -0.15, -0.15, 0.0), action_high=(0.15, 0.15, 0.15, 1.0),
        base=(0.07, 0.5), link_lengths=(0.32, 0.30, 0.26),
        color=(0.33, 0.26, 0.20), tint=(0.88, 0.86, 0.83)),
    "gantry": EmbodimentSpec(
        id="gantry", kind="gantry", dof=2, action_dim=3, proprio_dim=3,
        action_low=(-0.06, -0.06, 0.0), action_high=(0.06, 0.06, 1.0),
        base=(0.5, 0.96), link_lengths=(),
        color=(0.18, 0.32, 0.32), tint=(0.85, 0.88, 0.85)),
    "human": EmbodimentSpec(
        id="human", kind="cursor", dof=0, action_dim=0, proprio_dim=0,
        action_low=(), action_high=(), base=(0.5, 0.5),
        color=(0.25, 0.22, 0.20), tint=(0.88, 0.88, 0.84)),
}

ROBOT_EMBODIMENTS = ["arm2", "arm3", "gantry"]


@dataclass(frozen=True)
class TaskSpec:
    name: str
    template: str  # color slots {0}, {1}
    n_objects: int
    needs_grasp: bool
    goal_kind: str  # circle | rect | object | ee-circle
    goal_radius: float
    waypoint: bool = False

    def instruction(self, colors: list[str]) -> str:
        return self.template.format(*colors)


TASKS: dict[str, TaskSpec] = {
    "reach": TaskSpec("reach", "reach the {0} marker", 1, False, "ee-circle", 0.07),
    "push": TaskSpec("push", "push the {0} disc to the goal", 1, False, "circle", 0.085),
    "pick_place": TaskSpec("pick_place", "lift the {0} disc and place it in the goal",
                           1, True, "circle", 0.075),
    "stack": TaskSpec("stack", "stack the {0} disc on the {1} disc", 2, True, "object", 0.105),
    "sweep": TaskSpec("sweep", "sweep the {0} disc into the zone", 1, False, "rect", 0.0),
    "relay": TaskSpec("relay", "carry the {0} disc through the waypoint to the goal",
                      1, True, "circle", 0.075, waypoint=True),
}

SWEEP_RECT = (0.78, 0.97, 0.22, 0.78)  # x0, x1, y0, y1


# --------------------------------------------------------------------------
# kinematics
# --------------------------------------------------------------------------

def arm_joints(spec: EmbodimentSpec, theta: np.ndarray) -> list[np.ndarray]:
    pts = [np.array(spec.base, dtype=np.float64)]
    angle = 0.0
    for l, th in zip(spec.link_lengths, theta):
        angle += th
        pts.append(pts[-1] + l * np.array([math.cos(angle), math.sin(angle)]))
    return pts


def arm_jacobian(spec: EmbodimentSpec, theta: np.ndarray) -> np.ndarray:
    """2 x dof Jacobian of the end-effector position."""
    cum = np.cumsum(theta)
    jac = np.zeros((2, spec.dof))
    for i in range(spec.dof):
        for j in range(i, spec.dof):
            jac[0, i] += -spec.link_lengths[j] * math.sin(cum[j])
            jac[1, i] += spec.link_lengths[j] * math.cos(cum[j])
    return jac


@dataclass
class Observation:
    frames: np.ndarray  # (K, H, W, 3) float32
    proprio: np.ndarray  # (S_MAX,) float32, zero-padded
    proprio_mask: np.ndarray  # (S_MAX,) bool


@dataclass
class SceneState:
    objects: np.ndarray  # (n, 2)
    object_colors: list[str]
    goal: dict
    waypoint: np.ndarray | None
    config: np.ndarray  # joint angles or gantry position
    grip: float = 0.0
    grasped: int | None = None
    time: int = 0
    dwell: int = 0
    success: bool = False

    def copy(self) -> "SceneState":
        return SceneState(self.objects.copy(), list(self.object_colors),
                          dict(self.goal), None if self.waypoint is None else self.waypoint.copy(),
                          self.config.copy(), self.grip, self.grasped,
                          self.time, self.dwell, self.success)


_GRID_CACHE: dict[tuple[int, int], list] = {}
_BG_CACHE: dict[tuple[str, int, int], list[np.ndarray]] = {}


def _grids(image_size: int, views: int):
    key = (image_size, views)
    if key not in _GRID_CACHE:
        _GRID_CACHE[key] = render.view_grids(image_size, views)
    return _GRID_CACHE[key]


def _backgrounds(spec: EmbodimentSpec, image_size: int, views: int):
    key = (spec.id, image_size, views)
    if key not in _BG_CACHE:
        _BG_CACHE[key] = render.make_background(image_size, views, spec.tint)
    return _BG_CACHE[key]


class PlanarWorld:
    """One (embodiment, task) environment instance."""

    def __init__(self, embodiment: EmbodimentSpec | str, task: TaskSpec | str,
                 image_size: int = 64, views: int = 2, t_max: int = 60,
                 success_dwell: int = 5):
        self.spec = EMBODIMENTS[embodiment] if isinstance(embodiment, str) else embodiment
        self.task = TASKS[task] if isinstance(task, str) else task
        if self.spec.kind == "cursor":
            raise ValueError("the cursor appearance is reserved for human-proxy rendering")
        self.image_size = image_size
        self.views = views
        self.t_max = t_max
        self.success_dwell = success_dwell
        self.scene: SceneState | None = None
        self.instruction = ""
        self.seed: int | None = None
        self._low = np.array(self.spec.action_low)
        self._high = np.array(self.spec.action_high)

    # -- scene construction -------------------------------------------------

    def _reachable(self, point: np.ndarray, margin: float = 0.04) -> bool:
        if self.spec.kind == "gantry":
            return bool(0.02 <= point[0] <= 0.98 and 0.02 <= point[1] <= 0.98)
        base = np.array(self.spec.base)
        dist = float(np.linalg.norm(point - base))
        reach = sum(self.spec.link_lengths)
        inner = abs(self.spec.link_lengths[0] - sum(self.spec.link_lengths[1:]))
        return inner + margin < dist < reach - margin

    def project_reachable(self, point: np.ndarray) -> np.ndarray:
        """Clamp a motion target into the embodiment's workspace."""
        if self.spec.kind != "arm":
            return np.clip(point, 0.02, 0.98)
        base = np.array(self.spec.base)
        delta = point - base
        d = float(np.linalg.norm(delta))
        outer = sum(self.spec.link_lengths) - 0.03
        inner = abs(self.spec.link_lengths[0] - sum(self.spec.link_lengths[1:])) + 0.04
        if d < 1e-9:
            return base + np.array([inner, 0.0])
        return base + delta / d * float(np.clip(d, inner, outer))

    def _sample_point(self, rng: np.random.Generator, lo=0.28, hi=0.72,
                      clear_of=(), clearance=0.16) -> np.ndarray:
        for _ in range(200):
            p = rng.uniform(lo, hi, size=2)
            if not self._reachable(p, margin=0.10):
                continue
            if all(np.linalg.norm(p - q) >= clearance for q in clear_of):
                return p
        raise ExpertFailure("layout sampling failed")

    def reset(self, seed: int) -> Observation:
        rng = np.random.default_rng(seed)
        self.seed = seed
        task = self.task
        colors = list(render.PALETTE)
        rng.shuffle(colors)
        placed: list[np.ndarray] = []
        if task.name == "sweep":
            objects = [self._sample_point(rng, lo=0.30, hi=0.55, clear_of=placed)]
            placed += objects
            goal = {"kind": "rect", "bounds": SWEEP_RECT}
        else:
            objects = [self._sample_point(rng, clear_of=placed)]
            placed += objects
            if task.n_objects > 1:
                objects.append(self._sample_point(rng, clear_of=placed))
                placed += objects[-1:]
            if task.goal_kind == "object":
                goal = {"kind": "circle", "center": objects[1].copy(),
                        "radius": task.goal_radius, "on_object": 1}
            else:
                center = self._sample_point(rng, clear_of=placed, clearance=0.20)
                placed.append(center)
                goal = {"kind": "circle", "center": center, "radius": task.goal_radius}
        waypoint = None
        if task.waypoint:
            waypoint = self._sample_point(rng, clear_of=placed, clearance=0.15)
        # initial configuration: mild jitter around a home pose
        if self.spec.kind == "arm":
            if self.spec.dof == 2:
                home = np.array([math.pi / 2 + 0.35, -0.9])
            else:
                home = np.array([0.35, 0.45, 0.35])
            config = home + rng.uniform(-0.12, 0.12, size=self.spec.dof)
        else:
            config = np.array([0.5, 0.75]) + rng.uniform(-0.08, 0.08, size=2)
        self.scene = SceneState(
            objects=np.array(objects, dtype=np.float64),
            object_colors=colors[:max(task.n_objects, 1)],
            goal=goal,
            waypoint=waypoint,
            config=config,
        )
        self.instruction = task.instruction(self.scene.object_colors)
        return self.observe()

    # -- dynamics ------------------------------------------------------------

    def ee_pos(self, scene: SceneState | None = None) -> np.ndarray:
        scene = scene or self.scene
        if self.spec.kind == "arm":
            return arm_joints(self.spec, scene.config)[-1]
        return scene.config.copy()

    def _success_point(self, scene: SceneState) -> np.ndarray:
        if self.task.goal_kind == "ee-circle":
            return self.ee_pos(scene)
        return scene.objects[0]

    def _in_goal(self, scene: SceneState) -> bool:
        p = self._success_point(scene)
        goal = scene.goal
        if goal["kind"] == "rect":
            x0, x1, y0, y1 = goal["bounds"]
            m = 0.01
            return bool(x0 + m <= p[0] <= x1 - m and y0 + m <= p[1] <= y1 - m)
        center = scene.objects[goal["on_object"]] if "on_object" in goal else goal["center"]
        return bool(np.linalg.norm(p - center) <= goal["radius"])

    def step(self, action: np.ndarray) -> tuple[Observation, bool, bool]:
        if self.scene is None:
            raise RuntimeError("call reset() first")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.spec.action_dim,):
            raise ValueError(f"action shape {action.shape} != ({self.spec.action_dim},)")
        if not np.isfinite(action).all():
            raise ValueError("non-finite action")
        action = np.clip(action, self._low, self._high)
        scene = self.scene
        if self.spec.kind == "arm":
            scene.config = scene.config + action[:self.spec.dof]
        else:
            scene.config = np.clip(scene.config + action[:2], 0.02, 0.98)
        scene.grip = float(action[-1])
        ee = self.ee_pos(scene)

        closed = scene.grip > 0.5
        if not closed:
            scene.grasped = None
        elif scene.grasped is None:
            dists = np.linalg.norm(scene.objects - ee, axis=1)
            nearest = int(np.argmin(dists))
            if dists[nearest] < GRASP_RADIUS:
                scene.grasped = nearest
        if scene.grasped is not None:
            scene.objects[scene.grasped] = ee
        for i in range(scene.objects.shape[0]):
            if i == scene.grasped:
                continue
            delta = scene.objects[i] - ee
            d = float(np.linalg.norm(delta))
            if d < CONTACT and d > 1e-9:
                scene.objects[i] = np.clip(ee + delta / d * CONTACT, 0.03, 0.97)

        if self._in_goal(scene):
            scene.dwell += 1
        else:
            scene.dwell = 0
        if scene.dwell >= self.success_dwell:
            scene.success = True  # latched
        scene.time += 1
        done = scene.success or scene.time >= self.t_max
        return self.observe(), done, scene.success

    # -- observation / rendering ---------------------------------------------

    def proprio(self) -> tuple[np.ndarray, np.ndarray]:
        _, pm = self.spec.masks()
        out = np.zeros(S_MAX, dtype=np.float32)
        vals = np.concatenate([self.scene.config, [self.scene.grip]])
        out[:len(vals)] = vals
        return out, pm

    def observe(self) -> Observation:
        frames = np.stack([self.render_view(k) for k in range(self.views)])
        proprio, pm = self.proprio()
        return Observation(frames=frames, proprio=proprio, proprio_mask=pm)

    def render_view(self, view: int, agent: str | bool = True,
                    scene: SceneState | None = None,
                    agent_spec: EmbodimentSpec | None = None) -> np.ndarray:
        """Render one view; agent=True draws the robot, 'cursor' the human proxy,
        False omits the agent entirely (scene layers only)."""
        scene = scene or self.scene
        spec = agent_spec or self.spec
        grid = _grids(self.image_size, self.views)[view]
        bg = _backgrounds(spec if agent is not False else self.spec,
                          self.image_size, self.views)[view]
        canvas = render.Canvas(grid, bg)
        goal = scene.goal
        if self.task.goal_kind == "ee-circle":
            render.draw_marker(canvas, goal["center"], goal["radius"], scene.object_colors[0])
        elif goal["kind"] == "rect":
            render.draw_goal(canvas, goal)
        elif "on_object" not in goal:
            render.draw_goal(canvas, goal)
        if scene.waypoint is not None:
            canvas.fill_ring(scene.waypoint, 0.02, 0.034, render.WAYPOINT_COLOR)
        if self.task.goal_kind == "ee-circle":
            # the marker is the target; the disc is a distractor drawn smaller
            render.draw_object(canvas, scene.objects[0], OBJECT_RADIUS * 0.8,
                               scene.object_colors[-1] if len(scene.object_colors) > 1
                               else scene.object_colors[0])
        else:
            for i in reversed(range(scene.objects.shape[0])):
                render.draw_object(canvas, scene.objects[i], OBJECT_RADIUS,
                                   scene.object_colors[i])
        closed = scene.grip > 0.5
        if agent == "cursor":
            render.draw_cursor(canvas, self._agent_ee(scene, spec), closed)
        elif agent:
            if spec.kind == "arm":
                render.draw_arm(canvas, arm_joints(spec, scene.config), spec.color, closed)
            else:
                render.draw_gantry(canvas, scene.config, spec.color, closed)
        return np.clip(canvas.img, 0.0, 1.0)

    def _agent_ee(self, scene: SceneState, spec: EmbodimentSpec) -> np.ndarray:
        if spec.kind == "arm":
            return arm_joints(spec, scene.config)[-1]
        return scene.config


# --------------------------------------------------------------------------
# scripted expert
# --------------------------------------------------------------------------

class ScriptedExpert:
    """Waypoint-following proportional controller with bounded action noise.

    Stateless apart from the relay task's visited-waypoint flag; with
    noise_scale=0 the trajectory is fully deterministic.
    """

    def __init__(self, env: PlanarWorld, noise_scale: float = 1.0,
                 rng: np.random.Generator | None = None):
        self.env = env
        self.noise_scale = noise_scale
        self.rng = rng or np.random.default_rng(0)
        self.visited_waypoint = False

    def reset(self) -> None:
        self.visited_waypoint = False

    @staticmethod
    def _away(ee: np.ndarray, obj: np.ndarray) -> np.ndarray:
        delta = ee - obj
        n = np.linalg.norm(delta)
        return delta / n if n > 1e-6 else np.array([0.0, 1.0])

    # target end-effector point and gripper command for the current scene
    def _plan(self) -> tuple[np.ndarray, float]:
        env, task, scene = self.env, self.env.task, self.env.scene
        ee = env.ee_pos()
        if task.goal_kind == "ee-circle":
            return scene.goal["center"], 0.0
        obj = scene.objects[0]
        if task.needs_grasp:
            goal_pt = (scene.objects[scene.goal["on_object"]]
                       if "on_object" in scene.goal else scene.goal["center"])
            release_dist = 0.085 if "on_object" in scene.goal else 0.02
            if scene.grasped == 0:
                if task.waypoint and not self.visited_waypoint:
                    if np.linalg.norm(ee - scene.waypoint) < 0.045:
                        self.visited_waypoint = True
                    else:
                        return scene.waypoint, 1.0
                if np.linalg.norm(ee - goal_pt) <= release_dist + 0.005:
                    return ee, 0.0  # release here
                stop = goal_pt if release_dist < 0.05 else (
                    goal_pt + (ee - goal_pt) / max(np.linalg.norm(ee - goal_pt), 1e-9)
                    * release_dist)
                return stop, 1.0
            if np.linalg.norm(obj - goal_pt) <= (0.03 if release_dist < 0.05 else release_dist):
                # done carrying: retreat without plowing
                return np.clip(obj + self._away(ee, obj) * 0.16, 0.05, 0.95), 0.0
            if np.linalg.norm(ee - obj) < GRASP_RADIUS - 0.004:
                return obj, 1.0  # close on it
            return obj, 0.0
        # pushing tasks
        if scene.goal["kind"] == "rect":
            x0, x1, y0, y1 = scene.goal["bounds"]
            goal_pt = np.array([x0 + 0.10, float(np.clip(obj[1], y0 + 0.08, y1 - 0.08))])
        else:
            goal_pt = scene.goal["center"]
        if env._in_goal(scene):
            return np.clip(obj + self._away(ee, obj) * 0.14, 0.03, 0.97), 0.0
        to_obj = obj - goal_pt
        dist_og = np.linalg.norm(to_obj)
        push_dir = -to_obj / max(dist_og, 1e-9)
        behind = obj - push_dir * (CONTACT + 0.02)
        rel = ee - obj
        back = -push_dir
        # signed angle from the current approach direction to the behind direction
        angle_gap = math.atan2(rel[0] * back[1] - rel[1] * back[0],
                               float(np.dot(rel, back)))
        if abs(angle_gap) < 0.35:
            return goal_pt, 0.0  # lined up behind the object: push through
        # orbit around the object toward the behind point at a safe radius;
        # fixed turn direction near exact opposition to avoid dithering
        direction = 1.0 if abs(angle_gap) > math.pi - 0.3 else math.copysign(1.0, -angle_gap)
        orbit_r = CONTACT + 0.045
        step = min(0.5, abs(angle_gap))
        phi = math.atan2(rel[1], rel[0]) + direction * step
        orbit = obj + orbit_r * np.array([math.cos(phi), math.sin(phi)])
        return np.clip(orbit, 0.03, 0.97), 0.0

    def action(self) -> np.ndarray:
        env = self.env
        spec = env.spec
        target, grip = self._plan()
        target = env.project_reachable(np.asarray(target, dtype=np.float64))
        ee = env.ee_pos()
        err = target - ee
        if spec.kind == "arm":
            jac = arm_jacobian(spec, env.scene.config)
            raw = 4.0 * (jac.T @ err)
            noise = self.rng.normal(0.0, 0.02 * self.noise_scale, size=spec.dof)
            motion = np.clip(raw + noise, env._low[:spec.dof], env._high[:spec.dof])
        else:
            noise = self.rng.normal(0.0, 0.008 * self.noise_scale, size=2)
            motion = np.clip(err + noise, env._low[:2], env._high[:2])
        return np.concatenate([motion, [grip]]).astype(np.float64)


def run_expert_episode(env: PlanarWorld, seed: int, noise_scale: float = 1.0
                       ) -> tuple[Episode, list[SceneState], bool]:
    """Roll one expert episode; returns (episode, per-step scene states, success).

    The episode records one frame/proprio row per visited state (T rows) and
    the action taken at each state, with the terminal row zero-padded.
    """
    obs = env.reset(seed)
    expert = ScriptedExpert(env, noise_scale,
                            np.random.default_rng(np.random.SeedSequence([seed, 7])))
    expert.reset()
    am, pm = env.spec.masks()
    frames = [obs.frames]
    proprio = [obs.proprio]
    actions: list[np.ndarray] = []
    states = [env.scene.copy()]
    success = False
    for _ in range(env.t_max):
        act = expert.action()
        padded = np.zeros(A_MAX, dtype=np.float32)
        padded[:env.spec.action_dim] = act
        actions.append(padded)
        obs, done, success = env.step(act)
        frames.append(obs.frames)
        proprio.append(obs.proprio)
        states.append(env.scene.copy())
        if done:
            break
    actions.append(np.zeros(A_MAX, dtype=np.float32))
    episode = Episode(
        embodiment_id=env.spec.id,
        source_kind="robot",
        task=env.task.name,
        instruction=env.instruction,
        seed=seed,
        frames=np.stack(frames).astype(np.float32),
        proprio=np.stack(proprio).astype(np.float32),
        proprio_mask=pm,
        actions=np.stack(actions).astype(np.float32),
        action_mask=am,
    )
    return episode, states, success


def render_cursor_frames(env: PlanarWorld, states: list[SceneState]) -> np.ndarray:
    """Re-render recorded scene states with the human-proxy cursor appearance."""
    human = EMBODIMENTS["human"]
    out = np.stack([
        np.stack([env.render_view(k, agent="cursor", scene=s, agent_spec=human)
                  for k in range(env.views)])
        for s in states
    ])
    return out.astype(np.float32)


def humanize(episode: Episode, image_size: int | None = None, views: int | None = None,
             t_max: int = 60, success_dwell: int = 5) -> Episode:
    """Action-free human-proxy twin of a robot episode.

    Replays the recorded actions in a fresh environment (same embodiment,
    task, and seed reproduce the trajectory exactly) and re-renders every
    state with the cursor appearance; actions and proprioception are dropped.
    """
    if episode.source_kind != "robot":
        raise ValueError("humanize expects a robot-sourced episode")
    k, h = episode.frames.shape[1], episode.frames.shape[2]
    env = PlanarWorld(episode.embodiment_id, episode.task,
                      image_size=image_size or h, views=views or k,
                      t_max=t_max, success_dwell=success_dwell)
    env.reset(episode.seed)
    states = [env.scene.copy()]
    for t in range(episode.length - 1):
        act = episode.actions[t][:env.spec.action_dim]
        env.step(act)
        states.append(env.scene.copy())
    frames = render_cursor_frames(env, states)
    return Episode(
        embodiment_id="human",
        source_kind="human",
        task=episode.task,
        instruction=episode.instruction,
        seed=episode.seed,
        frames=frames,
    )


# --------------------------------------------------------------------------
# dataset generation
# --------------------------------------------------------------------------

def episode_seed(master: int, emb_idx: int, task_idx: int, k: int) -> int:
    return int(np.random.SeedSequence([master, emb_idx, task_idx, k]).generate_state(1)[0])


def generate_dataset(out_path, episodes_per_task: int, seed: int,
                     embodiments: list[str] | None = None,
                     tasks: list[str] | None = None,
                     image_size: int = 64, views: int = 2, t_max: int = 60,
                     success_dwell: int = 5, human_every: int = 3,
                     noise_scale: float = 1.0, max_failure_rate: float = 0.10,
                     progress: bool = False) -> Manifest:
    """Roll scripted-expert demonstrations into per-embodiment sources plus a
    human-proxy source, and write the manifest with normalization stats.

    Every (embodiment, task) cell attempts exactly episodes_per_task rollouts;
    failed episodes are excluded, and a cell failure rate above
    max_failure_rate aborts with a report.  Every human_every-th successful
    episode is additionally re-rendered as an action-free human episode.
    """
    from pathlib import Path

    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    embodiments = embodiments or list(ROBOT_EMBODIMENTS)
    tasks = tasks or list(TASKS)
    sources: dict[str, SourceInfo] = {
        name: SourceInfo(name=name, kind="robot") for name in embodiments
    }
    sources["human"] = SourceInfo(name="human", kind="human")
    counters = {name: 0 for name in sources}
    mins: dict[str, dict[str, np.ndarray]] = {}
    failure_report = []

    for e_idx, emb in enumerate(embodiments):
        for t_idx, task in enumerate(tasks):
            env = PlanarWorld(emb, task, image_size, views, t_max, success_dwell)
            failures = 0
            for k in range(episodes_per_task):
                ep_seed = episode_seed(seed, e_idx, t_idx, k)
                try:
                    episode, states, success = run_expert_episode(env, ep_seed, noise_scale)
                except ExpertFailure:
                    success = False
                if not success:
                    failures += 1
                    continue
                rel = f"{emb}/ep_{counters[emb]:06d}.bin"
                record = write_episode(episode, out / rel)
                sources[emb].files.append((rel, record["frames"], record["sha256"][:12]))
                counters[emb] += 1
                stats = mins.setdefault(emb, {
                    "action_min": np.full(A_MAX, np.inf),
                    "action_max": np.full(A_MAX, -np.inf),
                    "proprio_min": np.full(S_MAX, np.inf),
                    "proprio_max": np.full(S_MAX, -np.inf),
                })
                stats["action_min"] = np.minimum(stats["action_min"], episode.actions.min(0))
                stats["action_max"] = np.maximum(stats["action_max"], episode.actions.max(0))
                stats["proprio_min"] = np.minimum(stats["proprio_min"], episode.proprio.min(0))
                stats["proprio_max"] = np.maximum(stats["proprio_max"], episode.proprio.max(0))
                if k % human_every == 0:
                    frames = render_cursor_frames(env, states)
                    human_ep = Episode(
                        embodiment_id="human", source_kind="human", task=task,
                        instruction=episode.instruction, seed=ep_seed, frames=frames)
                    rel_h = f"human/ep_{counters['human']:06d}.bin"
                    rec_h = write_episode(human_ep, out / rel_h)
                    sources["human"].files.append(
                        (rel_h, rec_h["frames"], rec_h["sha256"][:12]))
                    counters["human"] += 1
            rate = failures / episodes_per_task
            failure_report.append((emb, task, failures, rate))
            if progress:
                print(f"  {emb}/{task}: {episodes_per_task - failures} episodes "
                      f"({failures} failed)")
            if rate > max_failure_rate:
                report = "\n".join(f"  {e}/{t}: {f} failed ({r:.0%})"
                                   for e, t, f, r in failure_report)
                raise RuntimeError(
                    f"expert failure rate {rate:.0%} on {emb}/{task} exceeds "
                    f"{max_failure_rate:.0%}; generation aborted\n{report}"
                )

    stats = {}
    for emb, s in mins.items():
        am, pm = EMBODIMENTS[emb].masks()
        stats[emb] = NormStats(
            action_min=np.where(am, s["action_min"], 0.0),
            action_max=np.where(am, s["action_max"], 0.0),
            proprio_min=np.where(pm, s["proprio_min"], 0.0),
            proprio_max=np.where(pm, s["proprio_max"], 0.0),
            action_mask=am, proprio_mask=pm,
        )
    manifest = Manifest(root=out, image_size=image_size, views=views,
                        master_seed=seed, sources=sources, stats=stats)
    from datetime import datetime, timezone
    manifest.generated_at = datetime.now(timezone.utc).isoformat()
    manifest.save()
    return manifest
