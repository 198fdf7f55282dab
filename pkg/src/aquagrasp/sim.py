"""Fixed-timestep pool simulation: ROV dynamics, gripper, held objects, slip.

Frames
------
Pool frame: x along the 4 m length, y across, z up, floor at z = 0.
Body frame: x forward, y left, z up, rotated by yaw about pool z and then
pitched nose-down by the constant pitch.  Velocity commands act in the
yaw-only heading frame, so surge stays horizontal despite the pitch.

Dynamics per axis (surge, sway, heave, yaw rate)::

    dv/dt = (v_cmd - v) / tau - c * v * |v|

integrated with a semi-implicit update that makes ``|v|`` decay strictly
under zero command, followed by a position update using the new velocity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import DynamicsConfig, GripperConfig, ScenarioConfig
from .errors import PlacementFailure, SimFault
from .shapes import get_shape

DT = 0.01
BOUNDARY_TOL = 1e-9


@dataclass
class ActionCommand:
    yaw: float = 0.0
    forward: float = 0.0
    vertical: float = 0.0
    lateral: float = 0.0
    open: bool = False
    close: bool = False

    def __post_init__(self):
        for name in ("yaw", "forward", "vertical", "lateral"):
            val = getattr(self, name)
            if not abs(val) <= 1.0:
                raise ValueError(f"{name} command {val} outside [-1, 1]")
        if self.open and self.close:
            raise ValueError("open and close are mutually exclusive")

    def as_vector(self) -> list:
        """The 6-dim action layout: yaw, forward, vertical, lateral, open, close."""
        return [self.yaw, self.forward, self.vertical, self.lateral,
                1.0 if self.open else 0.0, 1.0 if self.close else 0.0]

    @classmethod
    def from_vector(cls, vec) -> "ActionCommand":
        return cls(float(vec[0]), float(vec[1]), float(vec[2]), float(vec[3]),
                   bool(vec[4] > 0.5), bool(vec[5] > 0.5))


IDLE = ActionCommand()


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def body_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Pool-from-body rotation; positive pitch tilts the nose down."""
    return rot_z(yaw) @ rot_y(pitch)


@dataclass
class ObjectInstance:
    id: int
    shape: str
    graspability: float
    scale: float = 1.0
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if not 0.0 < self.graspability <= 1.0:
            raise ValueError("graspability must lie in (0, 1]")

    @property
    def geometry(self):
        return get_shape(self.shape, self.scale)

    @property
    def grasp_point(self) -> np.ndarray:
        return np.asarray(self.geometry.grasp_point, dtype=float)

    def to_world(self, p_body) -> np.ndarray:
        return self.position + self.rotation @ np.asarray(p_body, dtype=float)

    def world_grasp_point(self) -> np.ndarray:
        return self.to_world(self.grasp_point)

    def bounding_sphere_world(self):
        c, r = self.geometry.bounding_sphere
        return self.to_world(c), r

    def pose_vector(self) -> list:
        return [float(v) for v in self.position] + [float(v) for v in self.rotation.ravel()]


@dataclass
class RovState:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.5
    yaw: float = 0.0
    pitch: float = math.radians(10.0)
    body_velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    gripper_aperture: float = 1.0
    gripper_target: float = 1.0
    held_object: Optional[int] = None
    last_accel: float = 0.0
    grasp_outcome: Optional[bool] = None  # result of the current closing, None until known
    slipped: bool = False
    hold_rotation: Optional[np.ndarray] = None  # object rotation in the gripper frame

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def rotation(self) -> np.ndarray:
        return body_rotation(self.yaw, self.pitch)

    def kinetic_energy(self) -> float:
        # unit mass and inertia; only used as a monotonicity measure
        return 0.5 * sum(v * v for v in self.body_velocity)

    def pose_vector(self) -> list:
        return [self.x, self.y, self.z, self.yaw]


@dataclass
class PoolWorld:
    extent: tuple = (4.0, 2.0, 1.0)
    objects: list = field(default_factory=list)
    rng_seed: int = 0
    step_count: int = 0
    dt: float = DT
    slip_rng: np.random.Generator = None
    noise_rng: np.random.Generator = None

    @property
    def time(self) -> float:
        return self.step_count * self.dt

    def get(self, oid: int) -> ObjectInstance:
        for obj in self.objects:
            if obj.id == oid:
                return obj
        raise KeyError(oid)


@dataclass
class GraspOutcome:
    captured: bool
    object_id: Optional[int] = None


def gripper_pose(rov: RovState, gripper: GripperConfig):
    R = rov.rotation
    return rov.position + R @ np.asarray(gripper.anchor, dtype=float), R


def in_gripper_frame(rov: RovState, gripper: GripperConfig, p_world) -> np.ndarray:
    p_g, R = gripper_pose(rov, gripper)
    return R.T @ (np.asarray(p_world, dtype=float) - p_g)


def find_graspable(world: PoolWorld, rov: RovState, gripper: GripperConfig):
    """Object whose grasp point is inside the workspace box (closed set), nearest first."""
    half = np.asarray(gripper.workspace, dtype=float) / 2.0
    best = None
    for obj in world.objects:
        if obj.id == rov.held_object:
            continue
        q = in_gripper_frame(rov, gripper, obj.world_grasp_point())
        if np.all(np.abs(q) <= half + BOUNDARY_TOL):
            d = float(np.linalg.norm(q))
            if best is None or d < best[1]:
                best = (obj, d)
    return None if best is None else best[0]


def _snap_to_gripper(obj: ObjectInstance, rov: RovState, gripper: GripperConfig):
    p_g, R = gripper_pose(rov, gripper)
    obj.rotation = R @ rov.hold_rotation
    obj.position = p_g - obj.rotation @ obj.grasp_point


def attempt_grasp(world: PoolWorld, rov: RovState, gripper: GripperConfig) -> GraspOutcome:
    obj = find_graspable(world, rov, gripper)
    if obj is None:
        return GraspOutcome(False)
    rov.held_object = obj.id
    rov.hold_rotation = rov.rotation.T @ obj.rotation
    _snap_to_gripper(obj, rov, gripper)
    return GraspOutcome(True, obj.id)


def drop_object(world: PoolWorld, obj: ObjectInstance, margin: float = 0.05):
    """Detach and let the object settle upright on the floor below it."""
    heading = math.atan2(obj.rotation[1, 0], obj.rotation[0, 0])
    obj.rotation = rot_z(heading)
    L, W, _ = world.extent
    obj.position = np.array([
        min(max(obj.position[0], margin), L - margin),
        min(max(obj.position[1], margin), W - margin),
        0.0,
    ])


def slip_probability(graspability: float, accel: float, dt: float, dyn: DynamicsConfig) -> float:
    return dt * dyn.slip_rate * (1.0 - graspability) * (1.0 + dyn.slip_accel_gain * abs(accel))


def evaluate_slip(rov: RovState, obj: ObjectInstance, dt: float, rng: np.random.Generator,
                  dyn: DynamicsConfig) -> bool:
    """One Bernoulli slip draw; exactly one uniform is consumed per call."""
    p = slip_probability(obj.graspability, rov.last_accel, dt, dyn)
    return bool(rng.random() < p)


def _release(world: PoolWorld, rov: RovState):
    if rov.held_object is not None:
        drop_object(world, world.get(rov.held_object))
    rov.held_object = None
    rov.hold_rotation = None


def step(world: PoolWorld, rov: RovState, cmd: ActionCommand, dt: float, scenario: ScenarioConfig):
    """Advance one inner-loop tick in place and return ``(world, rov)``."""
    dyn = scenario.dynamics
    gripper = scenario.gripper
    vel = rov.body_velocity
    cmds = (cmd.forward, cmd.lateral, cmd.vertical, cmd.yaw)
    new = [0.0, 0.0, 0.0, 0.0]
    for i in range(4):
        v = vel[i]
        tau = dyn.tau[i]
        target = cmds[i] * dyn.max_speed[i]
        new[i] = (v + dt * target / tau) / (1.0 + dt / tau + dt * dyn.quad_drag[i] * abs(v))
    ax = (new[0] - vel[0]) / dt
    ay = (new[1] - vel[1]) / dt
    az = (new[2] - vel[2]) / dt
    rov.last_accel = math.sqrt(ax * ax + ay * ay + az * az)
    rov.body_velocity = new

    rov.yaw += dt * new[3]
    c, s = math.cos(rov.yaw), math.sin(rov.yaw)
    rov.x += dt * (c * new[0] - s * new[1])
    rov.y += dt * (s * new[0] + c * new[1])
    rov.z += dt * new[2]
    L, W, D = world.extent
    m = dyn.wall_margin
    rov.x = min(max(rov.x, m), L - m)
    rov.y = min(max(rov.y, m), W - m)
    rov.z = min(max(rov.z, dyn.min_altitude), D)
    if not all(math.isfinite(v) for v in (rov.x, rov.y, rov.z, rov.yaw, *new)):
        raise SimFault("non-finite ROV state", diagnostics={
            "time": world.time, "pose": [rov.x, rov.y, rov.z, rov.yaw],
            "velocity": list(new), "command": cmd.as_vector(),
        })

    # gripper
    if cmd.open:
        _release(world, rov)
        rov.gripper_target = 1.0
        rov.grasp_outcome = None
        rov.slipped = False
    elif cmd.close and rov.gripper_target != 0.0:
        rov.gripper_target = 0.0
        rov.grasp_outcome = None
        rov.slipped = False
    rate = dyn.gripper_rate * dt
    if rov.gripper_target > rov.gripper_aperture:
        rov.gripper_aperture = min(rov.gripper_target, rov.gripper_aperture + rate)
    elif rov.gripper_target < rov.gripper_aperture and rov.held_object is None:
        nxt = max(rov.gripper_target, rov.gripper_aperture - rate)
        if rov.grasp_outcome is None:
            cand = find_graspable(world, rov, gripper)
            if cand is not None and nxt <= cand.geometry.contact_aperture:
                # jaws reach the object: closure completes on contact
                attempt_grasp(world, rov, gripper)
                rov.grasp_outcome = True
                nxt = cand.geometry.contact_aperture
            elif nxt <= rov.gripper_target:
                rov.grasp_outcome = False
        rov.gripper_aperture = nxt

    if rov.held_object is not None:
        obj = world.get(rov.held_object)
        _snap_to_gripper(obj, rov, gripper)
        if evaluate_slip(rov, obj, dt, world.slip_rng, dyn):
            _release(world, rov)
            rov.slipped = True
    world.step_count += 1
    return world, rov


def _sample(rng, lo_hi):
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def scatter_reset(world: PoolWorld, rng: np.random.Generator, n_objects: int, shape_set,
                  scenario: ScenarioConfig):
    """Sample an ROV pose and place objects on the floor ahead of it.

    Objects are kept apart by ``min_separation`` and, for multi-object scenes,
    every object must be visible in the first forward-camera frame.  Returns
    ``(world, rov)``.
    """
    from .render import render  # local import: render depends on this module

    cfg = scenario.reset
    L, W, _ = world.extent
    explicit = list(scenario.objects)
    if explicit and len(explicit) != n_objects:
        raise ValueError("explicit object list length must equal n_objects")
    shape_set = tuple(shape_set)
    for _ in range(cfg.max_attempts):
        rov = RovState(
            x=_sample(rng, cfg.rov_x), y=_sample(rng, cfg.rov_y), z=_sample(rng, cfg.rov_z),
            yaw=math.radians(_sample(rng, cfg.rov_yaw_deg)), pitch=math.radians(scenario.pitch_deg),
        )
        objects = []
        ok = True
        for i in range(n_objects):
            if explicit:
                spec = explicit[i]
                shape, grasp, scale = spec.shape, spec.graspability, spec.scale
            else:
                shape = shape_set[int(rng.integers(len(shape_set)))]
                grasp = _sample(rng, scenario.graspability)
                scale = _sample(rng, scenario.scale)
            placed = False
            for _ in range(cfg.max_attempts):
                rng_d = _sample(rng, cfg.object_range)
                bearing = rov.yaw + math.radians(_sample(rng, cfg.object_bearing_deg))
                px = rov.x + rng_d * math.cos(bearing)
                py = rov.y + rng_d * math.sin(bearing)
                heading = float(rng.uniform(-math.pi, math.pi))
                if not (0.2 <= px <= L - 0.2 and 0.2 <= py <= W - 0.2):
                    continue
                if any(math.hypot(px - o.position[0], py - o.position[1]) < cfg.min_separation
                       for o in objects):
                    continue
                objects.append(ObjectInstance(i, shape, grasp, scale, np.array([px, py, 0.0]), rot_z(heading)))
                placed = True
                break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        world.objects = objects
        if n_objects == 0:
            return world, rov
        obs = render(world, rov, scenario.forward_camera)
        cam = scenario.forward_camera
        margin = cfg.visible_margin_px
        visible = True
        for obj in objects:
            n = int(np.count_nonzero(obs.labels == obj.id))
            kp = obs.tracks.get(obj.id)
            if n < cfg.min_visible_px or kp is None:
                visible = False
                break
            cu, cv = obs.centroid(obj.id)
            if not (margin <= cu <= cam.width - 1 - margin and margin <= cv <= cam.height - 1 - margin):
                visible = False
                break
        if visible:
            return world, rov
    raise PlacementFailure(f"could not place {n_objects} visible objects in {cfg.max_attempts} attempts")


class PoolSim:
    """Single-episode simulation handle owning the world, ROV and RNG streams."""

    def __init__(self, scenario: ScenarioConfig, seed: int, n_objects: Optional[int] = None):
        self.scenario = scenario
        self.seed = int(seed)
        reset_ss, slip_ss, noise_ss, ctrl_ss = np.random.SeedSequence(self.seed).spawn(4)
        self.world = PoolWorld(
            extent=tuple(scenario.pool_extent), rng_seed=self.seed,
            slip_rng=np.random.default_rng(slip_ss), noise_rng=np.random.default_rng(noise_ss),
        )
        self.controller_rng = np.random.default_rng(ctrl_ss)
        n = scenario.n_objects if n_objects is None else n_objects
        if scenario.persist_layout:
            # the layout stream ignores the episode seed; the other streams do not
            reset_ss = np.random.SeedSequence(int(scenario.seed)).spawn(4)[0]
        self.world, self.rov = scatter_reset(
            self.world, np.random.default_rng(reset_ss), n, scenario.shape_set, scenario)

    @property
    def time(self) -> float:
        return self.world.time

    @property
    def dt(self) -> float:
        return self.world.dt

    def step(self, cmd: ActionCommand = IDLE):
        step(self.world, self.rov, cmd, self.world.dt, self.scenario)

    def render(self, camera: str = "forward", with_rgb: bool = False):
        from .render import render

        mount = self.scenario.forward_camera if camera == "forward" else self.scenario.top_camera
        return render(self.world, self.rov, mount, noise_sigma=self.scenario.depth_noise,
                      rng=self.world.noise_rng, far=self.scenario.far_plane,
                      floor=self.scenario.render_floor, with_rgb=with_rgb)

    def gripper_pose(self):
        return gripper_pose(self.rov, self.scenario.gripper)
