"""Six-stage visuo-servoing grasp controller with regrasp and backup recovery.

The controller sees only camera-frame observations (masks, depth, proprio).
Perception arrives at 10 Hz; :meth:`StagedController.step` is called at the
100 Hz inner rate and latches the last perception-derived command in between,
while timers (grasp closure, recovery manoeuvres, stage timeouts) advance on
every tick.

Image-error sign conventions: positive yaw command turns left, so the yaw
error is ``centerline - u``; positive surge moves the target down the image,
so the forward error is ``lower_line_v - v``; descending moves the target up
the image, so the heave error is ``band_mid - v``.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .config import AxisGains, ControllerConfig
from .errors import NoVisibleTarget, TargetDepthUnavailable
from .sim import IDLE, ActionCommand

log = logging.getLogger(__name__)

PdGains = AxisGains


class Stage(str, enum.Enum):
    RESET = "Reset"
    YAW_ALIGN = "YawAlign"
    FORWARD_APPROACH = "ForwardApproach"
    DEPTH_ADJUST = "DepthAdjust"
    CLOSE_RANGE = "CloseRange"
    GRASP = "Grasp"
    DRAG_VERIFY = "DragVerify"
    RECOVER_REGRASP = "RecoverRegrasp"
    RECOVER_BACKUP = "RecoverBackup"
    DONE = "Done"


class FailureReason(str, enum.Enum):
    NO_VISIBLE_TARGET = "NoVisibleTarget"
    GRASP_MISSED = "GraspMissed"
    SLIPPED = "Slipped"
    TIMEOUT = "Timeout"
    LOSS_OF_VIEW = "LossOfView"
    SIM_FAULT = "SimFault"


SERVO_STAGES = (Stage.YAW_ALIGN, Stage.FORWARD_APPROACH, Stage.DEPTH_ADJUST, Stage.CLOSE_RANGE)

_RECOVERABLE = {Stage.YAW_ALIGN, Stage.RECOVER_BACKUP, Stage.DONE}
TRANSITIONS = {
    Stage.RESET: {Stage.YAW_ALIGN, Stage.DONE},
    Stage.YAW_ALIGN: {Stage.FORWARD_APPROACH} | _RECOVERABLE,
    Stage.FORWARD_APPROACH: {Stage.DEPTH_ADJUST} | _RECOVERABLE,
    Stage.DEPTH_ADJUST: {Stage.CLOSE_RANGE} | _RECOVERABLE,
    Stage.CLOSE_RANGE: {Stage.GRASP} | _RECOVERABLE,
    Stage.GRASP: {Stage.DRAG_VERIFY, Stage.DONE},
    Stage.DRAG_VERIFY: {Stage.DONE, Stage.RECOVER_REGRASP},
    Stage.RECOVER_REGRASP: {Stage.YAW_ALIGN, Stage.RECOVER_BACKUP, Stage.DONE},
    Stage.RECOVER_BACKUP: {Stage.YAW_ALIGN, Stage.RECOVER_BACKUP, Stage.DONE},
    Stage.DONE: set(),
}


@dataclass
class StageState:
    stage: Stage = Stage.RESET
    target_id: Optional[int] = None
    regrasp_count: int = 0
    entered_at: float = 0.0


@dataclass(frozen=True)
class ServoReferences:
    lower_line_v: float
    upper_band: tuple
    margin_px: float
    close_range_depth: float
    grasp_depth: float
    width: int
    height: int

    def __post_init__(self):
        lo, hi = self.upper_band
        if not 0 < lo < hi < self.height:
            raise ValueError("band must satisfy 0 < v_lo < v_hi < image height")
        if not 0 <= self.lower_line_v < self.height:
            raise ValueError("lower line outside the image")
        if not self.margin_px < min(self.width, self.height) / 2:
            raise ValueError("margin too large for the image")

    @classmethod
    def from_config(cls, cfg: ControllerConfig, width: int, height: int) -> "ServoReferences":
        lo, hi = cfg.band_frac
        return cls(cfg.lower_line_frac * height, (lo * height, hi * height), cfg.margin_px,
                   cfg.close_range_depth, cfg.grasp_depth, width, height)

    @property
    def centerline(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def band_mid(self) -> float:
        return (self.upper_band[0] + self.upper_band[1]) / 2.0

    def near_margin(self, u: float, v: float) -> bool:
        m = self.margin_px
        return u < m or v < m or u > self.width - 1 - m or v > self.height - 1 - m


class PdOutput(NamedTuple):
    command: float
    error: float
    rate: float


def pd_command(error: float, prev_error, gains: PdGains, dt: float, prev_rate=None) -> PdOutput:
    """Clipped PD on ``error`` with a one-pole low-passed backward difference.

    ``prev_error=None`` means no history (zero derivative); ``prev_rate=None``
    disables the low-pass.  Inside the deadband the command is zero.
    """
    raw = 0.0 if prev_error is None else (error - prev_error) / dt
    rate = raw if prev_rate is None else gains.alpha * raw + (1.0 - gains.alpha) * prev_rate
    if abs(error) < gains.deadband:
        return PdOutput(0.0, error, rate)
    cmd = gains.kp * error + gains.kd * rate
    return PdOutput(float(np.clip(cmd, -gains.clip, gains.clip)), error, rate)


def yaw_step(centroid_u: float, prev_error, gains: PdGains, dt: float, centerline: float,
             prev_rate=None) -> PdOutput:
    return pd_command(centerline - centroid_u, prev_error, gains, dt, prev_rate)


def forward_step(centroid_v: float, refs: ServoReferences, gains: PdGains, dt: float,
                 prev_error=None, prev_rate=None):
    """Surge toward the lower reference line. Returns ``(PdOutput, done)``."""
    error = refs.lower_line_v - centroid_v
    if abs(error) < gains.deadband:
        return PdOutput(0.0, error, 0.0), True
    return pd_command(error, prev_error, gains, dt, prev_rate), False


def depth_step(centroid_v: float, refs: ServoReferences, gains: PdGains, dt: float,
               prev_error=None, prev_rate=None):
    """Heave the centroid into the upper band. Returns ``(PdOutput, done)``."""
    lo, hi = refs.upper_band
    error = refs.band_mid - centroid_v
    out = pd_command(error, prev_error, gains, dt, prev_rate)
    return out, bool(lo <= centroid_v <= hi)


def close_range_step(obs, target_id: int, refs: ServoReferences, creep: float):
    """Creep forward until the nearest target pixel is within grasp depth.

    Returns ``(surge, trigger_grasp)``.
    """
    d = obs.min_depth(target_id)
    if d is None:
        raise TargetDepthUnavailable(f"target {target_id} has an empty mask")
    if d <= refs.grasp_depth:
        return 0.0, True
    return creep, False


def select_target(obs, mode: str = "center_bias", heatmap=None) -> int:
    """Pick the object to grasp.

    ``center_bias``: smallest centroid distance to the image centre, ties to
    the lowest id.  ``affordance``: the object whose mask contains the heatmap
    argmax, else the object with the mask pixel nearest to it.  An all-zero
    heatmap carries no information and falls back to ``center_bias``.
    """
    ids = obs.visible_ids()
    if not ids:
        raise NoVisibleTarget("no object mask is visible")
    if mode == "affordance":
        if heatmap is None:
            raise ValueError("affordance mode needs a heatmap")
        hm = np.asarray(heatmap)
        if hm.shape != obs.labels.shape:
            raise ValueError("heatmap must match the observation resolution")
        if hm.max() > 0:
            r, c = np.unravel_index(int(np.argmax(hm)), hm.shape)
            lab = int(obs.labels[r, c])
            if lab >= 0:
                return lab
            vs, us = np.nonzero(obs.labels >= 0)
            d2 = (vs - r) ** 2 + (us - c) ** 2
            best = d2.min()
            return int(obs.labels[vs[d2 == best], us[d2 == best]].min())
    elif mode != "center_bias":
        raise ValueError(f"unknown selection mode {mode!r}")
    cu = (obs.width - 1) / 2.0
    cv = (obs.height - 1) / 2.0
    best_id, best_d = None, None
    for oid in ids:
        u, v = obs.centroid(oid)
        d = (u - cu) ** 2 + (v - cv) ** 2
        if best_d is None or d < best_d - 1e-9:
            best_id, best_d = oid, d
    return best_id


def recovery_transition(state: StageState, signal: str, cfg: ControllerConfig, t: float,
                        reason: Optional[str] = None):
    """Next stage after a failure signal.

    ``signal`` is ``"grasp_failed"`` (regrasp path) or one of ``"margin"``,
    ``"lost"``, ``"timeout"`` (backup path).  Returns ``(StageState, reason)``
    where ``reason`` names the terminal failure when the result is Done.
    """
    if signal == "grasp_failed":
        if cfg.regrasp_enabled and state.regrasp_count < cfg.max_regrasps:
            return StageState(Stage.RECOVER_REGRASP, state.target_id, state.regrasp_count + 1, t), None
        return (StageState(Stage.DONE, state.target_id, state.regrasp_count, t),
                reason or FailureReason.GRASP_MISSED.value)
    if signal in ("margin", "lost", "timeout"):
        if cfg.backup_enabled:
            return StageState(Stage.RECOVER_BACKUP, state.target_id, state.regrasp_count, t), None
        terminal = FailureReason.TIMEOUT if signal == "timeout" else FailureReason.LOSS_OF_VIEW
        return StageState(Stage.DONE, state.target_id, state.regrasp_count, t), terminal.value
    raise ValueError(f"unknown recovery signal {signal!r}")


class StagedController:
    def __init__(self, cfg: ControllerConfig, width: int, height: int,
                 rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.refs = ServoReferences.from_config(cfg, width, height)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.state = StageState()
        self.transitions = []
        self.events = []
        self.frame_log = []
        self.outcome = None  # "success" or a FailureReason value once Done
        self.initial_target = None
        self.backups = 0
        self._cmd = IDLE
        self._pd = {}
        self._last_centroid = None
        self._last_seen = 0.0
        self._in_margin = False
        self._lateral = (0.0, 0.0)  # (direction, duration)
        self._yaw_latched = 0.0
        self._reacquiring = False  # a backup retreat finished and the target is not yet back
        self._lost_backup_target = None  # target that already got a backup for being lost

    # -- bookkeeping ------------------------------------------------------
    @property
    def stage(self) -> Stage:
        return self.state.stage

    @property
    def done(self) -> bool:
        return self.state.stage is Stage.DONE

    @property
    def target_id(self):
        return self.state.target_id

    def _event(self, t, kind, **info):
        self.events.append({"t": round(t, 6), "event": kind, **info})

    def _go(self, t, stage: Stage, reason: str, **changes):
        old = self.state.stage
        if stage not in TRANSITIONS[old]:
            raise RuntimeError(f"illegal transition {old.value} -> {stage.value}")
        self.state = StageState(stage, changes.get("target_id", self.state.target_id),
                                changes.get("regrasp_count", self.state.regrasp_count), t)
        self.transitions.append({"t": round(t, 6), "from": old.value, "to": stage.value, "reason": reason})
        self._pd.clear()
        log.debug("t=%.2f %s -> %s (%s)", t, old.value, stage.value, reason)

    def _finish(self, t, outcome: str):
        self.outcome = outcome
        self._go(t, Stage.DONE, outcome)
        self._cmd = IDLE

    def _pd_axis(self, axis, fn):
        """Run ``fn(prev_error, prev_rate)`` and remember its error/rate."""
        prev_e, prev_r = self._pd.get(axis, (None, None))
        res = fn(prev_e, prev_r)
        out = res if isinstance(res, PdOutput) else res[0]
        self._pd[axis] = (out.error, out.rate)
        return res

    # -- public -----------------------------------------------------------
    def step(self, t: float, obs=None, heatmap=None) -> ActionCommand:
        if self.done:
            return IDLE
        if obs is not None:
            self._perceive(t, obs, heatmap)
        if not self.done:
            self._tick(t)
        return self._cmd

    def drag_result(self, t: float, success: bool, reason: Optional[str] = None):
        """Report the drag-verification verdict for the current grasp."""
        if self.state.stage is not Stage.DRAG_VERIFY:
            raise RuntimeError("drag result outside DragVerify")
        if success:
            self._finish(t, "success")
            return
        new, terminal = recovery_transition(self.state, "grasp_failed", self.cfg, t, reason)
        if new.stage is Stage.DONE:
            self._finish(t, terminal)
            return
        mag = float(self.rng.uniform(*self.cfg.lateral_offset))
        direction = 1.0 if self.rng.random() < 0.5 else -1.0
        self._lateral = (direction, mag / self.cfg.lateral_speed)
        self._event(t, "regrasp", attempt=new.regrasp_count, offset=direction * mag, reason=reason)
        self._go(t, Stage.RECOVER_REGRASP, reason or "grasp_failed", regrasp_count=new.regrasp_count)
        self._cmd = ActionCommand(forward=self.cfg.back_command, open=True)

    def fail(self, t: float, reason: str):
        if not self.done:
            self._finish(t, reason)

    # -- perception-rate logic -------------------------------------------
    def _log_frame(self, t, centroid, visible, yaw_out, yaw_inputs, min_depth):
        self.frame_log.append({
            "t": round(t, 6),
            "stage": self.state.stage.value,
            "target": self.state.target_id,
            "centroid": None if centroid is None else [centroid[0], centroid[1]],
            "visible": visible,
            "yaw_error": None if yaw_out is None else yaw_out.error,
            "yaw_prev_error": yaw_inputs[0],
            "yaw_prev_rate": yaw_inputs[1],
            "yaw_command": None if yaw_out is None else yaw_out.command,
            "min_depth": min_depth,
        })

    def _perceive(self, t, obs, heatmap):
        cfg, refs = self.cfg, self.refs
        st = self.state.stage
        if st is Stage.RESET:
            mode = cfg.mode if heatmap is not None else "center_bias"
            try:
                tid = select_target(obs, mode, heatmap)
            except NoVisibleTarget:
                self._log_frame(t, None, False, None, (None, None), None)
                self._finish(t, FailureReason.NO_VISIBLE_TARGET.value)
                return
            self.initial_target = tid
            self._last_seen = t
            self._go(t, Stage.YAW_ALIGN, "target_selected", target_id=tid)
            st = self.state.stage
        if st is Stage.RECOVER_REGRASP:
            self._watch_regrasp(t, obs)
            return
        if st not in SERVO_STAGES and st not in (Stage.GRASP, Stage.RECOVER_BACKUP):
            self._log_frame(t, None, None, None, (None, None), None)
            return

        tid = self.state.target_id
        c = obs.centroid(tid)
        visible = c is not None
        min_depth = obs.min_depth(tid) if visible else None
        if visible:
            self._last_seen = t
            self._last_centroid = c
            self._reacquiring = False
        elif t - self._last_seen > cfg.coast_time + 1e-9 and st is not Stage.GRASP:
            self._log_frame(t, None, False, None, (None, None), None)
            self._on_lost(t, obs, heatmap)
            return
        centroid = self._last_centroid

        if visible and st in SERVO_STAGES:
            near = refs.near_margin(*c)
            if near and not self._in_margin:
                self._event(t, "margin_excursion", target=tid, centroid=[c[0], c[1]], stage=st.value)
            self._in_margin = near
            if near and cfg.backup_enabled:
                self._log_frame(t, c, True, None, (None, None), min_depth)
                self._enter_backup(t, "margin")
                return

        yaw_inputs = self._pd.get("yaw", (None, None))
        yaw_out = None
        if centroid is not None and (visible or st is not Stage.RECOVER_BACKUP):
            u = centroid[0]
            yaw_out = self._pd_axis("yaw", lambda pe, pr: yaw_step(
                u, pe, cfg.yaw, cfg.perception_period, refs.centerline, pr))
        yaw_cmd = 0.0 if yaw_out is None else yaw_out.command
        self._log_frame(t, centroid, visible, yaw_out, yaw_inputs, min_depth)
        dt = cfg.perception_period

        if st is Stage.YAW_ALIGN:
            self._cmd = ActionCommand(yaw=yaw_cmd)
            if abs(yaw_out.error) < cfg.yaw_align_threshold:
                self._go(t, Stage.FORWARD_APPROACH, "yaw_aligned")
                self._pd["yaw"] = (yaw_out.error, yaw_out.rate)
        elif st is Stage.FORWARD_APPROACH:
            out, done = self._pd_axis("forward", lambda pe, pr: forward_step(
                centroid[1], refs, cfg.forward, dt, pe, pr))
            self._cmd = ActionCommand(yaw=yaw_cmd, forward=out.command)
            close = min_depth is not None and min_depth <= refs.close_range_depth
            if done or close:
                self._go(t, Stage.DEPTH_ADJUST, "line_reached" if done else "close_range_depth")
                self._pd["yaw"] = (yaw_out.error, yaw_out.rate)
        elif st is Stage.DEPTH_ADJUST:
            out, done = self._pd_axis("depth", lambda pe, pr: depth_step(
                centroid[1], refs, cfg.depth, dt, pe, pr))
            self._cmd = ActionCommand(yaw=yaw_cmd, vertical=out.command)
            if done:
                self._go(t, Stage.CLOSE_RANGE, "in_band")
                self._pd["yaw"] = (yaw_out.error, yaw_out.rate)
        elif st is Stage.CLOSE_RANGE:
            out, _ = self._pd_axis("depth", lambda pe, pr: depth_step(
                centroid[1], refs, cfg.depth, dt, pe, pr))
            try:
                surge, trigger = close_range_step(obs, tid, refs, cfg.creep_command)
            except TargetDepthUnavailable:
                surge, trigger = 0.0, False
            if trigger:
                self._go(t, Stage.GRASP, "grasp_depth")
                self._pd["yaw"] = (yaw_out.error, yaw_out.rate)
                self._cmd = ActionCommand(yaw=yaw_cmd, close=True)
            else:
                self._cmd = ActionCommand(yaw=yaw_cmd, forward=surge, vertical=out.command)
        elif st is Stage.GRASP:
            self._cmd = ActionCommand(yaw=yaw_cmd, close=True)
        elif st is Stage.RECOVER_BACKUP:
            self._cmd = ActionCommand(yaw=yaw_cmd, forward=cfg.retreat_command)

    def _watch_regrasp(self, t, obs):
        # the regrasp back-up and sideways offset happen close to the object,
        # so the target can slide out of view; watch the margin here too
        tid = self.state.target_id
        c = obs.centroid(tid)
        self._log_frame(t, c, c is not None, None, (None, None), None)
        if c is None:
            return
        near = self.refs.near_margin(*c)
        if near and not self._in_margin:
            self._event(t, "margin_excursion", target=tid, centroid=[c[0], c[1]],
                        stage=self.state.stage.value)
        self._in_margin = near
        if near and self.cfg.backup_enabled:
            self._enter_backup(t, "margin")

    def _on_lost(self, t, obs, heatmap):
        tid = self.state.target_id
        st = self.state.stage
        if st is Stage.RECOVER_BACKUP:
            return  # already retreating; keep going until the retreat completes
        self._event(t, "target_lost", target=tid, stage=st.value)
        if self.cfg.backup_enabled and not self._reacquiring and self._lost_backup_target != tid:
            self._lost_backup_target = tid
            self._enter_backup(t, "lost")
            return
        # no backup, or retreating already failed to keep this target (typically an
        # occluder in front of it): reselect
        self._reacquiring = False
        if not obs.visible_ids():
            self._finish(t, FailureReason.LOSS_OF_VIEW.value)
            return
        hm = heatmap if (self.cfg.mode == "affordance" and heatmap is not None) else None
        new = select_target(obs, "affordance" if hm is not None else "center_bias", hm)
        if new != tid:
            self._event(t, "target_switch", previous=tid, target=new)
        self._last_seen = t
        self._last_centroid = None
        self._go(t, Stage.YAW_ALIGN, "reacquire", target_id=new)

    def _enter_backup(self, t, reason):
        self.backups += 1
        self._event(t, "backup", reason=reason, count=self.backups)
        if self.backups > self.cfg.max_backups:
            self._finish(t, FailureReason.LOSS_OF_VIEW.value)
            return
        self._go(t, Stage.RECOVER_BACKUP, reason)
        self._cmd = ActionCommand(forward=self.cfg.retreat_command)

    # -- inner-rate timers ------------------------------------------------
    def _tick(self, t):
        cfg = self.cfg
        st = self.state.stage
        elapsed = t - self.state.entered_at
        if st is Stage.GRASP:
            if elapsed >= cfg.close_duration - 1e-9:
                self._go(t, Stage.DRAG_VERIFY, "closed")
                self._cmd = ActionCommand(forward=cfg.drag_command, close=True)
        elif st is Stage.RECOVER_REGRASP:
            direction, lat_time = self._lateral
            if elapsed < cfg.back_duration:
                self._cmd = ActionCommand(forward=cfg.back_command, open=True)
            elif elapsed < cfg.back_duration + lat_time:
                self._cmd = ActionCommand(lateral=direction * cfg.lateral_command)
            else:
                self._last_seen = t
                self._in_margin = False
                self._go(t, Stage.YAW_ALIGN, "regrasp_ready")
                self._cmd = IDLE
        elif st is Stage.RECOVER_BACKUP:
            if elapsed >= cfg.retreat_duration - 1e-9:
                self._last_seen = t
                self._in_margin = False
                self._reacquiring = True
                self._go(t, Stage.YAW_ALIGN, "backup_done")
                self._cmd = IDLE
        elif st in SERVO_STAGES and elapsed > cfg.stage_timeout:
            self._event(t, "stage_timeout", stage=st.value)
            new, terminal = recovery_transition(self.state, "timeout", cfg, t)
            if new.stage is Stage.DONE:
                self._finish(t, terminal)
            else:
                self._enter_backup(t, "timeout")


@dataclass
class DragResult:
    success: bool
    reason: Optional[str] = None
    elapsed: float = 0.0

    def __bool__(self):
        return self.success


def drag_verify(sim, duration: float = 3.0, command: float = -0.3, on_step=None) -> DragResult:
    """Drag the grasped object backwards; success iff it is held throughout.

    ``on_step(sim, cmd)`` is called before every inner step (used for logging).
    Returns immediately when nothing was captured and stops at the first slip.
    """
    if sim.rov.held_object is None:
        return DragResult(False, FailureReason.GRASP_MISSED.value, 0.0)
    cmd = ActionCommand(forward=command, close=True)
    n = int(round(duration / sim.dt))
    for i in range(n):
        if on_step is not None:
            on_step(sim, cmd)
        sim.step(cmd)
        if sim.rov.held_object is None:
            return DragResult(False, FailureReason.SLIPPED.value, (i + 1) * sim.dt)
    return DragResult(True, None, n * sim.dt)


def drag_slip_profile(sim, duration: float = 3.0, command: float = -0.3) -> np.ndarray:
    """Per-step slip probabilities of a drag from the current state.

    The vehicle trajectory during a drag does not depend on the slip draws
    (a slip ends the drag), so one slip-free rollout on a copy of the state
    gives the hazard sequence shared by every seed.
    """
    import copy

    from .sim import slip_probability, step

    if sim.rov.held_object is None:
        raise ValueError("nothing is held")
    world = copy.deepcopy(sim.world)
    rov = copy.deepcopy(sim.rov)
    g = world.get(rov.held_object).graspability
    world.get(rov.held_object).graspability = 1.0  # no slip during the profile rollout
    dyn = sim.scenario.dynamics
    cmd = ActionCommand(forward=command, close=True)
    n = int(round(duration / sim.dt))
    probs = np.empty(n)
    for i in range(n):
        step(world, rov, cmd, sim.dt, sim.scenario)
        probs[i] = slip_probability(g, rov.last_accel, sim.dt, dyn)
    return probs


def drag_verify_batch(sim, slip_rngs, duration: float = 3.0, command: float = -0.3) -> np.ndarray:
    """Vectorized :func:`drag_verify` over many independent slip streams.

    Trial ``i`` gives the same verdict as running :func:`drag_verify` on the
    same state with ``world.slip_rng = slip_rngs[i]``.
    """
    probs = drag_slip_profile(sim, duration, command)
    draws = np.stack([rng.random(len(probs)) for rng in slip_rngs])
    return ~(draws < probs).any(axis=1)
