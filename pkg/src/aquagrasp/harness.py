"""Collection campaigns: reset -> controller rollout -> drag verification ->
persistence -> statistics, plus the scripted experiment suites and replay.

The controller runs at the 100 Hz inner rate with perception every 0.1 s.
Each perception tick opens a 10 Hz record frame whose action is the last
command issued before the next tick (last-value bucketing).
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import CampaignSpec, ControllerConfig, ScenarioConfig, to_mapping
from .controller import FailureReason, Stage, StagedController, drag_verify, select_target
from .errors import MissingFrameData, NoVisibleTarget, PlacementFailure, SimFault, UnknownSuite
from .labeling import oracle_heatmap
from .sim import PoolSim

log = logging.getLogger(__name__)

RECORD_VERSION = 1


@dataclass
class EpisodeRecord:
    episode_id: int
    seed: int
    scenario: str
    mode: str
    frames: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    events: list = field(default_factory=list)
    controller_log: list = field(default_factory=list)
    objects: list = field(default_factory=list)  # initial layout
    camera: dict = field(default_factory=dict)
    pitch_deg: float = 10.0
    gripper_anchor: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    far_plane: float = 10.0
    success: bool = False
    failure: Optional[str] = None
    diagnostics: Optional[dict] = None
    duration: float = 0.0
    goal_id: Optional[int] = None
    selected_target: Optional[int] = None
    grasped_object: Optional[int] = None
    drag_duration: float = 0.0
    regrasps: int = 0
    backups: int = 0
    final_attempt_t: float = 0.0
    frames_saved: bool = False

    @property
    def outcome(self) -> str:
        return "success" if self.success else self.failure

    @property
    def margin_excursion(self) -> bool:
        return any(e["event"] == "margin_excursion" for e in self.events)

    @property
    def target_switch(self) -> bool:
        return any(e["event"] == "target_switch" for e in self.events)

    @property
    def wrong_target(self) -> Optional[bool]:
        """Grasped object differs from the goal (or the first selection)."""
        if self.grasped_object is None:
            return None
        ref = self.goal_id if self.goal_id is not None else self.selected_target
        return self.grasped_object != ref

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["version"] = RECORD_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        d = dict(d)
        d.pop("version", None)
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, episode_dir) -> Path:
        episode_dir = Path(episode_dir)
        episode_dir.mkdir(parents=True, exist_ok=True)
        path = episode_dir / "record.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "EpisodeRecord":
        path = Path(path)
        if path.is_dir():
            path = path / "record.json"
        return cls.from_dict(json.loads(path.read_text()))


def episode_dir_name(seed: int) -> str:
    return f"episode_{seed:06d}"


# -- frame dumps ------------------------------------------------------------

def write_frame_arrays(frames_dir: Path, k: int, obs):
    """Depth as headerless LE float32, labels as 16-bit PNG (0 = background, id + 1)."""
    from PIL import Image

    frames_dir.mkdir(parents=True, exist_ok=True)
    depth_name = f"depth_{k:05d}.f32"
    label_name = f"labels_{k:05d}.png"
    obs.depth.astype("<f4").tofile(frames_dir / depth_name)
    Image.fromarray((obs.labels.astype(np.int32) + 1).astype(np.uint16)).save(frames_dir / label_name)
    return f"frames/{depth_name}", f"frames/{label_name}"


def read_depth(path, width: int, height: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFrameData(f"missing frame file {path}")
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != width * height:
        raise MissingFrameData(f"{path}: expected {width * height} values, found {arr.size}")
    return arr.reshape(height, width)


def read_labels(path) -> np.ndarray:
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise MissingFrameData(f"missing frame file {path}")
    return np.asarray(Image.open(path), dtype=np.int32) - 1


# -- episode ----------------------------------------------------------------

def choose_goal(policy: str, seed: int, obs, n_objects: int) -> Optional[int]:
    """Goal object for goal-conditioned runs; drawn from its own seeded stream."""
    if policy == "none" or n_objects == 0:
        return None
    rng = np.random.default_rng([seed, 7])
    ids = obs.visible_ids()
    if not ids:
        return None
    if policy == "random":
        return int(ids[rng.integers(len(ids))])
    center = select_target(obs, "center_bias")
    others = [i for i in ids if i != center]
    if not others:
        return center
    return int(others[rng.integers(len(others))])


class _Recorder:
    def __init__(self, sim: PoolSim, ctrl: StagedController, rec: EpisodeRecord,
                 frames_dir: Optional[Path]):
        self.sim, self.ctrl, self.rec = sim, ctrl, rec
        self.frames_dir = frames_dir
        self.period = int(round(ctrl.cfg.perception_period / sim.dt))
        self._opened_at = -1

    def open_frame(self, obs=None):
        sim, rov = self.sim, self.sim.rov
        if sim.world.step_count == self._opened_at:
            return
        self._opened_at = sim.world.step_count
        k = len(self.rec.frames)
        depth_ref = label_ref = None
        if self.frames_dir is not None:
            if obs is None:
                obs = sim.render()
            depth_ref, label_ref = write_frame_arrays(self.frames_dir, k, obs)
        if obs is not None:
            proprio = dict(obs.proprio)
        else:
            proprio = {"compass": math.remainder(rov.yaw, math.tau), "pitch": rov.pitch,
                       "vehicle_depth": sim.world.extent[2] - rov.z, "gripper": rov.gripper_aperture}
        self.rec.frames.append({
            "k": k,
            "t": round(sim.time, 6),
            "stage": self.ctrl.stage.value,
            "target": self.ctrl.target_id,
            "proprio": proprio,
            "aperture": rov.gripper_aperture,
            "held": rov.held_object,
            "rov": rov.pose_vector(),
            "objects": {str(o.id): o.pose_vector() for o in sim.world.objects},
            "action": [0.0] * 6,
            "depth": depth_ref,
            "labels": label_ref,
        })

    def on_step(self, sim, cmd):
        if sim.world.step_count % self.period == 0:
            self.open_frame()
        self.rec.frames[-1]["action"] = cmd.as_vector()


def run_episode(spec: CampaignSpec, seed: int, episode_id: Optional[int] = None,
                out_dir=None) -> EpisodeRecord:
    """Roll out one seeded episode; never raises for in-episode faults."""
    scenario, cfg = spec.scenario, spec.controller
    episode_id = seed if episode_id is None else episode_id
    mount = scenario.forward_camera
    rec = EpisodeRecord(episode_id, int(seed), scenario.name, cfg.mode,
                        camera=to_mapping(mount), pitch_deg=scenario.pitch_deg,
                        gripper_anchor=list(scenario.gripper.anchor), far_plane=scenario.far_plane)
    ep_dir = Path(out_dir) / episode_dir_name(seed) if out_dir else None
    frames_dir = ep_dir / "frames" if (ep_dir is not None and spec.save_frames) else None
    rec.frames_saved = frames_dir is not None
    try:
        sim = PoolSim(scenario, seed)
    except PlacementFailure as exc:
        rec.failure = FailureReason.NO_VISIBLE_TARGET.value
        rec.diagnostics = {"placement": str(exc)}
        _persist(rec, ep_dir)
        return rec
    rec.objects = [{"id": o.id, "shape": o.shape, "graspability": o.graspability,
                    "scale": o.scale, "pose": o.pose_vector()} for o in sim.world.objects]
    ctrl = StagedController(cfg, mount.width, mount.height, sim.controller_rng)
    recorder = _Recorder(sim, ctrl, rec, frames_dir)
    period = recorder.period
    n_max = int(round(spec.max_episode_time / sim.dt))
    affordance = cfg.mode == "affordance"
    goal_pending = True
    heat_target = None
    try:
        while not ctrl.done:
            k = sim.world.step_count
            t = sim.time
            if k >= n_max:
                ctrl.fail(t, FailureReason.TIMEOUT.value)
                break
            obs = heatmap = None
            if k % period == 0:
                obs = sim.render()
                if goal_pending:
                    goal_pending = False
                    rec.goal_id = choose_goal(spec.goal, seed, obs, len(sim.world.objects))
                    heat_target = rec.goal_id
                    if heat_target is None and affordance and obs.visible_ids():
                        heat_target = select_target(obs, "center_bias")
                if affordance:
                    heatmap = oracle_heatmap(obs, heat_target, cfg.heatmap_sigma)
                recorder.open_frame(obs)
            cmd = ctrl.step(t, obs, heatmap)
            if ctrl.done:
                break
            if ctrl.stage is Stage.DRAG_VERIFY:
                rec.grasped_object = sim.rov.held_object
                res = drag_verify(sim, cfg.drag_duration, cfg.drag_command, on_step=recorder.on_step)
                rec.drag_duration = round(res.elapsed, 6)
                ctrl.drag_result(sim.time, res.success, res.reason)
                continue
            if ctrl.stage is Stage.YAW_ALIGN and ctrl.transitions and \
                    ctrl.transitions[-1]["reason"] == "regrasp_ready":
                rec.final_attempt_t = ctrl.transitions[-1]["t"]
            rec.frames[-1]["action"] = cmd.as_vector()
            sim.step(cmd)
    except SimFault as exc:
        ctrl.fail(sim.time, FailureReason.SIM_FAULT.value)
        rec.diagnostics = {"message": str(exc), **exc.diagnostics}
    rec.success = ctrl.outcome == "success"
    rec.failure = None if rec.success else ctrl.outcome
    rec.duration = round(sim.time, 6)
    rec.transitions = ctrl.transitions
    rec.events = ctrl.events
    rec.controller_log = ctrl.frame_log
    rec.selected_target = ctrl.initial_target
    rec.regrasps = ctrl.state.regrasp_count
    rec.backups = ctrl.backups
    _persist(rec, ep_dir)
    return rec


def _persist(rec: EpisodeRecord, ep_dir: Optional[Path]):
    if ep_dir is None:
        return
    rec.save(ep_dir)


# -- campaigns --------------------------------------------------------------

@dataclass
class CampaignReport:
    name: str
    n_episodes: int
    successes: int
    success_rate: float
    mean_duration: float
    failure_counts: dict
    regrasps_per_episode: float
    backups_per_episode: float
    target_fidelity: Optional[float]  # fraction of successes that grasped the goal/selected target
    goal_success_rate: Optional[float]  # success and correct target, when a goal is specified
    wrong_target_count: int
    target_switch_count: int
    overshoot_switch_count: int  # margin excursion followed by grasping a non-selected object
    loss_of_view_count: int
    episodes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def summary(self) -> str:
        lines = [
            f"campaign: {self.name}",
            f"episodes: {self.n_episodes}",
            f"success_rate: {self.success_rate:.4f} ({self.successes}/{self.n_episodes})",
            f"mean_duration_s: {self.mean_duration:.3f}",
            "failures: " + (", ".join(f"{k}={v}" for k, v in sorted(self.failure_counts.items())) or "none"),
            f"regrasps_per_episode: {self.regrasps_per_episode:.3f}",
            f"backups_per_episode: {self.backups_per_episode:.3f}",
            f"target_fidelity: {_fmt(self.target_fidelity)}",
            f"goal_success_rate: {_fmt(self.goal_success_rate)}",
            f"wrong_target: {self.wrong_target_count}",
            f"target_switch: {self.target_switch_count}",
            f"overshoot_switch: {self.overshoot_switch_count}",
            f"loss_of_view: {self.loss_of_view_count}",
        ]
        return "\n".join(lines)


def _fmt(x):
    return "n/a" if x is None else f"{x:.4f}"


def episode_summary(rec: EpisodeRecord) -> dict:
    return {
        "episode_id": rec.episode_id, "seed": rec.seed, "outcome": rec.outcome,
        "duration": rec.duration, "regrasps": rec.regrasps, "backups": rec.backups,
        "goal": rec.goal_id, "selected": rec.selected_target, "grasped": rec.grasped_object,
        "margin_excursion": rec.margin_excursion, "target_switch": rec.target_switch,
    }


def overshoot_switch(rec: EpisodeRecord) -> bool:
    """Margin excursion followed by grasping an object other than the first selection."""
    return (rec.margin_excursion and rec.grasped_object is not None
            and rec.grasped_object != rec.selected_target)


def aggregate(name: str, records) -> CampaignReport:
    records = sorted(records, key=lambda r: r.episode_id)
    n = len(records)
    succ = [r for r in records if r.success]
    failures = {}
    for r in records:
        if not r.success:
            failures[r.failure] = failures.get(r.failure, 0) + 1
    fidelity = None
    if succ:
        fidelity = sum(1 for r in succ if not r.wrong_target) / len(succ)
    goal_runs = [r for r in records if r.goal_id is not None]
    goal_rate = None
    if goal_runs:
        goal_rate = sum(1 for r in goal_runs if r.success and not r.wrong_target) / len(goal_runs)
    return CampaignReport(
        name=name,
        n_episodes=n,
        successes=len(succ),
        success_rate=len(succ) / n if n else 0.0,
        mean_duration=float(np.mean([r.duration for r in records])) if n else 0.0,
        failure_counts=failures,
        regrasps_per_episode=float(np.mean([r.regrasps for r in records])) if n else 0.0,
        backups_per_episode=float(np.mean([r.backups for r in records])) if n else 0.0,
        target_fidelity=fidelity,
        goal_success_rate=goal_rate,
        wrong_target_count=sum(1 for r in succ if r.wrong_target),
        target_switch_count=sum(1 for r in records if r.target_switch),
        overshoot_switch_count=sum(1 for r in records if overshoot_switch(r)),
        loss_of_view_count=failures.get(FailureReason.LOSS_OF_VIEW.value, 0),
        episodes=[episode_summary(r) for r in records],
    )


def _episode_job(args):
    spec, seed, idx, out_dir = args
    return run_episode(spec, seed, idx, out_dir)


def default_jobs() -> int:
    return os.cpu_count() or 1


def run_campaign(spec: CampaignSpec, out_dir=None, jobs: Optional[int] = None,
                 name: Optional[str] = None, return_records: bool = False):
    """Run ``n_episodes`` episodes seeded ``seed_base + i`` and aggregate them.

    Writes ``report.json``, ``report.txt`` and ``successes.manifest`` when an
    output directory is given (argument or ``spec.output_dir``).
    """
    out_dir = out_dir if out_dir is not None else (spec.output_dir or None)
    jobs = jobs if jobs is not None else (spec.jobs or 1)
    args = [(spec, spec.seed_base + i, i, out_dir) for i in range(spec.n_episodes)]
    started = time.perf_counter()
    if jobs > 1 and spec.n_episodes > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_episode_job, args, chunksize=max(1, spec.n_episodes // (4 * jobs))))
    else:
        records = [_episode_job(a) for a in args]
    report = aggregate(name or spec.scenario.name, records)
    if out_dir is not None:
        write_report(report, records, Path(out_dir), spec, time.perf_counter() - started)
    return (report, records) if return_records else report


def write_report(report: CampaignReport, records, out_dir: Path, spec: CampaignSpec = None,
                 wall_time: Optional[float] = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "report.txt").write_text(report.summary() + "\n")
    lines = [episode_dir_name(r.seed) for r in sorted(records, key=lambda r: r.episode_id) if r.success]
    (out_dir / "successes.manifest").write_text("".join(l + "\n" for l in lines))
    if spec is not None:
        (out_dir / "campaign.json").write_text(json.dumps(to_mapping(spec), sort_keys=True, indent=1))
    if wall_time is not None:
        # wall-clock data lives apart from the deterministic artifacts
        (out_dir / "meta.json").write_text(json.dumps({"wall_time_s": wall_time}))


# -- experiment suites ------------------------------------------------------

def _spec(n, seed_base, scenario: ScenarioConfig, controller: ControllerConfig, goal="none"):
    return CampaignSpec(n_episodes=n, scenario=scenario, controller=controller,
                        seed_base=seed_base, goal=goal)


def suite_goal_disambiguation(n=100, seed_base=1000):
    scen = ScenarioConfig(name="goal_disambiguation", n_objects=3)
    return {
        "affordance": _spec(n, seed_base, scen, ControllerConfig(mode="affordance"), "off_center"),
        "center_bias": _spec(n, seed_base, scen, ControllerConfig(mode="center_bias"), "off_center"),
    }


def suite_overshoot_failure(n=100, seed_base=2000):
    scen = ScenarioConfig(name="overshoot_failure", n_objects=3)
    scen.dynamics = scen.dynamics.with_lag(1.2)
    return {
        "backup_off": _spec(n, seed_base, scen, ControllerConfig(backup_enabled=False)),
        "backup_on": _spec(n, seed_base, scen, ControllerConfig(backup_enabled=True)),
    }


def suite_recovery_ablation(n=200, seed_base=3000):
    scen = ScenarioConfig(name="recovery_ablation", graspability=(0.7, 0.7))
    return {
        "regrasp_off": _spec(n, seed_base, scen, ControllerConfig(regrasp_enabled=False)),
        "regrasp_on": _spec(n, seed_base, scen, ControllerConfig(regrasp_enabled=True)),
    }


def suite_novel_shape_transfer(n=60, seed_base=4000):
    scen = ScenarioConfig(name="novel_shape_transfer", shape_set=("pitcher", "can", "drill"))
    return {"affordance": _spec(n, seed_base, scen, ControllerConfig(mode="affordance"))}


SUITES = {
    "goal_disambiguation": suite_goal_disambiguation,
    "overshoot_failure": suite_overshoot_failure,
    "recovery_ablation": suite_recovery_ablation,
    "novel_shape_transfer": suite_novel_shape_transfer,
}


def suite_specs(name: str, **kwargs) -> dict:
    try:
        factory = SUITES[name]
    except KeyError:
        raise UnknownSuite(name) from None
    return factory(**kwargs)


def experiment_suite(name: str, out_dir=None, jobs: Optional[int] = None,
                     return_records: bool = False, **kwargs) -> dict:
    """Run every arm of a named suite on the same (paired) seeds."""
    results = {}
    for arm, spec in suite_specs(name, **kwargs).items():
        arm_dir = Path(out_dir) / arm if out_dir is not None else None
        results[arm] = run_campaign(spec, arm_dir, jobs, name=f"{name}/{arm}",
                                    return_records=return_records)
    if out_dir is not None:
        reports = {arm: (r[0] if return_records else r).to_dict() for arm, r in results.items()}
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "suite.json").write_text(json.dumps(reports, sort_keys=True, indent=1))
    return results


# -- replay -----------------------------------------------------------------

REPLAY_COLUMNS = ["k", "t", "stage", "target", "centroid_u", "centroid_v", "yaw_error",
                  "yaw_prev_error", "yaw_prev_rate", "yaw_command", "min_depth",
                  "a_yaw", "a_forward", "a_vertical", "a_lateral", "a_open", "a_close"]


def _overlay(depth: np.ndarray, centroid, refs, far: float) -> np.ndarray:
    d = np.clip(depth / max(far, 1e-6), 0.0, 1.0)
    gray = (255 * (1.0 - d)).astype(np.uint8)
    img = np.stack([gray] * 3, axis=-1)
    h, w = depth.shape
    lower = int(round(refs.lower_line_v))
    lo, hi = (int(round(x)) for x in refs.upper_band)
    cu = int(round(refs.centerline))
    img[min(lower, h - 1), :] = (0, 0, 255)
    img[lo, :] = (0, 160, 0)
    img[hi, :] = (0, 160, 0)
    img[:, cu] = (255, 255, 0)
    if centroid is not None:
        u, v = int(round(centroid[0])), int(round(centroid[1]))
        if 0 <= u < w and 0 <= v < h:
            img[max(v - 2, 0):v + 3, u] = (255, 0, 0)
            img[v, max(u - 2, 0):u + 3] = (255, 0, 0)
    return img


def centroid_pixel(centroid):
    """Pixel where replay draws a centroid marker."""
    return int(round(centroid[0])), int(round(centroid[1]))


def replay(record_path, out_dir) -> dict:
    """Render depth overlays for every recorded frame and a per-frame CSV."""
    import csv

    from PIL import Image

    from .controller import ServoReferences

    record_path = Path(record_path)
    ep_dir = record_path if record_path.is_dir() else record_path.parent
    rec_file = ep_dir / "record.json" if record_path.is_dir() else record_path
    if not rec_file.exists():
        raise MissingFrameData(f"no record at {rec_file}")
    rec = EpisodeRecord.load(rec_file)
    if not rec.frames_saved:
        raise MissingFrameData(f"{rec_file}: episode was recorded without frame data")
    cam = rec.camera
    cfg = ControllerConfig()
    refs = ServoReferences.from_config(cfg, cam["width"], cam["height"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logs = {round(e["t"], 6): e for e in rec.controller_log}
    rows = []
    for fr in rec.frames:
        if fr["depth"] is None:
            raise MissingFrameData(f"frame {fr['k']} has no depth reference")
        depth = read_depth(ep_dir / fr["depth"], cam["width"], cam["height"])
        entry = logs.get(round(fr["t"], 6), {})
        c = entry.get("centroid")
        img = _overlay(depth, c, refs, float(np.max(depth)))
        Image.fromarray(img).save(out_dir / f"overlay_{fr['k']:05d}.png")
        a = fr["action"]
        rows.append([fr["k"], fr["t"], fr["stage"], fr["target"],
                     None if c is None else c[0], None if c is None else c[1],
                     entry.get("yaw_error"), entry.get("yaw_prev_error"), entry.get("yaw_prev_rate"),
                     entry.get("yaw_command"), entry.get("min_depth"), *a])
    with open(out_dir / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPLAY_COLUMNS)
        for r in rows:
            w.writerow(["" if x is None else repr(x) if isinstance(x, float) else x for x in r])
    return {"frames": len(rows), "csv": str(out_dir / "trace.csv")}
