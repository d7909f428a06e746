"""Conditional-autonomy workflow engine: drives measure, plan, approve,
execute, and deformation-check cycles, surfaces decisions to the operator,
and records every step in the run log."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .core import MarkerId, Point3, WALL_MARKER_IDS, Wall, order_markers
from .executor import (
    CameraMode,
    Executor,
    GeometryError,
    MotionPrimitive,
    SafetyProfile,
    solve_rcm,
)
from .motion import trigger_time
from .planner import (
    CollisionPolicy,
    DeformationPolicy,
    PlanMode,
    SuturePlan,
    check_deformation,
    generate_plans,
    predict_collision,
    prefilter,
)
from .runlog import RunLog
from .scenario import Scenario
from .tissue import BreathState, NirCamera, TissueState, capture_cloud, inject_deformation


class SupervisorState(str, Enum):
    IDLE = "idle"
    AWAIT_STATIONARY = "await_stationary"
    CAPTURING = "capturing"
    PLANNING = "planning"
    AWAIT_PLAN_SELECTION = "await_plan_selection"
    BASELINE_SNAPSHOT = "baseline_snapshot"
    AWAIT_DISPATCH = "await_dispatch"
    EXECUTING = "executing"
    AWAIT_ASSISTANT = "await_assistant"
    AWAIT_FIRE_APPROVAL = "await_fire_approval"
    DEFORMATION_CHECK = "deformation_check"
    AWAIT_REPLAN_APPROVAL = "await_replan_approval"
    AWAIT_OFFSET_OR_REPEAT = "await_offset_or_repeat"
    WALL_COMPLETE = "wall_complete"
    DONE = "done"
    PAUSED = "paused"
    ABORTED = "aborted"


TERMINAL_STATES = {SupervisorState.DONE, SupervisorState.ABORTED}

# States in which the supervisor is blocked on an operator decision.
AWAIT_OPERATOR_STATES = {
    SupervisorState.AWAIT_PLAN_SELECTION,
    SupervisorState.AWAIT_REPLAN_APPROVAL,
    SupervisorState.AWAIT_OFFSET_OR_REPEAT,
    SupervisorState.AWAIT_FIRE_APPROVAL,
}


class CommandKind(str, Enum):
    START_PLANNING = "start_planning"
    SELECT_PLAN = "select_plan"
    APPROVE_REPLAN = "approve_replan"
    KEEP_EXISTING_PLAN = "keep_existing_plan"
    NUDGE_OFFSET = "nudge_offset"
    REPEAT_STITCH = "repeat_stitch"
    APPROVE_FIRE = "approve_fire"
    RELEASE_ASSISTANT_GATE = "release_assistant_gate"
    PAUSE = "pause"
    RESUME = "resume"
    ABORT = "abort"


@dataclass(frozen=True)
class OperatorCommand:
    kind: CommandKind
    plan_mode: PlanMode | None = None
    offset_mm: tuple[float, float, float] | None = None
    command_id: str = ""

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value, "command_id": self.command_id}
        if self.plan_mode is not None:
            d["plan_mode"] = self.plan_mode.value
        if self.offset_mm is not None:
            d["offset_mm"] = list(self.offset_mm)
        return d

    @staticmethod
    def from_dict(d: dict) -> "OperatorCommand":
        return OperatorCommand(
            kind=CommandKind(d["kind"]),
            plan_mode=PlanMode(d["plan_mode"]) if d.get("plan_mode") else None,
            offset_mm=tuple(d["offset_mm"]) if d.get("offset_mm") else None,
            command_id=d.get("command_id", ""),
        )


class EventKind(str, Enum):
    PLANS_READY = "plans_ready"
    PLAN_REJECTED_NOISY = "plan_rejected_noisy"
    COLLISION_WARNING = "collision_warning"
    DEFORMATION_DETECTED = "deformation_detected"
    PLAN_STILL_USABLE = "plan_still_usable"
    STITCH_COMPLETED = "stitch_completed"
    STITCH_FAILED = "stitch_failed"
    TOOL_FAILURE = "tool_failure"
    WALL_COMPLETE = "wall_complete"
    ANASTOMOSIS_COMPLETE = "anastomosis_complete"


# Commands accepted in each state; Pause/Abort are allowed in every
# non-terminal state, Resume only while paused.
_ALLOWED: dict[SupervisorState, set[CommandKind]] = {
    SupervisorState.IDLE: {CommandKind.START_PLANNING},
    SupervisorState.AWAIT_PLAN_SELECTION: {CommandKind.SELECT_PLAN},
    SupervisorState.AWAIT_REPLAN_APPROVAL: {
        CommandKind.APPROVE_REPLAN,
        CommandKind.KEEP_EXISTING_PLAN,
    },
    SupervisorState.AWAIT_OFFSET_OR_REPEAT: {
        CommandKind.NUDGE_OFFSET,
        CommandKind.REPEAT_STITCH,
    },
    SupervisorState.AWAIT_FIRE_APPROVAL: {CommandKind.APPROVE_FIRE},
    SupervisorState.AWAIT_ASSISTANT: {CommandKind.RELEASE_ASSISTANT_GATE},
    SupervisorState.PAUSED: {CommandKind.RESUME},
}


def allowed_commands(state: SupervisorState, gated_assistant: bool = False) -> set[CommandKind]:
    out = set(_ALLOWED.get(state, set()))
    if state not in TERMINAL_STATES:
        out.add(CommandKind.ABORT)
        if state is not SupervisorState.PAUSED:
            out.add(CommandKind.PAUSE)
    if state is SupervisorState.AWAIT_ASSISTANT and not gated_assistant:
        out.discard(CommandKind.RELEASE_ASSISTANT_GATE)
    return out


MAX_ATTEMPTS_PER_STITCH = 5


class Supervisor:
    """One logical state machine; all inputs arrive through handle_command and
    tick on the session's totally ordered clock."""

    def __init__(
        self,
        tissue: TissueState,
        executor: Executor,
        scenario: Scenario,
        profile: SafetyProfile,
        log: RunLog,
        rngs: Mapping[str, np.random.Generator],
        detector=None,
        collision_policy: CollisionPolicy | None = None,
        deformation_policy: DeformationPolicy | None = None,
    ):
        self.tissue = tissue
        self.executor = executor
        self.scenario = scenario
        self.profile = profile
        self.log = log
        self.rngs = rngs
        self.detector = detector
        self.collision_policy = collision_policy or CollisionPolicy()
        self.deformation_policy = deformation_policy or DeformationPolicy()
        self.camera = NirCamera.facing_tissue(executor.camera_distance_mm)

        self.state = SupervisorState.IDLE
        self.plan: SuturePlan | None = None
        self.plan_material: dict[int, np.ndarray] = {}
        self.pending_plans: list[SuturePlan] = []
        self.baseline: dict[MarkerId, Point3] | None = None
        self.wall = Wall.BACK
        self.wall_index = 0
        self.attempt = 1
        self.pending_offset = np.zeros(3)
        self.completed_per_wall = {Wall.BACK: 0, Wall.FRONT: 0}
        self.plan_counter = 0
        self.replan_count = 0
        self._deformations_pending = list(scenario.deformations)
        self._tool_failures_pending = list(scenario.tool_failures)

        self._busy_until: float | None = None
        self._busy_remaining_on_pause: float | None = None
        self._paused_from: SupervisorState | None = None
        self._exec_phase: str | None = None
        self._dispatch_at: float | None = None
        self._dispatch_record: dict | None = None
        self._capture_displacement: dict[Wall, np.ndarray] = {}
        self._stitch_primitive_times: dict[str, float] = {}
        self._plan_regens = 0
        self._assistant_gate_released = False

    # -- helpers --------------------------------------------------------------------

    def _emit(self, t: float, kind: EventKind, payload: dict | None = None) -> dict:
        data = {"event": kind.value}
        if payload:
            data.update(payload)
        return self.log.append(t, "event", data)

    def _transition(self, t: float, new_state: SupervisorState) -> None:
        if new_state is self.state:
            return
        self.log.append(
            t, "state", {"from": self.state.value, "to": new_state.value}
        )
        self.state = new_state

    def _begin_busy(self, t: float, duration: float, tag: str) -> None:
        self._busy_until = t + duration
        if duration > 0:
            self.log.append(t, "activity", {"name": tag, "duration": round(duration, 9)})

    def _busy_done(self, t: float) -> bool:
        if self._busy_until is None:
            return True
        if t + 1e-12 >= self._busy_until:
            self._busy_until = None
            return True
        return False

    def _stationary(self) -> bool:
        if self.detector is not None:
            return self.detector.update() is BreathState.STATIONARY
        return self.tissue.breath_state() is BreathState.STATIONARY

    def _set_camera(self, t: float, mode: CameraMode) -> None:
        if self.executor.camera_mode is mode:
            return
        _, duration = self.executor.set_camera_mode(mode)
        self.camera = NirCamera.facing_tissue(self.executor.camera_distance_mm)
        self._begin_busy(t, duration, "camera_transition")

    def _measure_markers(self) -> dict[MarkerId, Point3]:
        rng = self.rngs["marker"]
        sigma = self.scenario.marker_noise_mm
        out: dict[MarkerId, Point3] = {}
        for wall in (Wall.BACK, Wall.FRONT):
            for mid in WALL_MARKER_IDS[wall]:
                true = self.tissue.marker_position(mid).as_array()
                noise = rng.normal(scale=sigma, size=3) if sigma > 0 else np.zeros(3)
                out[mid] = Point3.from_array(true + noise)
        return out

    def _ordered_marker_lists(
        self, measured: Mapping[MarkerId, Point3]
    ) -> dict[Wall, list[Point3]]:
        from .core import Marker, MarkerSet

        ordered: dict[Wall, list[Point3]] = {}
        for wall in (Wall.BACK, Wall.FRONT):
            markers = []
            for mid in WALL_MARKER_IDS[wall]:
                u, v, _ = self.camera.project(measured[mid].as_array())
                markers.append(Marker(mid, measured[mid], (u, v)))
            mset = MarkerSet(markers, wall=wall)
            order = order_markers(mset, wall)
            ordered[wall] = [mset[mid].position for mid in order]
        return ordered

    def current_point(self):
        return self.plan.wall_points(self.wall)[self.wall_index]

    def wall_remaining(self) -> int:
        return len(self.plan.wall_points(self.wall)) - self.wall_index

    # -- command handling ---------------------------------------------------------------

    def handle_command(self, cmd: OperatorCommand, t: float) -> tuple[bool, str]:
        """Apply an operator command; invalid commands are rejected with the
        current state and leave it unchanged."""
        allowed = allowed_commands(self.state, self.scenario.assistant_gate)
        self.log.append(t, "command", cmd.to_dict() | {"state": self.state.value})
        if cmd.kind not in allowed:
            reason = f"invalid_command_for_state:{self.state.value}"
            self.log.append(
                t, "rejection", {"command_id": cmd.command_id, "kind": cmd.kind.value, "reason": reason}
            )
            return False, reason

        if cmd.kind is CommandKind.ABORT:
            self._transition(t, SupervisorState.ABORTED)
            return True, ""
        if cmd.kind is CommandKind.PAUSE:
            self._paused_from = self.state
            if self._busy_until is not None:
                self._busy_remaining_on_pause = max(0.0, self._busy_until - t)
                self._busy_until = None
            self._transition(t, SupervisorState.PAUSED)
            return True, ""
        if cmd.kind is CommandKind.RESUME:
            target = self._paused_from or SupervisorState.IDLE
            self._paused_from = None
            if self._busy_remaining_on_pause is not None:
                self._busy_until = t + self._busy_remaining_on_pause
                self._busy_remaining_on_pause = None
            if target in (SupervisorState.AWAIT_DISPATCH,):
                self._dispatch_at = None  # recompute the trigger after a pause
            self._transition(t, target)
            return True, ""

        if cmd.kind is CommandKind.START_PLANNING:
            self._transition(t, SupervisorState.AWAIT_STATIONARY)
            return True, ""
        if cmd.kind is CommandKind.SELECT_PLAN:
            mode = cmd.plan_mode or PlanMode.UNIFORM
            chosen = next((p for p in self.pending_plans if p.mode is mode), None)
            if chosen is None:
                self.log.append(
                    t, "rejection",
                    {"command_id": cmd.command_id, "kind": cmd.kind.value, "reason": "unknown_plan_mode"},
                )
                return False, "unknown_plan_mode"
            self._adopt_plan(chosen)
            self._transition(t, SupervisorState.BASELINE_SNAPSHOT)
            return True, ""
        if cmd.kind is CommandKind.APPROVE_REPLAN:
            self.replan_count += 1
            self._transition(t, SupervisorState.AWAIT_STATIONARY)
            return True, ""
        if cmd.kind is CommandKind.KEEP_EXISTING_PLAN:
            self._proceed_to_next_stitch(t)
            return True, ""
        if cmd.kind is CommandKind.NUDGE_OFFSET:
            if cmd.offset_mm is None:
                return False, "missing_offset"
            self.pending_offset = self.pending_offset + np.asarray(cmd.offset_mm, dtype=float)
            return True, ""
        if cmd.kind is CommandKind.REPEAT_STITCH:
            if self.attempt >= MAX_ATTEMPTS_PER_STITCH:
                self.log.append(
                    t, "rejection",
                    {"command_id": cmd.command_id, "kind": cmd.kind.value, "reason": "max_attempts"},
                )
                return False, "max_attempts"
            self.attempt += 1
            self._dispatch_at = None
            self._transition(t, SupervisorState.AWAIT_DISPATCH)
            return True, ""
        if cmd.kind is CommandKind.APPROVE_FIRE:
            self._begin_bite(t)
            return True, ""
        if cmd.kind is CommandKind.RELEASE_ASSISTANT_GATE:
            self._assistant_gate_released = True
            return True, ""
        return False, "unhandled"

    # -- plan adoption ---------------------------------------------------------------

    def _adopt_plan(self, plan: SuturePlan) -> None:
        self.plan = plan
        self.plan_material = {}
        for p in plan.points:
            disp = self._capture_displacement.get(p.wall, np.zeros(3))
            self.plan_material[p.index] = p.position.as_array() - disp

    # -- tick ------------------------------------------------------------------------

    def tick(self, t: float) -> None:
        if self.state in TERMINAL_STATES or self.state is SupervisorState.PAUSED:
            return
        if not self._busy_done(t):
            return
        handler = getattr(self, f"_tick_{self.state.value}", None)
        if handler is not None:
            handler(t)

    def _tick_idle(self, t: float) -> None:
        pass

    def _tick_await_stationary(self, t: float) -> None:
        if self.executor.camera_mode is not CameraMode.IMAGING:
            self._set_camera(t, CameraMode.IMAGING)
            return
        if self._stationary():
            self._transition(t, SupervisorState.CAPTURING)
            self._begin_busy(t, self.scenario.capture_s, "capture")

    def _tick_capturing(self, t: float) -> None:
        try:
            cloud = capture_cloud(
                self.tissue, self.scenario.cloud_noise_mm, self.rngs["cloud"]
            )
        except Exception:
            self._transition(t, SupervisorState.AWAIT_STATIONARY)
            return
        self._capture_displacement = {
            w: self.tissue.wall_displacement(w).copy() for w in Wall
        }
        measured = self._measure_markers()
        self._last_capture = (cloud, self._ordered_marker_lists(measured), measured)
        self._transition(t, SupervisorState.PLANNING)
        self._begin_busy(t, self.scenario.plan_compute_s, "plan_compute")

    def _tick_planning(self, t: float) -> None:
        cloud, ordered, measured = self._last_capture
        uniform, corner = generate_plans(
            cloud, ordered, self.scenario.plan_params, plan_id_base=self.plan_counter
        )
        self.plan_counter += 2
        checked: list[SuturePlan] = []
        all_usable = True
        for plan in (uniform, corner):
            result = prefilter(plan, cloud)
            if result.rejected:
                self._emit(
                    t, EventKind.PLAN_REJECTED_NOISY,
                    {"plan_id": plan.plan_id, "reason": result.reason,
                     "max_deviation_mm": round(result.max_deviation_mm, 6)},
                )
                all_usable = False
                continue
            plan = result.plan
            warned = False
            for p in plan.points:
                try:
                    pose = solve_rcm(p.position, self.executor.port)
                except GeometryError as exc:
                    warned = True
                    self._emit(
                        t, EventKind.COLLISION_WARNING,
                        {"plan_id": plan.plan_id, "point_index": p.index, "reason": str(exc)},
                    )
                    break
                verdict = predict_collision(p.position, pose, cloud, self.collision_policy)
                if not verdict.usable:
                    warned = True
                    self._emit(
                        t, EventKind.COLLISION_WARNING,
                        {
                            "plan_id": plan.plan_id,
                            "point_index": p.index,
                            "ratio": None if math.isinf(verdict.ratio) else round(verdict.ratio, 6),
                            "reason": verdict.reason,
                        },
                    )
                    break
            if warned:
                all_usable = False
            else:
                checked.append(plan)
        if not all_usable or len(checked) < 2:
            # Discard and regenerate from a fresh capture.
            self._plan_regens += 1
            self._transition(t, SupervisorState.AWAIT_STATIONARY)
            return
        self.pending_plans = checked
        self._emit(
            t, EventKind.PLANS_READY,
            {"plans": [p.to_dict() for p in checked]},
        )
        self._transition(t, SupervisorState.AWAIT_PLAN_SELECTION)

    def _tick_baseline_snapshot(self, t: float) -> None:
        if not self._stationary():
            return
        measured = self._measure_markers()
        self.baseline = measured
        self.log.append(
            t, "baseline",
            {m.value: [p.x, p.y, p.z] for m, p in measured.items()},
        )
        self._set_camera(t, CameraMode.SUTURE)
        self._transition(t, SupervisorState.AWAIT_DISPATCH)

    def _tick_await_dispatch(self, t: float) -> None:
        if self.executor.camera_mode is not CameraMode.SUTURE:
            self._set_camera(t, CameraMode.SUTURE)
            return
        if self.wall_remaining() <= 0:
            self._transition(t, SupervisorState.WALL_COMPLETE)
            return
        point = self.current_point()
        target = Point3.from_array(point.position.as_array() + self.pending_offset)
        if self._dispatch_at is None:
            estimate = self.executor.estimate_travel_time(target)
            trig = trigger_time(t, 0.0, 1.0, self.scenario.breathing.period_s)
            # n*T - estimate with the smallest n that keeps the dispatch ahead
            # of the clock; falls back to the next cycle otherwise.
            n = trig.n
            while n * self.scenario.breathing.period_s - estimate <= t:
                n += 1
            self._dispatch_at = n * self.scenario.breathing.period_s - estimate
            self._dispatch_record = {
                "wall": self.wall.value,
                "wall_index": self.wall_index,
                "attempt": self.attempt,
                "cycle": n,
                "estimate_s": round(estimate, 9),
                "dispatch_at": round(self._dispatch_at, 9),
            }
        if t + 1e-12 >= self._dispatch_at:
            self.log.append(t, "dispatch", dict(self._dispatch_record))
            self._dispatch_time = t
            try:
                trajectory = self.executor.approach_trajectory(target)
            except GeometryError as exc:
                self._dispatch_at = None
                self._fail_stitch(t, f"rcm:{exc}")
                return
            self.executor.stitch_in_flight = True
            self._stitch_primitive_times = {MotionPrimitive.APPROACH.value: t}
            self._approach_duration = trajectory.duration
            self._approach_target = target
            self._exec_phase = "approach"
            self._dispatch_at = None
            self._transition(t, SupervisorState.EXECUTING)
            self._begin_busy(t, trajectory.duration, "approach")

    def _tick_executing(self, t: float) -> None:
        phase = self._exec_phase
        if phase == "approach":
            self.executor.tool_position = self._approach_target
            self._arrival_time = t
            self._arrived_in_plateau = (
                self.tissue.breathing.state_at(self.tissue.phase_s) is BreathState.STATIONARY
            )
            if self.profile.require_fire_approval:
                self._exec_phase = "await_fire"
                self._transition(t, SupervisorState.AWAIT_FIRE_APPROVAL)
            else:
                self._begin_bite(t)
        elif phase == "bite":
            self._finish_bite(t)
        elif phase == "tension":
            self._stitch_primitive_times[MotionPrimitive.RETRACT.value] = t
            self._exec_phase = "retract"
            retract = self.executor.retract_trajectory(self.executor.tool_position)
            self.executor.tool_position = retract.end
            self._begin_busy(t, retract.duration, "retract")
        elif phase == "retract":
            self.executor.stitch_in_flight = False
            self._exec_phase = None
            self._complete_stitch(t)

    def _begin_bite(self, t: float) -> None:
        """Needle contact happens on arrival, at the plateau center; the
        remaining bite duration models the firing mechanism cycling."""
        self._stitch_primitive_times[MotionPrimitive.BITE.value] = t
        point = self.current_point()
        stitch_no = self.completed_per_wall[self.wall] + 1
        fault = next(
            (
                f
                for f in self._tool_failures_pending
                if f.wall is self.wall and f.stitch == stitch_no
            ),
            None,
        )
        if fault is not None:
            self._tool_failures_pending.remove(fault)
            self.executor.stitch_in_flight = False
            self._exec_phase = None
            self._emit(t, EventKind.TOOL_FAILURE, {"wall": self.wall.value, "stitch": stitch_no})
            self._fail_stitch(t, "tool_failure")
            return
        ok, achieved, achieved_material, reason = self.executor.fire(
            point,
            tuple(float(v) for v in self.pending_offset),
            self.plan_material[point.index],
            self.tissue,
            self.collision_policy.jaw_capture_box,
        )
        self._last_fire = {
            "success": ok,
            "achieved": achieved,
            "achieved_material": achieved_material,
            "reason": reason,
            "fire_time": t,
        }
        if not ok:
            self.executor.stitch_in_flight = False
            self._exec_phase = None
            self._record_stitch(t, success=False, fail_reason=reason)
            self._fail_stitch(t, reason)
            return
        self._exec_phase = "bite"
        self._transition(t, SupervisorState.EXECUTING)
        self._begin_busy(t, self.profile.bite_duration_s, "bite")

    def _finish_bite(self, t: float) -> None:
        self._stitch_primitive_times[MotionPrimitive.WAIT_FOR_ASSISTANT.value] = t
        self._exec_phase = "assistant"
        self._assistant_gate_released = False
        self._transition(t, SupervisorState.AWAIT_ASSISTANT)
        self._begin_busy(t, self.profile.assistant_dwell_s, "wait_for_assistant")

    def _tick_await_assistant(self, t: float) -> None:
        if self.scenario.assistant_gate and not self._assistant_gate_released:
            return
        self._stitch_primitive_times[MotionPrimitive.TENSION.value] = t
        self._exec_phase = "tension"
        self._transition(t, SupervisorState.EXECUTING)
        self._begin_busy(t, self.profile.tension_duration_s, "tension")

    def _record_stitch(self, t: float, success: bool, fail_reason: str = "") -> None:
        fire = getattr(self, "_last_fire", None)
        achieved = fire["achieved"] if fire and fire.get("achieved") else None
        achieved_material = fire["achieved_material"] if fire and fire.get("achieved_material") else None
        point = self.current_point()
        self.log.append(
            t,
            "stitch",
            {
                "wall": self.wall.value,
                "wall_index": self.wall_index,
                "attempt": self.attempt,
                "kind": point.kind.value,
                "plan_id": self.plan.plan_id,
                "planned": [point.position.x, point.position.y, point.position.z],
                "offset": [float(v) for v in self.pending_offset],
                "achieved_world": (
                    [achieved.x, achieved.y, achieved.z] if achieved else None
                ),
                "achieved_material": (
                    [achieved_material.x, achieved_material.y, achieved_material.z]
                    if achieved_material
                    else None
                ),
                "success": success,
                "fail_reason": fail_reason,
                "dispatch_time": round(self._dispatch_time, 9),
                "arrival_time": round(self._arrival_time, 9),
                "arrived_in_plateau": self._arrived_in_plateau,
                "primitive_times": {
                    k: round(v, 9) for k, v in self._stitch_primitive_times.items()
                },
            },
        )

    def _fail_stitch(self, t: float, reason: str) -> None:
        self._emit(
            t, EventKind.STITCH_FAILED,
            {"wall": self.wall.value, "wall_index": self.wall_index,
             "attempt": self.attempt, "reason": reason},
        )
        self._transition(t, SupervisorState.AWAIT_OFFSET_OR_REPEAT)

    def _complete_stitch(self, t: float) -> None:
        self._record_stitch(t, success=True)
        self._emit(
            t, EventKind.STITCH_COMPLETED,
            {"wall": self.wall.value, "wall_index": self.wall_index,
             "attempt": self.attempt},
        )
        self.completed_per_wall[self.wall] += 1
        self.wall_index += 1
        self.attempt = 1
        self.pending_offset = np.zeros(3)
        self._maybe_inject_deformation(t)
        self._transition(t, SupervisorState.DEFORMATION_CHECK)

    def _maybe_inject_deformation(self, t: float) -> None:
        count = self.completed_per_wall[self.wall]
        for event in list(self._deformations_pending):
            if event.wall is self.wall and event.after_stitch == count:
                self._deformations_pending.remove(event)
                applied = inject_deformation(
                    self.tissue, self.rngs["deformation"], event.magnitude_mm
                )
                self.log.append(
                    t, "deformation",
                    {"wall": event.wall.value, "after_stitch": event.after_stitch,
                     "applied": applied},
                )

    def _tick_deformation_check(self, t: float) -> None:
        if not self._stationary():
            return
        measured = self._measure_markers()
        verdict = check_deformation(self.baseline, measured, self.deformation_policy)
        if verdict.replan_recommended:
            self._emit(
                t, EventKind.DEFORMATION_DETECTED,
                {"max_displacement_mm": round(verdict.max_displacement_mm, 6)},
            )
            self._transition(t, SupervisorState.AWAIT_REPLAN_APPROVAL)
        else:
            self._emit(
                t, EventKind.PLAN_STILL_USABLE,
                {"max_displacement_mm": round(verdict.max_displacement_mm, 6)},
            )
            self._proceed_to_next_stitch(t)

    def _proceed_to_next_stitch(self, t: float) -> None:
        if self.wall_remaining() <= 0:
            self._transition(t, SupervisorState.WALL_COMPLETE)
        else:
            self._dispatch_at = None
            self._transition(t, SupervisorState.AWAIT_DISPATCH)

    def _tick_wall_complete(self, t: float) -> None:
        self._emit(t, EventKind.WALL_COMPLETE, {"wall": self.wall.value})
        if self.wall is Wall.BACK:
            self.wall = Wall.FRONT
            self.wall_index = 0
            self.attempt = 1
            self.pending_offset = np.zeros(3)
            self._dispatch_at = None
            self._transition(t, SupervisorState.AWAIT_DISPATCH)
        else:
            self._emit(t, EventKind.ANASTOMOSIS_COMPLETE, {})
            self._transition(t, SupervisorState.DONE)


# -- hesitancy reporting ---------------------------------------------------------------


@dataclass(frozen=True)
class HesitancyRecord:
    wall: str
    wall_index: int
    attempts: int
    offsets: tuple[tuple[float, float, float], ...]


@dataclass(frozen=True)
class HesitancySummary:
    records: tuple[HesitancyRecord, ...]
    total_stitches: int
    extra_attempts: int

    @property
    def per_stitch(self) -> float:
        if self.total_stitches == 0:
            return 0.0
        return self.extra_attempts / self.total_stitches

    @property
    def first_attempt_rate(self) -> float:
        if self.total_stitches == 0:
            return 0.0
        first = sum(1 for r in self.records if r.attempts == 1)
        return first / self.total_stitches


def hesitancy_report(log: RunLog) -> HesitancySummary:
    """Needle placement corrections per stitch, from the stitch records.

    A stitch's attempts = 1 + number of repeats it took; the offsets list
    holds the nudge vectors applied before each retry.
    """
    by_stitch: dict[tuple[str, int], list[dict]] = {}
    for rec in log.stitches():
        d = rec["data"]
        by_stitch.setdefault((d["wall"], d["wall_index"]), []).append(d)
    nudges: dict[tuple[str, int], list[tuple[float, float, float]]] = {}
    current_target: tuple[str, int] | None = None
    for rec in log.records:
        if rec["kind"] == "event" and rec["data"].get("event") == EventKind.STITCH_FAILED.value:
            current_target = (rec["data"]["wall"], rec["data"]["wall_index"])
        elif rec["kind"] == "command" and rec["data"].get("kind") == CommandKind.NUDGE_OFFSET.value:
            if current_target is not None and rec["data"].get("offset_mm"):
                nudges.setdefault(current_target, []).append(tuple(rec["data"]["offset_mm"]))
    records = []
    completed = 0
    extra = 0
    for key in sorted(by_stitch, key=lambda k: (k[0], k[1])):
        attempts_list = by_stitch[key]
        succeeded = any(a["success"] for a in attempts_list)
        attempts = max(a["attempt"] for a in attempts_list)
        if succeeded:
            completed += 1
            extra += attempts - 1
        records.append(
            HesitancyRecord(
                wall=key[0],
                wall_index=key[1],
                attempts=attempts,
                offsets=tuple(nudges.get(key, [])),
            )
        )
    return HesitancySummary(
        records=tuple(records), total_stitches=completed, extra_attempts=extra
    )
