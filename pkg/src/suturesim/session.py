"""Deterministic session loop: wires tissue, executor, and supervisor on a
simulated clock, drives scripted operator policies, and replays logs.

Everything advances on a fixed-step clock in simulated seconds; no wall time
enters the loop, so (scenario, profile, seed, command timeline) fully
determines the run log byte for byte.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Wall
from .executor import EX_VIVO, Executor, PROFILES, SafetyProfile
from .planner import PlanMode
from .runlog import RunLog
from .scenario import Scenario
from .supervisor import (
    AWAIT_OPERATOR_STATES,
    CommandKind,
    OperatorCommand,
    Supervisor,
    SupervisorState,
    TERMINAL_STATES,
    allowed_commands,
)
from .tissue import TissueState


class PolicyStuck(RuntimeError):
    def __init__(self, state: SupervisorState):
        super().__init__(f"policy provides no command for awaited state {state.value}")
        self.state = state


class OperatorPolicy:
    """Scripted operator: maps awaited states to commands.

    ``decide`` returns a command list, or None when the policy has no handler
    for that state (which makes a headless run fail fast as PolicyStuck).
    """

    name = "base"

    def decide(self, sup: Supervisor) -> list[OperatorCommand] | None:
        raise NotImplementedError


class AutoApprovePolicy(OperatorPolicy):
    """Selects one plan mode, approves every replan, never nudges."""

    def __init__(self, plan_mode: PlanMode = PlanMode.UNIFORM):
        self.plan_mode = plan_mode
        self.name = (
            "auto_approve" if plan_mode is PlanMode.UNIFORM else "corner_preferring"
        )

    def decide(self, sup: Supervisor) -> list[OperatorCommand] | None:
        s = sup.state
        if s is SupervisorState.IDLE:
            return [OperatorCommand(CommandKind.START_PLANNING)]
        if s is SupervisorState.AWAIT_PLAN_SELECTION:
            return [OperatorCommand(CommandKind.SELECT_PLAN, plan_mode=self.plan_mode)]
        if s is SupervisorState.AWAIT_REPLAN_APPROVAL:
            return [OperatorCommand(CommandKind.APPROVE_REPLAN)]
        if s is SupervisorState.AWAIT_FIRE_APPROVAL:
            return [OperatorCommand(CommandKind.APPROVE_FIRE)]
        if s is SupervisorState.AWAIT_ASSISTANT:
            return [OperatorCommand(CommandKind.RELEASE_ASSISTANT_GATE)]
        if s is SupervisorState.AWAIT_OFFSET_OR_REPEAT:
            return None
        return []


class RepeatWithNudgePolicy(AutoApprovePolicy):
    """AutoApprove plus a fixed nudge-and-repeat response to failed stitches."""

    def __init__(
        self,
        plan_mode: PlanMode = PlanMode.UNIFORM,
        nudge_mm: tuple[float, float, float] = (0.0, 0.0, 0.0),
    ):
        super().__init__(plan_mode)
        self.nudge_mm = nudge_mm
        self.name = "repeat_with_nudge"

    def decide(self, sup: Supervisor) -> list[OperatorCommand] | None:
        if sup.state is SupervisorState.AWAIT_OFFSET_OR_REPEAT:
            cmds = []
            if any(abs(v) > 0 for v in self.nudge_mm):
                cmds.append(OperatorCommand(CommandKind.NUDGE_OFFSET, offset_mm=self.nudge_mm))
            cmds.append(OperatorCommand(CommandKind.REPEAT_STITCH))
            return cmds
        return super().decide(sup)


POLICIES: dict[str, Callable[[], OperatorPolicy]] = {
    "auto_approve": lambda: AutoApprovePolicy(PlanMode.UNIFORM),
    "corner_preferring": lambda: AutoApprovePolicy(PlanMode.CORNER_REINFORCED),
    "repeat_with_nudge": lambda: RepeatWithNudgePolicy(),
}


def make_policy(name: str) -> OperatorPolicy:
    if name not in POLICIES:
        raise ValueError(f"unknown policy {name!r} (have {sorted(POLICIES)})")
    return POLICIES[name]()


@dataclass
class QueuedCommand:
    due_step: int
    order: int
    command: OperatorCommand


class Session:
    """Single simulation session advanced by fixed steps of ``dt`` seconds."""

    def __init__(
        self,
        scenario: Scenario,
        profile: SafetyProfile | str = EX_VIVO,
        seed: int = 0,
        dt: float = 0.05,
        detector_name: str = "oracle",
        policy: OperatorPolicy | None = None,
        policy_name: str | None = None,
    ):
        if isinstance(profile, str):
            profile = PROFILES[profile]
        if scenario.execution_noise_mm is not None:
            profile = SafetyProfile(
                **{**profile.__dict__, "execution_noise_mm": scenario.execution_noise_mm}
            )
        self.scenario = scenario
        self.profile = profile
        self.seed = int(seed)
        self.dt = float(dt)
        self.policy = policy

        ss = np.random.SeedSequence(self.seed)
        streams = ss.spawn(4)
        self.rngs = {
            "cloud": np.random.default_rng(streams[0]),
            "marker": np.random.default_rng(streams[1]),
            "deformation": np.random.default_rng(streams[2]),
            "execution": np.random.default_rng(streams[3]),
        }

        self.tissue = TissueState(breathing=scenario.breathing)
        self.executor = Executor(
            profile=profile, rng=self.rngs["execution"], imaging_distance_mm=60.0
        )
        self.log = RunLog()
        self.log.header(
            scenario_dict=scenario.to_dict() | {
                "edge_material": {
                    w.value: self.tissue.edge_polyline_material(w).tolist() for w in Wall
                }
            },
            profile=profile.name,
            seed=self.seed,
            policy=policy_name or (policy.name if policy else "operator"),
        )
        detector = None  # oracle: the supervisor reads the tissue truth
        self.detector_name = detector_name
        self.supervisor = Supervisor(
            tissue=self.tissue,
            executor=self.executor,
            scenario=scenario,
            profile=profile,
            log=self.log,
            rngs=self.rngs,
            detector=detector,
        )
        self.step_index = 0
        self._queue: list[QueuedCommand] = []
        self._queue_order = 0
        self._policy_serial: tuple | None = None
        self._command_counter = 0
        self.status: str | None = None
        self.status_detail = ""

    # -- time -----------------------------------------------------------------

    @property
    def now(self) -> float:
        return self.step_index * self.dt

    # -- command ingestion ------------------------------------------------------

    def submit(self, command: OperatorCommand, delay_steps: int = 1) -> None:
        """Enqueue an operator command for delivery at a coming step boundary."""
        self._queue.append(
            QueuedCommand(self.step_index + delay_steps, self._queue_order, command)
        )
        self._queue_order += 1

    def _deliver_due(self) -> None:
        due = [q for q in self._queue if q.due_step <= self.step_index]
        due.sort(key=lambda q: (q.due_step, q.order))
        for q in due:
            self._queue.remove(q)
            self.supervisor.handle_command(q.command, self.now)

    # -- stepping ------------------------------------------------------------------

    def step(self) -> None:
        if self.status is not None:
            return
        self._deliver_due()
        self.supervisor.tick(self.now)
        if self.supervisor.state in TERMINAL_STATES:
            self._finish()
            return
        if self.policy is not None:
            self._consult_policy()
        self.tissue.step(self.dt)
        self.step_index += 1
        if self.now > self.scenario.max_sim_time_s:
            self.status = "timeout"
            self.log.end(self.now, "timeout")

    def _consult_policy(self) -> None:
        sup = self.supervisor
        awaiting = sup.state in AWAIT_OPERATOR_STATES or (
            sup.state is SupervisorState.AWAIT_ASSISTANT and self.scenario.assistant_gate
        ) or sup.state is SupervisorState.IDLE
        if not awaiting:
            self._policy_serial = None
            return
        key = (sup.state, sup.wall, sup.wall_index, sup.attempt)
        if self._policy_serial == key:
            return
        commands = self.policy.decide(sup)
        if commands is None:
            self.status = "policy_stuck"
            self.status_detail = sup.state.value
            self.log.end(self.now, "policy_stuck", sup.state.value)
            return
        for cmd in commands:
            self._command_counter += 1
            self.submit(
                OperatorCommand(
                    kind=cmd.kind,
                    plan_mode=cmd.plan_mode,
                    offset_mm=cmd.offset_mm,
                    command_id=f"p{self._command_counter}",
                )
            )
        if commands:
            self._policy_serial = key

    def _finish(self) -> None:
        state = self.supervisor.state
        self.status = "done" if state is SupervisorState.DONE else "aborted"
        self.log.end(self.now, self.status)

    def run(self, max_steps: int | None = None) -> str:
        limit = max_steps or int(self.scenario.max_sim_time_s / self.dt) + 10
        for _ in range(limit):
            if self.status is not None:
                break
            self.step()
        if self.status is None:
            self.status = "timeout"
            self.log.end(self.now, "timeout")
        return self.status

    # -- snapshots (for streaming/rendering) --------------------------------------------

    def snapshot(self) -> dict:
        sup = self.supervisor
        markers = {}
        for mid, pos in self.tissue.all_marker_positions().items():
            u, v, _ = sup.camera.project(pos.as_array())
            markers[mid.value] = {
                "world": [pos.x, pos.y, pos.z],
                "uv": [None if math.isnan(u) else round(u, 3), None if math.isnan(v) else round(v, 3)],
            }
        plan_overlay = None
        if sup.plan is not None:
            pts = []
            for p in sup.plan.points:
                u, v, _ = sup.camera.project(p.position.as_array())
                pts.append(
                    {
                        "index": p.index,
                        "wall": p.wall.value,
                        "kind": p.kind.value,
                        "uv": [None if math.isnan(u) else round(u, 3), None if math.isnan(v) else round(v, 3)],
                    }
                )
            plan_overlay = {"plan_id": sup.plan.plan_id, "mode": sup.plan.mode.value, "points": pts}
        tool_uv = sup.camera.project(self.executor.tool_position.as_array())
        return {
            "t": round(self.now, 6),
            "state": sup.state.value,
            "breath": self.tissue.breath_state().value,
            "wall": sup.wall.value,
            "wall_index": sup.wall_index,
            "attempt": sup.attempt,
            "camera_mode": self.executor.camera_mode.value,
            "camera_distance_mm": self.executor.camera_distance_mm,
            "markers": markers,
            "plan": plan_overlay,
            "pending_plans": [p.to_dict() for p in sup.pending_plans],
            "tool_uv": [
                None if math.isnan(tool_uv[0]) else round(tool_uv[0], 3),
                None if math.isnan(tool_uv[1]) else round(tool_uv[1], 3),
            ],
            "replans": sup.replan_count,
            "allowed_commands": sorted(
                c.value for c in allowed_commands(sup.state, self.scenario.assistant_gate)
            ),
        }


def run_scripted(
    scenario: Scenario,
    policy: OperatorPolicy | str = "auto_approve",
    profile: SafetyProfile | str = EX_VIVO,
    seed: int = 0,
    dt: float = 0.05,
) -> tuple[RunLog, str]:
    """Drive a full anastomosis headlessly; returns (log, final status)."""
    if isinstance(policy, str):
        policy = make_policy(policy)
    session = Session(scenario, profile=profile, seed=seed, dt=dt, policy=policy)
    status = session.run()
    return session.log, status


def replay(log: RunLog, dt: float = 0.05) -> tuple[RunLog, str]:
    """Re-drive a recorded session: same scenario/profile/seed, commands
    delivered at their recorded simulated times. The resulting event sequence
    is byte-identical to the original for deterministic runs."""
    header = log.header_data
    scenario = Scenario.from_dict(header["scenario"])
    profile = PROFILES[header["profile"]]
    session = Session(
        scenario, profile=profile, seed=header["seed"], dt=dt, policy=None,
        policy_name=header.get("policy"),
    )
    commands = [
        (rec["t"], OperatorCommand.from_dict(rec["data"]))
        for rec in log.commands()
    ]
    for t_cmd, cmd in commands:
        step = int(round(t_cmd / dt))
        session._queue.append(QueuedCommand(step, session._queue_order, cmd))
        session._queue_order += 1
    session.run()
    return session.log, session.status
