"""Scenario files: breathing profile, deformation-event schedule, noise
levels, and fault injection for a session."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import Wall
from .planner import PlanParameters
from .tissue import BreathingProfile


class InvalidScenario(ValueError):
    pass


@dataclass(frozen=True)
class DeformationEvent:
    """A stay-suture manipulation fired after the Nth completed stitch of a
    wall (1-based count within that wall)."""

    wall: Wall
    after_stitch: int
    magnitude_mm: tuple[float, float] = (4.0, 6.0)

    def to_dict(self) -> dict:
        return {
            "wall": self.wall.value,
            "after_stitch": self.after_stitch,
            "magnitude_mm": list(self.magnitude_mm),
        }


@dataclass(frozen=True)
class ToolFailureEvent:
    """Injected tool fault: the fire attempt at this wall stitch fails once."""

    wall: Wall
    stitch: int

    def to_dict(self) -> dict:
        return {"wall": self.wall.value, "stitch": self.stitch}


@dataclass(frozen=True)
class Scenario:
    name: str = "default"
    breathing: BreathingProfile = field(default_factory=BreathingProfile)
    cloud_noise_mm: float = 0.2
    marker_noise_mm: float = 0.1
    execution_noise_mm: float | None = None  # None: use the safety profile's value
    deformations: tuple[DeformationEvent, ...] = ()
    tool_failures: tuple[ToolFailureEvent, ...] = ()
    plan_params: PlanParameters = field(default_factory=PlanParameters)
    assistant_gate: bool = False
    plan_compute_s: float = 1.0
    capture_s: float = 0.3
    max_sim_time_s: float = 3600.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "breathing": {
                "period_s": self.breathing.period_s,
                "amplitude_mm": self.breathing.amplitude_mm,
                "stationary_fraction": self.breathing.stationary_fraction,
                "axis": list(self.breathing.axis),
            },
            "noise": {
                "cloud_mm": self.cloud_noise_mm,
                "marker_mm": self.marker_noise_mm,
                "execution_mm": self.execution_noise_mm,
            },
            "deformations": [d.to_dict() for d in self.deformations],
            "tool_failures": [t.to_dict() for t in self.tool_failures],
            "plan": {
                "spacing_mm": self.plan_params.spacing_mm,
                "bite_depth_mm": self.plan_params.bite_depth_mm,
                "tissue_thickness_mm": self.plan_params.tissue_thickness_mm,
            },
            "assistant_gate": self.assistant_gate,
            "plan_compute_s": self.plan_compute_s,
            "capture_s": self.capture_s,
            "max_sim_time_s": self.max_sim_time_s,
        }

    @staticmethod
    def from_dict(d: dict) -> "Scenario":
        try:
            breathing = d.get("breathing", {})
            noise = d.get("noise", {})
            plan = d.get("plan", {})
            return Scenario(
                name=d.get("name", "unnamed"),
                breathing=BreathingProfile(
                    period_s=float(breathing.get("period_s", 60.0 / 14.0)),
                    amplitude_mm=float(breathing.get("amplitude_mm", 3.0)),
                    stationary_fraction=float(breathing.get("stationary_fraction", 0.30)),
                    axis=tuple(breathing.get("axis", (0.0, 0.0, 1.0))),
                ),
                cloud_noise_mm=float(noise.get("cloud_mm", 0.2)),
                marker_noise_mm=float(noise.get("marker_mm", 0.1)),
                execution_noise_mm=(
                    None if noise.get("execution_mm") is None else float(noise["execution_mm"])
                ),
                deformations=tuple(
                    DeformationEvent(
                        wall=Wall(e["wall"]),
                        after_stitch=int(e["after_stitch"]),
                        magnitude_mm=tuple(e.get("magnitude_mm", (4.0, 6.0))),
                    )
                    for e in d.get("deformations", [])
                ),
                tool_failures=tuple(
                    ToolFailureEvent(wall=Wall(e["wall"]), stitch=int(e["stitch"]))
                    for e in d.get("tool_failures", [])
                ),
                plan_params=PlanParameters(
                    spacing_mm=float(plan.get("spacing_mm", 3.0)),
                    bite_depth_mm=float(plan.get("bite_depth_mm", 3.0)),
                    tissue_thickness_mm=float(plan.get("tissue_thickness_mm", 3.0)),
                ),
                assistant_gate=bool(d.get("assistant_gate", False)),
                plan_compute_s=float(d.get("plan_compute_s", 1.0)),
                capture_s=float(d.get("capture_s", 0.3)),
                max_sim_time_s=float(d.get("max_sim_time_s", 3600.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenario(f"malformed scenario: {exc}") from exc


def default_scenario() -> Scenario:
    """One back-wall and two front-wall stay-suture events, all above the
    3 mm replan threshold."""
    return Scenario(
        name="default",
        deformations=(
            DeformationEvent(wall=Wall.BACK, after_stitch=4),
            DeformationEvent(wall=Wall.FRONT, after_stitch=3),
            DeformationEvent(wall=Wall.FRONT, after_stitch=7),
        ),
    )


def quiet_scenario() -> Scenario:
    """No deformation events; every plan survives end to end."""
    return Scenario(name="quiet")


BUILTIN_SCENARIOS = {
    "default": default_scenario,
    "quiet": quiet_scenario,
}


def load_scenario(path_or_name: str | Path) -> Scenario:
    """Load a scenario JSON file, or resolve a builtin scenario by name."""
    name = str(path_or_name)
    if name in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[name]()
    path = Path(path_or_name)
    if not path.exists():
        raise InvalidScenario(f"scenario not found: {name}")
    try:
        text = path.read_text()
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidScenario(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return Scenario.from_dict(data)


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True) + "\n")
