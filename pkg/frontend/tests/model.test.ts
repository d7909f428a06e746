import { describe, expect, it } from "vitest";
import { ConsoleViewModel, clampOffset, MAX_OFFSET_NORM_MM } from "../src/model.js";
import type { Snapshot, StreamMessage } from "../src/types.js";

function snap(partial: Partial<Snapshot>): Snapshot {
  return {
    t: 0,
    state: "idle",
    breath: "stationary",
    wall: "back",
    wall_index: 0,
    attempt: 1,
    camera_mode: "imaging",
    camera_distance_mm: 60,
    markers: {},
    plan: null,
    pending_plans: [],
    tool_uv: [null, null],
    replans: 0,
    allowed_commands: ["start_planning", "pause", "abort"],
    ...partial,
  };
}

function catchup(s: Snapshot, records: StreamMessage[] = []): StreamMessage {
  return {
    type: "catchup",
    schema_version: 1,
    snapshot: s,
    status: null,
    last_seq: 0,
    records: records
      .filter((m) => m.type === "record")
      .map((m) => (m.type === "record" ? m.record : (undefined as never))),
  };
}

function eventRecord(seq: number, event: string, extra: Record<string, unknown> = {}): StreamMessage {
  return {
    type: "record",
    schema_version: 1,
    record: { seq, t: seq * 0.1, kind: "event", data: { event, ...extra } },
  };
}

describe("clampOffset", () => {
  it("passes small offsets through", () => {
    expect(clampOffset([1, 2, 0.5])).toEqual([1, 2, 0.5]);
  });
  it("scales oversized offsets to the 10 mm norm cap", () => {
    const out = clampOffset([30, 0, 40]);
    const norm = Math.hypot(...out);
    expect(norm).toBeCloseTo(MAX_OFFSET_NORM_MM, 6);
    expect(out[0] / out[2]).toBeCloseTo(30 / 40, 6);
  });
});

describe("ConsoleViewModel", () => {
  it("enables controls only for commands the state allows", () => {
    const model = new ConsoleViewModel();
    model.apply(catchup(snap({ state: "idle" })));
    expect(model.commandEnabled("start_planning")).toBe(true);
    expect(model.commandEnabled("select_plan")).toBe(false);

    model.apply({
      type: "snapshot",
      schema_version: 1,
      snapshot: snap({
        state: "await_plan_selection",
        allowed_commands: ["select_plan", "pause", "abort"],
        pending_plans: [
          { plan_id: 0, mode: "uniform", points: [] },
          { plan_id: 1, mode: "corner_reinforced", points: [] },
        ],
      }),
    });
    expect(model.commandEnabled("select_plan")).toBe(true);
    expect(model.pendingDecision?.kind).toBe("select_plan");
    expect(model.pendingDecision?.detail).toContain("2 plan options");
  });

  it("raises a deformation alert and clears it on plan_still_usable", () => {
    const model = new ConsoleViewModel();
    model.apply(catchup(snap({})));
    model.apply(eventRecord(5, "deformation_detected", { max_displacement_mm: 4.2 }));
    expect(model.alert?.severity).toBe("warn");
    expect(model.alert?.text).toContain("4.2 mm");
    expect(model.tallies.deformationAlerts).toBe(1);
    model.apply(eventRecord(6, "plan_still_usable", { max_displacement_mm: 0.3 }));
    expect(model.alert).toBeNull();
  });

  it("shows the offset/repeat panel after a stitch failure", () => {
    const model = new ConsoleViewModel();
    model.apply(
      catchup(
        snap({
          state: "await_offset_or_repeat",
          allowed_commands: ["nudge_offset", "repeat_stitch", "pause", "abort"],
        }),
      ),
    );
    model.apply(eventRecord(9, "stitch_failed", { reason: "bite_missed_tissue" }));
    expect(model.pendingDecision?.kind).toBe("offset_or_repeat");
    expect(model.commandEnabled("nudge_offset")).toBe(true);
    expect(model.commandEnabled("repeat_stitch")).toBe(true);
    expect(model.tallies.stitchesFailed).toBe(1);
  });

  it("tallies stitches and replans from the record stream", () => {
    const model = new ConsoleViewModel();
    model.apply(catchup(snap({})));
    model.apply(eventRecord(1, "stitch_completed"));
    model.apply(eventRecord(2, "stitch_completed"));
    model.apply({
      type: "record",
      schema_version: 1,
      record: {
        seq: 3,
        t: 1,
        kind: "command",
        data: { kind: "approve_replan", command_id: "ui-9" },
      },
    });
    expect(model.tallies.stitchesCompleted).toBe(2);
    expect(model.tallies.replansApproved).toBe(1);
    expect(model.seenCommandIds.has("ui-9")).toBe(true);
  });

  it("reconstructs identical tallies from a catch-up snapshot (reload)", () => {
    const live = new ConsoleViewModel();
    live.apply(catchup(snap({})));
    const records: StreamMessage[] = [
      eventRecord(1, "plans_ready", { plans: [] }),
      eventRecord(2, "stitch_completed"),
      eventRecord(3, "deformation_detected", { max_displacement_mm: 5.0 }),
      eventRecord(4, "stitch_completed"),
    ];
    for (const r of records) live.apply(r);

    const reloaded = new ConsoleViewModel();
    reloaded.apply(catchup(snap({ state: "await_dispatch" }), records));
    expect(reloaded.tallies).toEqual(live.tallies);
    expect(reloaded.events.length).toBe(live.events.length);
  });

  it("tracks issued command ids for end-to-end traceability", () => {
    const model = new ConsoleViewModel("tst");
    const payload = model.buildCommand("select_plan", { plan_mode: "uniform" });
    expect(payload.command_id).toBe("tst-1");
    expect(model.allIssuedCommandsTraced()).toBe(false);
    model.apply({
      type: "record",
      schema_version: 1,
      record: {
        seq: 4,
        t: 2,
        kind: "command",
        data: { kind: "select_plan", command_id: "tst-1" },
      },
    });
    expect(model.allIssuedCommandsTraced()).toBe(true);
  });

  it("caps the nudge payload norm at 10 mm", () => {
    const model = new ConsoleViewModel();
    const payload = model.buildCommand("nudge_offset", { offset_mm: [12, 0, 0] });
    expect(payload.offset_mm?.[0]).toBeCloseTo(10, 6);
  });

  it("disables everything once the session ends", () => {
    const model = new ConsoleViewModel();
    model.apply(catchup(snap({ state: "await_plan_selection", allowed_commands: ["select_plan"] })));
    model.apply({ type: "status", schema_version: 1, status: "done" });
    expect(model.commandEnabled("select_plan")).toBe(false);
    expect(model.connection).toBe("ended");
  });
});
