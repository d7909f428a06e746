// Live operator-loop test against the real Python service: select a plan,
// watch stitches, receive a deformation alert, approve the replan, and
// nudge + repeat a failed stitch. Every command the console issues must
// appear in the run log under its command id, and a mid-run reload must
// reconstruct the view from the catch-up snapshot.
import { spawn, type ChildProcess } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ServiceClient } from "../src/api.js";
import { ConsoleViewModel } from "../src/model.js";
import type { StreamMessage } from "../src/types.js";

const PORT = 8891;
const BASE = `http://127.0.0.1:${PORT}`;
let service: ChildProcess;

async function waitForService(): Promise<void> {
  for (let i = 0; i < 100; i++) {
    try {
      const resp = await fetch(`${BASE}/api/sessions`);
      if (resp.ok) return;
    } catch {
      /* not up yet */
    }
    await new Promise((r) => setTimeout(r, 150));
  }
  throw new Error("service never came up");
}

beforeAll(async () => {
  service = spawn(
    "python3",
    ["-m", "suturesim.cli", "serve", "--host", "127.0.0.1", "--port", String(PORT)],
    { cwd: "..", stdio: "ignore" },
  );
  await waitForService();
}, 30_000);

afterAll(() => {
  service?.kill();
});

describe("operator loop against a live session", () => {
  it(
    "drives select-plan, deformation replan, and nudge+repeat to completion",
    { timeout: 240_000 },
    async () => {
      const client = new ServiceClient(BASE);
      const model = new ConsoleViewModel("op");
      // Default deformation schedule plus one injected tool fault so a
      // stitch genuinely fails and needs the nudge + repeat recovery.
      const scenario = {
        name: "console-loop",
        deformations: [
          { wall: "back", after_stitch: 4, magnitude_mm: [4, 6] },
          { wall: "front", after_stitch: 3, magnitude_mm: [4, 6] },
          { wall: "front", after_stitch: 7, magnitude_mm: [4, 6] },
        ],
        tool_failures: [{ wall: "back", stitch: 2 }],
      };
      const { session_id } = await client.createSession({
        scenario,
        profile: "ex_vivo",
        seed: 11,
        clock: { mode: "realtime", speed: 60 },
      });

      const issued: Array<Promise<unknown>> = [];
      const decided = new Set<string>();
      let sawDeformationAlert = false;
      let sawStitchFailure = false;
      let nudged = false;

      const decide = (msg: StreamMessage): void => {
        model.apply(msg);
        if (model.alert?.text.includes("deformed")) sawDeformationAlert = true;
        const state = model.state;
        const key = `${state}:${model.snapshot?.wall}:${model.snapshot?.wall_index}:${model.snapshot?.attempt}`;
        if (decided.has(key)) return;
        if (state === "idle" && model.commandEnabled("start_planning")) {
          decided.add(key);
          issued.push(client.submitCommand(session_id, model.buildCommand("start_planning")));
        } else if (state === "await_plan_selection" && model.commandEnabled("select_plan")) {
          decided.add(key);
          issued.push(
            client.submitCommand(
              session_id,
              model.buildCommand("select_plan", { plan_mode: "uniform" }),
            ),
          );
        } else if (state === "await_replan_approval" && model.commandEnabled("approve_replan")) {
          decided.add(key);
          issued.push(client.submitCommand(session_id, model.buildCommand("approve_replan")));
        } else if (state === "await_offset_or_repeat" && model.commandEnabled("repeat_stitch")) {
          decided.add(key);
          sawStitchFailure = true;
          if (!nudged) {
            nudged = true;
            issued.push(
              client.submitCommand(
                session_id,
                model.buildCommand("nudge_offset", { offset_mm: [0, 2, 0] }),
              ),
            );
          }
          issued.push(client.submitCommand(session_id, model.buildCommand("repeat_stitch")));
        }
      };

      await client.subscribe(session_id, decide);
      await Promise.all(issued);

      expect(model.status).toBe("done");
      expect(model.tallies.stitchesCompleted).toBe(25);
      expect(sawDeformationAlert).toBe(true);
      expect(model.tallies.deformationAlerts).toBe(3);
      expect(model.tallies.replansApproved).toBe(3);
      expect(sawStitchFailure).toBe(true);

      // End-to-end traceability: every console-issued command id is in the log.
      const logText = await client.fetchLog(session_id);
      const loggedIds = new Set<string>();
      for (const line of logText.trim().split("\n")) {
        const record = JSON.parse(line);
        if (record.kind === "command" && record.data.command_id) {
          loggedIds.add(record.data.command_id);
        }
      }
      for (const id of model.issuedCommands.keys()) {
        expect(loggedIds.has(id), `command ${id} missing from run log`).toBe(true);
      }

      // Reload: a fresh subscription's catch-up snapshot reconstructs the view.
      const reloaded = new ConsoleViewModel("re");
      await client.subscribe(session_id, (msg) => reloaded.apply(msg));
      expect(reloaded.tallies.stitchesCompleted).toBe(model.tallies.stitchesCompleted);
      expect(reloaded.tallies.deformationAlerts).toBe(model.tallies.deformationAlerts);
      expect(reloaded.tallies.stitchesFailed).toBe(model.tallies.stitchesFailed);
      expect(reloaded.status).toBe("done");
      for (const id of model.issuedCommands.keys()) {
        expect(reloaded.seenCommandIds.has(id)).toBe(true);
      }
    },
  );

  it("rejects a command the state does not await and reports the state", async () => {
    const client = new ServiceClient(BASE);
    const model = new ConsoleViewModel("rj");
    const { session_id } = await client.createSession({
      scenario: "quiet",
      seed: 3,
      clock: { mode: "realtime", speed: 10 },
    });
    const ack = await client.submitCommand(
      session_id,
      model.buildCommand("select_plan", { plan_mode: "uniform" }),
    );
    expect(ack.accepted).toBe(false);
    expect(ack.reason).toContain("invalid_command_for_state");
    expect(ack.state).toBe("idle");
    const abortAck = await client.submitCommand(session_id, model.buildCommand("abort"));
    expect(abortAck.accepted).toBe(true);
  });
});
