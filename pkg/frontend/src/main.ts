// Operator console wiring: connects to a session, folds the stream into the
// view-model, renders the camera-plane view, and maps the decision controls
// onto operator commands.

import { ServiceClient } from "./api.js";
import { ConsoleViewModel, clampOffset } from "./model.js";
import { ConsoleRenderer } from "./render.js";
import type { StreamMessage } from "./types.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const model = new ConsoleViewModel();
let client: ServiceClient | null = null;
let sessionId: string | null = null;
let renderer: ConsoleRenderer | null = null;
let abort: AbortController | null = null;

const OFFSET_STEP = 0.5;
const offsetDraft: [number, number, number] = [0, 0, 0];

const BUTTON_COMMANDS: Array<[string, string]> = [
  ["btn-start", "start_planning"],
  ["btn-select-uniform", "select_plan"],
  ["btn-select-corner", "select_plan"],
  ["btn-approve-replan", "approve_replan"],
  ["btn-keep-plan", "keep_existing_plan"],
  ["btn-approve-fire", "approve_fire"],
  ["btn-release-assistant", "release_assistant_gate"],
  ["btn-nudge", "nudge_offset"],
  ["btn-repeat", "repeat_stitch"],
  ["btn-pause", "pause"],
  ["btn-resume", "resume"],
  ["btn-abort", "abort"],
];

function refreshControls(): void {
  for (const [id, command] of BUTTON_COMMANDS) {
    el<HTMLButtonElement>(id).disabled = !model.commandEnabled(command);
  }

  const banner = el<HTMLDivElement>("alert-banner");
  if (model.alert) {
    banner.textContent = model.alert.text;
    banner.className = `banner ${model.alert.severity}`;
  } else {
    banner.textContent = "";
    banner.className = "banner hidden";
  }
  const decision = el<HTMLDivElement>("pending-decision");
  decision.textContent = model.pendingDecision
    ? `decision needed: ${model.pendingDecision.detail}`
    : "";
  el<HTMLSpanElement>("tally-stitches").textContent = String(model.tallies.stitchesCompleted);
  el<HTMLSpanElement>("tally-failed").textContent = String(model.tallies.stitchesFailed);
  el<HTMLSpanElement>("tally-deform").textContent = String(model.tallies.deformationAlerts);
  el<HTMLSpanElement>("tally-replans").textContent = String(model.tallies.replansApproved);
  el<HTMLSpanElement>("conn-state").textContent =
    model.status !== null ? `ended (${model.status})` : model.connection;
  el<HTMLSpanElement>("offset-draft").textContent = offsetDraft
    .map((v) => v.toFixed(1))
    .join(", ");
}

async function send(kind: string, extra: Partial<{ plan_mode: string; offset_mm: [number, number, number] }> = {}) {
  if (!client || !sessionId) return;
  const payload = model.buildCommand(kind, extra);
  const ack = await client.submitCommand(sessionId, payload);
  const trace = el<HTMLDivElement>("ack-trace");
  trace.textContent = ack.accepted
    ? `${payload.command_id} ${kind}: accepted (state ${ack.state})`
    : `${payload.command_id} ${kind}: rejected - ${ack.reason}`;
  refreshControls();
}

function bindControls(): void {
  el("btn-start").onclick = () => send("start_planning");
  el("btn-select-uniform").onclick = () => send("select_plan", { plan_mode: "uniform" });
  el("btn-select-corner").onclick = () => send("select_plan", { plan_mode: "corner_reinforced" });
  el("btn-approve-replan").onclick = () => send("approve_replan");
  el("btn-keep-plan").onclick = () => send("keep_existing_plan");
  el("btn-approve-fire").onclick = () => send("approve_fire");
  el("btn-release-assistant").onclick = () => send("release_assistant_gate");
  el("btn-repeat").onclick = () => send("repeat_stitch");
  el("btn-nudge").onclick = () => {
    const clamped = clampOffset([...offsetDraft] as [number, number, number]);
    send("nudge_offset", { offset_mm: clamped });
    offsetDraft[0] = offsetDraft[1] = offsetDraft[2] = 0;
  };
  el("btn-pause").onclick = () => send("pause");
  el("btn-resume").onclick = () => send("resume");
  el("btn-abort").onclick = () => {
    if (confirm("Abort the session?")) void send("abort");
  };
  const axes: Array<[string, 0 | 1 | 2, number]> = [
    ["x-minus", 0, -OFFSET_STEP], ["x-plus", 0, OFFSET_STEP],
    ["y-minus", 1, -OFFSET_STEP], ["y-plus", 1, OFFSET_STEP],
    ["z-minus", 2, -OFFSET_STEP], ["z-plus", 2, OFFSET_STEP],
  ];
  for (const [id, axis, delta] of axes) {
    el(`btn-${id}`).onclick = () => {
      offsetDraft[axis] += delta;
      refreshControls();
    };
  }
}

async function connect(): Promise<void> {
  const base = el<HTMLInputElement>("service-url").value.replace(/\/$/, "");
  client = new ServiceClient(base);
  const existing = el<HTMLInputElement>("session-id").value.trim();
  if (existing) {
    sessionId = existing;
  } else {
    const created = await client.createSession({
      scenario: el<HTMLInputElement>("scenario-name").value || "default",
      profile: el<HTMLSelectElement>("profile").value,
      seed: Number(el<HTMLInputElement>("seed").value || "0"),
      clock: { mode: "realtime", speed: Number(el<HTMLInputElement>("speed").value || "1") },
    });
    sessionId = created.session_id;
    el<HTMLInputElement>("session-id").value = sessionId;
  }
  const canvas = el<HTMLCanvasElement>("view");
  renderer = new ConsoleRenderer(canvas.getContext("2d")!);
  renderer.reset();
  abort?.abort();
  abort = new AbortController();
  const onMessage = (msg: StreamMessage) => {
    model.apply(msg);
    if (msg.type === "record" && msg.record.kind === "stitch") {
      const data = msg.record.data as { success?: boolean };
      if (data.success && model.snapshot) renderer?.noteAchievedStitch(model.snapshot.tool_uv);
    }
    renderer?.draw(model);
    refreshControls();
  };
  model.connection = "connecting";
  refreshControls();
  try {
    await client.subscribe(sessionId, onMessage, abort.signal);
  } catch (err) {
    model.connection = "lost";
    refreshControls();
    // Reconnect with a fresh catch-up snapshot after a short pause.
    setTimeout(() => void connect(), 1500);
  }
}

bindControls();
el("btn-connect").onclick = () => void connect();
refreshControls();
