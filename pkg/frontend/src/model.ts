// Console view-model: folds the ordered stream into everything the screen
// needs. Stateless with respect to simulation truth: a reload plus the
// catch-up snapshot reconstructs the identical view.

import type { LogRecord, Snapshot, StreamMessage } from "./types.js";

export const MAX_OFFSET_NORM_MM = 10.0;

export interface PendingDecision {
  kind: "select_plan" | "approve_replan" | "offset_or_repeat" | "approve_fire" | "assistant";
  detail: string;
}

export interface Tallies {
  stitchesCompleted: number;
  stitchesFailed: number;
  deformationAlerts: number;
  replansApproved: number;
  toolFailures: number;
  planningEvents: number;
}

export interface AlertBanner {
  severity: "info" | "warn";
  text: string;
}

export function clampOffset(v: [number, number, number]): [number, number, number] {
  const norm = Math.hypot(v[0], v[1], v[2]);
  if (norm <= MAX_OFFSET_NORM_MM) return v;
  const k = MAX_OFFSET_NORM_MM / norm;
  return [v[0] * k, v[1] * k, v[2] * k];
}

export class ConsoleViewModel {
  connection: "connecting" | "live" | "ended" | "lost" = "connecting";
  snapshot: Snapshot | null = null;
  status: string | null = null;
  lastSeq = -1;
  tallies: Tallies = {
    stitchesCompleted: 0,
    stitchesFailed: 0,
    deformationAlerts: 0,
    replansApproved: 0,
    toolFailures: 0,
    planningEvents: 0,
  };
  alert: AlertBanner | null = null;
  offsetDraft: [number, number, number] = [0, 0, 0];
  /** command_id -> kind for every command this console issued. */
  issuedCommands = new Map<string, string>();
  /** command ids observed in the run log stream (any origin). */
  seenCommandIds = new Set<string>();
  events: LogRecord[] = [];

  private idCounter = 0;
  constructor(private idPrefix = "ui") {}

  nextCommandId(): string {
    this.idCounter += 1;
    return `${this.idPrefix}-${this.idCounter}`;
  }

  get state(): string {
    return this.snapshot?.state ?? "unknown";
  }

  commandEnabled(kind: string): boolean {
    if (this.status !== null) return false;
    return this.snapshot?.allowed_commands.includes(kind) ?? false;
  }

  get pendingDecision(): PendingDecision | null {
    switch (this.state) {
      case "await_plan_selection":
        return {
          kind: "select_plan",
          detail: `${this.snapshot?.pending_plans.length ?? 0} plan options ready`,
        };
      case "await_replan_approval":
        return { kind: "approve_replan", detail: this.alert?.text ?? "tissue deformed" };
      case "await_offset_or_repeat":
        return { kind: "offset_or_repeat", detail: this.alert?.text ?? "stitch needs attention" };
      case "await_fire_approval":
        return { kind: "approve_fire", detail: "approve needle firing" };
      case "await_assistant":
        return this.commandEnabled("release_assistant_gate")
          ? { kind: "assistant", detail: "release assistant gate" }
          : null;
      default:
        return null;
    }
  }

  apply(msg: StreamMessage): void {
    switch (msg.type) {
      case "catchup": {
        this.connection = "live";
        this.snapshot = msg.snapshot;
        this.status = msg.status;
        this.lastSeq = msg.last_seq;
        this.resetTallies();
        for (const record of msg.records) this.applyRecord(record);
        if (msg.status !== null) this.connection = "ended";
        break;
      }
      case "record":
        this.lastSeq = Math.max(this.lastSeq, msg.record.seq);
        this.applyRecord(msg.record);
        break;
      case "snapshot":
        this.snapshot = msg.snapshot;
        break;
      case "status":
        this.status = msg.status;
        this.connection = "ended";
        break;
    }
  }

  private resetTallies(): void {
    this.tallies = {
      stitchesCompleted: 0,
      stitchesFailed: 0,
      deformationAlerts: 0,
      replansApproved: 0,
      toolFailures: 0,
      planningEvents: 0,
    };
    this.events = [];
    this.seenCommandIds = new Set();
    this.alert = null;
  }

  private applyRecord(record: LogRecord): void {
    if (record.kind === "command") {
      const id = record.data["command_id"];
      if (typeof id === "string" && id) this.seenCommandIds.add(id);
      if (record.data["kind"] === "approve_replan") this.tallies.replansApproved += 1;
      return;
    }
    if (record.kind !== "event") return;
    this.events.push(record);
    const evt = record.data["event"];
    switch (evt) {
      case "stitch_completed":
        this.tallies.stitchesCompleted += 1;
        if (this.alert?.severity === "info") this.alert = null;
        break;
      case "stitch_failed":
        this.tallies.stitchesFailed += 1;
        this.alert = {
          severity: "warn",
          text: `stitch failed (${record.data["reason"]}); nudge and repeat`,
        };
        break;
      case "tool_failure":
        this.tallies.toolFailures += 1;
        this.alert = { severity: "warn", text: "tool failure reported" };
        break;
      case "deformation_detected":
        this.tallies.deformationAlerts += 1;
        this.alert = {
          severity: "warn",
          text: `tissue deformed ${Number(record.data["max_displacement_mm"]).toFixed(1)} mm; replan recommended`,
        };
        break;
      case "plan_still_usable":
        if (this.alert?.severity === "warn" && this.alert.text.includes("deformed")) {
          this.alert = null;
        }
        break;
      case "plans_ready":
        this.tallies.planningEvents += 1;
        this.alert = { severity: "info", text: "suture plans ready for selection" };
        break;
      case "anastomosis_complete":
        this.alert = { severity: "info", text: "anastomosis complete" };
        break;
    }
  }

  /** True when every command this console issued shows up in the stream. */
  allIssuedCommandsTraced(): boolean {
    for (const id of this.issuedCommands.keys()) {
      if (!this.seenCommandIds.has(id)) return false;
    }
    return true;
  }

  buildCommand(kind: string, extra: Partial<{ plan_mode: string; offset_mm: [number, number, number] }> = {}) {
    const command_id = this.nextCommandId();
    this.issuedCommands.set(command_id, kind);
    const payload: Record<string, unknown> = { kind, command_id };
    if (extra.plan_mode) payload["plan_mode"] = extra.plan_mode;
    if (extra.offset_mm) payload["offset_mm"] = clampOffset(extra.offset_mm);
    return payload as { kind: string; command_id: string; plan_mode?: string; offset_mm?: [number, number, number] };
  }
}
