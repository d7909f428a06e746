// Wire schemas of the session service (schema_version 1).

export interface LogRecord {
  seq: number;
  t: number;
  kind: string;
  data: Record<string, unknown>;
}

export interface MarkerView {
  world: [number, number, number];
  uv: [number | null, number | null];
}

export interface PlanPointView {
  index: number;
  wall: string;
  kind: string;
  uv: [number | null, number | null];
}

export interface PlanView {
  plan_id: number;
  mode: string;
  points: PlanPointView[];
}

export interface Snapshot {
  t: number;
  state: string;
  breath: string;
  wall: string;
  wall_index: number;
  attempt: number;
  camera_mode: string;
  camera_distance_mm: number;
  markers: Record<string, MarkerView>;
  plan: PlanView | null;
  pending_plans: Array<{ plan_id: number; mode: string; points: unknown[] }>;
  tool_uv: [number | null, number | null];
  replans: number;
  allowed_commands: string[];
}

export type StreamMessage =
  | {
      type: "catchup";
      schema_version: number;
      snapshot: Snapshot;
      status: string | null;
      last_seq: number;
      records: LogRecord[];
    }
  | { type: "record"; schema_version: number; record: LogRecord }
  | { type: "snapshot"; schema_version: number; snapshot: Snapshot }
  | { type: "status"; schema_version: number; status: string };

export interface CommandPayload {
  kind: string;
  plan_mode?: string;
  offset_mm?: [number, number, number];
  command_id: string;
}

export interface CommandAck {
  accepted: boolean;
  reason: string;
  state: string;
  command_id: string;
  schema_version: number;
}
