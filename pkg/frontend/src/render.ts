// 2-D canvas rendering of the camera-plane view: marker blobs with trails,
// plan overlays (planned vs achieved), the tool crosshair, and state badges.

import type { ConsoleViewModel } from "./model.js";
import type { PlanPointView } from "./types.js";

const VIEW_W = 640;
const VIEW_H = 480;

interface Trail {
  points: Array<[number, number]>;
}

export class ConsoleRenderer {
  private trails = new Map<string, Trail>();
  private achieved: Array<[number, number]> = [];

  constructor(private ctx: CanvasRenderingContext2D) {}

  noteAchievedStitch(uv: [number | null, number | null]): void {
    if (uv[0] !== null && uv[1] !== null) this.achieved.push([uv[0], uv[1]]);
  }

  reset(): void {
    this.trails.clear();
    this.achieved = [];
  }

  draw(model: ConsoleViewModel): void {
    const ctx = this.ctx;
    const snap = model.snapshot;
    ctx.fillStyle = "#081014";
    ctx.fillRect(0, 0, VIEW_W, VIEW_H);
    if (!snap) {
      ctx.fillStyle = "#8aa";
      ctx.font = "16px monospace";
      ctx.fillText("waiting for session stream...", 20, 30);
      return;
    }
    // Half-resolution camera frames scale up to the canvas.
    const scale = 1.0;

    // Marker trails and blobs.
    for (const [name, marker] of Object.entries(snap.markers)) {
      const [u, v] = marker.uv;
      if (u === null || v === null) continue;
      let trail = this.trails.get(name);
      if (!trail) {
        trail = { points: [] };
        this.trails.set(name, trail);
      }
      trail.points.push([u, v]);
      if (trail.points.length > 40) trail.points.shift();
      ctx.strokeStyle = "rgba(90, 220, 170, 0.35)";
      ctx.beginPath();
      trail.points.forEach(([tu, tv], i) => {
        if (i === 0) ctx.moveTo(tu * scale, tv * scale);
        else ctx.lineTo(tu * scale, tv * scale);
      });
      ctx.stroke();
      const gradient = ctx.createRadialGradient(u, v, 1, u, v, 9);
      gradient.addColorStop(0, "#9ef7cf");
      gradient.addColorStop(1, "rgba(60,160,120,0)");
      ctx.fillStyle = gradient;
      ctx.beginPath();
      ctx.arc(u * scale, v * scale, 9, 0, Math.PI * 2);
      ctx.fill();
      ctx.fillStyle = "#cdeee0";
      ctx.font = "10px monospace";
      ctx.fillText(name, u * scale + 10, v * scale - 6);
    }

    // Plan overlay.
    const plan = snap.plan;
    if (plan) {
      for (const p of plan.points as PlanPointView[]) {
        const [u, v] = p.uv;
        if (u === null || v === null) continue;
        const active =
          p.wall === snap.wall &&
          plan.points
            .filter((q) => q.wall === snap.wall)
            .findIndex((q) => q.index === p.index) === snap.wall_index;
        ctx.strokeStyle = active ? "#ffd166" : p.kind === "knot" ? "#f28482" : "#5ba8f5";
        ctx.lineWidth = active ? 2.5 : 1.2;
        ctx.beginPath();
        ctx.arc(u * scale, v * scale, active ? 7 : 4, 0, Math.PI * 2);
        ctx.stroke();
      }
    }

    // Achieved stitches.
    ctx.fillStyle = "#f4f1de";
    for (const [u, v] of this.achieved) {
      ctx.fillRect(u * scale - 2, v * scale - 2, 4, 4);
    }

    // Tool crosshair.
    const [tu, tv] = snap.tool_uv;
    if (tu !== null && tv !== null) {
      ctx.strokeStyle = "#e07a5f";
      ctx.lineWidth = 1.5;
      ctx.beginPath();
      ctx.moveTo(tu - 10, tv);
      ctx.lineTo(tu + 10, tv);
      ctx.moveTo(tu, tv - 10);
      ctx.lineTo(tu, tv + 10);
      ctx.stroke();
    }

    // Badges.
    ctx.fillStyle = "#11202a";
    ctx.fillRect(0, 0, VIEW_W, 22);
    ctx.fillStyle = snap.breath === "stationary" ? "#7bd88f" : "#ffb86b";
    ctx.font = "12px monospace";
    ctx.fillText(
      `state: ${snap.state}  breath: ${snap.breath}  wall: ${snap.wall} #${snap.wall_index + 1}` +
        `  attempt: ${snap.attempt}  camera: ${snap.camera_mode}  t=${snap.t.toFixed(1)}s`,
      8,
      15,
    );
  }
}
