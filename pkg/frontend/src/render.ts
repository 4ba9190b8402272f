// Canvas rendering of one protocol step. Drawing goes through a minimal
// structural interface so tests can record calls without a DOM.

import { activeBoxIds, inAddMode, previewBox, type ViewState } from "./state.js";
import { partnerOf } from "./boxes.js";
import { styleFor } from "./theme.js";
import type { Box } from "./types.js";

export interface Draw2D {
  strokeStyle: string;
  fillStyle: string;
  lineWidth: number;
  globalAlpha: number;
  font: string;
  beginPath(): void;
  rect(x: number, y: number, w: number, h: number): void;
  stroke(): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillText(text: string, x: number, y: number): void;
  setLineDash(segments: number[]): void;
}

function drawBox(ctx: Draw2D, box: Box, active: boolean, panX: number): void {
  const style = styleFor(box.class);
  ctx.strokeStyle = style.color;
  ctx.lineWidth = active ? 3 : 1;
  ctx.setLineDash([]);
  ctx.beginPath();
  ctx.rect(box.x_min - panX, box.y_min, box.x_max - box.x_min, box.y_max - box.y_min);
  ctx.stroke();
}

function drawControls(ctx: Draw2D, box: Box, panX: number): void {
  // verification controls under the active box: green check, red delete
  const y = Math.min(box.y_max + 6, 10000);
  ctx.fillStyle = "#2e7d32";
  ctx.fillRect(box.x_min - panX, y, 16, 16);
  ctx.fillText("verify", box.x_min - panX + 2, y + 12);
  ctx.fillStyle = "#c62828";
  ctx.fillRect(box.x_min - panX + 20, y, 16, 16);
  ctx.fillText("delete", box.x_min - panX + 22, y + 12);
}

function drawLinkControls(ctx: Draw2D, left: Box, width: number, panX: number): void {
  ctx.fillStyle = "#1565c0";
  // linkage indicator mid-screen plus the unlink control under the left member
  ctx.fillText("linked", width / 2 - panX, 16);
  ctx.fillRect(left.x_min - panX, left.y_max + 26, 16, 16);
  ctx.fillText("unlink", left.x_min - panX + 2, left.y_max + 38);
}

/**
 * Draw the panorama layer, every box class-colored, the active box (or
 * linked pair) highlighted with its controls, and the extreme-click preview
 * while adding.
 */
export function renderProtocolStep(ctx: Draw2D, view: ViewState): void {
  ctx.clearRect(0, 0, view.width, view.height);
  const active = new Set(activeBoxIds(view));
  for (const box of view.boxes.values()) {
    drawBox(ctx, box, active.has(box.id), view.panX);
    if (view.hoverBoxId === box.id) {
      ctx.fillStyle = styleFor(box.class).color;
      ctx.fillText(styleFor(box.class).icon, box.x_min - view.panX + 2, box.y_min + 12);
    }
  }
  const ids = activeBoxIds(view);
  const first = ids.length > 0 ? view.boxes.get(ids[0]!) : undefined;
  if (first) {
    drawControls(ctx, first, view.panX);
    const partner = partnerOf(view.boxes, first.id);
    if (partner && ids.includes(partner)) {
      const pb = view.boxes.get(partner)!;
      const left = first.x_min <= pb.x_min ? first : pb;
      drawLinkControls(ctx, left, view.width, view.panX);
    }
  }
  if (inAddMode(view)) {
    const preview = previewBox(view);
    if (preview) {
      ctx.strokeStyle = styleFor(view.item?.class ?? "").color;
      ctx.lineWidth = 1;
      ctx.setLineDash([4, 4]);
      ctx.beginPath();
      ctx.rect(
        preview.x_min - view.panX,
        preview.y_min,
        preview.x_max - preview.x_min,
        preview.y_max - preview.y_min
      );
      ctx.stroke();
    }
  }
}

/** Recording stub used by tests and useful for debugging. */
export class RecordingContext implements Draw2D {
  strokeStyle = "";
  fillStyle = "";
  lineWidth = 1;
  globalAlpha = 1;
  font = "12px sans-serif";
  calls: Array<{ op: string; args: unknown[]; stroke?: string; fill?: string; lineWidth?: number; dash?: number[] }> = [];
  private dash: number[] = [];

  beginPath(): void {
    this.calls.push({ op: "beginPath", args: [] });
  }
  rect(x: number, y: number, w: number, h: number): void {
    this.calls.push({
      op: "rect", args: [x, y, w, h],
      stroke: this.strokeStyle, lineWidth: this.lineWidth, dash: [...this.dash],
    });
  }
  stroke(): void {
    this.calls.push({ op: "stroke", args: [] });
  }
  fillRect(x: number, y: number, w: number, h: number): void {
    this.calls.push({ op: "fillRect", args: [x, y, w, h], fill: this.fillStyle });
  }
  clearRect(x: number, y: number, w: number, h: number): void {
    this.calls.push({ op: "clearRect", args: [x, y, w, h] });
  }
  fillText(text: string, x: number, y: number): void {
    this.calls.push({ op: "fillText", args: [text, x, y], fill: this.fillStyle });
  }
  setLineDash(segments: number[]): void {
    this.dash = segments;
  }
}
