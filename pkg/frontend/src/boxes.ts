// Local box arithmetic mirroring the server's event semantics, so the
// optimistic UI state always equals the server's replay of the same events.

import type { Box, EditEvent, ExtremePoints } from "./types.js";

export function boxFromExtremes(points: ExtremePoints, cls: string): Box {
  const xMin = points.left.x;
  const xMax = points.right.x;
  const yMin = points.top.y;
  const yMax = points.bottom.y;
  if (xMin > xMax || yMin > yMax) {
    throw new Error("inverted extreme points");
  }
  if (xMin === xMax || yMin === yMax) {
    throw new Error("zero-area box from extreme points");
  }
  return { id: "", class: cls, x_min: xMin, y_min: yMin, x_max: xMax, y_max: yMax, link_id: null };
}

function clamp(box: Box, width: number, height: number): Box {
  const x0 = Math.max(0, Math.min(width, box.x_min));
  const x1 = Math.max(0, Math.min(width, box.x_max));
  const y0 = Math.max(0, Math.min(height, box.y_min));
  const y1 = Math.max(0, Math.min(height, box.y_max));
  if (x1 <= x0 || y1 <= y0) {
    throw new Error("edit collapses the box");
  }
  return { ...box, x_min: x0, y_min: y0, x_max: x1, y_max: y1 };
}

export function partnerOf(boxes: Map<string, Box>, id: string): string | null {
  const box = boxes.get(id);
  if (!box || box.link_id === null) return null;
  for (const [other, ob] of boxes) {
    if (other !== id && ob.link_id === box.link_id) return other;
  }
  return null;
}

/** Monotonic per-image id counters, matching the server's assignment. */
export interface IdCounters {
  created: number;
  links: number;
}

export function freshCounters(): IdCounters {
  return { created: 0, links: 0 };
}

const EDGE = 1e-6;

/**
 * Apply one edit event to the local box map in place. Returns the id of a
 * created box (assigned exactly as the server does: n0, n1, ... per image).
 */
export function applyEventLocal(
  boxes: Map<string, Box>,
  ev: EditEvent,
  width: number,
  height: number,
  counters: IdCounters
): string | null {
  switch (ev.kind) {
    case "verify":
      return null;
    case "create": {
      // wire format carries points as [x, y] pairs, as the server expects
      const payload = ev.payload as {
        class: string;
        points: Record<"top" | "bottom" | "left" | "right", [number, number]>;
      };
      const pts: ExtremePoints = {
        top: { x: payload.points.top[0], y: payload.points.top[1] },
        bottom: { x: payload.points.bottom[0], y: payload.points.bottom[1] },
        left: { x: payload.points.left[0], y: payload.points.left[1] },
        right: { x: payload.points.right[0], y: payload.points.right[1] },
      };
      const created = clamp(boxFromExtremes(pts, payload.class), width, height);
      const id = `n${counters.created}`;
      counters.created += 1;
      boxes.set(id, { ...created, id });
      return id;
    }
    case "delete": {
      const id = ev.target as string;
      const partner = partnerOf(boxes, id);
      boxes.delete(id);
      if (partner) boxes.delete(partner);
      return null;
    }
    case "move": {
      const id = ev.target as string;
      const box = boxes.get(id);
      if (!box) throw new Error(`unknown box: ${id}`);
      const payload = ev.payload as { dx?: number; dy?: number };
      const partner = partnerOf(boxes, id);
      const dx = partner ? 0 : payload.dx ?? 0; // linked members stay pinned
      const dy = payload.dy ?? 0;
      const moved = clamp(
        { ...box, x_min: box.x_min + dx, x_max: box.x_max + dx, y_min: box.y_min + dy, y_max: box.y_max + dy },
        width,
        height
      );
      boxes.set(id, moved);
      if (partner) {
        const pb = boxes.get(partner)!;
        boxes.set(partner, clamp({ ...pb, y_min: moved.y_min, y_max: moved.y_max }, width, height));
      }
      return null;
    }
    case "resize": {
      const id = ev.target as string;
      const box = boxes.get(id);
      if (!box) throw new Error(`unknown box: ${id}`);
      const payload = ev.payload as Partial<Record<"x_min" | "y_min" | "x_max" | "y_max", number>>;
      let next = clamp(
        {
          ...box,
          x_min: payload.x_min ?? box.x_min,
          y_min: payload.y_min ?? box.y_min,
          x_max: payload.x_max ?? box.x_max,
          y_max: payload.y_max ?? box.y_max,
        },
        width,
        height
      );
      const partner = partnerOf(boxes, id);
      if (partner) {
        if (box.x_min <= EDGE) next = { ...next, x_min: 0 };
        if (box.x_max >= width - EDGE) next = { ...next, x_max: width };
        const pb = boxes.get(partner)!;
        boxes.set(partner, clamp({ ...pb, y_min: next.y_min, y_max: next.y_max }, width, height));
      }
      boxes.set(id, next);
      return null;
    }
    case "link": {
      const id = ev.target as string;
      const other = (ev.payload as { other: string }).other;
      const a = boxes.get(id);
      const b = boxes.get(other);
      if (!a || !b) throw new Error("unknown box to link");
      const left = a.x_min <= b.x_min ? a : b;
      const right = left === a ? b : a;
      if (left.x_min > EDGE || right.x_max < width - EDGE) {
        throw new Error("linked boxes must touch opposite image extremities");
      }
      const y0 = Math.min(a.y_min, b.y_min);
      const y1 = Math.max(a.y_max, b.y_max);
      const lid = `l${counters.links}`;
      counters.links += 1;
      boxes.set(a.id, { ...a, y_min: y0, y_max: y1, link_id: lid });
      boxes.set(b.id, { ...b, y_min: y0, y_max: y1, link_id: lid });
      return null;
    }
    case "unlink": {
      const id = ev.target as string;
      const partner = partnerOf(boxes, id);
      const box = boxes.get(id);
      if (!box) throw new Error(`unknown box: ${id}`);
      boxes.set(id, { ...box, link_id: null });
      if (partner) {
        const pb = boxes.get(partner)!;
        boxes.set(partner, { ...pb, link_id: null });
      }
      return null;
    }
  }
}

/** Replay an event log over initial boxes; mirrors the server-side replay. */
export function replayEvents(
  initial: Box[],
  events: EditEvent[],
  width: number,
  height: number
): Map<string, Box> {
  const boxes = new Map(initial.map((b) => [b.id, { ...b }]));
  const counters = freshCounters();
  for (const ev of events) {
    applyEventLocal(boxes, ev, width, height, counters);
  }
  return boxes;
}

export function sortedBoxes(boxes: Map<string, Box>): Box[] {
  return [...boxes.values()].sort(
    (a, b) => a.x_min - b.x_min || a.y_min - b.y_min || a.id.localeCompare(b.id)
  );
}
