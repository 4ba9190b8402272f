// View state of the annotator: the active item, the pan/zoom of the canvas
// and the in-flight extreme-click buffer.

import type { Box, NextItem, Point } from "./types.js";

export interface ViewState {
  imageId: string | null;
  item: NextItem | null;
  boxes: Map<string, Box>;
  width: number;
  height: number;
  /** 0..4 clicks of the extreme-click gesture (top, bottom, left, right). */
  pendingExtremes: Point[];
  panX: number;
  zoom: number;
  hoverBoxId: string | null;
  /** Horizontal wrap-scroll for seam inspection; ergonomic, off by default. */
  wrapScroll: boolean;
}

export function initialView(): ViewState {
  return {
    imageId: null,
    item: null,
    boxes: new Map(),
    width: 1400,
    height: 700,
    pendingExtremes: [],
    panX: 0,
    zoom: 1,
    hoverBoxId: null,
    wrapScroll: false,
  };
}

export function beginItem(view: ViewState, item: NextItem): ViewState {
  // a new active item always clears the click buffer
  return { ...view, item, imageId: item.image_id ?? view.imageId, pendingExtremes: [] };
}

export function activeBoxIds(view: ViewState): string[] {
  return view.item && view.item.kind !== "add" ? view.item.box_ids : [];
}

export function inAddMode(view: ViewState): boolean {
  return view.item?.kind === "add";
}

const EXTREME_ORDER = ["top", "bottom", "left", "right"] as const;

export function clickExtreme(view: ViewState, p: Point): ViewState {
  if (!inAddMode(view)) return view;
  if (p.x < 0 || p.y < 0 || p.x > view.width || p.y > view.height) {
    return view; // out-of-canvas clicks are ignored
  }
  if (view.pendingExtremes.length >= 4) return view;
  return { ...view, pendingExtremes: [...view.pendingExtremes, p] };
}

export function undoExtreme(view: ViewState): ViewState {
  return { ...view, pendingExtremes: view.pendingExtremes.slice(0, -1) };
}

export function extremesComplete(view: ViewState): boolean {
  return view.pendingExtremes.length === 4;
}

export function pendingExtremePoints(view: ViewState) {
  const [top, bottom, left, right] = view.pendingExtremes;
  return { top, bottom, left, right };
}

/**
 * Live preview of the box under construction: the tight axis-aligned hull
 * of the clicks so far (the same rectangle boxFromExtremes yields once all
 * four are in).
 */
export function previewBox(view: ViewState): { x_min: number; y_min: number; x_max: number; y_max: number } | null {
  const pts = view.pendingExtremes;
  if (pts.length === 0) return null;
  const xs = pts.map((p) => p.x);
  const ys = pts.map((p) => p.y);
  return {
    x_min: Math.min(...xs),
    y_min: Math.min(...ys),
    x_max: Math.max(...xs),
    y_max: Math.max(...ys),
  };
}

export function labelForClick(view: ViewState): (typeof EXTREME_ORDER)[number] | null {
  return view.pendingExtremes.length < 4 ? EXTREME_ORDER[view.pendingExtremes.length]! : null;
}

/** Seam-adjacency affordance: clicks in the edge strips offer linking. */
export function nearSeam(view: ViewState, p: Point, strip = 25): "left" | "right" | null {
  if (p.x <= strip) return "left";
  if (p.x >= view.width - strip) return "right";
  return null;
}

export function panBy(view: ViewState, dx: number): ViewState {
  let panX = view.panX + dx;
  if (view.wrapScroll) {
    panX = ((panX % view.width) + view.width) % view.width;
  } else {
    panX = Math.max(0, Math.min(view.width, panX));
  }
  return { ...view, panX };
}
