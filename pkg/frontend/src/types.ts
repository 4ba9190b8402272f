// Wire types of the annotation service HTTP API.

export type Stage = "adjust" | "add_verify" | "final_verify" | "done";

export type ItemKind = "adjust" | "verify" | "add" | "done";

export interface Box {
  id: string;
  class: string;
  x_min: number;
  y_min: number;
  x_max: number;
  y_max: number;
  link_id: string | null;
}

export interface NextItem {
  stage: Stage;
  kind: ItemKind;
  box_ids: string[];
  class: string | null;
  image_id?: string | null;
  complete?: boolean;
}

export interface ImageState {
  id: string;
  width_px: number;
  height_px: number;
  stage: string;
  boxes: Box[];
  image_url: string | null;
}

export interface BatchResponse {
  session_id: string;
  batch: string[];
  batch_size: number;
  next: NextItem;
}

export type EventKind =
  | "move"
  | "resize"
  | "delete"
  | "create"
  | "link"
  | "unlink"
  | "verify";

export interface EditEvent {
  kind: EventKind;
  image_id: string;
  target?: string | null;
  payload?: Record<string, unknown>;
  ts: number;
  key?: string;
}

export interface EventsResponse {
  applied: number;
  next: NextItem;
}

export interface FinalizeResponse {
  accepted: boolean;
  median_iou: number;
  timing: Record<string, number | null>;
}

export interface Point {
  x: number;
  y: number;
}

export interface ExtremePoints {
  top: Point;
  bottom: Point;
  left: Point;
  right: Point;
}
