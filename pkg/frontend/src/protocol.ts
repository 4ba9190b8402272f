// Session controller: applies edits optimistically, mirrors them to the
// server as events, and walks the three-task protocol item by item.

import { applyEventLocal, freshCounters, type IdCounters } from "./boxes.js";
import { AnnotationClient, ApiError } from "./client.js";
import { beginItem, clickExtreme, extremesComplete, initialView, pendingExtremePoints, undoExtreme, type ViewState } from "./state.js";
import type { Box, EditEvent, FinalizeResponse, NextItem } from "./types.js";

interface LocalImage {
  width: number;
  height: number;
  boxes: Map<string, Box>;
  counters: IdCounters;
}

export class AnnotationController {
  sessionId = "";
  batch: string[] = [];
  view: ViewState = initialView();
  images = new Map<string, LocalImage>();
  eventLog: EditEvent[] = [];
  finalized: FinalizeResponse | null = null;

  constructor(
    private client: AnnotationClient,
    private clock: () => number = () => Date.now() / 1000
  ) {}

  async start(worker: string): Promise<NextItem> {
    const batch = await this.client.nextBatch(worker);
    this.sessionId = batch.session_id;
    this.batch = batch.batch;
    for (const id of batch.batch) {
      const img = await this.client.image(id, this.sessionId);
      this.images.set(id, {
        width: img.width_px,
        height: img.height_px,
        boxes: new Map(img.boxes.map((b) => [b.id, { ...b }])),
        counters: freshCounters(),
      });
    }
    return this.adopt(batch.next);
  }

  get current(): NextItem | null {
    return this.view.item;
  }

  boxesOf(imageId: string): Map<string, Box> {
    const img = this.images.get(imageId);
    if (!img) throw new Error(`image not in batch: ${imageId}`);
    return img.boxes;
  }

  private adopt(item: NextItem): NextItem {
    const imageId = item.image_id ?? this.view.imageId;
    this.view = beginItem(this.view, item);
    if (imageId && this.images.has(imageId)) {
      const img = this.images.get(imageId)!;
      this.view = {
        ...this.view,
        imageId,
        boxes: img.boxes,
        width: img.width,
        height: img.height,
      };
    }
    return item;
  }

  private event(kind: EditEvent["kind"], target: string | null, payload: Record<string, unknown> = {}): EditEvent {
    if (!this.view.imageId) throw new Error("no active image");
    return {
      kind,
      image_id: this.view.imageId,
      target,
      payload,
      ts: this.clock(),
      key: this.client.newIdempotencyKey(),
    };
  }

  /** Apply locally, send to the server, adopt the server's next item. */
  private async submit(ev: EditEvent): Promise<NextItem> {
    const img = this.images.get(ev.image_id)!;
    // local validation happens first: nothing is sent if the edit is invalid
    applyEventLocal(img.boxes, ev, img.width, img.height, img.counters);
    this.eventLog.push(ev);
    try {
      const res = await this.client.postEvents(this.sessionId, [ev]);
      return this.adopt(res.next);
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        await this.resync(ev.image_id);
        if (err.next) return this.adopt(err.next);
      }
      throw err;
    }
  }

  /** Rebuild local image state from the server after a rejected event. */
  async resync(imageId: string): Promise<void> {
    const img = await this.client.image(imageId, this.sessionId);
    const local = this.images.get(imageId)!;
    local.boxes = new Map(img.boxes.map((b) => [b.id, { ...b }]));
    this.eventLog = this.eventLog.filter(
      (ev) => ev.image_id !== imageId || this.appliedOnServer(ev)
    );
    this.adopt(await this.client.next(this.sessionId));
  }

  private appliedOnServer(_ev: EditEvent): boolean {
    // after a resync the authoritative log lives server-side; the local
    // mirror only needs the surviving events for diagnostics
    return false;
  }

  private activeBoxId(): string {
    const item = this.view.item;
    if (!item || item.kind === "add" || item.box_ids.length === 0) {
      throw new Error("no active box");
    }
    return item.box_ids[0]!;
  }

  verifyActive(): Promise<NextItem> {
    return this.submit(this.event("verify", this.activeBoxId()));
  }

  deleteActive(): Promise<NextItem> {
    return this.submit(this.event("delete", this.activeBoxId()));
  }

  moveActive(dx: number, dy: number): Promise<NextItem> {
    return this.submit(this.event("move", this.activeBoxId(), { dx, dy }));
  }

  resizeActive(coords: Partial<Record<"x_min" | "y_min" | "x_max" | "y_max", number>>): Promise<NextItem> {
    return this.submit(this.event("resize", this.activeBoxId(), { ...coords }));
  }

  linkActive(otherId: string): Promise<NextItem> {
    return this.submit(this.event("link", this.activeBoxId(), { other: otherId }));
  }

  unlinkActive(): Promise<NextItem> {
    return this.submit(this.event("unlink", this.activeBoxId()));
  }

  /** Buffer one extreme click; emits the create event on the fourth. */
  async addExtremeClick(x: number, y: number): Promise<NextItem | null> {
    this.view = clickExtreme(this.view, { x, y });
    if (!extremesComplete(this.view)) return null;
    const pts = pendingExtremePoints(this.view);
    const cls = this.view.item?.class;
    this.view = { ...this.view, pendingExtremes: [] };
    return this.submit(
      this.event("create", null, {
        class: cls,
        points: {
          top: [pts.top!.x, pts.top!.y],
          bottom: [pts.bottom!.x, pts.bottom!.y],
          left: [pts.left!.x, pts.left!.y],
          right: [pts.right!.x, pts.right!.y],
        },
      })
    );
  }

  undoExtremeClick(): void {
    this.view = undoExtreme(this.view);
  }

  /** Close the open add phase for the active class. */
  closeAddPhase(): Promise<NextItem> {
    const cls = this.view.item?.class;
    if (this.view.item?.kind !== "add" || !cls) {
      throw new Error("no open add phase");
    }
    return this.submit(this.event("verify", null, { class: cls }));
  }

  get complete(): boolean {
    return this.view.item?.stage === "done";
  }

  async finalize(): Promise<FinalizeResponse> {
    this.finalized = await this.client.finalize(this.sessionId);
    return this.finalized;
  }
}
