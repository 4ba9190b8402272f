// Protocol conformance against the real annotation service: a scripted
// session completes a full batch; the server's replayed state must equal the
// UI's optimistic state for every image.

import { spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, mkdirSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { boxFromExtremes, sortedBoxes } from "../src/boxes.js";
import { AnnotationClient, ApiError } from "../src/client.js";
import { AnnotationController } from "../src/protocol.js";
import type { Box } from "../src/types.js";

const CLASSES = [
  "advertising_column", "bicycle_path", "building", "bus", "bridge", "ferry",
  "high_voltage_pylon", "lamppost", "park", "playground", "public_toilet",
  "public_transport_stop", "railway_track", "sport_facility", "traffic_light",
  "traffic_sign", "train", "tram", "trash_container", "tree", "waterway",
  "windturbine",
];

function cocoFile(id: string, boxes: Array<[string, number, number, number, number, string | null]>) {
  const categories = CLASSES.map((name, i) => ({ id: i + 1, name }));
  const catId = new Map(categories.map((c) => [c.name, c.id]));
  return JSON.stringify({
    images: [{ id, width: 1400, height: 700 }],
    annotations: boxes.map(([cls, x0, y0, x1, y1, link], k) => ({
      id: k + 1,
      image_id: id,
      category_id: catId.get(cls),
      bbox: [x0, y0, x1 - x0, y1 - y0],
      area: (x1 - x0) * (y1 - y0),
      iscrowd: 0,
      ext: link ? { link_id: link } : {},
    })),
    categories,
    stage: "refined",
  });
}

let server: ChildProcess | null = null;
let base = "";

async function waitForHealth(url: string, timeoutMs = 30000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const res = await fetch(`${url}/healthz`);
      if (res.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 200));
  }
  throw new Error("annotation service did not come up");
}

beforeAll(async () => {
  const root = mkdtempSync(join(tmpdir(), "annotator-it-"));
  const boxesDir = join(root, "boxes");
  const goldDir = join(root, "gold");
  mkdirSync(boxesDir);
  mkdirSync(goldDir);
  // five work images; w0 carries a linked pair across the seam
  writeFileSync(join(boxesDir, "w0.json"), cocoFile("w0", [
    ["tram", 0, 100, 40, 300, "L"],
    ["tram", 1360, 100, 1400, 300, "L"],
    ["building", 200, 50, 500, 500, null],
  ]));
  for (let i = 1; i < 5; i++) {
    writeFileSync(join(boxesDir, `w${i}.json`), cocoFile(`w${i}`, [
      ["tree", 100 + i * 10, 100, 220 + i * 10, 320, null],
      ["lamppost", 600, 150, 615, 400, null],
    ]));
  }
  // one gold image, reference equal to the published boxes
  const goldBoxes: Array<[string, number, number, number, number, string | null]> = [
    ["building", 300, 60, 700, 520, null],
    ["tree", 900, 120, 1050, 380, null],
  ];
  writeFileSync(join(boxesDir, "g0.json"), cocoFile("g0", goldBoxes));
  writeFileSync(join(goldDir, "g0.json"), cocoFile("g0", goldBoxes));

  const port = 18000 + Math.floor(Math.random() * 2000);
  base = `http://127.0.0.1:${port}`;
  server = spawn(
    "python3",
    ["-m", "panobox.cli", "serve", "--boxes", boxesDir, "--gold", goldDir,
     "--data", join(root, "data"), "--port", String(port)],
    { stdio: ["ignore", "inherit", "inherit"] }
  );
  await waitForHealth(base);
}, 60000);

afterAll(() => {
  server?.kill();
});

function approxEqualBoxes(a: Box[], b: Box[]) {
  expect(a.length).toBe(b.length);
  for (let i = 0; i < a.length; i++) {
    expect(a[i]!.id).toBe(b[i]!.id);
    expect(a[i]!.class).toBe(b[i]!.class);
    expect(a[i]!.link_id).toBe(b[i]!.link_id);
    expect(a[i]!.x_min).toBeCloseTo(b[i]!.x_min, 9);
    expect(a[i]!.y_min).toBeCloseTo(b[i]!.y_min, 9);
    expect(a[i]!.x_max).toBeCloseTo(b[i]!.x_max, 9);
    expect(a[i]!.y_max).toBeCloseTo(b[i]!.y_max, 9);
  }
}

describe("scripted batch session", () => {
  it("completes a 5-image batch whose server replay equals the UI state", async () => {
    let now = 1000;
    const controller = new AnnotationController(
      new AnnotationClient(base),
      () => (now += 1.5)
    );
    await controller.start("it-worker");
    expect(controller.batch).toHaveLength(5);

    let movedFirstBox = false;
    let addedBox = false;
    let sawLinkedPair = false;
    let steps = 0;
    while (!controller.complete && steps < 2000) {
      steps += 1;
      const item = controller.current!;
      if (item.kind === "adjust" || item.kind === "verify") {
        if (item.box_ids.length === 2) {
          // active linked pair: drag the top edge and watch both follow
          sawLinkedPair = true;
          const ids = item.box_ids;
          const before = controller.boxesOf(item.image_id!).get(ids[0]!)!;
          await controller.resizeActive({ y_min: before.y_min + 10 });
          const boxes = controller.boxesOf(item.image_id!);
          const a = boxes.get(ids[0]!)!;
          const b = boxes.get(ids[1]!)!;
          expect(a.y_min).toBeCloseTo(b.y_min, 9);
          expect(a.y_max).toBeCloseTo(b.y_max, 9);
          await controller.verifyActive();
        } else if (!movedFirstBox && item.kind === "adjust") {
          movedFirstBox = true;
          await controller.moveActive(3, 2);
          await controller.verifyActive();
        } else {
          await controller.verifyActive();
        }
      } else if (item.kind === "add") {
        if (!addedBox && item.class === "tree" && item.stage === "add_verify") {
          addedBox = true;
          await controller.addExtremeClick(505, 110);
          await controller.addExtremeClick(505, 190);
          await controller.addExtremeClick(500, 150);
          const created = await controller.addExtremeClick(530, 150);
          expect(created).not.toBeNull();
          const expected = boxFromExtremes(
            { top: { x: 505, y: 110 }, bottom: { x: 505, y: 190 },
              left: { x: 500, y: 150 }, right: { x: 530, y: 150 } },
            "tree"
          );
          const local = controller.boxesOf(item.image_id!).get("n0")!;
          expect(local.x_min).toBe(expected.x_min);
          expect(local.y_min).toBe(expected.y_min);
          expect(local.x_max).toBe(expected.x_max);
          expect(local.y_max).toBe(expected.y_max);
        }
        await controller.closeAddPhase();
      } else {
        break;
      }
    }
    expect(controller.complete).toBe(true);
    expect(sawLinkedPair).toBe(true);
    expect(addedBox).toBe(true);

    // the server's replayed state must equal the UI's final local state
    const client = new AnnotationClient(base);
    for (const imageId of controller.batch) {
      const serverState = await client.image(imageId, controller.sessionId);
      const serverBoxes = sortedBoxes(new Map(serverState.boxes.map((b) => [b.id, b])));
      const localBoxes = sortedBoxes(controller.boxesOf(imageId));
      approxEqualBoxes(localBoxes, serverBoxes);
      // the payload never reveals which image is gold
      expect(JSON.stringify(serverState)).not.toContain("gold");
    }

    const result = await controller.finalize();
    expect(result.accepted).toBe(true);
    expect(result.median_iou).toBeGreaterThan(0.4);
    expect(result.timing).toHaveProperty("adjust");
  }, 120000);

  it("duplicate event posts with one idempotency key apply once", async () => {
    const client = new AnnotationClient(base);
    const batch = await client.nextBatch("retry-worker");
    const next = batch.next;
    const ev = {
      kind: "move" as const,
      image_id: next.image_id!,
      target: next.box_ids[0]!,
      payload: { dx: 2, dy: 0 },
      ts: 1.0,
      key: "fixed-retry-key",
    };
    const first = await client.postEvents(batch.session_id, [ev]);
    expect(first.applied).toBe(1);
    const second = await client.postEvents(batch.session_id, [ev]);
    expect(second.applied).toBe(0); // idempotent retry, no duplicate edit
  }, 60000);

  it("out-of-order events are rejected with a resync payload", async () => {
    const client = new AnnotationClient(base);
    const batch = await client.nextBatch("reject-worker");
    const wrongImage = batch.batch.find((p) => p !== batch.next.image_id)!;
    let caught: ApiError | null = null;
    try {
      await client.postEvents(batch.session_id, [
        { kind: "verify", image_id: wrongImage, target: "b0", ts: 1.0 },
      ]);
    } catch (err) {
      caught = err as ApiError;
    }
    expect(caught).not.toBeNull();
    expect(caught!.status).toBe(409);
    expect(caught!.next).not.toBeNull();
    expect(caught!.next!.image_id).toBe(batch.next.image_id);
  }, 60000);
});
