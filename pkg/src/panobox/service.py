"""Self-hosted annotation backend for box adjustment and verification.

Workers receive batches of five images (one of them a hidden gold image),
walk a three-task protocol per image (adjust all boxes left to right, then
per class verify-and-add, then a final verify-and-add pass) and submit edit
events. Sessions are event-sourced: the server state for a session is always
the replay of its append-only event log over the published box sets.
"""

from __future__ import annotations

import json
import random
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import FileResponse, JSONResponse

from .model import BBox, BoxSet, ClassId, DEFAULT_CLASS_IDS, Stage
from .metrics import gold_score

EVENT_KINDS = ("move", "resize", "delete", "create", "link", "unlink", "verify")

ADJUST = "adjust"
ADD_VERIFY = "add_verify"
FINAL_VERIFY = "final_verify"
DONE = "done"
_VERIFY_STAGES = (ADD_VERIFY, FINAL_VERIFY)


class ProtocolError(Exception):
    """Event rejected: it does not apply to the session's current item."""


@dataclass(frozen=True)
class EditEvent:
    kind: str
    image_id: str
    target: str | None = None
    payload: Mapping[str, object] = field(default_factory=dict)
    ts: float = 0.0
    key: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "image_id": self.image_id,
            "target": self.target,
            "payload": dict(self.payload),
            "ts": self.ts,
            "key": self.key,
        }

    @classmethod
    def from_json_dict(cls, raw: Mapping) -> "EditEvent":
        if raw.get("kind") not in EVENT_KINDS:
            raise ProtocolError(f"unknown event kind: {raw.get('kind')!r}")
        return cls(
            kind=raw["kind"],
            image_id=str(raw["image_id"]),
            target=raw.get("target"),
            payload=raw.get("payload") or {},
            ts=float(raw.get("ts", 0.0)),
            key=raw.get("key"),
        )


def box_from_extremes(p_top, p_bottom, p_left, p_right, class_id: ClassId = "") -> BBox:
    """Axis-aligned box through four extreme clicks (top, bottom, left, right)."""
    x_min, x_max = float(p_left[0]), float(p_right[0])
    y_min, y_max = float(p_top[1]), float(p_bottom[1])
    if x_min > x_max or y_min > y_max:
        raise ValueError("inverted extreme points")
    if x_min == x_max or y_min == y_max:
        raise ValueError("zero-area box from extreme points")
    return BBox(class_id=class_id, x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max)


def link_boxes(a: BBox, b: BBox, width_px: float, link_id: str) -> tuple[BBox, BBox]:
    """Link two boxes pinned to opposite image extremities; heights coerce to
    the union of both y-ranges."""
    left, right = (a, b) if a.x_min <= b.x_min else (b, a)
    if left.x_min > 1e-6 or right.x_max < width_px - 1e-6:
        raise ValueError("linked boxes must touch opposite image extremities")
    y0 = min(a.y_min, b.y_min)
    y1 = max(a.y_max, b.y_max)
    return (
        replace(left, y_min=y0, y_max=y1, link_id=link_id),
        replace(right, y_min=y0, y_max=y1, link_id=link_id),
    )


class SessionImage:
    """Replayable per-image protocol state."""

    def __init__(self, initial: BoxSet, class_order: Sequence[ClassId]):
        self.width = float(initial.width_px)
        self.height = float(initial.height_px)
        self.class_order = list(class_order)
        self.boxes: dict[str, BBox] = {f"b{i}": b for i, b in enumerate(initial.boxes)}
        self.created = 0
        self.link_seq = 0
        self.verified: dict[str, set[str]] = {ADJUST: set(), ADD_VERIFY: set(), FINAL_VERIFY: set()}
        self.closed_add: dict[str, set[ClassId]] = {ADD_VERIFY: set(), FINAL_VERIFY: set()}

    # -- protocol state ----------------------------------------------------

    def _items(self, ids: Iterable[str]) -> list[tuple[str, ...]]:
        """Group linked partners into single items, ordered left to right."""
        ids = set(ids)
        items: list[tuple[str, ...]] = []
        seen: set[str] = set()
        for bid in ids:
            if bid in seen:
                continue
            box = self.boxes[bid]
            members = [bid]
            if box.link_id is not None:
                members += [
                    o for o, ob in self.boxes.items()
                    if o != bid and ob.link_id == box.link_id
                ]
            seen.update(members)
            members.sort(key=lambda m: self.boxes[m].x_min)
            items.append(tuple(members))
        items.sort(key=lambda ms: (self.boxes[ms[0]].x_min, ms[0]))
        return items

    def next_item(self) -> dict:
        pending = [b for b in self.boxes if b not in self.verified[ADJUST]]
        if pending:
            item = self._items(pending)[0]
            return {"stage": ADJUST, "kind": "adjust", "box_ids": list(item),
                    "class": self.boxes[item[0]].class_id}
        for stage in _VERIFY_STAGES:
            for cls in self.class_order:
                unverified = [
                    bid for bid, b in self.boxes.items()
                    if b.class_id == cls and bid not in self.verified[stage]
                ]
                if unverified:
                    item = self._items(unverified)[0]
                    return {"stage": stage, "kind": "verify", "box_ids": list(item), "class": cls}
                if cls not in self.closed_add[stage]:
                    return {"stage": stage, "kind": "add", "box_ids": [], "class": cls}
        return {"stage": DONE, "kind": "done", "box_ids": [], "class": None}

    @property
    def complete(self) -> bool:
        return self.next_item()["stage"] == DONE

    # -- event application ---------------------------------------------------

    def _clamp(self, box: BBox) -> BBox:
        x0 = max(0.0, min(self.width, box.x_min))
        x1 = max(0.0, min(self.width, box.x_max))
        y0 = max(0.0, min(self.height, box.y_min))
        y1 = max(0.0, min(self.height, box.y_max))
        if x1 <= x0 or y1 <= y0:
            raise ProtocolError("edit collapses the box")
        return replace(box, x_min=x0, y_min=y0, x_max=x1, y_max=y1)

    def _partner(self, bid: str) -> str | None:
        box = self.boxes[bid]
        if box.link_id is None:
            return None
        for other, ob in self.boxes.items():
            if other != bid and ob.link_id == box.link_id:
                return other
        return None

    def _mark_verified(self, stage: str, bid: str) -> None:
        self.verified[stage].add(bid)
        partner = self._partner(bid)
        if partner:
            self.verified[stage].add(partner)

    def apply(self, event: EditEvent) -> None:
        active = self.next_item()
        stage = active["stage"]
        kind = event.kind
        if stage == DONE:
            raise ProtocolError("image already complete")

        if kind == "verify" and event.target is None:
            cls = event.payload.get("class")
            if active["kind"] != "add" or cls != active["class"]:
                raise ProtocolError("no open add phase for that class")
            self.closed_add[stage].add(cls)
            return

        if kind == "create":
            if active["kind"] != "add":
                raise ProtocolError("create outside an add phase")
            pts = event.payload.get("points") or {}
            cls = event.payload.get("class", active["class"])
            if cls != active["class"]:
                raise ProtocolError("create for a class that is not open")
            try:
                box = box_from_extremes(
                    pts["top"], pts["bottom"], pts["left"], pts["right"], class_id=cls
                )
            except (KeyError, TypeError) as e:
                raise ProtocolError(f"bad extreme points: {e}") from e
            except ValueError as e:
                raise ProtocolError(str(e)) from e
            bid = f"n{self.created}"
            self.created += 1
            self.boxes[bid] = self._clamp(box)
            # freshly drawn boxes count as verified for the ongoing stage
            self._mark_verified(stage, bid)
            if stage == ADD_VERIFY:
                self.verified[ADJUST].add(bid)
            elif stage == FINAL_VERIFY:
                self.verified[ADJUST].add(bid)
                self.verified[ADD_VERIFY].add(bid)
            return

        bid = event.target
        if bid is None or bid not in self.boxes:
            raise ProtocolError(f"unknown box: {bid}")
        if active["kind"] in ("adjust", "verify") and bid not in active["box_ids"]:
            raise ProtocolError("event does not address the active box")
        if active["kind"] == "add":
            raise ProtocolError("box edits are closed during an add phase")

        if kind == "verify":
            self._mark_verified(stage, bid)
            return
        if kind == "delete":
            partner = self._partner(bid)
            del self.boxes[bid]
            if partner:
                del self.boxes[partner]
            for stage_set in self.verified.values():
                stage_set.discard(bid)
                if partner:
                    stage_set.discard(partner)
            return
        if kind == "move":
            dx = float(event.payload.get("dx", 0.0))
            dy = float(event.payload.get("dy", 0.0))
            box = self.boxes[bid]
            partner = self._partner(bid)
            if partner:
                dx = 0.0  # linked members stay pinned to their extremity
            moved = self._clamp(replace(box, x_min=box.x_min + dx, x_max=box.x_max + dx,
                                        y_min=box.y_min + dy, y_max=box.y_max + dy))
            self.boxes[bid] = moved
            if partner:
                pb = self.boxes[partner]
                self.boxes[partner] = self._clamp(
                    replace(pb, y_min=moved.y_min, y_max=moved.y_max)
                )
            return
        if kind == "resize":
            box = self.boxes[bid]
            coords = {
                k: float(event.payload.get(k, getattr(box, k)))
                for k in ("x_min", "y_min", "x_max", "y_max")
            }
            new = self._clamp(replace(box, **coords))
            partner = self._partner(bid)
            if partner:
                # keep the member pinned and the pair heights equal
                if box.x_min <= 1e-6:
                    new = replace(new, x_min=0.0)
                if box.x_max >= self.width - 1e-6:
                    new = replace(new, x_max=self.width)
                pb = self.boxes[partner]
                self.boxes[partner] = self._clamp(
                    replace(pb, y_min=new.y_min, y_max=new.y_max)
                )
            self.boxes[bid] = new
            return
        if kind == "link":
            other = event.payload.get("other")
            if other not in self.boxes:
                raise ProtocolError(f"unknown box to link: {other}")
            a, b = self.boxes[bid], self.boxes[other]
            lid = f"l{self.link_seq}"
            try:
                left, right = link_boxes(a, b, self.width, lid)
            except ValueError as e:
                raise ProtocolError(str(e)) from e
            self.link_seq += 1
            if a.x_min <= b.x_min:
                self.boxes[bid], self.boxes[other] = left, right
            else:
                self.boxes[bid], self.boxes[other] = right, left
            return
        if kind == "unlink":
            partner = self._partner(bid)
            self.boxes[bid] = replace(self.boxes[bid], link_id=None)
            if partner:
                self.boxes[partner] = replace(self.boxes[partner], link_id=None)
            return
        raise ProtocolError(f"unknown event kind: {kind}")  # pragma: no cover

    def to_boxset(self, panorama_id: str, stage: Stage) -> BoxSet:
        ordered = sorted(self.boxes.items(), key=lambda kv: (kv[1].x_min, kv[1].y_min, kv[0]))
        return BoxSet(
            panorama_id=panorama_id,
            width_px=int(self.width),
            height_px=int(self.height),
            boxes=tuple(b for _, b in ordered),
            stage=stage,
        )


@dataclass
class Session:
    session_id: str
    worker_id: str
    batch: list[str]
    gold_id: str
    images: dict[str, SessionImage]
    events: list[EditEvent] = field(default_factory=list)
    seen_keys: set[str] = field(default_factory=set)
    finalized: dict | None = None

    def current_image(self) -> str | None:
        for pid in self.batch:
            if not self.images[pid].complete:
                return pid
        return None

    def next_item(self) -> dict:
        pid = self.current_image()
        if pid is None:
            return {"stage": DONE, "kind": "done", "image_id": None,
                    "box_ids": [], "class": None, "complete": True}
        item = self.images[pid].next_item()
        item["image_id"] = pid
        item["complete"] = False
        return item

    def apply(self, event: EditEvent) -> bool:
        """Apply one event; returns False for an idempotent replay of a key."""
        if self.finalized is not None:
            raise ProtocolError("session already finalized")
        if event.key is not None and event.key in self.seen_keys:
            return False
        if event.image_id not in self.images:
            raise ProtocolError(f"image not in batch: {event.image_id}")
        if event.image_id != self.current_image():
            raise ProtocolError("event addresses an image that is not active")
        self.images[event.image_id].apply(event)
        self.events.append(event)
        if event.key is not None:
            self.seen_keys.add(event.key)
        return True


def replay_session(
    initial_sets: Mapping[str, BoxSet],
    events: Sequence[EditEvent],
    class_order: Sequence[ClassId] = DEFAULT_CLASS_IDS,
) -> dict[str, SessionImage]:
    """Rebuild per-image state from an event log (event-sourcing invariant)."""
    images = {pid: SessionImage(bs, class_order) for pid, bs in initial_sets.items()}
    for ev in events:
        images[ev.image_id].apply(ev)
    return images


class AnnotationBackend:
    """In-memory state plus append-only persistence for the annotation API."""

    def __init__(
        self,
        published: Mapping[str, BoxSet],
        gold: Mapping[str, BoxSet],
        data_dir,
        *,
        class_order: Sequence[ClassId] = DEFAULT_CLASS_IDS,
        batch_size: int = 5,
        gold_threshold: float = 0.4,
        neighbourhoods: Mapping[str, str] | None = None,
        seed: int = 0,
        images_dir=None,
    ):
        missing = sorted(set(gold) - set(published))
        if missing:
            raise ValueError(f"gold images without published boxes: {missing[:5]}")
        if batch_size < 2:
            raise ValueError("batch_size must leave room for 1 gold + work images")
        self.published = dict(published)
        self.gold = dict(gold)
        self.data_dir = Path(data_dir)
        self.class_order = list(class_order)
        self.batch_size = batch_size
        self.gold_threshold = gold_threshold
        self.neighbourhoods = dict(neighbourhoods or {})
        self.seed = seed
        self.images_dir = Path(images_dir) if images_dir else None
        self.sessions: dict[str, Session] = {}
        self._session_seq = 0
        self._work_cursor = 0
        self._gold_cursor = 0
        (self.data_dir / "sessions").mkdir(parents=True, exist_ok=True)
        (self.data_dir / "boxsets").mkdir(parents=True, exist_ok=True)
        self._restore()

    # -- batches -------------------------------------------------------------

    def _work_pool(self) -> list[str]:
        return sorted(set(self.published) - set(self.gold))

    def next_batch(self, worker_id: str) -> Session:
        pool = self._work_pool()
        golds = sorted(self.gold)
        need = self.batch_size - 1
        if len(pool) < need or not golds:
            raise ProtocolError("not enough images to assemble a batch")
        picked = [pool[(self._work_cursor + i) % len(pool)] for i in range(need)]
        self._work_cursor = (self._work_cursor + need) % len(pool)
        gold_id = golds[self._gold_cursor % len(golds)]
        self._gold_cursor += 1
        sid = f"s{self._session_seq:06d}"
        self._session_seq += 1
        batch = picked + [gold_id]
        random.Random(f"{self.seed}:{sid}").shuffle(batch)
        session = Session(
            session_id=sid,
            worker_id=worker_id,
            batch=batch,
            gold_id=gold_id,
            images={
                pid: SessionImage(self.published[pid], self.class_order) for pid in batch
            },
        )
        self.sessions[sid] = session
        self._write_meta(session)
        return session

    # -- events ----------------------------------------------------------------

    def apply_events(self, session_id: str, events: Sequence[EditEvent]) -> int:
        session = self._session(session_id)
        applied = 0
        log_path = self.data_dir / "sessions" / f"{session_id}.events.jsonl"
        with open(log_path, "a") as log:
            for ev in events:
                if session.apply(ev):
                    log.write(json.dumps(ev.to_json_dict(), sort_keys=True) + "\n")
                    applied += 1
        return applied

    def finalize(self, session_id: str) -> dict:
        session = self._session(session_id)
        if session.finalized is not None:
            return session.finalized
        incomplete = [pid for pid in session.batch if not session.images[pid].complete]
        if incomplete:
            raise ProtocolError(f"incomplete images: {incomplete}")
        worker_set = session.images[session.gold_id].to_boxset(
            session.gold_id, Stage.HUMAN_VERIFIED
        )
        score = gold_score(worker_set, self.gold[session.gold_id],
                           pass_threshold=self.gold_threshold)
        timing = self.session_timing(session)
        result = {
            "accepted": score.passed,
            "median_iou": score.median_iou,
            "timing": timing,
        }
        if score.passed:
            for pid in session.batch:
                if pid == session.gold_id:
                    continue
                out = session.images[pid].to_boxset(pid, Stage.HUMAN_VERIFIED)
                from .coco import save_boxset

                save_boxset(out, self.data_dir / "boxsets" / f"{pid}.json")
        session.finalized = result
        self._write_meta(session)
        return result

    def session_timing(self, session: Session) -> dict:
        """Median seconds per resolved item for each protocol task."""
        durations: dict[str, list[float]] = {ADJUST: [], ADD_VERIFY: [], FINAL_VERIFY: []}
        fresh = {
            pid: SessionImage(self.published[pid], self.class_order)
            for pid in session.batch
        }
        last_ts: dict[str, float] = {}
        for ev in session.events:
            img = fresh[ev.image_id]
            stage_before = img.next_item()["stage"]
            img.apply(ev)
            resolves = ev.kind in ("delete", "create") or ev.kind == "verify"
            if resolves:
                prev = last_ts.get(ev.image_id)
                if prev is not None and ev.ts > prev:
                    durations[stage_before].append(ev.ts - prev)
                last_ts[ev.image_id] = ev.ts
        return {
            stage: (statistics.median(vals) if vals else None)
            for stage, vals in durations.items()
        }

    # -- persistence ----------------------------------------------------------

    def _session(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise KeyError(session_id)
        return self.sessions[session_id]

    def _write_meta(self, session: Session) -> None:
        meta = {
            "session_id": session.session_id,
            "worker_id": session.worker_id,
            "batch": session.batch,
            "gold_id": session.gold_id,
            "finalized": session.finalized,
            "session_seq": self._session_seq,
            "work_cursor": self._work_cursor,
            "gold_cursor": self._gold_cursor,
        }
        path = self.data_dir / "sessions" / f"{session.session_id}.meta.json"
        path.write_text(json.dumps(meta, sort_keys=True))

    def _restore(self) -> None:
        metas = sorted((self.data_dir / "sessions").glob("*.meta.json"))
        for meta_path in metas:
            meta = json.loads(meta_path.read_text())
            sid = meta["session_id"]
            session = Session(
                session_id=sid,
                worker_id=meta["worker_id"],
                batch=list(meta["batch"]),
                gold_id=meta["gold_id"],
                images={
                    pid: SessionImage(self.published[pid], self.class_order)
                    for pid in meta["batch"]
                },
                finalized=meta.get("finalized"),
            )
            log_path = self.data_dir / "sessions" / f"{sid}.events.jsonl"
            if log_path.exists():
                for line in log_path.read_text().splitlines():
                    if line.strip():
                        ev = EditEvent.from_json_dict(json.loads(line))
                        session.images[ev.image_id].apply(ev)
                        session.events.append(ev)
                        if ev.key is not None:
                            session.seen_keys.add(ev.key)
            self.sessions[sid] = session
            self._session_seq = max(self._session_seq, meta.get("session_seq", 0))
            self._work_cursor = meta.get("work_cursor", self._work_cursor)
            self._gold_cursor = meta.get("gold_cursor", self._gold_cursor)

    # -- reports ---------------------------------------------------------------

    def crowdsourcing_report(self) -> dict:
        """Per-neighbourhood statistics over finalized sessions."""
        rows: dict[str, dict] = {}
        for session in self.sessions.values():
            if session.finalized is None:
                continue
            nb = self.neighbourhoods.get(session.gold_id, "all")
            row = rows.setdefault(
                nb,
                {
                    "n_images": 0,
                    "n_instances_reference": 0,
                    "n_instances_worker": 0,
                    "median_ious": [],
                },
            )
            row["n_images"] += 1
            row["n_instances_reference"] += len(self.gold[session.gold_id].boxes)
            row["n_instances_worker"] += len(session.images[session.gold_id].boxes)
            row["median_ious"].append(session.finalized["median_iou"])
        out = {}
        for nb, row in sorted(rows.items()):
            n = row["n_images"]
            out[nb] = {
                "n_images": n,
                "n_instances_reference": row["n_instances_reference"],
                "n_instances_worker": row["n_instances_worker"],
                "median_iou": statistics.median(row["median_ious"]) if n else None,
                "instances_per_image_reference": row["n_instances_reference"] / n if n else 0.0,
                "instances_per_image_worker": row["n_instances_worker"] / n if n else 0.0,
            }
        return out


# ---------------------------------------------------------------------------
# HTTP layer


def _box_payload(bid: str, b: BBox) -> dict:
    return {
        "id": bid,
        "class": b.class_id,
        "x_min": b.x_min,
        "y_min": b.y_min,
        "x_max": b.x_max,
        "y_max": b.y_max,
        "link_id": b.link_id,
    }


def create_app(backend: AnnotationBackend):
    app = FastAPI(title="panobox annotation service")
    app.state.backend = backend

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.get("/batches/next")
    def next_batch(worker: str):
        try:
            session = backend.next_batch(worker)
        except ProtocolError as e:
            raise HTTPException(status_code=409, detail=str(e))
        return {
            "session_id": session.session_id,
            "batch": session.batch,
            "batch_size": backend.batch_size,
            "next": session.next_item(),
        }

    @app.get("/images/{image_id}")
    def get_image(image_id: str, session: str | None = None):
        if session is not None:
            try:
                s = backend._session(session)
            except KeyError:
                raise HTTPException(status_code=404, detail="unknown session")
            if image_id not in s.images:
                raise HTTPException(status_code=404, detail="image not in batch")
            img = s.images[image_id]
            boxes = [_box_payload(bid, b) for bid, b in sorted(img.boxes.items())]
            stage = img.next_item()["stage"]
            width, height = int(img.width), int(img.height)
        else:
            if image_id not in backend.published:
                raise HTTPException(status_code=404, detail="unknown image")
            bs = backend.published[image_id]
            boxes = [_box_payload(f"b{i}", b) for i, b in enumerate(bs.boxes)]
            stage = bs.stage.value
            width, height = bs.width_px, bs.height_px
        has_pixels = bool(
            backend.images_dir and (backend.images_dir / f"{image_id}.jpg").exists()
        )
        return {
            "id": image_id,
            "width_px": width,
            "height_px": height,
            "stage": stage,
            "boxes": boxes,
            "image_url": f"/images/{image_id}/pixels" if has_pixels else None,
        }

    @app.get("/images/{image_id}/pixels")
    def get_pixels(image_id: str):
        if not backend.images_dir:
            raise HTTPException(status_code=404, detail="no image store configured")
        path = backend.images_dir / f"{image_id}.jpg"
        if not path.exists():
            raise HTTPException(status_code=404, detail="no pixels for image")
        return FileResponse(path, media_type="image/jpeg")

    @app.get("/sessions/{session_id}/next")
    def session_next(session_id: str):
        try:
            return backend._session(session_id).next_item()
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session")

    @app.post("/sessions/{session_id}/events")
    async def post_events(session_id: str, request: Request):
        body = await request.json()
        raw_events = body.get("events", [])
        try:
            session = backend._session(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session")
        try:
            events = [EditEvent.from_json_dict(r) for r in raw_events]
            applied = backend.apply_events(session_id, events)
        except ProtocolError as e:
            return JSONResponse(
                status_code=409,
                content={"error": str(e), "next": session.next_item()},
            )
        return {"applied": applied, "next": session.next_item()}

    @app.post("/sessions/{session_id}/finalize")
    def finalize(session_id: str):
        try:
            return backend.finalize(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session")
        except ProtocolError as e:
            raise HTTPException(status_code=409, detail=str(e))

    @app.get("/reports/crowdsourcing")
    def crowdsourcing():
        return backend.crowdsourcing_report()

    return app
