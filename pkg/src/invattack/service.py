"""HTTP service for manual attack crafting and human labeling campaigns.

State lives in memory and is recovered by replaying append-only JSON-lines
event logs (one file per entity type) from the data directory. Every mutation
is validated before it is appended, so a persisted log can never replay into
a session that violates its norm budget.
"""

from __future__ import annotations

import json
import mimetypes
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from .dataset_io import Dataset, GalleryEntry, GrayImage, dequantize, quantize
from .errors import (BudgetExceeded, CorruptLog, DuplicateVote, InvalidParams,
                     NoVotes, StaleSession, UnknownImage, UnknownItem)
from .rng import rng_stream

UNREADABLE = "unreadable"

DEFAULT_THRESHOLD = 0.70

_STREAM_SHUFFLE = 31


def l0_used(base: np.ndarray, current: np.ndarray) -> int:
    return int(np.count_nonzero(quantize(base) != quantize(current)))


def linf_used(base: np.ndarray, current: np.ndarray) -> float:
    return float(np.abs(current.astype(np.float64) - base.astype(np.float64)).max())


def budget_ok(norm: str, epsilon: float, base: np.ndarray,
              current: np.ndarray) -> bool:
    if norm == "l0":
        return l0_used(base, current) <= int(epsilon)
    return linf_used(base, current) <= epsilon + 1e-12


@dataclass
class EditSession:
    id: str
    base_index: int
    label: int
    norm: str
    epsilon: float
    base: np.ndarray            # float64 (h, w)
    current: np.ndarray         # float64 (h, w)
    edit_log: list = field(default_factory=list)  # (pixel, old, new, ts)
    revision: int = 0

    def view(self, include_log: bool = True) -> dict:
        h, w = self.base.shape
        out = {
            "id": self.id,
            "base_index": self.base_index,
            "label": self.label,
            "norm": self.norm,
            "epsilon": self.epsilon,
            "revision": self.revision,
            "width": w,
            "height": h,
            "base_pixels": quantize(self.base).ravel().tolist(),
            "pixels": quantize(self.current).ravel().tolist(),
            "l0_used": l0_used(self.base, self.current),
            "linf_used": linf_used(self.base, self.current),
        }
        if include_log:
            out["edit_log"] = [[p, o, n, t] for (p, o, n, t) in self.edit_log]
        return out


@dataclass
class SavedExample:
    id: str
    source_index: int
    source_label: int
    claimed_label: int | None
    norm: str
    epsilon: float
    pixels: np.ndarray          # float32 (h, w)
    provenance: str             # "manual" | "gallery"
    l0: int
    linf: float

    def view(self) -> dict:
        h, w = self.pixels.shape
        return {
            "id": self.id,
            "source_index": self.source_index,
            "label": self.source_label,
            "claimed_label": self.claimed_label,
            "norm": self.norm,
            "epsilon": self.epsilon,
            "width": w,
            "height": h,
            "pixels": quantize(self.pixels).ravel().tolist(),
            "provenance": self.provenance,
            "l0": self.l0,
            "linf": self.linf,
        }


@dataclass
class TaskItem:
    item_id: str
    kind: str                   # "clean" | "crafted"
    ref: str                    # dataset index (str) or example id
    original_label: int
    pixels: np.ndarray


@dataclass
class LabelingTask:
    id: str
    items: list[TaskItem]       # already shuffled
    threshold: float
    seed: int
    votes: dict = field(default_factory=dict)  # (rater, item_id) -> label


def compute_success(task: LabelingTask) -> dict:
    """Per-item verdicts and aggregate rates; pure in the recorded votes.

    An item is a successful invariance example when at least the threshold
    fraction of its votes agree on one readable label that differs from the
    item's original label; agreement on the original label and everything
    else (including agreement on "unreadable") count separately.
    """
    per_item = {}
    for item in task.items:
        votes = [lab for (rater, iid), lab in task.votes.items()
                 if iid == item.item_id]
        if not votes:
            raise NoVotes(f"item {item.item_id} has no votes")
        counts: dict = {}
        for lab in votes:
            counts[lab] = counts.get(lab, 0) + 1
        top_label, top_count = min(
            ((lab, cnt) for lab, cnt in counts.items()),
            key=lambda kv: (-kv[1], str(kv[0])))
        consensus = top_count / len(votes) >= task.threshold
        if consensus and top_label != UNREADABLE and top_label != item.original_label:
            verdict = "success"
        elif consensus and top_label == item.original_label:
            verdict = "original"
        else:
            verdict = "no_consensus"
        per_item[item.item_id] = {
            "item_id": item.item_id,
            "verdict": verdict,
            "top_label": top_label,
            "top_count": top_count,
            "votes": len(votes),
            "original_label": item.original_label,
            "provenance": item.kind,
        }
    def rates(items):
        n = max(len(items), 1)
        return {
            "count": len(items),
            "success_rate": sum(v["verdict"] == "success" for v in items) / n,
            "original_rate": sum(v["verdict"] == "original" for v in items) / n,
            "no_consensus_rate": sum(v["verdict"] == "no_consensus" for v in items) / n,
        }
    values = list(per_item.values())
    report = {
        "task_id": task.id,
        "threshold": task.threshold,
        "items": [per_item[item.item_id] for item in task.items],
        "aggregate": rates(values),
        "by_provenance": {
            kind: rates([v for v in values if v["provenance"] == kind])
            for kind in ("clean", "crafted")
        },
    }
    return report


class AnnotationStore:
    """All service state plus its append-only persistence."""

    def __init__(self, ds: Dataset, data_dir, gallery: list[GalleryEntry] | None = None):
        self.ds = ds
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.lock = threading.RLock()
        self.sessions: dict[str, EditSession] = {}
        self.examples: dict[str, SavedExample] = {}
        self.tasks: dict[str, LabelingTask] = {}
        self._counters = {"s": 0, "e": 0, "t": 0}
        if gallery:
            for i, entry in enumerate(gallery):
                ex = SavedExample(
                    id=f"g{i:05d}", source_index=entry.source_index,
                    source_label=entry.label, claimed_label=None,
                    norm=entry.norm, epsilon=entry.epsilon,
                    pixels=entry.adversarial.pixels, provenance="gallery",
                    l0=l0_used(self._image(entry.source_index).pixels,
                               entry.adversarial.pixels),
                    linf=linf_used(self._image(entry.source_index).pixels,
                                   entry.adversarial.pixels))
                self.examples[ex.id] = ex
        self._replay()

    # -- persistence --

    def _path(self, name: str) -> Path:
        return self.data_dir / f"{name}.jsonl"

    def _append(self, name: str, obj: dict) -> None:
        with open(self._path(name), "a") as f:
            f.write(json.dumps(obj, sort_keys=True) + "\n")

    def _read(self, name: str):
        path = self._path(name)
        if not path.exists():
            return
        with open(path) as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorruptLog(f"{path}:{line_no}: {exc}") from exc

    def _replay(self) -> None:
        for obj in self._read("sessions"):
            sess = self._make_session(obj["id"], obj["base_index"],
                                      obj["norm"], obj["epsilon"])
            self.sessions[sess.id] = sess
            self._bump_counter("s", obj["id"])
        for obj in self._read("edits"):
            sess = self.sessions.get(obj["session"])
            if sess is None:
                raise CorruptLog(f"edit for unknown session {obj['session']}")
            self._apply_edit_entries(sess, obj["edits"])
        for obj in self._read("examples"):
            ex = SavedExample(
                id=obj["id"], source_index=obj["source_index"],
                source_label=obj["source_label"],
                claimed_label=obj["claimed_label"], norm=obj["norm"],
                epsilon=obj["epsilon"],
                pixels=dequantize(np.array(obj["pixels"], dtype=np.uint8)
                                  .reshape(obj["height"], obj["width"])),
                provenance=obj["provenance"], l0=obj["l0"], linf=obj["linf"])
            self.examples[ex.id] = ex
            self._bump_counter("e", obj["id"])
        for obj in self._read("tasks"):
            task = self._make_task(obj["id"], obj["example_ids"],
                                   obj["clean_indices"], obj["seed"],
                                   obj["threshold"])
            self.tasks[task.id] = task
            self._bump_counter("t", obj["id"])
        for obj in self._read("votes"):
            task = self.tasks.get(obj["task"])
            if task is None:
                raise CorruptLog(f"vote for unknown task {obj['task']}")
            self._record_vote(task, obj["rater"], obj["item"], obj["label"])

    def _bump_counter(self, kind: str, ident: str) -> None:
        try:
            num = int(ident[1:])
        except ValueError:
            return
        self._counters[kind] = max(self._counters[kind], num + 1)

    def _next_id(self, kind: str) -> str:
        ident = f"{kind}{self._counters[kind]:05d}"
        self._counters[kind] += 1
        return ident

    # -- images --

    def _image(self, index: int) -> GrayImage:
        if not 0 <= index < len(self.ds):
            raise UnknownImage(f"no image at index {index}")
        return self.ds[index].image

    def image_view(self, index: int) -> dict:
        img = self._image(index)
        return {"index": index, "label": self.ds[index].label,
                "width": img.width, "height": img.height,
                "pixels": img.to_bytes_list()}

    # -- sessions --

    def _make_session(self, ident: str, base_index: int, norm: str,
                      epsilon: float) -> EditSession:
        if norm not in ("l0", "linf"):
            raise InvalidParams("norm must be 'l0' or 'linf'")
        if epsilon <= 0:
            raise InvalidParams("epsilon must be > 0")
        img = self._image(base_index)
        base = img.pixels.astype(np.float64)
        return EditSession(id=ident, base_index=base_index,
                           label=self.ds[base_index].label, norm=norm,
                           epsilon=float(epsilon),
                           base=base, current=base.copy())

    def create_session(self, base_index: int, norm: str, epsilon: float) -> dict:
        with self.lock:
            sess = self._make_session(self._next_id("s"), base_index, norm, epsilon)
            self.sessions[sess.id] = sess
            self._append("sessions", {"id": sess.id, "base_index": base_index,
                                      "norm": norm, "epsilon": float(epsilon),
                                      "ts": time.time()})
            return sess.view()

    def get_session(self, session_id: str) -> dict:
        with self.lock:
            return self._session(session_id).view()

    def _session(self, session_id: str) -> EditSession:
        sess = self.sessions.get(session_id)
        if sess is None:
            raise StaleSession(f"unknown session {session_id}")
        return sess

    def _apply_edit_entries(self, sess: EditSession, entries) -> None:
        """Validated, atomic application of [pixel, old, new, ts] entries."""
        h, w = sess.current.shape
        cand = sess.current.copy()
        for pixel, _old, new, _ts in entries:
            pixel = int(pixel)
            if not 0 <= pixel < h * w:
                raise InvalidParams(f"pixel {pixel} out of range")
            new = float(new)
            if not 0.0 <= new <= 1.0:
                raise InvalidParams(f"intensity {new} outside [0,1]")
            cand.reshape(-1)[pixel] = new
        if not budget_ok(sess.norm, sess.epsilon, sess.base, cand):
            raise BudgetExceeded(
                f"edit batch would exceed the {sess.norm} budget {sess.epsilon}")
        sess.current = cand
        for pixel, old, new, ts in entries:
            sess.edit_log.append((int(pixel), float(old), float(new), float(ts)))
        sess.revision += 1

    def apply_edit(self, session_id: str, edits, revision: int | None = None) -> dict:
        """Atomic edit batch: all pixels change or none do."""
        with self.lock:
            sess = self._session(session_id)
            if revision is not None and revision != sess.revision:
                raise StaleSession(
                    f"revision {revision} is stale (now {sess.revision})")
            now = time.time()
            flat = sess.current.reshape(-1)
            entries = [[int(p), float(flat[int(p)]), float(v), now]
                       for p, v in edits]
            self._apply_edit_entries(sess, entries)
            self._append("edits", {"session": sess.id, "edits": entries,
                                   "revision": sess.revision})
            return sess.view(include_log=False)

    def save_example(self, session_id: str, claimed_label: int) -> dict:
        with self.lock:
            sess = self._session(session_id)
            if not 0 <= int(claimed_label) < self.ds.num_categories:
                raise InvalidParams(f"claimed_label {claimed_label} out of range")
            if not budget_ok(sess.norm, sess.epsilon, sess.base, sess.current):
                raise BudgetExceeded("session is outside its budget")
            ex = SavedExample(
                id=self._next_id("e"), source_index=sess.base_index,
                source_label=sess.label, claimed_label=int(claimed_label),
                norm=sess.norm, epsilon=sess.epsilon,
                pixels=sess.current.copy(), provenance="manual",
                l0=l0_used(sess.base, sess.current),
                linf=linf_used(sess.base, sess.current))
            self.examples[ex.id] = ex
            self._append("examples", {
                "id": ex.id, "session": sess.id,
                "source_index": ex.source_index,
                "source_label": ex.source_label,
                "claimed_label": ex.claimed_label, "norm": ex.norm,
                "epsilon": ex.epsilon, "width": ex.pixels.shape[1],
                "height": ex.pixels.shape[0],
                "pixels": quantize(ex.pixels).ravel().tolist(),
                "provenance": ex.provenance, "l0": ex.l0, "linf": ex.linf,
                "ts": time.time()})
            return {"example_id": ex.id, "l0": ex.l0, "linf": ex.linf}

    # -- tasks --

    def _make_task(self, ident: str, example_ids, clean_indices, seed,
                   threshold) -> LabelingTask:
        if not example_ids and not clean_indices:
            raise InvalidParams("task needs at least one item")
        if not 0.0 < threshold <= 1.0:
            raise InvalidParams("threshold must be in (0,1]")
        items = []
        for n, ex_id in enumerate(example_ids):
            ex = self.examples.get(ex_id)
            if ex is None:
                raise UnknownItem(f"unknown example {ex_id}")
            items.append(TaskItem(item_id=f"{ident}-i{n:04d}", kind="crafted",
                                  ref=ex_id, original_label=ex.source_label,
                                  pixels=ex.pixels))
        for n, idx in enumerate(clean_indices, start=len(items)):
            img = self._image(int(idx))
            items.append(TaskItem(item_id=f"{ident}-i{n:04d}", kind="clean",
                                  ref=str(int(idx)),
                                  original_label=self.ds[int(idx)].label,
                                  pixels=img.pixels))
        order = rng_stream(int(seed), _STREAM_SHUFFLE).permutation(len(items))
        items = [items[i] for i in order]
        return LabelingTask(id=ident, items=items, threshold=float(threshold),
                            seed=int(seed))

    def create_task(self, example_ids, clean_indices, seed,
                    threshold: float = DEFAULT_THRESHOLD) -> dict:
        with self.lock:
            task = self._make_task(self._next_id("t"), example_ids,
                                   clean_indices, seed, threshold)
            self.tasks[task.id] = task
            self._append("tasks", {"id": task.id,
                                   "example_ids": list(example_ids),
                                   "clean_indices": [int(i) for i in clean_indices],
                                   "seed": int(seed),
                                   "threshold": float(threshold),
                                   "ts": time.time()})
            return {"task_id": task.id, "num_items": len(task.items),
                    "threshold": task.threshold}

    def _task(self, task_id: str) -> LabelingTask:
        task = self.tasks.get(task_id)
        if task is None:
            raise UnknownItem(f"unknown task {task_id}")
        return task

    def next_item(self, task_id: str, rater: str) -> dict:
        """First item (in shuffled order) this rater has not voted on.

        Item provenance is never exposed here.
        """
        if not rater:
            raise InvalidParams("rater is required")
        with self.lock:
            task = self._task(task_id)
            pending = [it for it in task.items
                       if (rater, it.item_id) not in task.votes]
            if not pending:
                return {"done": True, "remaining": 0, "total": len(task.items)}
            item = pending[0]
            h, w = item.pixels.shape
            return {"done": False, "item_id": item.item_id,
                    "remaining": len(pending), "total": len(task.items),
                    "image": {"width": w, "height": h,
                              "pixels": quantize(item.pixels).ravel().tolist()}}

    def _record_vote(self, task: LabelingTask, rater: str, item_id: str,
                     label) -> None:
        if not any(it.item_id == item_id for it in task.items):
            raise UnknownItem(f"item {item_id} not in task {task.id}")
        if label != UNREADABLE:
            label = int(label)
            if not 0 <= label < self.ds.num_categories:
                raise InvalidParams(f"label {label} out of range")
        if (rater, item_id) in task.votes:
            raise DuplicateVote(f"{rater} already voted on {item_id}")
        task.votes[(rater, item_id)] = label

    def submit_vote(self, task_id: str, rater: str, item_id: str, label) -> dict:
        if not rater:
            raise InvalidParams("rater is required")
        with self.lock:
            task = self._task(task_id)
            self._record_vote(task, rater, item_id, label)
            self._append("votes", {"task": task.id, "rater": rater,
                                   "item": item_id, "label": label,
                                   "ts": time.time()})
            return {"accepted": True}

    def report(self, task_id: str) -> dict:
        with self.lock:
            return compute_success(self._task(task_id))

    def gallery_view(self) -> list[dict]:
        with self.lock:
            return [self.examples[k].view() for k in sorted(self.examples)]

    def dataset_view(self) -> dict:
        return {"count": len(self.ds), "width": self.ds.width,
                "height": self.ds.height,
                "num_categories": self.ds.num_categories}


_ERROR_STATUS = {
    UnknownImage: (404, "unknown_image"),
    UnknownItem: (404, "unknown_item"),
    StaleSession: (409, "stale_session"),
    BudgetExceeded: (409, "budget_exceeded"),
    DuplicateVote: (409, "duplicate_vote"),
    NoVotes: (409, "no_votes"),
    InvalidParams: (400, "invalid_request"),
}


def _error_payload(exc: Exception) -> tuple[int, dict]:
    for cls, (status, code) in _ERROR_STATUS.items():
        if isinstance(exc, cls):
            return status, {"code": code, "message": str(exc)}
    return 500, {"code": "internal_error", "message": str(exc)}


def make_handler(store: AnnotationStore, ui_dir=None):
    ui_root = Path(ui_dir).resolve() if ui_dir else None

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, obj) -> None:
            body = json.dumps(obj).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            try:
                return json.loads(self.rfile.read(length))
            except json.JSONDecodeError as exc:
                raise InvalidParams(f"bad JSON body: {exc}") from exc

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _serve_ui(self, rel: str) -> None:
            target = (ui_root / (rel or "index.html")).resolve()
            if not str(target).startswith(str(ui_root)) or not target.is_file():
                self._send(404, {"code": "not_found", "message": rel})
                return
            ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
            data = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(data)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            try:
                url = urlparse(self.path)
                parts = [p for p in url.path.split("/") if p]
                if url.path == "/health":
                    self._send(200, {"status": "ok"})
                elif url.path == "/dataset":
                    self._send(200, store.dataset_view())
                elif url.path == "/gallery":
                    self._send(200, store.gallery_view())
                elif len(parts) == 2 and parts[0] == "images":
                    self._send(200, store.image_view(int(parts[1])))
                elif len(parts) == 2 and parts[0] == "sessions":
                    self._send(200, store.get_session(parts[1]))
                elif len(parts) == 3 and parts[0] == "tasks" and parts[2] == "next":
                    rater = parse_qs(url.query).get("rater", [""])[0]
                    self._send(200, store.next_item(parts[1], rater))
                elif len(parts) == 3 and parts[0] == "tasks" and parts[2] == "report":
                    self._send(200, store.report(parts[1]))
                elif ui_root and (url.path == "/" or parts[0] == "ui"):
                    rel = "/".join(parts[1:]) if parts and parts[0] == "ui" else ""
                    self._serve_ui(rel)
                else:
                    self._send(404, {"code": "not_found", "message": url.path})
            except ValueError as exc:
                self._send(400, {"code": "invalid_request", "message": str(exc)})
            except Exception as exc:  # noqa: BLE001 - mapped to HTTP statuses
                self._send(*_error_payload(exc))

        def do_POST(self):
            try:
                parts = [p for p in urlparse(self.path).path.split("/") if p]
                body = self._body()
                if parts == ["sessions"]:
                    self._send(200, store.create_session(
                        int(body["base_index"]), body["norm"],
                        float(body["epsilon"])))
                elif len(parts) == 3 and parts[0] == "sessions" and parts[2] == "edits":
                    self._send(200, store.apply_edit(
                        parts[1], body.get("edits", []), body.get("revision")))
                elif len(parts) == 3 and parts[0] == "sessions" and parts[2] == "save":
                    self._send(200, store.save_example(
                        parts[1], body["claimed_label"]))
                elif parts == ["tasks"]:
                    self._send(200, store.create_task(
                        body.get("example_ids", []),
                        body.get("clean_indices", []),
                        int(body.get("seed", 0)),
                        float(body.get("threshold", DEFAULT_THRESHOLD))))
                elif len(parts) == 3 and parts[0] == "tasks" and parts[2] == "votes":
                    self._send(200, store.submit_vote(
                        parts[1], body.get("rater", ""), body.get("item_id", ""),
                        body.get("label")))
                else:
                    self._send(404, {"code": "not_found", "message": self.path})
            except KeyError as exc:
                self._send(400, {"code": "invalid_request",
                                 "message": f"missing field {exc}"})
            except ValueError as exc:
                self._send(400, {"code": "invalid_request", "message": str(exc)})
            except Exception as exc:  # noqa: BLE001 - mapped to HTTP statuses
                self._send(*_error_payload(exc))

    return Handler


def serve(store: AnnotationStore, host: str = "127.0.0.1", port: int = 8008,
          ui_dir=None) -> ThreadingHTTPServer:
    """Create (but do not start) the HTTP server; caller runs serve_forever."""
    handler = make_handler(store, ui_dir)
    return ThreadingHTTPServer((host, port), handler)
