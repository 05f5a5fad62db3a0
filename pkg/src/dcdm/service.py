"""Local inference service: HTTP endpoints plus a directory-watch loop.

The server answers three routes: GET /v1/health, GET /v1/model and
POST /v1/classify. watch_stream() emulates a camera feed by polling a
directory and classifying files as they appear, appending JSON lines
to a results log.
"""

import json
import logging
import signal
import sys
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import class_table
from .errors import DcdmError, DecodeError
from .imaging import decode_image, register, to_tensor
from .model import Model, fingerprint_weights, load_weights

log = logging.getLogger("dcdm.service")

ACCEPTED_CONTENT_TYPES = frozenset(
    ["image/png", "image/jpeg", "image/x-portable-pixmap"])

# Latency budget of the embedded deployment this service emulates, in ms.
# Reported next to measured means for orientation, never asserted.
REFERENCE_LATENCY_MS = 349.0

_MIN_LATENCY_MS = 1e-3


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    model_path: str = "model.dcdm"
    labels_path: Optional[str] = None
    workers: int = 1
    top_k: int = 5
    max_request_bytes: int = 16 * 1024 * 1024

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.max_request_bytes < 1:
            raise ValueError("max_request_bytes must be positive")


def _default_labels(num_classes: int) -> list:
    table = class_table()
    if num_classes == len(table):
        return [e.slug for e in table]
    return [f"class_{i:02d}" for i in range(num_classes)]


def _name_parts(label: str):
    """(plant, disease) for a class label, empty strings when unknown."""
    for entry in class_table():
        if entry.slug == label:
            return entry.plant, entry.disease or "healthy"
    return "", ""


@dataclass
class ModelBundle:
    """One loaded model shared read-only by every request handler."""

    model: Model
    labels: list
    fingerprint: str
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def input_hw(self) -> tuple:
        return self.model.input_hw


def load_bundle(model_path, labels_path=None) -> ModelBundle:
    """Load weights and label names; raises before any socket is bound."""
    model = load_weights(model_path)
    fingerprint = fingerprint_weights(model_path)
    if labels_path is not None:
        labels = json.loads(Path(labels_path).read_text())
        if (not isinstance(labels, list)
                or len(labels) != model.num_classes
                or not all(isinstance(s, str) for s in labels)):
            raise DcdmError(
                f"{labels_path}: expected a JSON list of "
                f"{model.num_classes} label strings")
    else:
        labels = model.labels or _default_labels(model.num_classes)
    return ModelBundle(model, labels, fingerprint)


def classify_bytes(bundle: ModelBundle, payload: bytes, top_k: int = 5) -> dict:
    """Decode, register and classify one image; the full response record.

    latency_ms is wall clock around decode + register + forward. The
    forward pass runs under the bundle lock so concurrent callers get
    exactly the single-threaded results.
    """
    t0 = time.perf_counter()
    img = decode_image(payload)
    img = register(img, bundle.input_hw)
    x = to_tensor(img)
    with bundle.lock:
        pred, probs = bundle.model.predict(x[None])
    latency_ms = max((time.perf_counter() - t0) * 1000.0, _MIN_LATENCY_MS)

    row = probs[0]
    k = min(top_k, row.shape[0])
    order = np.argsort(-row, kind="stable")[:k]
    top = [
        {
            "class_index": int(i),
            "class_name": bundle.labels[int(i)],
            "prob": float(row[i]),
        }
        for i in order
    ]
    index = int(pred[0])
    plant, disease = _name_parts(bundle.labels[index])
    return {
        "class_index": index,
        "class_name": bundle.labels[index],
        "plant": plant,
        "disease": disease,
        "confidence": top[0]["prob"],
        "top_k": top,
        "latency_ms": latency_ms,
        "model_fingerprint": bundle.fingerprint,
    }


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _drain(self, length: int) -> None:
        # Read and discard a rejected body (bounded) so closing the
        # socket never resets a client that is still mid-send.
        cap = min(length, 8 * self.server.config.max_request_bytes)
        while cap > 0:
            chunk = self.rfile.read(min(65536, cap))
            if not chunk:
                break
            cap -= len(chunk)

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        nonce = self.headers.get("X-Request-Nonce")
        if nonce is not None:
            self.send_header("X-Request-Nonce", nonce)
        self.send_header("Connection", "close")
        self.end_headers()
        self.wfile.write(body)
        self.close_connection = True

    def do_GET(self):
        try:
            if self.path == "/v1/health":
                self._send_json(200, {
                    "status": "ok",
                    "model_loaded": self.server.bundle is not None,
                })
            elif self.path == "/v1/model":
                bundle = self.server.bundle
                self._send_json(200, {
                    "param_count": bundle.model.param_count(),
                    "num_classes": bundle.model.num_classes,
                    "input_hw": list(bundle.input_hw),
                    "fingerprint": bundle.fingerprint,
                })
            else:
                self._send_json(404, {"error": f"no such route: {self.path}"})
        except Exception as exc:  # never leave the socket hanging
            self._send_json(500, {"error": f"{type(exc).__name__}: {exc}"})

    def do_POST(self):
        try:
            if self.path != "/v1/classify":
                self._send_json(404, {"error": f"no such route: {self.path}"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            if length <= 0:
                self._send_json(400, {"error": "empty request body"})
                return
            if length > self.server.config.max_request_bytes:
                self._drain(length)
                self._send_json(413, {
                    "error": f"request of {length} bytes exceeds limit of "
                             f"{self.server.config.max_request_bytes}"})
                return
            ctype = (self.headers.get("Content-Type") or "").split(";")[0].strip()
            if ctype not in ACCEPTED_CONTENT_TYPES:
                self._drain(length)
                self._send_json(415, {
                    "error": f"unsupported content type {ctype!r}; accepted: "
                             + ", ".join(sorted(ACCEPTED_CONTENT_TYPES))})
                return
            payload = self.rfile.read(length)
            if len(payload) != length:
                self._send_json(400, {"error": "request body truncated"})
                return
            try:
                response = classify_bytes(
                    self.server.bundle, payload, self.server.config.top_k)
            except DecodeError as exc:
                self._send_json(415, {"error": str(exc)})
                return
            self._send_json(200, response)
        except Exception as exc:
            try:
                self._send_json(500, {"error": f"{type(exc).__name__}: {exc}"})
            except OSError:
                pass  # client already gone


class InferenceServer(ThreadingHTTPServer):
    """HTTP server with a bounded worker pool over one shared model."""

    daemon_threads = False
    block_on_close = True  # graceful: server_close waits for in-flight work

    def __init__(self, config: ServiceConfig, bundle: ModelBundle):
        self.config = config
        self.bundle = bundle
        self._slots = threading.Semaphore(config.workers)
        super().__init__((config.host, config.port), _Handler)

    def process_request_thread(self, request, client_address):
        with self._slots:
            super().process_request_thread(request, client_address)

    @property
    def bound_address(self) -> tuple:
        return self.server_address[:2]


def create_server(config: ServiceConfig) -> InferenceServer:
    """Load the model (fail fast on bad weights), then bind the socket."""
    bundle = load_bundle(config.model_path, config.labels_path)
    return InferenceServer(config, bundle)


def serve(config: ServiceConfig) -> None:
    """Run the service until SIGINT/SIGTERM; finishes in-flight requests."""
    server = create_server(config)
    host, port = server.bound_address
    stop = threading.Event()

    def _halt(signum, frame):
        stop.set()

    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, _halt)
    worker = threading.Thread(target=server.serve_forever, daemon=True)
    worker.start()
    log.info("serving on %s:%d (workers=%d)", host, port, config.workers)
    print(f"listening on {host}:{port}", flush=True)
    try:
        while not stop.wait(0.2):
            pass
    finally:
        server.shutdown()
        server.server_close()
        worker.join()
        for sig, old in previous.items():
            signal.signal(sig, old)


def _emit(stream, record: dict) -> None:
    stream.write(json.dumps(record) + "\n")
    stream.flush()


def watch_stream(
    bundle: ModelBundle,
    watch_dir,
    poll_s: float = 0.5,
    output=None,
    max_frames: Optional[int] = None,
    stop_event: Optional[threading.Event] = None,
) -> int:
    """Classify image files as they appear under watch_dir.

    Emits one JSON line per file: {path, class_index, confidence,
    latency_ms} on success, {path, error} for unreadable frames. A file
    is identified by (name, size), so finished frames are never
    reprocessed but a rewritten file of a new size is. On exit a
    summary line reports the mean latency next to the reference budget.
    Returns the number of frames classified.
    """
    watch_dir = Path(watch_dir)
    if not watch_dir.is_dir():
        raise DcdmError(f"watch directory {watch_dir} does not exist")
    own = output is not None and not hasattr(output, "write")
    stream = open(output, "a", encoding="utf-8") if own \
        else (output if output is not None else sys.stdout)
    seen = set()
    latencies = []
    processed = 0
    try:
        while True:
            arrivals = []
            for entry in watch_dir.iterdir():
                if not entry.is_file():
                    continue
                try:
                    stat = entry.stat()
                except OSError:
                    continue
                key = (entry.name, stat.st_size)
                if key not in seen:
                    arrivals.append((stat.st_mtime, entry.name, entry, key))
            arrivals.sort(key=lambda item: item[:2])
            for _, _, entry, key in arrivals:
                seen.add(key)
                try:
                    result = classify_bytes(bundle, entry.read_bytes(), top_k=1)
                    _emit(stream, {
                        "path": str(entry),
                        "class_index": result["class_index"],
                        "confidence": result["confidence"],
                        "latency_ms": result["latency_ms"],
                    })
                    latencies.append(result["latency_ms"])
                except (OSError, DcdmError) as exc:
                    _emit(stream, {"path": str(entry), "error": str(exc)})
                processed += 1
                if max_frames is not None and processed >= max_frames:
                    break
            done = max_frames is not None and processed >= max_frames
            if done or (stop_event is not None and stop_event.is_set()):
                break
            if stop_event is not None:
                stop_event.wait(poll_s)
            else:
                time.sleep(poll_s)
    finally:
        mean = float(np.mean(latencies)) if latencies else 0.0
        _emit(stream, {
            "summary": "watch",
            "frames": len(latencies),
            "mean_latency_ms": mean,
            "reference_latency_ms": REFERENCE_LATENCY_MS,
        })
        if own:
            stream.close()
    return len(latencies)
