import json
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from dcdm.errors import WeightFormatError
from dcdm.imaging import encode_png
from dcdm.model import save_weights
from dcdm.service import (
    ModelBundle,
    ServiceConfig,
    classify_bytes,
    create_server,
    load_bundle,
    watch_stream,
    REFERENCE_LATENCY_MS,
)


def to_png(x_chw: np.ndarray) -> bytes:
    u8 = np.rint(np.transpose(x_chw, (1, 2, 0)) * 255).astype(np.uint8)
    return encode_png(u8)


def request(method, url, data=None, headers=None, timeout=60):
    req = urllib.request.Request(url, data=data, method=method,
                                 headers=headers or {})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read()), dict(resp.headers)
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read()), dict(err.headers)


@pytest.fixture(scope="module")
def served(overfit_bundle, tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    model_path = root / "model.dcdm"
    save_weights(overfit_bundle["model"], model_path)
    config = ServiceConfig(host="127.0.0.1", port=0, workers=4,
                           max_request_bytes=200_000,
                           model_path=str(model_path))
    server = create_server(config)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.bound_address
    yield {
        "base": f"http://{host}:{port}",
        "server": server,
        "bundle": server.bundle,
        "model_path": model_path,
        "x": overfit_bundle["x"],
        "y": overfit_bundle["y"],
    }
    server.shutdown()
    server.server_close()
    thread.join()


def test_health(served):
    status, body, _ = request("GET", served["base"] + "/v1/health")
    assert status == 200
    assert body == {"status": "ok", "model_loaded": True}


def test_model_endpoint(served):
    status, body, _ = request("GET", served["base"] + "/v1/model")
    assert status == 200
    assert body["param_count"] == served["bundle"].model.param_count()
    assert body["num_classes"] == 2
    assert body["input_hw"] == [32, 32]
    assert body["fingerprint"] == served["bundle"].fingerprint


def test_classify_returns_training_label(served):
    for i in (0, len(served["x"]) - 1):
        png = to_png(served["x"][i])
        status, body, _ = request(
            "POST", served["base"] + "/v1/classify", data=png,
            headers={"Content-Type": "image/png"})
        assert status == 200
        assert body["class_index"] == int(served["y"][i])
        assert body["class_name"] == served["bundle"].labels[body["class_index"]]
        assert body["confidence"] == body["top_k"][0]["prob"]
        probs = [e["prob"] for e in body["top_k"]]
        assert probs == sorted(probs, reverse=True)
        assert 0.0 <= body["confidence"] <= 1.0
        assert body["latency_ms"] > 0
        assert body["model_fingerprint"] == served["bundle"].fingerprint
        assert set(body) == {"class_index", "class_name", "plant", "disease",
                             "confidence", "top_k", "latency_ms",
                             "model_fingerprint"}


def test_classify_deterministic(served):
    png = to_png(served["x"][1])
    results = []
    for _ in range(2):
        _, body, _ = request("POST", served["base"] + "/v1/classify",
                             data=png, headers={"Content-Type": "image/png"})
        body.pop("latency_ms")
        results.append(body)
    assert results[0] == results[1]


def test_error_codes(served):
    url = served["base"] + "/v1/classify"
    status, body, _ = request("POST", url, data=b"",
                              headers={"Content-Type": "image/png"})
    assert status == 400 and "error" in body

    status, body, _ = request("POST", url, data=b"x" * 250_000,
                              headers={"Content-Type": "image/png"})
    assert status == 413 and "error" in body

    status, body, _ = request("POST", url, data=b"hello world",
                              headers={"Content-Type": "text/plain"})
    assert status == 415 and "error" in body

    status, body, _ = request("POST", url, data=b"\x89PNG but not really",
                              headers={"Content-Type": "image/png"})
    assert status == 415 and "error" in body

    status, body, _ = request("GET", served["base"] + "/v1/nope")
    assert status == 404 and "error" in body


def test_concurrent_matches_single_threaded(served):
    images = [to_png(served["x"][i]) for i in range(len(served["x"]))]
    reference = []
    for png in images:
        rec = classify_bytes(served["bundle"], png, top_k=5)
        rec.pop("latency_ms")
        reference.append(rec)

    def post(i):
        png = images[i % len(images)]
        nonce = f"req-{i:03d}"
        status, body, headers = request(
            "POST", served["base"] + "/v1/classify", data=png,
            headers={"Content-Type": "image/png", "X-Request-Nonce": nonce})
        return i, nonce, status, body, headers

    with ThreadPoolExecutor(max_workers=16) as pool:
        results = list(pool.map(post, range(100)))
    assert len(results) == 100
    for i, nonce, status, body, headers in results:
        assert status == 200
        assert headers.get("X-Request-Nonce") == nonce
        body.pop("latency_ms")
        assert body == reference[i % len(images)]


def test_graceful_shutdown_completes_inflight(overfit_bundle, tmp_path):
    model_path = tmp_path / "m.dcdm"
    save_weights(overfit_bundle["model"], model_path)
    server = create_server(ServiceConfig(port=0, model_path=str(model_path)))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.bound_address
    png = to_png(overfit_bundle["x"][0])
    outcome = {}

    def fire():
        outcome["resp"] = request(
            "POST", f"http://{host}:{port}/v1/classify", data=png,
            headers={"Content-Type": "image/png"})

    client = threading.Thread(target=fire)
    client.start()
    time.sleep(0.02)
    server.shutdown()
    server.server_close()
    thread.join()
    client.join()
    assert outcome["resp"][0] == 200


def test_corrupt_weights_fail_before_binding(tmp_path):
    bad = tmp_path / "bad.dcdm"
    bad.write_bytes(b"XXXX not a weight file")
    with pytest.raises(WeightFormatError):
        create_server(ServiceConfig(port=0, model_path=str(bad)))


def test_config_validation():
    with pytest.raises(ValueError):
        ServiceConfig(workers=0)
    with pytest.raises(ValueError):
        ServiceConfig(top_k=0)


def read_lines(path):
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_watch_stream_batch(served, tmp_path):
    frames = tmp_path / "frames"
    frames.mkdir()
    order = []
    for i in (2, 0, 1):
        p = frames / f"frame_{i}.png"
        p.write_bytes(to_png(served["x"][i]))
        os.utime(p, (1000 + i, 1000 + i))
        order.append((1000 + i, p.name))
    (frames / "broken.png").write_bytes(b"garbage")
    os.utime(frames / "broken.png", (2000, 2000))

    log = tmp_path / "results.jsonl"
    n = watch_stream(served["bundle"], frames, poll_s=0.01,
                     output=str(log), max_frames=4)
    assert n == 3
    lines = read_lines(log)
    assert len(lines) == 5
    results = [l for l in lines if "class_index" in l]
    errors = [l for l in lines if "error" in l and "path" in l]
    assert [l["path"].rsplit("/", 1)[-1] for l in results] == \
        ["frame_0.png", "frame_1.png", "frame_2.png"]
    assert [l["class_index"] for l in results] == \
        [int(served["y"][i]) for i in (0, 1, 2)]
    assert all(l["latency_ms"] > 0 for l in results)
    assert len(errors) == 1 and errors[0]["path"].endswith("broken.png")
    summary = lines[-1]
    assert summary["frames"] == 3
    assert summary["mean_latency_ms"] == pytest.approx(
        np.mean([l["latency_ms"] for l in results]))
    assert summary["reference_latency_ms"] == REFERENCE_LATENCY_MS


def wait_for(predicate, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.02)
    return False


def test_watch_stream_tracks_name_and_size(served, tmp_path):
    frames = tmp_path / "frames"
    frames.mkdir()
    log = tmp_path / "results.jsonl"
    stop = threading.Event()
    worker = threading.Thread(
        target=watch_stream,
        kwargs=dict(bundle=served["bundle"], watch_dir=frames, poll_s=0.02,
                    output=str(log), stop_event=stop))
    worker.start()
    try:
        first = to_png(served["x"][0])
        (frames / "a.png").write_bytes(first)
        assert wait_for(lambda: len(read_lines(log)) == 1)

        (frames / "a.png").write_bytes(first)  # same name+size: skipped
        time.sleep(0.3)
        assert len(read_lines(log)) == 1

        second = next(to_png(served["x"][j]) for j in range(1, 8)
                      if len(to_png(served["x"][j])) != len(first))
        (frames / "a.png").write_bytes(second)  # same name, new size
        assert wait_for(lambda: len(read_lines(log)) == 2)
    finally:
        stop.set()
        worker.join()
    lines = read_lines(log)
    assert lines[-1]["frames"] == 2


def test_bundle_labels_override(overfit_bundle, tmp_path):
    model_path = tmp_path / "m.dcdm"
    save_weights(overfit_bundle["model"], model_path)
    names = tmp_path / "names.json"
    names.write_text(json.dumps(["ok_leaf", "bad_leaf"]))
    bundle = load_bundle(model_path, labels_path=names)
    assert bundle.labels == ["ok_leaf", "bad_leaf"]
    sidecar = load_bundle(model_path)
    assert sidecar.labels == ["healthy", "diseased"]


def test_known_slug_resolves_plant_and_disease(overfit_bundle, tmp_path):
    model_path = tmp_path / "m.dcdm"
    save_weights(overfit_bundle["model"], model_path)
    names = tmp_path / "names.json"
    names.write_text(json.dumps(["apple_healthy", "apple_scab"]))
    bundle = load_bundle(model_path, labels_path=names)
    png = to_png(overfit_bundle["x"][0])
    body = classify_bytes(bundle, png)
    assert body["plant"] == "Apple"
    assert body["disease"] in ("healthy", "Scab")
