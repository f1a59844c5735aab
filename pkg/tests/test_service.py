import base64
import io
import time

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from PIL import Image

from gridocr.corpus import Vocabulary, render_page
from gridocr.model import GridOCRModel, ModelConfig
from gridocr.service import SessionManager, create_app


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.build(8, seed=0)


@pytest.fixture(scope="module")
def manager(vocab, tmp_path_factory):
    torch.manual_seed(2)
    cfg = ModelConfig(d=32, enc_layers=1, dec_layers=1, heads=4, H=4, W=3,
                      v=vocab.size, max_len=16, patch=4, pos_bands=4,
                      head_channels=4)
    model = GridOCRModel(cfg).eval()
    return SessionManager(model, vocab,
                          persist_dir=tmp_path_factory.mktemp("traces"))


@pytest.fixture(scope="module")
def client(manager):
    return TestClient(create_app(manager))


@pytest.fixture(scope="module")
def png_b64(vocab):
    page = render_page("single_column", np.random.default_rng(0), vocab)
    arr = (np.asarray(page.image, dtype=np.float64) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def wait_until(predicate, timeout=10.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return True
        time.sleep(0.02)
    return False


def wait_status(client, sid, status, timeout=10.0):
    return wait_until(
        lambda: client.get(f"/sessions/{sid}").json()["status"] == status, timeout
    )


class TestCreateSession:
    def test_valid_png(self, client, png_b64):
        r = client.post("/sessions", json={"image_b64": png_b64,
                                           "options": {"max_len": 6}})
        assert r.status_code == 200
        body = r.json()
        assert body["status"] == "running" and body["id"]
        assert wait_status(client, body["id"], "done")

    def test_truncated_png(self, client, png_b64):
        bad = base64.b64encode(base64.b64decode(png_b64)[:20]).decode()
        r = client.post("/sessions", json={"image_b64": bad})
        assert r.status_code == 400
        assert r.json()["code"] == "bad_image"

    def test_distinct_ids(self, client, png_b64):
        ids = {
            client.post("/sessions", json={"image_b64": png_b64,
                                           "options": {"max_len": 2}}).json()["id"]
            for _ in range(2)
        }
        assert len(ids) == 2

    def test_unknown_session_404(self, client):
        assert client.get("/sessions/nope").status_code == 404


class TestEventStream:
    def test_batch_decode_streams_tokens_then_done(self, client, png_b64):
        sid = client.post("/sessions", json={"image_b64": png_b64,
                                             "options": {"max_len": 5}}).json()["id"]
        assert wait_status(client, sid, "done")
        frames = []
        with client.websocket_connect(f"/sessions/{sid}/events") as ws:
            while True:
                frame = ws.receive_json()
                frames.append(frame)
                if frame["type"] == "done":
                    break
        kinds = [f["type"] for f in frames]
        assert kinds[-1] == "done"
        n_tokens = kinds.count("token_emitted")
        snapshot = client.get(f"/sessions/{sid}").json()
        assert n_tokens == len(snapshot["tokens"])
        seqs = [f["seq"] for f in frames]
        assert seqs == list(range(len(frames)))  # gapless, ordered

    def test_reconnect_replays_after_cursor(self, client, png_b64):
        sid = client.post("/sessions", json={"image_b64": png_b64,
                                             "options": {"max_len": 5}}).json()["id"]
        assert wait_status(client, sid, "done")
        frames = []
        with client.websocket_connect(f"/sessions/{sid}/events") as ws:
            while True:
                frame = ws.receive_json()
                frames.append(frame)
                if frame["type"] == "done":
                    break
        assert len(frames) >= 2
        cursor = frames[-2]["seq"]
        with client.websocket_connect(
            f"/sessions/{sid}/events?after={cursor}"
        ) as ws:
            replay = ws.receive_json()
        assert replay == frames[-1]
        assert replay["seq"] == cursor + 1

    def test_unknown_session_stream(self, client):
        with client.websocket_connect("/sessions/ghost/events") as ws:
            frame = ws.receive_json()
            assert frame["code"] == "unknown_session"


class TestPromptFlow:
    def test_pause_prompt_resume(self, client, png_b64):
        sid = client.post(
            "/sessions",
            json={"image_b64": png_b64,
                  "options": {"conf_threshold": 1.0, "max_len": 3}},
        ).json()["id"]
        assert wait_status(client, sid, "awaiting_prompt")
        snap = client.get(f"/sessions/{sid}").json()
        assert snap["pending_prompt"] is not None

        # invalid box rejected and status unchanged
        r = client.post(f"/sessions/{sid}/prompt", json={"box": [0.8, 0.1, 0.2, 0.9]})
        assert r.status_code == 422
        assert client.get(f"/sessions/{sid}").json()["status"] == "awaiting_prompt"

        tokens_before = len(snap["tokens"])
        r = client.post(f"/sessions/{sid}/prompt",
                        json={"box": [0.1, 0.1, 0.4, 0.3]})
        assert r.status_code == 200
        assert wait_until(
            lambda: len(client.get(f"/sessions/{sid}").json()["tokens"]) > tokens_before
            or client.get(f"/sessions/{sid}").json()["status"] == "done"
        )

        # drive the session to completion
        for _ in range(8):
            state = client.get(f"/sessions/{sid}").json()
            if state["status"] == "done":
                break
            if state["status"] == "awaiting_prompt":
                client.post(f"/sessions/{sid}/prompt",
                            json={"box": [0.1, 0.1, 0.4, 0.3]})
            time.sleep(0.05)
        assert wait_status(client, sid, "done")

    def test_prompt_wrong_status_conflict(self, client, png_b64):
        sid = client.post("/sessions", json={"image_b64": png_b64,
                                             "options": {"max_len": 3}}).json()["id"]
        assert wait_status(client, sid, "done")
        r = client.post(f"/sessions/{sid}/prompt", json={"box": [0.1, 0.1, 0.2, 0.2]})
        assert r.status_code == 409
        assert r.json()["code"] == "wrong_status"

    def test_prompt_unknown_session(self, client):
        r = client.post("/sessions/ghost/prompt", json={"box": [0.1, 0.1, 0.2, 0.2]})
        assert r.status_code == 404

    def test_prompt_applied_event_and_box_used(self, client, manager, png_b64):
        sid = client.post(
            "/sessions",
            json={"image_b64": png_b64,
                  "options": {"conf_threshold": 1.0, "max_len": 2}},
        ).json()["id"]
        assert wait_status(client, sid, "awaiting_prompt")
        box = [0.2, 0.2, 0.5, 0.6]
        client.post(f"/sessions/{sid}/prompt", json={"box": box})
        assert wait_status(client, sid, "done", timeout=15)
        session = manager.get(sid)
        applied = [e for e in session.events if e["type"] == "prompt_applied"]
        assert applied and applied[0]["box"] == box
        requested = [e["seq"] for e in session.events
                     if e["type"] == "prompt_requested"]
        assert requested and requested[0] < applied[0]["seq"]


class TestSnapshot:
    def test_done_snapshot_stable_and_consistent(self, client, png_b64):
        sid = client.post("/sessions", json={"image_b64": png_b64,
                                             "options": {"max_len": 6}}).json()["id"]
        assert wait_status(client, sid, "done")
        a = client.get(f"/sessions/{sid}").json()
        b = client.get(f"/sessions/{sid}").json()
        assert a == b
        assert len(a["visited_boxes"]) == len(a["tokens"])
        with client.websocket_connect(f"/sessions/{sid}/events") as ws:
            texts = []
            while True:
                frame = ws.receive_json()
                if frame["type"] == "token_emitted":
                    texts.append(frame["token_text"])
                if frame["type"] == "done":
                    break
        joined = a["text"]
        for t in texts:
            assert t in joined or t == "\n"

    def test_trace_persisted(self, client, manager, png_b64):
        sid = client.post("/sessions", json={"image_b64": png_b64,
                                             "options": {"max_len": 4}}).json()["id"]
        assert wait_status(client, sid, "done")
        assert wait_until(lambda: (manager.persist_dir / f"{sid}.json").exists())
