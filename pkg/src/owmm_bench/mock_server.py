"""A canned remote-policy server for protocol and fault-injection tests.

Modes:
  echo-oracle   rebuild the context from the request's ground-truth block and
                answer exactly as the in-process oracle would
  fixed-action  always answer with one configured text
  fail-rate     answer HTTP 500 with a given probability, otherwise as echo-oracle

``fail_first`` makes the first N requests for every distinct payload fail
with HTTP 500, and ``delay_first`` stalls the first request of every
payload for ``delay_s`` seconds; both exercise the client's retry path.
"""

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import numpy as np

from .agent import AgentContext, GroundTruth, HighLevelAction
from .planner import ReachModel
from .policy import oracle_decide
from .sim import PoseGraph, RobotState, observe
from .world import SceneSpec, TaskInstance

MODES = ("echo-oracle", "fixed-action", "fail-rate")


def context_from_payload(body: dict) -> AgentContext:
    gt = body.get("ground_truth")
    if gt is None:
        raise ValueError("echo-oracle needs the ground_truth block (client include_ground_truth)")
    scene = SceneSpec.from_dict(gt["scene"])
    task = TaskInstance.from_dict(gt["task"])
    state = RobotState.from_dict(gt["state"])
    hfov = gt["camera"]["hfov"]
    size = tuple(gt["camera"]["image_size"])
    poses = [RobotState.from_dict(p) for p in gt["pose_graph"]["poses"]]
    frames = PoseGraph.from_poses(scene, poses, gt["pose_graph"]["provenance"], hfov, size)
    ego = observe(state, scene, hfov, size)
    return AgentContext(body["instruction"], frames, ego, body["history"], body["step"],
                        GroundTruth(scene, task, state, ReachModel(**gt["reach"])))


@dataclass
class MockConfig:
    mode: str = "echo-oracle"
    fixed_text: Optional[str] = None
    fail_rate: float = 0.0
    fail_first: int = 0
    delay_first: bool = False
    delay_s: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.mode == "fixed-action" and self.fixed_text is None:
            raise ValueError("fixed-action mode needs fixed_text")
        if not 0 <= self.fail_rate <= 1:
            raise ValueError("fail_rate must lie in [0, 1]")


def fixed_search_text(frame_index: int = 0) -> str:
    return HighLevelAction("search_scene_frame", frame_index=frame_index, reasoning="Searching.",
                           summarization="I am searching the scene frames.").to_text()


class MockPolicyServer:
    """Threaded HTTP server; use as a context manager or call start()/stop()."""

    def __init__(self, cfg: MockConfig, host: str = "127.0.0.1", port: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng([0x30C4, cfg.seed])
        self.lock = threading.Lock()
        self.seen = {}
        self.n_requests = 0
        self.n_failed = 0
        self.httpd = ThreadingHTTPServer((host, port), self._handler())
        self.httpd.daemon_threads = True
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/"

    def _handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                raw = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                status, text, delay = server.respond(raw)
                if delay:
                    time.sleep(delay)
                body = json.dumps({"raw_text": text}).encode("utf-8") if status == 200 else b'{"error":"injected"}'
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    pass

        return Handler

    def respond(self, raw: bytes) -> tuple:
        """(status, raw_text, delay_s) for one request body."""
        cfg = self.cfg
        key = hashlib.sha256(raw).hexdigest()
        with self.lock:
            self.n_requests += 1
            count = self.seen.get(key, 0)
            self.seen[key] = count + 1
            fail = count < cfg.fail_first
            if cfg.mode == "fail-rate" and not fail:
                fail = bool(self.rng.random() < cfg.fail_rate)
            if fail:
                self.n_failed += 1
        if fail:
            return 500, None, 0.0
        delay = cfg.delay_s if cfg.delay_first and count == cfg.fail_first else 0.0
        if cfg.mode == "fixed-action":
            return 200, cfg.fixed_text, delay
        try:
            body = json.loads(raw.decode("utf-8"))
            return 200, oracle_decide(context_from_payload(body)), delay
        except (ValueError, KeyError, TypeError):
            return 500, None, 0.0

    def start(self) -> "MockPolicyServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def __enter__(self) -> "MockPolicyServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
