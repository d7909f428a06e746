"""Network session host: runs sessions on background threads, exposes
operator commands and an ordered event stream over HTTP, persists run logs,
and serves metrics.

Endpoints (JSON bodies unless noted; every payload carries schema_version):
  POST /api/sessions                    create a session
  GET  /api/sessions                    list sessions
  GET  /api/sessions/{id}               state snapshot
  POST /api/sessions/{id}/commands      submit an operator command
  GET  /api/sessions/{id}/events        server-sent event stream
  GET  /api/sessions/{id}/log           run log as JSONL
  GET  /api/sessions/{id}/metrics       metrics report
"""
from __future__ import annotations

import json
import queue
import threading
import time
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .metrics import build_report
from .runlog import IncompleteLog
from .scenario import InvalidScenario, Scenario, load_scenario
from .session import Session, make_policy
from .supervisor import CommandKind, OperatorCommand
from .planner import PlanMode

API_SCHEMA_VERSION = 1


class UnknownSession(KeyError):
    pass


class SessionRunner:
    """One live session plus its clock thread and stream subscribers."""

    def __init__(
        self,
        session_id: str,
        session: Session,
        clock_mode: str = "realtime",
        speed: float = 1.0,
        log_dir: Path | None = None,
    ):
        self.id = session_id
        self.session = session
        self.clock_mode = clock_mode
        self.speed = speed
        self.log_dir = log_dir
        self.lock = threading.Lock()
        self.subscribers: list[queue.Queue] = []
        self._published = 0
        self._snapshot_every_s = 0.1  # simulated seconds between snapshots
        self._next_snapshot_t = 0.0
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._run, daemon=True)

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        self.thread.start()

    def stop(self) -> None:
        self._stop.set()

    def _run(self) -> None:
        dt = self.session.dt
        last_wall = time.monotonic()
        sim_ahead = 0.0
        while not self._stop.is_set() and self.session.status is None:
            if self.clock_mode == "fast":
                with self.lock:
                    for _ in range(200):
                        if self.session.status is not None:
                            break
                        self.session.step()
                    self._publish_new()
            else:
                now = time.monotonic()
                sim_ahead += (now - last_wall) * self.speed
                last_wall = now
                steps = int(sim_ahead / dt)
                if steps > 0:
                    sim_ahead -= steps * dt
                    with self.lock:
                        for _ in range(min(steps, 2000)):
                            if self.session.status is not None:
                                break
                            self.session.step()
                        self._publish_new()
                else:
                    time.sleep(dt / max(self.speed, 1e-6) / 2)
        with self.lock:
            self._publish_new()
            self._fanout({"type": "status", "status": self.session.status or "stopped"})
            if self.log_dir is not None and self.session.status is not None:
                self.log_dir.mkdir(parents=True, exist_ok=True)
                self.session.log.write(self.log_dir / f"{self.id}.jsonl")

    # -- streaming ---------------------------------------------------------------

    def _fanout(self, message: dict) -> None:
        message["schema_version"] = API_SCHEMA_VERSION
        for q in list(self.subscribers):
            q.put(message)

    def _publish_new(self) -> None:
        records = self.session.log.records
        while self._published < len(records):
            rec = records[self._published]
            self._published += 1
            self._fanout({"type": "record", "record": rec})
        if self.session.now >= self._next_snapshot_t:
            self._next_snapshot_t = self.session.now + self._snapshot_every_s
            self._fanout({"type": "snapshot", "snapshot": self.session.snapshot()})

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self.lock:
            catchup = {
                "type": "catchup",
                "schema_version": API_SCHEMA_VERSION,
                "snapshot": self.session.snapshot(),
                "status": self.session.status,
                "last_seq": len(self.session.log.records) - 1,
                "records": [
                    r
                    for r in self.session.log.records
                    if r["kind"] in ("event", "command", "stitch")
                ],
            }
            q.put(catchup)
            if self.session.status is not None:
                # The run already ended; a late subscriber still gets closure.
                q.put(
                    {
                        "type": "status",
                        "status": self.session.status,
                        "schema_version": API_SCHEMA_VERSION,
                    }
                )
            self.subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self.lock:
            if q in self.subscribers:
                self.subscribers.remove(q)

    # -- commands ----------------------------------------------------------------

    def submit(self, command: OperatorCommand) -> dict:
        with self.lock:
            if self.session.status is not None:
                return {
                    "accepted": False,
                    "reason": f"session_{self.session.status}",
                    "state": self.session.supervisor.state.value,
                }
            accepted, reason = self.session.supervisor.handle_command(
                command, self.session.now
            )
            self._publish_new()
            return {
                "accepted": accepted,
                "reason": reason,
                "state": self.session.supervisor.state.value,
            }

    def info(self) -> dict:
        with self.lock:
            return {
                "id": self.id,
                "state": self.session.supervisor.state.value,
                "t": self.session.now,
                "status": self.session.status,
                "clock_mode": self.clock_mode,
                "speed": self.speed,
                "profile": self.session.profile.name,
                "seed": self.session.seed,
            }


class SessionHub:
    def __init__(self, log_dir: str | Path | None = None):
        self.runners: dict[str, SessionRunner] = {}
        self.log_dir = Path(log_dir) if log_dir else None
        self._lock = threading.Lock()

    def create(self, payload: dict) -> SessionRunner:
        scenario_spec = payload.get("scenario", "default")
        if isinstance(scenario_spec, dict):
            scenario = Scenario.from_dict(scenario_spec)
        else:
            scenario = load_scenario(scenario_spec)
        clock = payload.get("clock", {})
        policy = payload.get("policy")
        session = Session(
            scenario,
            profile=payload.get("profile", "ex_vivo"),
            seed=int(payload.get("seed", 0)),
            policy=make_policy(policy) if policy else None,
        )
        runner = SessionRunner(
            session_id=uuid.uuid4().hex[:12],
            session=session,
            clock_mode=clock.get("mode", "realtime"),
            speed=float(clock.get("speed", 1.0)),
            log_dir=self.log_dir,
        )
        with self._lock:
            self.runners[runner.id] = runner
        runner.start()
        return runner

    def get(self, session_id: str) -> SessionRunner:
        try:
            return self.runners[session_id]
        except KeyError:
            raise UnknownSession(session_id)

    def shutdown(self) -> None:
        for runner in self.runners.values():
            runner.stop()


def parse_command(payload: dict) -> OperatorCommand:
    return OperatorCommand(
        kind=CommandKind(payload["kind"]),
        plan_mode=PlanMode(payload["plan_mode"]) if payload.get("plan_mode") else None,
        offset_mm=tuple(payload["offset_mm"]) if payload.get("offset_mm") else None,
        command_id=payload.get("command_id") or uuid.uuid4().hex[:10],
    )


def make_handler(hub: SessionHub, static_dir: Path | None = None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet server
            pass

        # -- helpers ---------------------------------------------------------

        def _json(self, code: int, body: dict) -> None:
            data = json.dumps(body | {"schema_version": API_SCHEMA_VERSION}).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(data)

        def _text(self, code: int, text: str, content_type: str) -> None:
            data = text.encode()
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(data)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(data)

        def _read_body(self) -> dict:
            length = int(self.headers.get("Content-Length", "0"))
            if length == 0:
                return {}
            return json.loads(self.rfile.read(length))

        def _runner(self, session_id: str) -> SessionRunner | None:
            try:
                return hub.get(session_id)
            except UnknownSession:
                self._json(404, {"error": "unknown_session", "session_id": session_id})
                return None

        # -- routes ------------------------------------------------------------

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_POST(self):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            try:
                if parts == ["api", "sessions"]:
                    payload = self._read_body()
                    try:
                        runner = hub.create(payload)
                    except (InvalidScenario, ValueError, KeyError) as exc:
                        self._json(400, {"error": "invalid_scenario", "detail": str(exc)})
                        return
                    self._json(201, {"session_id": runner.id, **runner.info()})
                    return
                if len(parts) == 4 and parts[:2] == ["api", "sessions"] and parts[3] == "commands":
                    runner = self._runner(parts[2])
                    if runner is None:
                        return
                    try:
                        command = parse_command(self._read_body())
                    except (KeyError, ValueError) as exc:
                        self._json(400, {"error": "invalid_command", "detail": str(exc)})
                        return
                    result = runner.submit(command)
                    self._json(200, result | {"command_id": command.command_id})
                    return
                self._json(404, {"error": "not_found", "path": self.path})
            except (BrokenPipeError, ConnectionResetError):
                pass

        def do_GET(self):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            try:
                if parts == ["api", "sessions"]:
                    self._json(200, {"sessions": [r.info() for r in hub.runners.values()]})
                    return
                if len(parts) == 3 and parts[:2] == ["api", "sessions"]:
                    runner = self._runner(parts[2])
                    if runner is None:
                        return
                    with runner.lock:
                        snap = runner.session.snapshot()
                    self._json(200, runner.info() | {"snapshot": snap})
                    return
                if len(parts) == 4 and parts[:2] == ["api", "sessions"]:
                    runner = self._runner(parts[2])
                    if runner is None:
                        return
                    tail = parts[3]
                    if tail == "events":
                        self._stream_events(runner)
                        return
                    if tail == "log":
                        with runner.lock:
                            text = runner.session.log.to_jsonl()
                        self._text(200, text, "application/x-ndjson")
                        return
                    if tail == "metrics":
                        with runner.lock:
                            try:
                                report = build_report(runner.session.log)
                            except IncompleteLog:
                                self._json(409, {"error": "run_in_progress"})
                                return
                        self._json(200, {"report": report.to_dict()})
                        return
                if static_dir is not None:
                    self._serve_static(parts)
                    return
                self._json(404, {"error": "not_found", "path": self.path})
            except (BrokenPipeError, ConnectionResetError):
                pass

        def _serve_static(self, parts: list[str]) -> None:
            rel = "/".join(parts) or "index.html"
            target = (static_dir / rel).resolve()
            if not str(target).startswith(str(static_dir.resolve())) or not target.is_file():
                target = static_dir / "index.html"
                if not target.is_file():
                    self._json(404, {"error": "not_found"})
                    return
            types = {
                ".html": "text/html",
                ".js": "text/javascript",
                ".css": "text/css",
                ".map": "application/json",
                ".svg": "image/svg+xml",
            }
            self._text(200, target.read_text(), types.get(target.suffix, "text/plain"))

        def _stream_events(self, runner: SessionRunner) -> None:
            q = runner.subscribe()
            try:
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                while True:
                    try:
                        message = q.get(timeout=15.0)
                    except queue.Empty:
                        self.wfile.write(b": keepalive\n\n")
                        self.wfile.flush()
                        continue
                    payload = json.dumps(message)
                    self.wfile.write(f"data: {payload}\n\n".encode())
                    self.wfile.flush()
                    if message.get("type") == "status":
                        break
            except (BrokenPipeError, ConnectionResetError):
                pass
            finally:
                runner.unsubscribe(q)

    return Handler


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8777
    log_dir: str | None = None
    static_dir: str | None = None


def create_server(config: ServiceConfig) -> tuple[ThreadingHTTPServer, SessionHub]:
    hub = SessionHub(log_dir=config.log_dir)
    static = Path(config.static_dir) if config.static_dir else None
    handler = make_handler(hub, static_dir=static)
    server = ThreadingHTTPServer((config.host, config.port), handler)
    return server, hub


def serve_forever(config: ServiceConfig) -> None:
    server, hub = create_server(config)
    try:
        print(f"suturesim service on http://{config.host}:{server.server_address[1]}")
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        hub.shutdown()
        server.server_close()
