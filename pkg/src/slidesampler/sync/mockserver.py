"""In-process mock of the annotation server, seeded from a manifest.

It implements the same endpoints as :mod:`slidesampler.sync.client` expects
and is the conformance reference for that wire format.  Faults can be queued
to exercise the client's retry logic.
"""

import argparse
import json
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from ..model import load_manifest


class MockExactServer:
    def __init__(self, manifest, token="secret", image_set="default", host="127.0.0.1", port=0):
        self.token = token
        self.image_set = image_set
        names = manifest.classes.names
        self.slides = {}
        for s in manifest.slides:
            self.slides[s.slide_id] = {
                "meta": {"slide_id": s.slide_id, "width": s.width, "height": s.height, "revision": 1,
                         "split_role": s.split_role},
                "screened": [r.as_list() for r in s.screen_map.rects],
                "annotations": [
                    {"id": a.id, "cx": a.cx, "cy": a.cy, "r": a.r, "class": names[a.cls], "annotator": a.annotator}
                    for a in s.annotations
                ],
            }
        self.predictions = {sid: {} for sid in self.slides}
        self.next_server_id = 1
        self.faults = deque()
        self.requests = []
        self._lock = threading.Lock()
        self._httpd = ThreadingHTTPServer((host, port), self._handler_class())
        self._thread = None

    @property
    def base_url(self):
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def prediction_count(self):
        return sum(len(p) for p in self.predictions.values())

    def fail_next(self, n=1, mode="status", status=503):
        """Queue ``n`` failures: ``mode`` is "status" (HTTP error) or "drop" (close the socket)."""
        for _ in range(n):
            self.faults.append((mode, status))

    def start(self):
        self._thread = threading.Thread(target=self._httpd.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _handler_class(server):
        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def _send(self, status, payload):
                body = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _preflight(self):
                with server._lock:
                    server.requests.append((self.command, self.path))
                    fault = server.faults.popleft() if server.faults else None
                if fault is not None:
                    mode, status = fault
                    if mode == "drop":
                        self.close_connection = True
                        self.connection.close()
                        return False
                    self._send(status, {"error": "injected fault"})
                    return False
                if self.headers.get("Authorization") != f"Bearer {server.token}":
                    self._send(401, {"error": "unauthorized"})
                    return False
                return True

            def do_GET(self):
                if not self._preflight():
                    return
                url = urlparse(self.path)
                parts = url.path.strip("/").split("/")
                if parts == ["api", "slides"]:
                    wanted = parse_qs(url.query).get("set", [server.image_set])[0]
                    if wanted != server.image_set:
                        return self._send(200, [])
                    return self._send(200, [s["meta"] for s in server.slides.values()])
                if len(parts) == 4 and parts[:2] == ["api", "slides"] and parts[2] in server.slides:
                    slide = server.slides[parts[2]]
                    if parts[3] == "screened":
                        return self._send(200, slide["screened"])
                    if parts[3] == "annotations":
                        return self._send(200, slide["annotations"])
                    if parts[3] == "predictions":
                        return self._send(200, list(server.predictions[parts[2]].values()))
                self._send(404, {"error": "not found"})

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                if not self._preflight():
                    return
                parts = urlparse(self.path).path.strip("/").split("/")
                if not (len(parts) == 4 and parts[:2] == ["api", "slides"] and parts[3] == "predictions"
                        and parts[2] in server.slides):
                    return self._send(404, {"error": "not found"})
                try:
                    items = json.loads(raw)
                    reply = []
                    with server._lock:
                        store = server.predictions[parts[2]]
                        for item in items:
                            cid = item["client_id"]
                            if cid not in store:
                                store[cid] = {**item, "server_id": server.next_server_id}
                                server.next_server_id += 1
                            reply.append({"client_id": cid, "server_id": store[cid]["server_id"]})
                except (ValueError, KeyError, TypeError):
                    return self._send(400, {"error": "bad payload"})
                self._send(200, reply)

        return Handler


def main(argv=None):
    parser = argparse.ArgumentParser(description="Serve a manifest through the mock annotation API.")
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--token", default="secret")
    parser.add_argument("--image-set", default="default")
    parser.add_argument("--port", type=int, default=8765)
    args = parser.parse_args(argv)
    server = MockExactServer(load_manifest(args.manifest), args.token, args.image_set, port=args.port)
    print(f"serving on {server.base_url}", flush=True)
    try:
        server._httpd.serve_forever()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
