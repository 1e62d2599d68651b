import http.server
import json
import threading
from contextlib import contextmanager
from pathlib import Path

import pytest

from inpars.corpus import Corpus, Document

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture
def fixture_dir():
    return DATA_DIR


class _Handler(http.server.BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        status, payload, headers = self.server.handler_fn(self.path, dict(self.headers), body)
        if isinstance(payload, (dict, list)):
            payload = json.dumps(payload).encode("utf-8")
        elif isinstance(payload, str):
            payload = payload.encode("utf-8")
        self.send_response(status)
        for key, value in (headers or {}).items():
            self.send_header(key, value)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@contextmanager
def http_endpoint(handler_fn):
    """Run a loopback HTTP server; handler_fn(path, headers, body) returns
    (status, payload, headers)."""
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    server.handler_fn = handler_fn
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}"
    finally:
        server.shutdown()
        server.server_close()


@pytest.fixture
def tiny_corpus():
    """The 3-doc corpus used throughout the index tests."""
    return Corpus([
        Document(doc_id="d1", body="a b a"),
        Document(doc_id="d2", body="b c"),
        Document(doc_id="d3", body="c c c"),
    ])


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path
