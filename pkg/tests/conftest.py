"""Shared fixtures: toy datasets, a model registry, image bytes, and a mock
embedding HTTP service compatible with the remote wire protocol."""

from __future__ import annotations

import io
import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from PIL import Image

from medpipe.embedding import FallbackEmbedder
from medpipe.registry import ModelDatabase, parse_registry
from medpipe.tabular import TabularDataset

MODEL_01_HEADERS = ["age", "gender", "ECOG", "living_situation", "anxiety"]


@pytest.fixture
def registry_doc() -> dict:
    return {
        "table": {
            "MODEL_01": {
                "modality": "anxiety prediction",
                "headers": list(MODEL_01_HEADERS),
                "output": "anxiety",
            }
        },
        "image": {
            "MODEL_02": {
                "modality": "colon colonoscopy scan",
                "caption": (
                    "Detects and classifies hyperplastic vs. adenomatous polyps "
                    "in colonoscopy images"
                ),
            }
        },
    }


@pytest.fixture
def registry(registry_doc) -> ModelDatabase:
    return parse_registry(registry_doc)


@pytest.fixture
def registry_file(tmp_path, registry_doc):
    path = tmp_path / "registry.json"
    path.write_text(json.dumps(registry_doc), encoding="utf-8")
    return path


def toy_rows(n: int = 60, seed: int = 7) -> list[list[str]]:
    """Deterministic patient-style rows matching MODEL_01's headers; the target
    is a noiseless function of age and ECOG."""
    rng = random.Random(seed)
    rows = []
    for _ in range(n):
        age = rng.randint(20, 90)
        gender = rng.choice(["M", "F"])
        ecog = rng.randint(0, 4)
        living = rng.choice(["alone", "family", "care_home"])
        anxiety = 1 if (age > 55 and ecog >= 2) else 0
        rows.append([str(age), gender, str(ecog), living, str(anxiety)])
    return rows


@pytest.fixture
def toy_csv_bytes() -> bytes:
    lines = [",".join(MODEL_01_HEADERS)]
    lines += [",".join(r) for r in toy_rows()]
    return ("\n".join(lines) + "\n").encode()


@pytest.fixture
def toy_csv_file(tmp_path, toy_csv_bytes):
    path = tmp_path / "patients.csv"
    path.write_bytes(toy_csv_bytes)
    return path


@pytest.fixture
def toy_table() -> TabularDataset:
    return TabularDataset.from_rows(MODEL_01_HEADERS, toy_rows())


def make_png_bytes(width: int = 32, height: int = 32, color=(120, 30, 200)) -> bytes:
    img = Image.new("RGB", (width, height), color)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def make_jpeg_bytes(width: int = 32, height: int = 32, color=(10, 130, 60)) -> bytes:
    img = Image.new("RGB", (width, height), color)
    buf = io.BytesIO()
    img.save(buf, format="JPEG")
    return buf.getvalue()


def rule_dataset(n: int = 200, seed: int = 3) -> TabularDataset:
    """Noiseless binary rule over two uniform features plus one distractor."""
    rng = random.Random(seed)
    rows = []
    for _ in range(n):
        x1 = rng.uniform(0.0, 1.0)
        x2 = rng.uniform(0.0, 1.0)
        x3 = rng.uniform(0.0, 1.0)
        y = 1.0 if (x1 > 0.5 and x2 < 0.7) else 0.0
        rows.append([f"{x1:.6f}", f"{x2:.6f}", f"{x3:.6f}", str(int(y))])
    return TabularDataset.from_rows(["x1", "x2", "x3", "y"], rows)


class _EmbedHandler(BaseHTTPRequestHandler):
    """Serves the fallback embedder's vectors over the remote wire protocol."""

    encoder = FallbackEmbedder()
    model_name = "trigram-mock"
    dim_override: int | None = None
    request_log: list[int] = []

    def log_message(self, *args):  # keep pytest output clean
        pass

    def _send_json(self, status: int, doc: dict):
        body = json.dumps(doc).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/health":
            dim = self.dim_override if self.dim_override is not None else 768
            self._send_json(200, {"model": self.model_name, "dim": dim})
        else:
            self._send_json(404, {"error": "not found"})

    def do_POST(self):
        if self.path != "/embed":
            self._send_json(404, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        doc = json.loads(self.rfile.read(length) or b"{}")
        texts = doc.get("texts", [])
        type(self).request_log.append(len(texts))
        vectors = [v.tolist() for v in self.encoder.embed(texts)]
        if self.dim_override is not None:
            vectors = [v[: self.dim_override] for v in vectors]
        self._send_json(200, {"vectors": vectors})


def start_embed_server(dim_override: int | None = None):
    """Returns (base_url, request_log, shutdown)."""

    class Handler(_EmbedHandler):
        pass

    Handler.dim_override = dim_override
    Handler.request_log = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{server.server_port}"

    def shutdown():
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)

    return url, Handler.request_log, shutdown


@pytest.fixture
def embed_server():
    url, log, shutdown = start_embed_server()
    yield url, log
    shutdown()
