"""Report-feature providers for the anatomy hypernetwork.

Two providers share one interface, ``provider.feature(image, meta)``:

* :class:`StubProvider` derives a deterministic feature from anatomy metadata
  and simple image statistics;
* :class:`RemoteProvider` posts the image to an external feature service
  over HTTP (wire format below) and never falls back to the stub.

Wire contract (all integers little-endian u32)::

    request   POST /feature
              "PFR1" | d | len(prompt) | prompt utf-8 | raw image (ctphys format)
    response  d | d float64 values
"""

from __future__ import annotations

import errno
import http.server
import itertools
import socket
import struct
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ctphys
from .ctphys import ImageGrid
from .phantom import ATTENUATION_CEILING, BODY_PARTS, AnatomyMetadata

DEFAULT_PROMPT = "Please provide a radiology report of the CT slice."
REQUEST_MAGIC = b"PFR1"
_TISSUE_KEYS = ("fat", "soft", "blood", "bone")


class ReportError(RuntimeError):
    def __init__(self, message, endpoint=None, request_id=None):
        self.endpoint = endpoint
        self.request_id = request_id
        super().__init__(f"{message} [endpoint={endpoint} request={request_id}]")


class ReportTimeout(ReportError):
    pass


class TransportError(ReportError):
    pass


class DimensionMismatch(ReportError):
    pass


class MalformedResponse(ReportError):
    pass


class PortInUse(OSError):
    pass


@dataclass(frozen=True)
class ReportFeature:
    values: np.ndarray
    provider_tag: str


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "stub"
    d: int = 64
    stub_seed: int = 0
    endpoint: str = ""
    timeout_ms: float = 5000.0
    prompt: str = DEFAULT_PROMPT
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in ("stub", "remote"):
            raise ValueError(f"provider kind must be stub or remote, got {self.kind!r}")
        # the anatomy path average-pools features in groups of four
        if self.d < 4 or self.d % 4:
            raise ValueError(f"feature dimension must be a positive multiple of 4, got {self.d}")
        if self.kind == "remote" and not self.timeout_ms > 0:
            raise ValueError("timeout_ms must be > 0")


def unit_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise ValueError("cannot normalize a zero vector")
    # leave vectors already at unit length untouched so normalizing is idempotent
    if abs(norm - 1.0) <= 4 * np.finfo(np.float64).eps:
        return v.copy()
    return v / norm


def _metadata_vector(meta: AnatomyMetadata) -> np.ndarray:
    onehot = [1.0 if meta.body_part == b else 0.0 for b in BODY_PARTS]
    fractions = [float(meta.tissue_fractions.get(t, 0.0)) for t in _TISSUE_KEYS]
    return np.array(onehot + fractions + [float(meta.lesion_count)])


def stub_feature(image: ImageGrid, meta: AnatomyMetadata, cfg: ProviderConfig) -> ReportFeature:
    """Seeded projection of anatomy metadata plus four image statistics."""
    if cfg.d < 8:
        raise ValueError("stub features need d >= 8")
    mv = _metadata_vector(meta)
    proj = np.random.default_rng(cfg.stub_seed).normal(size=(cfg.d - 4, mv.size))
    img = image.data / ATTENUATION_CEILING
    stats = np.array([img.mean(), img.std(), *np.percentile(img, [10, 90])])
    return ReportFeature(unit_normalize(np.concatenate([proj @ mv, stats])), "stub")


class StubProvider:
    def __init__(self, cfg: ProviderConfig):
        self.cfg = cfg
        self.tag = "stub"

    def feature(self, image: ImageGrid, meta: AnatomyMetadata | None = None) -> ReportFeature:
        if meta is None:
            raise ValueError("stub provider needs anatomy metadata")
        return stub_feature(image, meta, self.cfg)


# --------------------------------------------------------------------------
# wire format
# --------------------------------------------------------------------------

def encode_request(image: np.ndarray, d: int, prompt: str) -> bytes:
    p = prompt.encode("utf-8")
    return REQUEST_MAGIC + struct.pack("<II", d, len(p)) + p + ctphys.to_raw_bytes(image)


def decode_request(body: bytes) -> tuple[np.ndarray, int, str]:
    if body[:4] != REQUEST_MAGIC:
        raise ValueError("bad request magic")
    d, plen = struct.unpack_from("<II", body, 4)
    prompt = body[12:12 + plen].decode("utf-8")
    return ctphys.from_raw_bytes(body[12 + plen:]), d, prompt


def encode_response(values) -> bytes:
    v = np.asarray(values, dtype="<f8")
    return struct.pack("<I", v.size) + v.tobytes()


def decode_response(body: bytes, d: int, endpoint=None, request_id=None) -> np.ndarray:
    if len(body) < 4:
        raise MalformedResponse("response shorter than its header", endpoint, request_id)
    (n,) = struct.unpack_from("<I", body)
    if len(body) != 4 + 8 * n:
        raise MalformedResponse(f"header announces {n} values but body has "
                                f"{len(body) - 4} bytes", endpoint, request_id)
    if n != d:
        raise DimensionMismatch(f"expected {d} values, got {n}", endpoint, request_id)
    values = np.frombuffer(body, dtype="<f8", offset=4).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise MalformedResponse("non-finite feature values", endpoint, request_id)
    return values


class RemoteProvider:
    """HTTP client for an external report-feature service."""

    _ids = itertools.count(1)

    def __init__(self, cfg: ProviderConfig):
        if not cfg.endpoint:
            raise ValueError("remote provider needs an endpoint")
        self.cfg = cfg
        self.tag = f"remote:{cfg.endpoint}"
        self._slots = threading.BoundedSemaphore(max(1, cfg.max_in_flight))

    def feature(self, image: ImageGrid, meta: AnatomyMetadata | None = None) -> ReportFeature:
        return remote_feature(image, self.cfg, self._slots)


def remote_feature(image: ImageGrid, cfg: ProviderConfig, slots=None) -> ReportFeature:
    request_id = f"{next(RemoteProvider._ids):08d}"
    url = cfg.endpoint.rstrip("/") + "/feature"
    req = urllib.request.Request(
        url, data=encode_request(image.data, cfg.d, cfg.prompt), method="POST",
        headers={"Content-Type": "application/octet-stream", "X-Request-Id": request_id})
    slots = slots or threading.BoundedSemaphore(1)
    with slots:
        try:
            with urllib.request.urlopen(req, timeout=cfg.timeout_ms / 1000.0) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            raise TransportError(f"HTTP status {exc.code}", cfg.endpoint, request_id) from exc
        except (socket.timeout, TimeoutError) as exc:
            raise ReportTimeout(f"no response within {cfg.timeout_ms} ms",
                                cfg.endpoint, request_id) from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise ReportTimeout(f"no response within {cfg.timeout_ms} ms",
                                    cfg.endpoint, request_id) from exc
            raise TransportError(str(exc.reason), cfg.endpoint, request_id) from exc
        except OSError as exc:
            raise TransportError(str(exc), cfg.endpoint, request_id) from exc
    values = decode_response(body, cfg.d, cfg.endpoint, request_id)
    return ReportFeature(unit_normalize(values), f"remote:{cfg.endpoint}")


def make_provider(cfg: ProviderConfig):
    return StubProvider(cfg) if cfg.kind == "stub" else RemoteProvider(cfg)


# --------------------------------------------------------------------------
# mock feature service
# --------------------------------------------------------------------------

class MockServer:
    """In-process feature service speaking the wire contract.

    ``behavior`` is ``"echo"`` (reply with ``vector``, or with
    ``responder(image, d, prompt)`` when given), ``"delay"`` (echo after
    ``delay_ms``) or ``"malform"`` (reply with a truncated body).
    """

    def __init__(self, port: int = 0, behavior: str = "echo", vector=None,
                 delay_ms: float = 0.0, responder: Callable | None = None):
        if behavior not in ("echo", "delay", "malform"):
            raise ValueError(f"unknown behavior {behavior!r}")
        self.behavior = behavior
        self.vector = None if vector is None else np.asarray(vector, dtype=np.float64)
        self.delay_ms = delay_ms
        self.responder = responder
        self.requests = 0
        self._lock = threading.Lock()
        handler = self._make_handler()
        try:
            self._server = http.server.ThreadingHTTPServer(("127.0.0.1", port), handler)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"port {port} is already in use") from exc
            raise
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        self._closed = False

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def _reply(self, body: bytes) -> tuple[int, bytes]:
        image, d, prompt = decode_request(body)
        if self.behavior == "delay":
            time.sleep(self.delay_ms / 1000.0)
        if self.responder is not None:
            values = self.responder(image, d, prompt)
        elif self.vector is not None:
            values = self.vector
        else:
            values = np.ones(d)
        payload = encode_response(values)
        if self.behavior == "malform":
            payload = payload[:-3]
        return 200, payload

    def _make_handler(self):
        server = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                with server._lock:
                    server.requests += 1
                if self.path != "/feature":
                    self.send_error(404)
                    return
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                try:
                    status, payload = server._reply(body)
                except ValueError:
                    self.send_error(400)
                    return
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/octet-stream")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        return Handler

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._server.shutdown()
            self._server.server_close()
            self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def mock_server(port: int = 0, behavior: str = "echo", **kw) -> MockServer:
    return MockServer(port, behavior, **kw)
