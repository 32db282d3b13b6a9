"""The black-box boundary.

Attacks see a target model only through :meth:`Oracle.classify`, which takes a
uint8 image and returns a label. Every transmitted request is counted in a
:class:`QueryLedger`.

Three kinds of oracle are provided: :class:`LocalOracle` (in-process model),
:class:`HttpOracle` (client of the mock service started by
:func:`serve_mock_service`) and :class:`CloudOracle` (vendor adapters for the
public image-labelling APIs, see :func:`cloud_client`).
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import requests
import torch

from .images import as_uint8, decode_png, encode_png
from .models import Classifier, to_tensor

log = logging.getLogger(__name__)


class OracleError(RuntimeError):
    retryable = False


class OracleTransportError(OracleError):
    """The request may not have reached the service; safe to retry."""

    retryable = True


class OracleRequestError(OracleError):
    """The service rejected the request (bad image, bad payload)."""


class UnsupportedImageError(OracleRequestError, ValueError):
    pass


class ConfigurationError(OracleError):
    pass


class VendorError(OracleError):
    def __init__(self, status: int, body):
        super().__init__(f"vendor returned HTTP {status}: {body}")
        self.status = status
        self.body = body


class RateLimitedError(VendorError):
    retryable = True


class ServiceStartupError(OSError):
    pass


@dataclass(frozen=True)
class OracleVerdict:
    label: str
    scores: Optional[Tuple[float, ...]] = None
    raw_label: Optional[str] = None


class QueryLedger:
    """Thread-safe per-image query counts."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: Counter = Counter()

    def record(self, image_id: str) -> int:
        with self._lock:
            self._counts[str(image_id)] += 1
            return self._counts[str(image_id)]

    def count(self, image_id: str) -> int:
        with self._lock:
            return self._counts.get(str(image_id), 0)

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def counts(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def __repr__(self):
        return f"QueryLedger(images={len(self._counts)}, total={self.total})"


class Oracle:
    """Base class; subclasses implement ``_classify`` and call ``_transmit``."""

    def __init__(self, ledger: Optional[QueryLedger] = None):
        self.ledger = ledger if ledger is not None else QueryLedger()

    def _transmit(self, image_id: str):
        self.ledger.record(image_id)

    def classify(self, x, image_id: str) -> OracleVerdict:
        return self._classify(as_uint8(x), str(image_id))

    def _classify(self, x: np.ndarray, image_id: str) -> OracleVerdict:
        raise NotImplementedError


def _verdict_from_logits(model: Classifier, z: torch.Tensor, with_scores: bool) -> OracleVerdict:
    idx = int(torch.argmax(z))
    scores = None
    if with_scores:
        scores = tuple(float(s) for s in torch.softmax(z.double(), dim=0))
    return OracleVerdict(model.class_names[idx], scores)


class LocalOracle(Oracle):
    """An in-process model behind the label-only interface.

    ``defense`` (any callable mapping a uint8 image to a uint8 image) runs on
    every received image before the model sees it.
    """

    def __init__(self, model: Classifier, ledger=None, return_scores: bool = False, defense=None):
        super().__init__(ledger)
        self._model = model
        self._scores = return_scores
        self._defense = defense

    @property
    def input_shape(self):
        return self._model.input_shape

    def _classify(self, x, image_id):
        if x.shape != self._model.input_shape:
            raise UnsupportedImageError(f"oracle accepts {self._model.input_shape} images, got {x.shape}")
        self._transmit(image_id)
        if self._defense is not None:
            x = self._defense(x)
        with torch.no_grad():
            z = self._model.logits(to_tensor(x, self._model.dtype))[0]
        return _verdict_from_logits(self._model, z, self._scores)


# ---------------------------------------------------------------- HTTP mock


def encode_payload(x) -> bytes:
    return json.dumps({"image_b64": base64.b64encode(encode_png(x)).decode("ascii")}).encode()


def _decode_request(body: bytes) -> np.ndarray:
    try:
        payload = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise OracleRequestError(f"body is not JSON: {exc}") from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("image_b64"), str):
        raise OracleRequestError("body must be an object with an 'image_b64' string")
    try:
        data = base64.b64decode(payload["image_b64"], validate=True)
    except (binascii.Error, ValueError) as exc:
        raise OracleRequestError(f"malformed base64: {exc}") from exc
    try:
        return decode_png(data)
    except (OSError, ValueError) as exc:
        raise OracleRequestError(f"image is not a readable PNG: {exc}") from exc


class MockService:
    """Handle for a running mock classification service."""

    def __init__(self, server: ThreadingHTTPServer, oracle: LocalOracle):
        self._server = server
        self.oracle = oracle
        self._thread = threading.Thread(target=server.serve_forever, name="mock-oracle", daemon=True)
        self._thread.start()

    @property
    def address(self) -> Tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    @property
    def ledger(self) -> QueryLedger:
        return self.oracle.ledger

    def close(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _make_handler(oracle: LocalOracle):
    class Handler(BaseHTTPRequestHandler):
        def _reply(self, status: int, obj):
            body = json.dumps(obj).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            if self.path != "/classify":
                self._reply(404, {"error": f"no route {self.path}"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length)
            try:
                x = _decode_request(body)
                verdict = oracle.classify(x, self.headers.get("X-Image-Id", "anonymous"))
            except OracleRequestError as exc:
                self._reply(400, {"error": str(exc)})
                return
            out = {"label": verdict.label}
            if verdict.scores is not None:
                out["scores"] = list(verdict.scores)
            self._reply(200, out)

        def log_message(self, fmt, *args):
            log.debug("mock service: " + fmt, *args)

    return Handler


def serve_mock_service(model: Classifier, bind=("127.0.0.1", 0), return_scores: bool = False, defense=None) -> MockService:
    """Start the HTTP service in a background thread.

    ``bind`` is ``(host, port)`` or ``"host:port"``; port 0 picks a free port.
    """
    if isinstance(bind, str):
        host, _, port = bind.rpartition(":")
        bind = (host or "127.0.0.1", int(port))
    oracle = LocalOracle(model, return_scores=return_scores, defense=defense)
    try:
        server = ThreadingHTTPServer(tuple(bind), _make_handler(oracle))
    except OSError as exc:
        raise ServiceStartupError(f"cannot bind {bind[0]}:{bind[1]}: {exc}") from exc
    server.daemon_threads = True
    return MockService(server, oracle)


class HttpOracle(Oracle):
    """Client for the mock service wire protocol."""

    def __init__(self, url: str, ledger=None, timeout: float = 10.0, session: Optional[requests.Session] = None):
        super().__init__(ledger)
        self.url = url.rstrip("/")
        self.timeout = timeout
        self._session = session or requests.Session()

    def _classify(self, x, image_id):
        payload = encode_payload(x)
        self._transmit(image_id)
        try:
            resp = self._session.post(
                self.url + "/classify",
                data=payload,
                headers={"Content-Type": "application/json", "X-Image-Id": image_id},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise OracleTransportError(f"request to {self.url} failed: {exc}") from exc
        if resp.status_code == 400:
            raise OracleRequestError(resp.json().get("error", resp.text))
        if resp.status_code != 200:
            raise OracleTransportError(f"HTTP {resp.status_code} from {self.url}")
        body = resp.json()
        scores = body.get("scores")
        return OracleVerdict(body["label"], tuple(scores) if scores is not None else None)


# ---------------------------------------------------------------- cloud vendors


@dataclass
class VendorRequest:
    method: str
    url: str
    headers: Dict[str, str] = field(default_factory=dict)
    body: object = None


# (status, decoded JSON body)
Transport = Callable[[VendorRequest], Tuple[int, object]]


def requests_transport(req: VendorRequest, timeout: float = 30.0) -> Tuple[int, object]:
    kwargs = {"headers": req.headers, "timeout": timeout}
    if isinstance(req.body, (bytes, bytearray)):
        kwargs["data"] = req.body
    else:
        kwargs["json"] = req.body
    try:
        resp = requests.request(req.method, req.url, **kwargs)
    except requests.RequestException as exc:
        raise OracleTransportError(str(exc)) from exc
    try:
        return resp.status_code, resp.json()
    except ValueError:
        return resp.status_code, resp.text


class VendorAdapter:
    """Request construction and response parsing for one vendor API."""

    name = ""
    credential_env: Sequence[str] = ()

    def credentials_from_env(self, environ: Mapping[str, str]) -> Dict[str, str]:
        missing = [k for k in self.credential_env if not environ.get(k)]
        if missing:
            raise ConfigurationError(f"{self.name} needs environment variables {', '.join(missing)}")
        return {k: environ[k] for k in self.credential_env}

    def check_credentials(self, creds: Mapping[str, str]):
        missing = [k for k in self.credential_env if not creds.get(k)]
        if missing:
            raise ConfigurationError(f"{self.name} credentials lack {', '.join(missing)}")

    def build_request(self, png: bytes, creds: Mapping[str, str]) -> VendorRequest:
        raise NotImplementedError

    def parse_labels(self, body) -> List[Tuple[str, float]]:
        raise NotImplementedError

    def default_transport(self, creds) -> Transport:
        return requests_transport


class GoogleVision(VendorAdapter):
    name = "google"
    credential_env = ("GOOGLE_API_KEY",)

    def build_request(self, png, creds):
        return VendorRequest(
            "POST",
            f"https://vision.googleapis.com/v1/images:annotate?key={creds['GOOGLE_API_KEY']}",
            {"Content-Type": "application/json"},
            {"requests": [{"image": {"content": base64.b64encode(png).decode()},
                           "features": [{"type": "LABEL_DETECTION", "maxResults": 10}]}]},
        )

    def parse_labels(self, body):
        ann = body["responses"][0].get("labelAnnotations", [])
        return [(a["description"], float(a.get("score", 0.0))) for a in ann]


class AzureVision(VendorAdapter):
    name = "microsoft"
    credential_env = ("AZURE_VISION_KEY", "AZURE_VISION_ENDPOINT")

    def build_request(self, png, creds):
        return VendorRequest(
            "POST",
            creds["AZURE_VISION_ENDPOINT"].rstrip("/") + "/vision/v3.2/analyze?visualFeatures=Tags",
            {"Ocp-Apim-Subscription-Key": creds["AZURE_VISION_KEY"], "Content-Type": "application/octet-stream"},
            png,
        )

    def parse_labels(self, body):
        return [(t["name"], float(t.get("confidence", 0.0))) for t in body.get("tags", [])]


class ClarifaiVision(VendorAdapter):
    name = "clarifai"
    credential_env = ("CLARIFAI_API_KEY",)
    model_id = "general-image-recognition"

    def build_request(self, png, creds):
        return VendorRequest(
            "POST",
            f"https://api.clarifai.com/v2/models/{self.model_id}/outputs",
            {"Authorization": f"Key {creds['CLARIFAI_API_KEY']}", "Content-Type": "application/json"},
            {"inputs": [{"data": {"image": {"base64": base64.b64encode(png).decode()}}}]},
        )

    def parse_labels(self, body):
        concepts = body["outputs"][0]["data"].get("concepts", [])
        return [(c["name"], float(c.get("value", 0.0))) for c in concepts]


class AmazonRekognition(VendorAdapter):
    """DetectLabels. Requests are SigV4-signed, so the default transport goes through boto3."""

    name = "amazon"
    credential_env = ("AWS_ACCESS_KEY_ID", "AWS_SECRET_ACCESS_KEY", "AWS_REGION")

    def build_request(self, png, creds):
        return VendorRequest("POST", "rekognition:DetectLabels", {}, {"Image": {"Bytes": png}, "MaxLabels": 10})

    def parse_labels(self, body):
        return [(lab["Name"], float(lab.get("Confidence", 0.0)) / 100.0) for lab in body.get("Labels", [])]

    def default_transport(self, creds):
        try:
            import boto3
            from botocore.exceptions import ClientError
        except ImportError as exc:
            raise ConfigurationError("the amazon adapter needs boto3, or pass a transport") from exc
        client = boto3.client(
            "rekognition",
            region_name=creds["AWS_REGION"],
            aws_access_key_id=creds["AWS_ACCESS_KEY_ID"],
            aws_secret_access_key=creds["AWS_SECRET_ACCESS_KEY"],
        )

        def transport(req):
            try:
                return 200, client.detect_labels(**req.body)
            except ClientError as exc:
                return exc.response["ResponseMetadata"]["HTTPStatusCode"], exc.response.get("Error")

        return transport


VENDORS: Dict[str, VendorAdapter] = {
    a.name: a for a in (AmazonRekognition(), GoogleVision(), AzureVision(), ClarifaiVision())
}

RETRY_STATUSES = (429, 503)


class CloudOracle(Oracle):
    """Maps a vendor's label list to a verdict on its top-scoring label.

    ``synonyms`` maps a canonical label to the vendor labels that mean it,
    e.g. ``{"cat": ["cat", "felidae", "kitten"]}`` (case-insensitive). A top
    label with no mapping is reported verbatim.
    """

    def __init__(
        self,
        adapter: VendorAdapter,
        credentials: Mapping[str, str],
        transport: Optional[Transport] = None,
        synonyms: Optional[Mapping[str, Iterable[str]]] = None,
        max_attempts: int = 4,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        ledger=None,
    ):
        super().__init__(ledger)
        adapter.check_credentials(credentials)
        self.adapter = adapter
        self._creds = dict(credentials)
        self._transport = transport or adapter.default_transport(self._creds)
        self._synonyms = {}
        for canon, names in (synonyms or {}).items():
            for n in list(names) + [canon]:
                self._synonyms[n.lower()] = canon
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sleep = sleep

    def canonical(self, label: str) -> str:
        return self._synonyms.get(label.lower(), label)

    def _classify(self, x, image_id):
        req = self.adapter.build_request(encode_png(x), self._creds)
        for attempt in range(self.max_attempts):
            self._transmit(image_id)
            status, body = self._transport(req)
            if status in RETRY_STATUSES:
                if attempt + 1 < self.max_attempts:
                    delay = self.backoff * 2**attempt
                    log.info("%s rate-limited, retrying in %.1fs", self.adapter.name, delay)
                    self._sleep(delay)
                continue
            if status >= 400:
                raise VendorError(status, body)
            labels = sorted(self.adapter.parse_labels(body), key=lambda p: -p[1])
            if not labels:
                raise VendorError(status, f"no labels in response: {body}")
            top = labels[0][0]
            return OracleVerdict(self.canonical(top), tuple(s for _, s in labels), raw_label=top)
        raise RateLimitedError(status, body)


def cloud_client(vendor: str, credentials: Optional[Mapping[str, str]] = None, environ=None, **kwargs) -> CloudOracle:
    """Oracle handle for a cloud vendor; credentials default to the environment.

    ``vendor`` is one of ``amazon``, ``google``, ``microsoft``, ``clarifai``.
    """
    if vendor not in VENDORS:
        raise ConfigurationError(f"unknown vendor {vendor!r}; choose from {sorted(VENDORS)}")
    adapter = VENDORS[vendor]
    if credentials is None:
        credentials = adapter.credentials_from_env(os.environ if environ is None else environ)
    return CloudOracle(adapter, credentials, **kwargs)
