"""Client for an EXACT-style annotation server.

Wire format (JSON over HTTP, bearer-token auth)::

    GET  /api/slides?set={id}              -> [{slide_id, width, height, revision}]
    GET  /api/slides/{id}/screened         -> [[x, y, w, h], ...]
    GET  /api/slides/{id}/annotations      -> [{id, cx, cy, r, class, annotator}]
    POST /api/slides/{id}/predictions      [{client_id, class, score, bbox}]
                                           -> [{client_id, server_id}]
"""

import logging
import threading
import time
import uuid
from dataclasses import dataclass, field

import requests

from ..errors import AuthError, PartialUpload, SchemaError, TransportError, ValidationError
from ..geometry import Rect, ScreenMap
from ..model import Annotation, ClassRegistry, DatasetManifest, SlideManifest, validate

log = logging.getLogger(__name__)

UPLOAD_BATCH = 1000
PREDICTION_NAMESPACE = uuid.UUID("6f1c1e8e-2b0a-4f43-9a55-5d0f6c1f4b7e")


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff_base: float = 0.5

    def delay(self, attempt):
        return self.backoff_base * (2 ** attempt)


@dataclass(frozen=True)
class ServerConfig:
    base_url: str
    token: str = ""
    image_set: str = ""
    timeout: float = 10.0
    retry: RetryPolicy = RetryPolicy()

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValidationError([f"timeout must be positive, got {self.timeout}"])


@dataclass
class SlideSyncState:
    revision: int = 0
    screened: list = field(default_factory=list)
    annotation_count: int = 0


@dataclass
class SyncState:
    slides: dict = field(default_factory=dict)
    pending: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    retries: int = 0


def prediction_client_id(slide_id, det, class_name):
    """Stable id for a detection so repeated uploads are recognised."""
    key = f"{slide_id}|{det.id}|{class_name}|{det.score!r}|{det.x!r},{det.y!r},{det.w!r},{det.h!r}"
    return str(uuid.uuid5(PREDICTION_NAMESPACE, key))


class ExactClient:
    def __init__(self, cfg, session=None, sleep=time.sleep, clock=time.monotonic, state=None):
        self.cfg = cfg
        self.session = session or requests.Session()
        self.sleep = sleep
        self.clock = clock
        self.state = state or SyncState()
        self._push_locks = {}
        self._lock = threading.Lock()

    def _url(self, path):
        return self.cfg.base_url.rstrip("/") + path

    def request(self, method, path, params=None, body=None):
        """One logical request with bounded retries.

        The total time spent, attempts and backoff included, never exceeds
        ``max_retries * timeout``.
        """
        policy = self.cfg.retry
        budget = max(policy.max_retries, 1) * self.cfg.timeout
        started = self.clock()
        headers = {"Authorization": f"Bearer {self.cfg.token}"}
        attempt = 0
        while True:
            remaining = budget - (self.clock() - started)
            if remaining <= 0:
                raise TransportError(f"{method} {path}: time budget of {budget:g}s exhausted")
            try:
                resp = self.session.request(method, self._url(path), params=params, json=body, headers=headers,
                                            timeout=min(self.cfg.timeout, remaining))
            except requests.RequestException as exc:
                problem = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"{method} {path}: server refused credentials ({resp.status_code})")
                if resp.status_code < 400:
                    try:
                        return resp.json()
                    except ValueError:
                        raise SchemaError(f"{method} {path}: response is not JSON") from None
                if resp.status_code < 500 and resp.status_code != 429:
                    raise TransportError(f"{method} {path}: HTTP {resp.status_code}")
                problem = f"HTTP {resp.status_code}"
            if attempt >= policy.max_retries:
                raise TransportError(f"{method} {path}: {problem} after {attempt} retries")
            delay = policy.delay(attempt)
            if self.clock() - started + delay >= budget:
                raise TransportError(f"{method} {path}: {problem}; no time left to retry")
            attempt += 1
            with self._lock:
                self.state.retries += 1
            log.warning("%s %s failed (%s); retry %d in %.2fs", method, path, problem, attempt, delay)
            self.sleep(delay)

    def pull_dataset(self, patch_size=1024, seed=0, epoch_length=500, default_role="train"):
        """Download screened regions and annotations into a validated manifest.

        Annotations outside the screened area (or malformed) are skipped and
        listed in ``state.rejected``.
        """
        listing = self.request("GET", "/api/slides", params={"set": self.cfg.image_set})
        if not isinstance(listing, list):
            raise SchemaError("slide listing must be a JSON array")
        registry = ClassRegistry()
        slides = []
        for item in listing:
            try:
                sid = str(item["slide_id"])
                width, height = int(item["width"]), int(item["height"])
                revision = int(item.get("revision", 0))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"bad slide record {item!r}: {exc}") from None
            slides.append(self._pull_slide(sid, width, height, revision, item.get("split_role", default_role),
                                           registry))
        manifest = DatasetManifest(slides=slides, patch_size=patch_size, seed=seed, epoch_length=epoch_length,
                                   classes=registry)
        if self.state.rejected:
            log.warning("rejected %d annotation(s) during pull", len(self.state.rejected))
        log.info("pulled %d slides, %d annotations (%d retries)", len(slides), manifest.n_annotations,
                 self.state.retries)
        return validate(manifest)

    def _pull_slide(self, sid, width, height, revision, role, registry):
        prev = self.state.slides.get(sid)
        if prev is not None and revision < prev.revision:
            raise SchemaError(f"slide {sid!r}: revision went backwards ({prev.revision} -> {revision})")
        screened = self.request("GET", f"/api/slides/{sid}/screened")
        try:
            rects = [Rect(*map(int, r)) for r in screened]
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"slide {sid!r}: bad screened rectangles: {exc}") from None
        screen_map = ScreenMap(sid, rects)
        records = self.request("GET", f"/api/slides/{sid}/annotations")
        if not isinstance(records, list):
            raise SchemaError(f"slide {sid!r}: annotations must be a JSON array")
        anns = []
        for rec in records:
            try:
                label = rec["class"]
                cls = registry.register(label) if isinstance(label, str) else registry.id_of(label)
                a = Annotation(int(rec["id"]), sid, int(rec["cx"]), int(rec["cy"]), int(rec.get("r", 25)), cls,
                               str(rec.get("annotator", "")))
            except (KeyError, TypeError, ValueError) as exc:
                self.state.rejected.append({"slide_id": sid, "id": rec.get("id") if isinstance(rec, dict) else None,
                                            "reason": f"malformed record: {exc}"})
                continue
            if not (0 <= a.cx < width and 0 <= a.cy < height) or not screen_map.contains_points(a.cx, a.cy):
                self.state.rejected.append({"slide_id": sid, "id": a.id, "reason": "outside screened area"})
                continue
            if a.r <= 0:
                self.state.rejected.append({"slide_id": sid, "id": a.id, "reason": "non-positive radius"})
                continue
            anns.append(a)
        self.state.slides[sid] = SlideSyncState(revision, [r.as_list() for r in rects], len(anns))
        return SlideManifest(sid, width, height, screen_map, anns, None, role)

    def push_predictions(self, slide_id, detections, class_names, min_score=0.0):
        """Upload detections scoring at least ``min_score`` in batches.

        Returns the receipt: ``[(client_id, server_id), ...]`` in upload order.
        """
        with self._lock:
            lock = self._push_locks.setdefault(slide_id, threading.Lock())
        with lock:
            chosen = [d for d in detections if d.score >= min_score]
            payload = [
                {"client_id": prediction_client_id(slide_id, d, class_names[d.cls]),
                 "class": class_names[d.cls], "score": d.score, "bbox": [d.x, d.y, d.w, d.h]}
                for d in chosen
            ]
            self.state.pending = list(payload)
            receipt = []
            for start in range(0, len(payload), UPLOAD_BATCH):
                chunk = payload[start:start + UPLOAD_BATCH]
                try:
                    reply = self.request("POST", f"/api/slides/{slide_id}/predictions", body=chunk)
                except TransportError as exc:
                    raise PartialUpload(str(exc), receipt) from exc
                try:
                    got = [(r["client_id"], r["server_id"]) for r in reply]
                except (KeyError, TypeError) as exc:
                    raise SchemaError(f"bad upload reply: {exc}") from None
                if [c for c, _ in got] != [p["client_id"] for p in chunk]:
                    raise SchemaError("upload reply does not acknowledge the posted batch")
                receipt.extend(got)
                self.state.pending = payload[start + len(chunk):]
            return receipt


def pull_dataset(cfg, **kwargs):
    return ExactClient(cfg).pull_dataset(**kwargs)


def push_predictions(cfg, slide_id, detections, class_names, min_score=0.0):
    return ExactClient(cfg).push_predictions(slide_id, detections, class_names, min_score)
