"""Generation backends: deterministic mock, remote HTTP client, batching.

The mock backend is the keystone for desk-scale testing: it rasterizes an
animal-silhouette image whose limbs are capsules along the conditioning
pose and then stamps each joint with its palette marker, so a re-detector
reading exact marker colors recovers the conditioning pose to within 2 px.
Fill colors derive from hash(prompt, seed): same pose with two prompts gives
different pixels but identical joint positions.

The remote backend speaks the wire protocol over httpx. Retries apply only
to timeouts and 5xx responses (seeded generation is idempotent), with
exponential backoff starting at 250 ms, doubling, jittered.
"""

from __future__ import annotations

import enum
import hashlib
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import httpx
import numpy as np
from PIL import Image, ImageDraw

from . import wire
from .conditioning import (
    MARKER_RADIUS,
    Palette,
    PoseMap,
    build_palette,
    decode_keypoints,
)
from .pose import Pose
from .schema import KeypointSchema


class BackendError(RuntimeError):
    pass


class BackendTimeout(BackendError):
    pass


class RemoteError(BackendError):
    def __init__(self, status: int, message: str):
        self.status = status
        self.message = message
        super().__init__(f"remote backend returned {status}: {message}")


class DecodeError(BackendError):
    pass


class Strategy(enum.Enum):
    MF = "mf"
    PA = "pa"
    CE = "ce"


class BackendKind(enum.Enum):
    MOCK = "mock"
    REMOTE = "remote"


@dataclass(frozen=True)
class GenRequest:
    strategy: Strategy
    prompt: str
    seed: int
    resolution: tuple[int, int]
    category: str
    pose_map: PoseMap | None = None
    caption: str | None = None

    def __post_init__(self):
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if self.strategy in (Strategy.MF, Strategy.PA) and self.pose_map is None:
            raise ValueError(f"{self.strategy.value} requests need a pose_map")
        if self.strategy is Strategy.CE and self.caption is None:
            raise ValueError("ce requests need a caption")
        if self.pose_map is not None and (self.pose_map.width, self.pose_map.height) != (w, h):
            raise ValueError(
                f"pose_map {self.pose_map.width}x{self.pose_map.height} "
                f"does not match resolution {w}x{h}"
            )


@dataclass(frozen=True)
class GenResponse:
    image: bytes  # PNG
    backend_id: str
    latency_ms: float
    seed_echo: int


@dataclass(frozen=True)
class BackendDescriptor:
    kind: BackendKind
    endpoint: str | None = None
    max_in_flight: int = 4
    timeout_ms: float = 10_000.0
    retries: int = 2

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.kind is BackendKind.REMOTE and not self.endpoint:
            raise ValueError("remote backend needs an endpoint URL")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


def _seeded_rng(prompt: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}\x00{prompt}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _away_from_palette(color: np.ndarray, palette: Palette) -> tuple[int, int, int]:
    # Exact-color marker decoding only needs inequality; keep a small margin.
    rgb = [int(c) for c in color]
    for ref in palette.keypoint_colors:
        if max(abs(rgb[i] - ref[i]) for i in range(3)) < 2:
            rgb[0] = (ref[0] + 64) % 256
    return (rgb[0], rgb[1], rgb[2])


class MockBackend:
    """In-process generator: capsules along the pose, palette joint markers."""

    backend_id = "mock-capsule-1"
    _CAPSULE_WIDTH = 9

    def __init__(self, schema: KeypointSchema):
        self.schema = schema
        self.palette = build_palette(schema)

    def generate(self, req: GenRequest) -> GenResponse:
        t0 = time.perf_counter()
        w, h = req.resolution
        rng = _seeded_rng(req.prompt, req.seed)
        bg = _away_from_palette(rng.integers(0, 60, size=3), self.palette)
        body = _away_from_palette(rng.integers(90, 256, size=3), self.palette)
        blotch = _away_from_palette(rng.integers(60, 220, size=3), self.palette)
        img = Image.new("RGB", (w, h), bg)
        draw = ImageDraw.Draw(img)
        for _ in range(6):  # prompt/seed-keyed texture
            cx, cy = rng.integers(0, w), rng.integers(0, h)
            r = int(rng.integers(4, max(5, min(w, h) // 6)))
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=blotch)

        joints: dict[int, tuple[float, float]] = {}
        if req.pose_map is not None:
            decoded = decode_keypoints(req.pose_map.pixels, self.schema, self.palette)
            joints = {k: pt for k, pt in enumerate(decoded) if pt is not None}
            cw = self._CAPSULE_WIDTH
            for a, b in self.schema.limbs:
                if a in joints and b in joints:
                    draw.line([joints[a], joints[b]], fill=body, width=cw)
                    for k in (a, b):
                        x, y = joints[k]
                        r = cw // 2
                        draw.ellipse([x - r, y - r, x + r, y + r], fill=body)
            r = MARKER_RADIUS
            for k, (x, y) in joints.items():
                cx, cy = int(round(x)), int(round(y))
                draw.ellipse(
                    [cx - r, cy - r, cx + r, cy + r],
                    fill=self.palette.keypoint_colors[k],
                )
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return GenResponse(
            image=buf.getvalue(),
            backend_id=self.backend_id,
            latency_ms=(time.perf_counter() - t0) * 1000.0,
            seed_echo=req.seed,
        )

    def caption(self, image_png: bytes, instruction: str) -> str:
        tag = hashlib.sha256(image_png).hexdigest()[:8]
        return f"an animal in a plain scene [{tag}]"


class RemoteBackend:
    """Client for a wire-protocol generation service."""

    def __init__(
        self,
        descriptor: BackendDescriptor,
        client: httpx.Client | None = None,
        sleep=time.sleep,
        jitter_rng: np.random.Generator | None = None,
    ):
        if descriptor.kind is not BackendKind.REMOTE:
            raise ValueError("RemoteBackend needs a remote descriptor")
        self.descriptor = descriptor
        self._client = client or httpx.Client(
            base_url=descriptor.endpoint, timeout=descriptor.timeout_ms / 1000.0
        )
        self._sleep = sleep
        self._jitter = jitter_rng or np.random.default_rng()

    def _post_with_retry(self, path: str, payload: dict) -> dict:
        attempts = self.descriptor.retries + 1
        last: BackendError | None = None
        for attempt in range(attempts):
            try:
                resp = self._client.post(path, json=payload)
            except httpx.TimeoutException as e:
                last = BackendTimeout(f"{path} timed out: {e}")
            except httpx.TransportError as e:
                # connection-level faults are not retryable
                raise BackendError(f"{path} transport failure: {e}") from e
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()
                    except ValueError as e:
                        raise DecodeError(f"{path} returned non-JSON body: {e}") from e
                message = _error_message(resp)
                if resp.status_code >= 500:
                    last = RemoteError(resp.status_code, message)
                else:
                    raise RemoteError(resp.status_code, message)
            if attempt < attempts - 1:
                base = 0.25 * (2.0**attempt)
                self._sleep(base * (1.0 + 0.25 * float(self._jitter.uniform())))
        assert last is not None
        raise last

    def generate(self, req: GenRequest) -> GenResponse:
        t0 = time.perf_counter()
        payload = wire.generate_payload(
            strategy=req.strategy.value,
            prompt=req.prompt,
            seed=req.seed,
            resolution=req.resolution,
            category=req.category,
            pose_map_png=req.pose_map.to_png_bytes() if req.pose_map else None,
            caption=req.caption,
        )
        doc = self._post_with_retry(wire.GENERATE_PATH, payload)
        try:
            png, backend_id, seed_echo = wire.parse_generate_response(doc)
            img = wire.decode_png(png)
        except wire.WireFormatError as e:
            raise DecodeError(str(e)) from e
        if img.size != tuple(req.resolution):
            raise DecodeError(
                f"backend returned {img.size[0]}x{img.size[1]}, "
                f"requested {req.resolution[0]}x{req.resolution[1]}"
            )
        if seed_echo != req.seed:
            raise DecodeError(f"seed_echo {seed_echo} != request seed {req.seed}")
        return GenResponse(
            image=png,
            backend_id=backend_id,
            latency_ms=(time.perf_counter() - t0) * 1000.0,
            seed_echo=seed_echo,
        )

    def caption(self, image_png: bytes, instruction: str) -> str:
        doc = self._post_with_retry(
            wire.CAPTION_PATH, wire.caption_payload(image_png, instruction)
        )
        try:
            return wire.parse_caption_response(doc)
        except wire.WireFormatError as e:
            raise DecodeError(str(e)) from e

    def health(self) -> str:
        try:
            resp = self._client.get(wire.HEALTH_PATH)
        except httpx.TimeoutException as e:
            raise BackendTimeout(f"health check timed out: {e}") from e
        except httpx.TransportError as e:
            raise BackendError(f"health check transport failure: {e}") from e
        if resp.status_code != 200:
            raise RemoteError(resp.status_code, _error_message(resp))
        try:
            return wire.parse_health_response(resp.json())
        except (ValueError, wire.WireFormatError) as e:
            raise DecodeError(str(e)) from e

    def close(self) -> None:
        self._client.close()


def _error_message(resp: httpx.Response) -> str:
    try:
        doc = resp.json()
        if isinstance(doc, dict) and "error" in doc:
            return str(doc["error"])
    except ValueError:
        pass
    return resp.text[:200]


def build_backend(
    descriptor: BackendDescriptor,
    schema: KeypointSchema | None = None,
    client: httpx.Client | None = None,
):
    """Construct the backend a descriptor names.

    The mock generator needs the keypoint schema to decode pose maps and
    place markers; remote backends are schema-agnostic.
    """
    if descriptor.kind is BackendKind.MOCK:
        if schema is None:
            raise ValueError("mock backend needs the keypoint schema")
        return MockBackend(schema)
    return RemoteBackend(descriptor, client=client)


def generate(req: GenRequest, backend) -> GenResponse:
    """Single generation call against a constructed backend."""
    return backend.generate(req)


def generate_batch(
    reqs: list[GenRequest],
    backend,
    concurrency_cap: int,
) -> list:
    """Run requests through a bounded worker pool, preserving input order.

    Returns one entry per request: a GenResponse, or the BackendError that
    request ended with. A failing item never affects its neighbors. Per-call
    retry policy lives inside the backend itself.
    """
    if concurrency_cap < 1:
        raise ValueError("concurrency_cap must be >= 1")
    if not reqs:
        return []
    results: list = [None] * len(reqs)

    def run_one(i: int) -> None:
        try:
            results[i] = backend.generate(reqs[i])
        except BackendError as e:
            results[i] = e
        except Exception as e:  # defensive: isolate unexpected failures too
            results[i] = BackendError(f"{type(e).__name__}: {e}")

    with ThreadPoolExecutor(max_workers=concurrency_cap) as pool:
        list(pool.map(run_one, range(len(reqs))))
    return results


def redetect_joints(image_png: bytes, schema: KeypointSchema) -> Pose:
    """Recover the pose from a mock-generated image via its joint markers.

    Found joints come back with v=2 at the marker centroid; missing ones get
    v=0 at the origin. The bbox is the tight box around found joints (padded
    by one marker radius), or a unit box when nothing was found.
    """
    arr = np.asarray(wire.decode_png(image_png).convert("RGB"))
    decoded = decode_keypoints(arr, schema)
    pts = []
    found = []
    for pt in decoded:
        if pt is None:
            pts.append((0.0, 0.0, 0))
        else:
            pts.append((pt[0], pt[1], 2))
            found.append(pt)
    if found:
        xs = [p[0] for p in found]
        ys = [p[1] for p in found]
        pad = float(MARKER_RADIUS)
        bbox = (
            min(xs) - pad,
            min(ys) - pad,
            (max(xs) - min(xs)) + 2 * pad,
            (max(ys) - min(ys)) + 2 * pad,
        )
    else:
        bbox = (0.0, 0.0, 1.0, 1.0)
    return Pose(schema=schema, points=tuple(pts), bbox=bbox)


__all__ = [
    "BackendDescriptor",
    "BackendError",
    "BackendKind",
    "BackendTimeout",
    "DecodeError",
    "GenRequest",
    "GenResponse",
    "MockBackend",
    "RemoteBackend",
    "RemoteError",
    "Strategy",
    "build_backend",
    "generate",
    "generate_batch",
    "redetect_joints",
]
