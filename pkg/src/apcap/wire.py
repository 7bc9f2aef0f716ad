"""Wire protocol for remote generation backends (HTTP/1.1 + JSON).

Endpoints:
  POST /v1/generate  {strategy, prompt, caption?, seed, resolution:[w,h],
                      category, pose_map_png_b64?}
                     -> 200 {image_png_b64, backend_id, seed_echo}
  POST /v1/caption   {image_png_b64, instruction} -> 200 {caption}
  GET  /v1/health    -> 200 {status:"ok", mode:"stub"|"model"}
Errors come back as 4xx/5xx with a JSON body {error: string}.

This module is transport-agnostic: payload builders/parsers work on plain
dicts, and the conformance checker drives any server through caller-supplied
``post``/``get`` callables, so it can run against a live socket, an ASGI
test client, or an in-process fake.
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass, field

from PIL import Image

GENERATE_PATH = "/v1/generate"
CAPTION_PATH = "/v1/caption"
HEALTH_PATH = "/v1/health"

STRATEGY_VALUES = ("mf", "pa", "ce")
MODES = ("stub", "model")


class WireFormatError(ValueError):
    pass


def generate_payload(
    strategy: str,
    prompt: str,
    seed: int,
    resolution: tuple[int, int],
    category: str,
    pose_map_png: bytes | None = None,
    caption: str | None = None,
) -> dict:
    if strategy not in STRATEGY_VALUES:
        raise WireFormatError(f"strategy must be one of {STRATEGY_VALUES}")
    doc = {
        "strategy": strategy,
        "prompt": prompt,
        "seed": int(seed),
        "resolution": [int(resolution[0]), int(resolution[1])],
        "category": category,
    }
    if caption is not None:
        doc["caption"] = caption
    if pose_map_png is not None:
        doc["pose_map_png_b64"] = base64.b64encode(pose_map_png).decode("ascii")
    return doc


def _require(doc: dict, key: str, kind) -> object:
    if not isinstance(doc, dict) or key not in doc:
        raise WireFormatError(f"response missing field {key!r}")
    value = doc[key]
    if not isinstance(value, kind):
        raise WireFormatError(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def parse_generate_response(doc: dict) -> tuple[bytes, str, int]:
    """-> (png_bytes, backend_id, seed_echo); raises WireFormatError."""
    b64 = _require(doc, "image_png_b64", str)
    backend_id = _require(doc, "backend_id", str)
    seed_echo = _require(doc, "seed_echo", int)
    try:
        png = base64.b64decode(b64, validate=True)
    except Exception as e:
        raise WireFormatError(f"image_png_b64 is not valid base64: {e}") from e
    return png, backend_id, int(seed_echo)


def caption_payload(image_png: bytes, instruction: str) -> dict:
    return {
        "image_png_b64": base64.b64encode(image_png).decode("ascii"),
        "instruction": instruction,
    }


def parse_caption_response(doc: dict) -> str:
    return str(_require(doc, "caption", str))


def parse_health_response(doc: dict) -> str:
    status = _require(doc, "status", str)
    mode = _require(doc, "mode", str)
    if status != "ok":
        raise WireFormatError(f"health status {status!r} != 'ok'")
    if mode not in MODES:
        raise WireFormatError(f"health mode {mode!r} not in {MODES}")
    return mode


def decode_png(png: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(png))
        img.load()
        return img
    except Exception as e:
        raise WireFormatError(f"payload is not decodable PNG: {e}") from e


# ---------------------------------------------------------------------------
# Conformance corpus

_TINY_PNG = None


def _tiny_png() -> bytes:
    global _TINY_PNG
    if _TINY_PNG is None:
        buf = io.BytesIO()
        Image.new("RGB", (8, 8), (10, 200, 40)).save(buf, format="PNG")
        _TINY_PNG = buf.getvalue()
    return _TINY_PNG


def conformance_requests() -> list[tuple[str, dict]]:
    """Named well-formed generate requests covering the strategy space."""

    def pose_map() -> bytes:
        buf = io.BytesIO()
        img = Image.new("RGB", (64, 64), (0, 0, 0))
        img.putpixel((20, 20), (255, 0, 0))
        img.save(buf, format="PNG")
        return buf.getvalue()

    return [
        (
            "mf-with-pose-map",
            generate_payload("mf", "A zebra is in the background", 7, (64, 64), "zebra", pose_map()),
        ),
        (
            "pa-with-pose-map",
            generate_payload("pa", "A spotted horse walking is in the background", 11, (64, 64), "horse", pose_map()),
        ),
        (
            "ce-caption-only",
            generate_payload(
                "ce", "a dog stands on grass", 13, (48, 48), "dog", caption="a dog stands on grass"
            ),
        ),
        (
            "ce-caption-and-pose",
            generate_payload(
                "ce", "a cat sits", 17, (64, 48), "cat", pose_map(), caption="a cat sits"
            ),
        ),
    ]


@dataclass
class ConformanceResult:
    passed: list = field(default_factory=list)
    failed: list = field(default_factory=list)  # (check_name, detail)

    @property
    def ok(self) -> bool:
        return not self.failed


def run_conformance(post, get) -> ConformanceResult:
    """Drive a server through the protocol and property checks.

    ``post(path, json_dict) -> (status_code, json_doc)``
    ``get(path) -> (status_code, json_doc)``
    """
    result = ConformanceResult()

    def check(name: str, fn) -> None:
        try:
            fn()
            result.passed.append(name)
        except AssertionError as e:
            result.failed.append((name, str(e) or "assertion failed"))
        except Exception as e:
            result.failed.append((name, f"{type(e).__name__}: {e}"))

    def check_health():
        status, doc = get(HEALTH_PATH)
        assert status == 200, f"health returned {status}"
        parse_health_response(doc)

    check("health-ok", check_health)

    for name, payload in conformance_requests():
        def check_generate(payload=payload):
            status, doc = post(GENERATE_PATH, payload)
            assert status == 200, f"generate returned {status}: {doc}"
            png, backend_id, seed_echo = parse_generate_response(doc)
            assert seed_echo == payload["seed"], (
                f"seed_echo {seed_echo} != request seed {payload['seed']}"
            )
            assert backend_id, "backend_id is empty"
            img = decode_png(png)
            assert list(img.size) == payload["resolution"], (
                f"image size {img.size} != requested {payload['resolution']}"
            )

        check(f"generate-{name}", check_generate)

    def check_determinism():
        _, payload = conformance_requests()[0]
        status1, doc1 = post(GENERATE_PATH, payload)
        status2, doc2 = post(GENERATE_PATH, payload)
        assert status1 == 200 and status2 == 200, f"statuses {status1}/{status2}"
        png1, _, _ = parse_generate_response(doc1)
        png2, _, _ = parse_generate_response(doc2)
        assert png1 == png2, "same request produced different image bytes"

    check("generate-deterministic", check_determinism)

    def check_malformed_resolution():
        _, payload = conformance_requests()[0]
        bad = dict(payload)
        bad["resolution"] = "256x256"
        status, doc = post(GENERATE_PATH, bad)
        assert status == 400, f"malformed resolution returned {status}"
        message = str(doc.get("error", ""))
        assert "resolution" in message, f"400 body does not name the field: {doc}"

    check("malformed-resolution-400", check_malformed_resolution)

    def check_missing_prompt():
        _, payload = conformance_requests()[0]
        bad = {k: v for k, v in payload.items() if k != "prompt"}
        status, doc = post(GENERATE_PATH, bad)
        assert status == 400, f"missing prompt returned {status}"
        assert "prompt" in str(doc.get("error", "")), f"400 body does not name the field: {doc}"

    check("missing-prompt-400", check_missing_prompt)

    def check_caption():
        status, doc = post(CAPTION_PATH, caption_payload(_tiny_png(), "Describe the animal."))
        assert status == 200, f"caption returned {status}: {doc}"
        text = parse_caption_response(doc)
        assert text.strip(), "caption is empty"

    check("caption-ok", check_caption)

    def check_caption_malformed():
        status, doc = post(CAPTION_PATH, {"instruction": "Describe."})
        assert status == 400, f"missing image returned {status}"

    check("caption-missing-image-400", check_caption_malformed)

    return result
