"""The service: three wire-protocol endpoints in stub or model mode.

Stub mode answers every request deterministically with no model assets:
generate returns a solid-color PNG keyed by (prompt, seed), caption returns
a fixed phrase keyed by the image bytes. Model mode fronts a real generation
stack through the ModelRuntime seam and answers 503 until its load() call
finishes.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import hashlib
import io
from contextlib import asynccontextmanager
from typing import Literal

import anyio.to_thread
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, field_validator

from .config import AdapterConfig, AdapterConfigError, Mode

MAX_SIDE = 4096


class GenerateBody(BaseModel):
    strategy: Literal["mf", "pa", "ce"]
    prompt: str
    seed: int
    resolution: tuple[int, int]
    category: str
    caption: str | None = None
    pose_map_png_b64: str | None = None

    @field_validator("seed")
    @classmethod
    def _seed_non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("resolution")
    @classmethod
    def _resolution_sane(cls, v: tuple[int, int]) -> tuple[int, int]:
        w, h = v
        if not (1 <= w <= MAX_SIDE and 1 <= h <= MAX_SIDE):
            raise ValueError(f"sides must be in [1, {MAX_SIDE}]")
        return v

    @field_validator("pose_map_png_b64")
    @classmethod
    def _pose_map_is_base64(cls, v: str | None) -> str | None:
        if v is not None:
            _decode_b64(v)
        return v


class CaptionBody(BaseModel):
    image_png_b64: str
    instruction: str

    @field_validator("image_png_b64")
    @classmethod
    def _image_is_base64(cls, v: str) -> str:
        _decode_b64(v)
        return v


def _decode_b64(value: str) -> bytes:
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError) as e:
        raise ValueError(f"not valid base64: {e}") from e


def stub_image(prompt: str, seed: int, resolution: tuple[int, int]) -> bytes:
    """Solid-color PNG; the color is a hash of (prompt, seed)."""
    digest = hashlib.sha256(f"{prompt}\x00{seed}".encode()).digest()
    img = Image.new("RGB", resolution, tuple(digest[:3]))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def stub_caption(image_png: bytes) -> str:
    # the caption body carries no category, so key the phrase to the image
    return f"stub caption for image {hashlib.sha256(image_png).hexdigest()[:8]}"


class ModelRuntime:
    """Seam for a real generation stack (model mode only).

    ``load()`` runs once in a worker thread at startup; the service answers
    503 until it returns. ``generate``/``caption`` are called serialized
    (one at a time) since they share one accelerator. Implementations are
    hardware-dependent and live outside this package.
    """

    def load(self) -> None:
        raise NotImplementedError

    def generate(
        self,
        *,
        strategy: str,
        prompt: str,
        caption: str | None,
        seed: int,
        resolution: tuple[int, int],
        category: str,
        pose_map_png: bytes | None,
    ) -> bytes:
        raise NotImplementedError

    def caption(self, image_png: bytes, instruction: str) -> str:
        raise NotImplementedError


def load_model_runtime(config: AdapterConfig) -> ModelRuntime:
    raise AdapterConfigError(
        f"no built-in runtime for generator={config.generator_model!r} / "
        f"captioner={config.captioner_model!r}; model mode needs GPU assets. "
        "Pass a ModelRuntime to create_app(), or run --mode stub."
    )


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(config: AdapterConfig, runtime: ModelRuntime | None = None) -> FastAPI:
    if config.mode is Mode.MODEL and runtime is None:
        runtime = load_model_runtime(config)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if config.mode is Mode.MODEL:
            app.state.load_task = asyncio.create_task(_load_in_background(app))
        yield
        task = getattr(app.state, "load_task", None)
        if task is not None and not task.done():
            task.cancel()

    async def _load_in_background(app: FastAPI) -> None:
        await anyio.to_thread.run_sync(runtime.load)
        app.state.ready = True

    app = FastAPI(lifespan=lifespan)
    app.state.ready = config.mode is Mode.STUB
    app.state.load_error = None
    backend_id = f"genadapter-{config.mode.value}"
    slots = asyncio.Semaphore(config.max_concurrent)  # waiters wake FIFO
    accelerator = asyncio.Lock()

    @app.exception_handler(RequestValidationError)
    async def on_bad_payload(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        field = ".".join(str(p) for p in first["loc"] if p != "body") or "body"
        return _error(400, f"{field}: {first['msg']}")

    def not_ready() -> JSONResponse | None:
        if not app.state.ready:
            return _error(503, "model is loading")
        return None

    @app.get("/v1/health")
    async def health():
        if (resp := not_ready()) is not None:
            return resp
        return {"status": "ok", "mode": config.mode.value}

    @app.post("/v1/generate")
    async def generate(body: GenerateBody):
        if (resp := not_ready()) is not None:
            return resp
        async with slots:
            if config.mode is Mode.STUB:
                png = stub_image(body.prompt, body.seed, body.resolution)
            else:
                pose_map = (
                    _decode_b64(body.pose_map_png_b64)
                    if body.pose_map_png_b64 is not None
                    else None
                )
                try:
                    async with accelerator:
                        png = await anyio.to_thread.run_sync(
                            lambda: runtime.generate(
                                strategy=body.strategy,
                                prompt=body.prompt,
                                caption=body.caption,
                                seed=body.seed,
                                resolution=body.resolution,
                                category=body.category,
                                pose_map_png=pose_map,
                            )
                        )
                except Exception as e:
                    return _error(500, f"generation failed: {e}")
        return {
            "image_png_b64": base64.b64encode(png).decode("ascii"),
            "backend_id": backend_id,
            "seed_echo": body.seed,
        }

    @app.post("/v1/caption")
    async def caption(body: CaptionBody):
        if (resp := not_ready()) is not None:
            return resp
        image_png = _decode_b64(body.image_png_b64)
        async with slots:
            if config.mode is Mode.STUB:
                text = stub_caption(image_png)
            else:
                try:
                    async with accelerator:
                        text = await anyio.to_thread.run_sync(
                            runtime.caption, image_png, body.instruction
                        )
                except Exception as e:
                    return _error(500, f"captioning failed: {e}")
        return {"caption": text}

    return app
