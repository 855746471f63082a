"""Reference point-prediction service.

Speaks the same protocol a hosted multimodal point model would:
``POST /point`` with ``{"prompt", "image_png_base64"}`` returns
``{"points": [[u, v], ...]}`` in normalized image coordinates.

It locates targets by color: each prompt text maps to the albedo of the
primitives it names, and a pixel matches when its color is a shaded copy of
that albedo. Fixed answers per prompt can be configured for protocol tests.
"""
from __future__ import annotations

import contextlib
import socket
import threading
import time

import numpy as np
from fastapi import FastAPI
from pydantic import BaseModel, ConfigDict

from .pointsource import decode_png
from .synthscene import SyntheticScene


class PointRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    prompt: str
    image_png_base64: str


class PointResponse(BaseModel):
    points: list[list[float]]


class ServiceConfig(BaseModel):
    latency: float = 0.0
    fixed: dict[str, list] = {}
    colors: dict[str, list[list[float]]] = {}
    tolerance: float = 0.04
    min_shade: float = 0.3


def colors_from_scene(scene: SyntheticScene) -> dict[str, list[list[float]]]:
    """Prompt text (and prompt id) -> albedos of the primitives it resolves to."""
    out = {}
    for pid, tgt in scene.targets.items():
        sel = scene.target_primitive_mask(pid)
        albedos = [list(p.albedo) for p, keep in zip(scene.primitives, sel) if keep]
        out[pid] = albedos
        if tgt.text:
            out[tgt.text] = albedos
    return out


def locate_by_color(image: np.ndarray, albedos, tolerance: float, min_shade: float):
    """Normalized centroid of pixels that look like a shaded albedo, snapped onto a matching pixel."""
    rgb = image.reshape(-1, 3)
    match = np.zeros(len(rgb), bool)
    for a in albedos:
        a = np.asarray(a, float)
        k = rgb @ a / (a @ a)
        resid = np.linalg.norm(rgb - k[:, None] * a, axis=1)
        match |= (resid < tolerance) & (k >= min_shade) & (k <= 1.05)
    if not match.any():
        return []
    h, w = image.shape[:2]
    idx = np.flatnonzero(match)
    rows, cols = np.divmod(idx, w)
    u, v = cols.mean() + 0.5, rows.mean() + 0.5
    k = int(np.argmin((cols + 0.5 - u) ** 2 + (rows + 0.5 - v) ** 2))
    return [[(cols[k] + 0.5) / w, (rows[k] + 0.5) / h]]


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="point service")
    app.state.config = config
    app.state.requests = 0

    @app.get("/health")
    def health():
        return {"status": "ok"}

    # sync handler: FastAPI runs it in a worker thread, so concurrent
    # requests overlap their injected latency
    @app.post("/point", response_model=PointResponse)
    def point(req: PointRequest):
        app.state.requests += 1
        if config.latency > 0:
            time.sleep(config.latency)
        if req.prompt in config.fixed:
            return {"points": config.fixed[req.prompt]}
        albedos = config.colors.get(req.prompt)
        if not albedos:
            return {"points": []}
        image = decode_png(req.image_png_base64)
        return {"points": locate_by_color(image, albedos, config.tolerance, config.min_shade)}

    return app


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@contextlib.contextmanager
def running_service(app: FastAPI, host: str = "127.0.0.1", port: int | None = None):
    """Serve ``app`` on a background thread; yields the ``/point`` endpoint URL."""
    import uvicorn

    port = port or _free_port()
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level="warning"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started:
        if time.monotonic() > deadline or not thread.is_alive():
            raise RuntimeError("point service failed to start")
        time.sleep(0.01)
    try:
        yield f"http://{host}:{port}/point"
    finally:
        server.should_exit = True
        thread.join(timeout=5)
