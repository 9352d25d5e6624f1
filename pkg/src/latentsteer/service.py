"""HTTP job service: submit runs, stream progress, pause/edit/resume.

Each job lives in its own directory::

    jobs/<id>/config.json       the validated run configuration
    jobs/<id>/meta.json         id, state, timestamps, durable iteration
    jobs/<id>/events.jsonl      append-only state/loss/frame event log
    jobs/<id>/frames/%06d.png   saved frames, named by iteration
    jobs/<id>/checkpoint.bin    latest resumable optimizer state
    jobs/<id>/final.png         written once on completion
    jobs/<id>/init_image.png    (edit modes) the canonical source image
    jobs/<id>/mask.png          (optional) pixel-space edit mask

Every state change lands on disk before the HTTP response, so a killed
process restarts into a consistent state: interrupted jobs come back
``paused`` at their last checkpoint and can be resumed.  The event log
carries no wall-clock data, which keeps replays byte-deterministic; it
also doubles as the server-sent-event stream, with the line number as
the event id so clients resume with ``Last-Event-Id`` and never see a
duplicate.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
import shutil
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from datetime import datetime, timezone
from pathlib import Path

import anyio.to_thread
import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import FileResponse, JSONResponse, StreamingResponse

from .backend import attach
from .errors import ContractError, DegenerateWeightsError, IllegalTransition
from .pipeline import (Run, RunConfig, image_to_png_bytes,
                       png_bytes_to_image, validate_config)
from .report import append_event, read_events, write_run_report
from .selfmask import pixel_mask_to_latent

TERMINAL = ("completed", "cancelled", "failed")
CHECKPOINT_EVERY = 25
_STREAM_POLL_S = 0.05

STATIC_DIR = Path(__file__).parent / "static"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class Job:
    """In-memory face of one job directory."""

    def __init__(self, job_id: str, config: RunConfig, job_dir: Path,
                 state: str, created: str, updated: str,
                 iteration: int = 0, error: str | None = None):
        self.id = job_id
        self.config = config
        self.dir = job_dir
        self.state = state
        self.created = created
        self.updated = updated
        self.iteration = iteration
        self.error = error
        self.desired: str | None = None  # "pause" or "cancel"
        self.lock = threading.Lock()
        self.turned = threading.Condition(self.lock)

    # Paths -----------------------------------------------------------------
    @property
    def events_path(self) -> Path:
        return self.dir / "events.jsonl"

    @property
    def frames_dir(self) -> Path:
        return self.dir / "frames"

    @property
    def checkpoint_path(self) -> Path:
        return self.dir / "checkpoint.bin"

    def frame_numbers(self) -> list[int]:
        if not self.frames_dir.is_dir():
            return []
        out = []
        for p in self.frames_dir.glob("*.png"):
            try:
                out.append(int(p.stem))
            except ValueError:
                continue
        return sorted(out)

    def summary(self) -> dict:
        data = {
            "id": self.id,
            "state": self.state,
            "iteration": self.iteration,
            "iterations": self.config.iterations,
            "created": self.created,
            "updated": self.updated,
        }
        if self.error:
            data["error"] = self.error
        return data

    def record(self) -> dict:
        data = self.summary()
        data["config"] = self.config.to_dict()
        data["frames"] = [
            f"/api/jobs/{self.id}/frames/{n}.png" for n in self.frame_numbers()
        ]
        return data


class JobManager:
    """Owns the job registry, the worker pool, and the disk layout."""

    def __init__(self, data_dir: Path, backend_selector: str = "toy",
                 max_jobs: int | None = None):
        self.data_dir = Path(data_dir)
        self.jobs_dir = self.data_dir / "jobs"
        self.jobs_dir.mkdir(parents=True, exist_ok=True)
        self.backend_selector = backend_selector
        workers = max_jobs or os.cpu_count() or 2
        self.pool = ThreadPoolExecutor(max_workers=workers,
                                       thread_name_prefix="job")
        self.jobs: dict[str, Job] = {}
        self.registry_lock = threading.Lock()
        self.closing = False

    # -- persistence helpers --------------------------------------------------

    def _write_meta(self, job: Job) -> None:
        meta = {
            "id": job.id,
            "state": job.state,
            "iteration": job.iteration,
            "created": job.created,
            "updated": job.updated,
        }
        if job.error:
            meta["error"] = job.error
        _atomic_write(job.dir / "meta.json",
                      json.dumps(meta, indent=1).encode())

    def _append_event(self, job: Job, event: str, data: dict) -> None:
        append_event(job.events_path, event, data)

    def _transition(self, job: Job, state: str) -> None:
        """Caller holds job.lock.  Disk first, then the in-memory flip."""
        job.state = state
        job.updated = _now()
        self._append_event(job, "state", {"state": state})
        self._write_meta(job)
        job.turned.notify_all()

    # -- job creation ----------------------------------------------------------

    def create_job(self, config: RunConfig, init_png: bytes | None,
                   mask_png: bytes | None) -> Job:
        job_id = uuid.uuid4().hex[:12]
        job_dir = self.jobs_dir / job_id
        job_dir.mkdir(parents=True)
        (job_dir / "frames").mkdir()
        _atomic_write(job_dir / "config.json",
                      json.dumps(config.to_dict(), indent=1).encode())
        if init_png is not None:
            _atomic_write(job_dir / "init_image.png", init_png)
        if mask_png is not None:
            _atomic_write(job_dir / "mask.png", mask_png)
        now = _now()
        job = Job(job_id, config, job_dir, "queued", now, now)
        with self.registry_lock:
            self.jobs[job_id] = job
        with job.lock:
            self._append_event(job, "state", {"state": "queued"})
            self._write_meta(job)
        self.pool.submit(self._drive, job_id)
        return job

    def get(self, job_id: str) -> Job:
        with self.registry_lock:
            job = self.jobs.get(job_id)
        if job is None:
            raise KeyError(job_id)
        return job

    def list_jobs(self) -> list[Job]:
        with self.registry_lock:
            jobs = list(self.jobs.values())
        return sorted(jobs, key=lambda j: (j.created, j.id))

    # -- control verbs -----------------------------------------------------------

    def control(self, job_id: str, verb: str) -> Job:
        job = self.get(job_id)
        with job.lock:
            if verb == "cancel":
                return self._cancel(job)
            if verb == "pause":
                return self._pause(job)
            if verb == "resume":
                return self._resume(job)
        raise IllegalTransition(job.state, verb)

    def _cancel(self, job: Job) -> Job:
        if job.state == "cancelled":
            return job  # terminal and idempotent
        if job.state in ("completed", "failed", "awaiting_image"):
            raise IllegalTransition(job.state, "cancel")
        if job.state in ("queued", "paused"):
            # no worker is attached; the queued driver will see the state
            self._transition(job, "cancelled")
            return job
        # running: the worker notices at the next iteration boundary
        job.desired = "cancel"
        job.turned.notify_all()
        job.turned.wait_for(lambda: job.state != "running", timeout=60)
        if job.state != "cancelled":
            # the run finished before the boundary
            raise IllegalTransition(job.state, "cancel")
        return job

    def _pause(self, job: Job) -> Job:
        if job.state != "running":
            raise IllegalTransition(job.state, "pause")
        job.desired = "pause"
        job.turned.notify_all()
        if not job.turned.wait_for(lambda: job.state != "running", timeout=60):
            raise IllegalTransition(job.state, "pause")
        if job.state != "paused":
            # the run finished or was cancelled before the boundary
            raise IllegalTransition(job.state, "pause")
        return job

    def _resume(self, job: Job) -> Job:
        if job.state != "paused":
            raise IllegalTransition(job.state, "resume")
        self._transition(job, "queued")
        self.pool.submit(self._drive, job.id)
        return job

    # -- hand-edited image injection ------------------------------------------------

    def inject_image(self, job_id: str, image: np.ndarray) -> Job:
        job = self.get(job_id)
        h, w = job.config.size
        if image.shape != (h, w, 3):
            raise ContractError(
                f"image is {image.shape[0]}x{image.shape[1]}, "
                f"job expects {h}x{w}")
        with job.lock:
            if job.state != "paused":
                raise IllegalTransition(job.state, "upload image")
            self._transition(job, "awaiting_image")
        try:
            run = self._materialize(job)
            run.inject_image(image)
            self._write_checkpoint(job, run)
        except Exception:
            with job.lock:
                self._transition(job, "paused")
            raise
        with job.lock:
            self._transition(job, "paused")
        return job

    # -- deletion -------------------------------------------------------------------

    def delete_job(self, job_id: str) -> None:
        job = self.get(job_id)
        with job.lock:
            if job.state not in TERMINAL:
                raise IllegalTransition(job.state, "delete")
        with self.registry_lock:
            self.jobs.pop(job_id, None)
        shutil.rmtree(job.dir, ignore_errors=True)

    # -- worker ------------------------------------------------------------------------

    def _materialize(self, job: Job) -> Run:
        """Build the Run for a job from its directory, resuming any
        checkpoint."""
        backend = attach(job.config.backend, job.config.size)
        init_image = None
        init_path = job.dir / "init_image.png"
        if init_path.exists():
            init_image = png_bytes_to_image(init_path.read_bytes())
        latent_mask = None
        mask_path = job.dir / "mask.png"
        if mask_path.exists():
            info = backend.info()
            pixel = png_bytes_to_image(mask_path.read_bytes()).mean(axis=2)
            latent_mask = pixel_mask_to_latent(
                (pixel >= 0.5).astype(np.float64),
                (info.latent_h, info.latent_w))
        if job.checkpoint_path.exists():
            return Run.restore(job.checkpoint_path.read_bytes(), job.config,
                               backend=backend, init_image=init_image,
                               latent_mask=latent_mask)
        return Run(job.config, backend=backend, init_image=init_image,
                   latent_mask=latent_mask)

    def _write_checkpoint(self, job: Job, run: Run) -> None:
        _atomic_write(job.checkpoint_path, run.checkpoint_bytes())
        job.iteration = run.iteration
        self._write_meta(job)

    def _last_logged_iteration(self, job: Job) -> int:
        """Highest iteration already in the event log, so a resumed run
        never appends duplicate loss/frame events."""
        last = 0
        if not job.events_path.exists():
            return last
        for record in read_events(job.events_path):
            if record.get("event") in ("loss", "frame"):
                last = max(last, int(record["data"].get("iteration", 0)))
        return last

    def _save_frame(self, job: Job, iteration: int, image: np.ndarray,
                    last_logged: int) -> None:
        path = job.frames_dir / f"{iteration:06d}.png"
        if not path.exists():  # frames on disk are never rewritten
            _atomic_write(path, image_to_png_bytes(image))
        if iteration > last_logged:
            # relative to /api/jobs/<id>/, and identical to what a CLI
            # run logs, so equal runs give byte-equal event logs
            self._append_event(job, "frame", {
                "iteration": iteration,
                "url": f"frames/{iteration:06d}.png",
            })

    def _drive(self, job_id: str) -> None:
        job = self.get(job_id)
        with job.lock:
            if job.state != "queued":
                return  # cancelled (or otherwise settled) while waiting
            self._transition(job, "running")
        try:
            self._run_job(job)
        except Exception as exc:  # noqa: BLE001 - job failure is data
            with job.lock:
                job.error = f"{type(exc).__name__}: {exc}"
                self._transition(job, "failed")

    def _run_job(self, job: Job) -> None:
        run = self._materialize(job)
        if not job.checkpoint_path.exists():
            self._write_checkpoint(job, run)
        job.iteration = run.iteration
        last_logged = self._last_logged_iteration(job)
        save_every = job.config.save_every
        while True:
            with job.lock:
                if job.desired == "cancel":
                    job.desired = None
                    self._transition(job, "cancelled")
                    return
                if job.desired == "pause":
                    job.desired = None
                    self._write_checkpoint(job, run)
                    self._transition(job, "paused")
                    return
            if run.finished():
                break
            report = run.step()
            job.iteration = run.iteration
            if run.iteration > last_logged:
                self._append_event(job, "loss", {
                    "iteration": report.iteration,
                    "l_clip": report.l_clip,
                    "l_reg": report.l_reg,
                    "total": report.total,
                })
            if run.iteration % save_every == 0:
                self._save_frame(job, run.iteration, run.frame_image(),
                                 last_logged)
            if run.iteration % CHECKPOINT_EVERY == 0:
                self._write_checkpoint(job, run)
        final = run.frame_image()
        if run.iteration % save_every != 0:
            self._save_frame(job, run.iteration, final, last_logged)
        _atomic_write(job.dir / "final.png", image_to_png_bytes(final))
        self._write_checkpoint(job, run)
        write_run_report(job.dir)
        with job.lock:
            job.desired = None
            self._transition(job, "completed")

    # -- recovery and shutdown ------------------------------------------------------------

    def recover(self) -> None:
        """Rebuild the registry from disk; interrupted jobs come back
        paused at their last checkpoint."""
        for job_dir in sorted(self.jobs_dir.iterdir()):
            if not job_dir.is_dir():
                continue
            try:
                meta = json.loads((job_dir / "meta.json").read_text())
                config_doc = json.loads((job_dir / "config.json").read_text())
            except (OSError, json.JSONDecodeError):
                continue
            config, problems = validate_config(config_doc)
            if problems:
                continue
            job = Job(meta["id"], config, job_dir, meta["state"],
                      meta["created"], meta["updated"],
                      iteration=meta.get("iteration", 0),
                      error=meta.get("error"))
            with self.registry_lock:
                self.jobs[job.id] = job
            with job.lock:
                if job.state in ("running", "awaiting_image"):
                    if job.checkpoint_path.exists():
                        self._transition(job, "paused")
                    else:
                        job.error = "interrupted before the first checkpoint"
                        self._transition(job, "failed")
                elif job.state == "queued":
                    self.pool.submit(self._drive, job.id)

    def shutdown(self) -> None:
        """Park running jobs at a checkpoint, then stop the pool."""
        self.closing = True
        running = []
        with self.registry_lock:
            jobs = list(self.jobs.values())
        for job in jobs:
            with job.lock:
                if job.state == "running":
                    job.desired = "pause"
                    job.turned.notify_all()
                    running.append(job)
        for job in running:
            with job.lock:
                job.turned.wait_for(lambda: job.state != "running",
                                    timeout=60)
        self.pool.shutdown(wait=True, cancel_futures=True)

    # -- event streaming --------------------------------------------------------------------

    def stream_events(self, job_id: str, after: int | None):
        """Yield SSE frames from the event log, tailing a live job.

        Events are numbered by line; ``after`` (from Last-Event-Id)
        skips everything already seen.  The stream ends once the job is
        terminal and the log is drained.
        """
        job = self.get(job_id)
        start = 0 if after is None else after + 1
        index = 0
        position = 0
        while True:
            emitted = False
            with open(job.events_path, "rb") as fh:
                fh.seek(position)
                for raw in fh:
                    if not raw.endswith(b"\n"):
                        break  # half-written line; re-read next poll
                    position += len(raw)
                    if index >= start:
                        record = json.loads(raw)
                        payload = json.dumps(record["data"],
                                             separators=(",", ":"))
                        yield (f"id: {index}\n"
                               f"event: {record['event']}\n"
                               f"data: {payload}\n\n")
                        emitted = True
                    index += 1
            with job.lock:
                settled = job.state in TERMINAL
            if settled and not emitted:
                # one final sweep in case the terminal event landed
                # between the read and the state check
                with open(job.events_path, "rb") as fh:
                    fh.seek(position)
                    drained = not fh.read(1)
                if drained:
                    return
            if not emitted:
                time.sleep(_STREAM_POLL_S)


# -------------------------------------------------------------------------------
# HTTP layer

def _field_errors(problems: list[tuple[str, str]]) -> JSONResponse:
    detail = [{"field": f, "message": m} for f, m in problems]
    return JSONResponse(status_code=422, content={"detail": detail})


def _decode_png_field(body: dict, name: str) -> tuple[bytes | None, list]:
    raw = body.get(name)
    if raw is None:
        return None, []
    if not isinstance(raw, str):
        return None, [(name, "must be a base64 PNG string")]
    try:
        blob = base64.b64decode(raw, validate=True)
    except (binascii.Error, ValueError):
        return None, [(name, "is not valid base64")]
    if not blob.startswith(b"\x89PNG\r\n\x1a\n"):
        return None, [(name, "is not a PNG")]
    return blob, []


def create_app(data_dir=None, backend: str | None = None,
               max_jobs: int | None = None) -> FastAPI:
    data_dir = Path(data_dir or os.environ.get("DATA_DIR", "data"))
    backend = backend or os.environ.get("BACKEND", "toy")
    if max_jobs is None:
        env_max = os.environ.get("MAX_JOBS")
        max_jobs = int(env_max) if env_max else None

    manager = JobManager(data_dir, backend_selector=backend,
                         max_jobs=max_jobs)

    @asynccontextmanager
    async def lifespan(_app):
        yield
        await anyio.to_thread.run_sync(manager.shutdown)

    app = FastAPI(title="latentsteer", docs_url=None, redoc_url=None,
                  lifespan=lifespan)
    app.state.manager = manager
    manager.recover()

    def _job_or_404(job_id: str) -> Job:
        try:
            return manager.get(job_id)
        except KeyError:
            raise HTTPException(status_code=404,
                                detail=f"no job {job_id}") from None

    @app.post("/api/jobs", status_code=201)
    async def create_job(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _field_errors([("body", "must be a JSON object")])
        if not isinstance(body, dict):
            return _field_errors([("body", "must be a JSON object")])
        body = dict(body)
        init_png, png_problems = _decode_png_field(body, "init_image")
        mask_png, mask_problems = _decode_png_field(body, "mask")
        body.pop("init_image", None)
        body.pop("mask", None)
        if "backend" not in body:
            body["backend"] = manager.backend_selector
        config, problems = validate_config(body)
        problems = png_problems + mask_problems + problems
        if config is not None:
            if config.mode in ("edit", "masked_edit") and init_png is None:
                problems.append(
                    ("init_image", f"required for mode '{config.mode}'"))
            if config.mode == "masked_edit" and config.self_mask_phrase is None \
                    and mask_png is None:
                problems.append(
                    ("mask", "masked_edit needs a mask or a self_mask_phrase"))
            if config.mode == "generate" and mask_png is not None:
                problems.append(("mask", "meaningless for mode 'generate'"))
        if problems:
            return _field_errors(problems)
        job = manager.create_job(config, init_png, mask_png)
        # the job may already be running by now; the response reports the
        # state the job was created in
        return JSONResponse(status_code=201,
                            content={"id": job.id, "state": "queued"})

    @app.get("/api/jobs")
    def list_jobs():
        return {"jobs": [job.summary() for job in manager.list_jobs()]}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        return _job_or_404(job_id).record()

    @app.post("/api/jobs/{job_id}/image")  # registered before the verb route
    async def upload_image(job_id: str, request: Request):
        job = _job_or_404(job_id)
        try:
            body = await request.json()
        except Exception:
            return _field_errors([("body", "must be a JSON object")])
        if not isinstance(body, dict) or "image" not in body:
            return _field_errors([("image", "base64 PNG field is required")])
        blob, problems = _decode_png_field(body, "image")
        if problems:
            return _field_errors(problems)
        image = png_bytes_to_image(blob)
        h, w = job.config.size
        if image.shape != (h, w, 3):
            return _field_errors([(
                "image",
                f"is {image.shape[0]}x{image.shape[1]}, job expects {h}x{w}")])
        try:
            job = manager.inject_image(job_id, image)
        except IllegalTransition as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from None
        except (ContractError, DegenerateWeightsError) as exc:
            return _field_errors([("image", str(exc))])
        return {"id": job.id, "state": job.state}

    @app.post("/api/jobs/{job_id}/{verb}")
    def control_job(job_id: str, verb: str):
        job = _job_or_404(job_id)
        if verb not in ("pause", "resume", "cancel"):
            raise HTTPException(status_code=404,
                                detail=f"unknown verb '{verb}'")
        try:
            job = manager.control(job_id, verb)
        except IllegalTransition as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from None
        return {"id": job.id, "state": job.state}

    @app.get("/api/jobs/{job_id}/frames/{n}.png")
    def get_frame(job_id: str, n: int):
        job = _job_or_404(job_id)
        path = job.frames_dir / f"{n:06d}.png"
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"no frame {n}")
        return FileResponse(path, media_type="image/png")

    @app.get("/api/jobs/{job_id}/events")
    def stream(job_id: str, request: Request):
        job = _job_or_404(job_id)
        last_id = request.headers.get("last-event-id")
        after = None
        if last_id is not None:
            try:
                after = int(last_id)
            except ValueError:
                after = None
        generator = manager.stream_events(job.id, after)
        return StreamingResponse(generator, media_type="text/event-stream",
                                 headers={"Cache-Control": "no-store"})

    @app.delete("/api/jobs/{job_id}", status_code=204)
    def delete_job(job_id: str):
        _job_or_404(job_id)
        try:
            manager.delete_job(job_id)
        except IllegalTransition as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from None

    @app.get("/")
    def index():
        page = STATIC_DIR / "index.html"
        if not page.exists():
            raise HTTPException(status_code=404, detail="no UI bundle")
        return FileResponse(page, media_type="text/html")

    @app.get("/static/{name}")
    def static_file(name: str):
        path = STATIC_DIR / name
        if "/" in name or ".." in name or not path.exists():
            raise HTTPException(status_code=404, detail=f"no asset {name}")
        media = "text/javascript" if name.endswith(".js") else \
            "text/css" if name.endswith(".css") else "application/octet-stream"
        return FileResponse(path, media_type=media)

    return app
