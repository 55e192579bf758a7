"""
Solve processing API endpoints
"""
from fastapi import APIRouter, Depends, HTTPException, status, BackgroundTasks
from fastapi.responses import FileResponse
from sqlalchemy.orm import Session
from datetime import datetime
import os
import time
import structlog

from app.config import solver_defaults
from app.database import SessionLocal, get_db
from app.models.job import SolveJob
from app.services.instance import load_instance
from app.services.metaheuristics import lookup_variant, run_variant
from app.services.records import BksRegistry, load_records, save_records
from app.services.solution import write_solution
from app.utils.helpers import get_upload_path, get_job_directory, SOLUTION_FILE, RECORD_FILE
from app.utils.logging import logger

router = APIRouter(prefix="/api/v1", tags=["Processing"])

PROGRESS_INTERVAL = 2.0  # seconds between progress writes

def process_job_background(job_id: str, filepath: str):
    """
    Background task solving one uploaded instance

    Writes the best solution and the run record next to the instance file.
    """
    db = SessionLocal()
    structlog.contextvars.bind_contextvars(job_id=job_id)

    try:
        job = db.query(SolveJob).filter(SolveJob.job_id == job_id).first()
        if not job:
            logger.error("job_not_found", job_id=job_id)
            return

        job.status = "processing"
        job.started_at = datetime.utcnow()
        job.progress = 5
        db.commit()
        logger.info("processing_started", job_id=job_id, filepath=filepath, variant=job.variant)

        instance = load_instance(filepath)
        cfg = lookup_variant(job.variant, instance.n_nodes).with_overrides(
            seed=job.seed, time_limit=job.time_limit, max_iterations=job.max_iterations
        )
        budget = cfg.time_limit or (None if cfg.max_iterations else solver_defaults.time_limit(instance.n_nodes))
        registry = BksRegistry.load()
        bks = registry.get(instance.name) if instance.name in registry else None

        last_write = time.perf_counter()
        started = last_write

        def report_progress(_solution, iteration: int):
            nonlocal last_write
            now = time.perf_counter()
            if now - last_write < PROGRESS_INTERVAL:
                return
            if cfg.max_iterations:
                fraction = iteration / cfg.max_iterations
            else:
                fraction = (now - started) / budget if budget else 0.0
            job.progress = max(job.progress, min(99, int(100 * fraction)))
            db.commit()
            last_write = now

        solution, record = run_variant(instance, cfg, bks=bks, callback=report_progress)

        job_dir = get_job_directory(job_id)
        write_solution(os.path.join(job_dir, SOLUTION_FILE), solution)
        save_records([record], os.path.join(job_dir, RECORD_FILE))

        job.status = "complete"
        job.progress = 100
        job.best_cost = record.best_cost
        job.gap = record.gap
        job.n_routes = record.n_routes
        job.completed_at = datetime.utcnow()
        job.processing_time = (job.completed_at - job.started_at).total_seconds()
        db.commit()

        logger.info("processing_complete",
                   job_id=job_id,
                   best_cost=job.best_cost,
                   gap=job.gap,
                   processing_time=job.processing_time)

    except Exception as e:
        logger.error("processing_failed", job_id=job_id, error=str(e))
        db.rollback()
        job = db.query(SolveJob).filter(SolveJob.job_id == job_id).first()
        if job:
            job.status = "failed"
            job.error_message = str(e)
            job.completed_at = datetime.utcnow()
            db.commit()

    finally:
        structlog.contextvars.unbind_contextvars("job_id")
        db.close()

def _get_job(db: Session, job_id: str) -> SolveJob:
    job = db.query(SolveJob).filter(SolveJob.job_id == job_id).first()
    if not job:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="Job not found"
        )
    return job

@router.post("/process/{job_id}")
async def start_processing(job_id: str, background_tasks: BackgroundTasks, db: Session = Depends(get_db)):
    """Re-run a queued or failed job"""
    job = _get_job(db, job_id)

    if job.status in ["processing", "complete"]:
        return {
            "message": f"Job is already {job.status}",
            "job_id": job_id,
            "status": job.status
        }

    filepath = get_upload_path(job_id, job.filename)
    if not os.path.exists(filepath):
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="Uploaded file not found"
        )

    job.status = "queued"
    job.error_message = None
    db.commit()
    background_tasks.add_task(process_job_background, job_id=job_id, filepath=filepath)

    return {
        "message": "Processing started",
        "job_id": job_id,
        "status": "queued"
    }

@router.get("/results/{job_id}")
async def get_results(job_id: str, db: Session = Depends(get_db)):
    """Best solution summary and improvement trajectory of a completed job"""
    job = _get_job(db, job_id)

    if job.status != "complete":
        return {
            "job_id": job_id,
            "status": job.status,
            "message": f"Job is {job.status}. Results not available yet."
        }

    record_path = os.path.join(get_job_directory(job_id), RECORD_FILE)
    trajectory = []
    if os.path.exists(record_path):
        records = load_records(record_path)
        if records:
            trajectory = [point.model_dump() for point in records[0].trajectory]

    return {
        "job_id": job_id,
        "status": job.status,
        "instance": job.instance_name,
        "variant": job.variant,
        "seed": job.seed,
        "best_cost": job.best_cost,
        "gap": job.gap,
        "n_routes": job.n_routes,
        "processing_time": job.processing_time,
        "trajectory": trajectory,
        "files": {
            "solution": f"/api/v1/download/{job_id}/{SOLUTION_FILE}",
            "record": f"/api/v1/download/{job_id}/{RECORD_FILE}"
        }
    }

@router.get("/download/{job_id}/{filename}")
async def download_file(job_id: str, filename: str, db: Session = Depends(get_db)):
    """Download the solution file or the run record of a job"""
    _get_job(db, job_id)

    if filename not in (SOLUTION_FILE, RECORD_FILE):
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="File not found"
        )

    filepath = os.path.join(get_job_directory(job_id), filename)
    if not os.path.exists(filepath):
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="File not found"
        )

    return FileResponse(
        filepath,
        media_type='application/octet-stream',
        filename=filename
    )
