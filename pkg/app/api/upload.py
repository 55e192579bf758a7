"""
Instance upload and job API endpoints
"""
from typing import Optional
from fastapi import APIRouter, Depends, UploadFile, File, Form, HTTPException, status, BackgroundTasks
from sqlalchemy.orm import Session

from app.database import get_db
from app.models.job import SolveJob
from app.api.process import process_job_background
from app.services.errors import UnknownVariantError
from app.services.metaheuristics import lookup_variant
from app.utils.validation import validate_upload_file, save_upload_file
from app.utils.helpers import generate_job_id, get_upload_path, cleanup_job_files
from app.utils.logging import logger

router = APIRouter(prefix="/api/v1", tags=["Instances"])

def _get_job(db: Session, job_id: str) -> SolveJob:
    job = db.query(SolveJob).filter(SolveJob.job_id == job_id).first()
    if not job:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="Job not found"
        )
    return job

@router.post("/instances")
async def upload_instance(
    file: UploadFile = File(...),
    variant: str = Form("ils-baseline"),
    seed: int = Form(0),
    time_limit: Optional[float] = Form(None),
    max_iterations: Optional[int] = Form(None),
    background_tasks: BackgroundTasks = BackgroundTasks(),
    db: Session = Depends(get_db)
):
    """
    Upload a CVRPLIB or Solomon instance and start solving it

    Returns job_id for tracking. The run starts in the background.
    """
    is_valid, error_message, instance = validate_upload_file(file)
    if not is_valid:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=error_message
        )

    try:
        cfg = lookup_variant(variant, instance.n_nodes)
    except UnknownVariantError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    if time_limit is not None and time_limit <= 0:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="time_limit must be positive")

    job_id = generate_job_id()
    filepath = get_upload_path(job_id, file.filename)
    file_size = await save_upload_file(file, filepath)

    new_job = SolveJob(
        job_id=job_id,
        filename=file.filename,
        file_size=file_size,
        instance_name=instance.name,
        n_customers=instance.n_customers,
        variant=cfg.name,
        seed=seed,
        time_limit=time_limit,
        max_iterations=max_iterations,
        status="queued",
        progress=0
    )
    db.add(new_job)
    db.commit()
    db.refresh(new_job)
    logger.info("instance_uploaded", job_id=job_id, instance=instance.name, variant=cfg.name)

    background_tasks.add_task(process_job_background, job_id=job_id, filepath=filepath)

    return {
        "job_id": job_id,
        "filename": file.filename,
        "file_size": file_size,
        "instance": instance.name,
        "n_customers": instance.n_customers,
        "variant": cfg.name,
        "status": "queued",
        "message": "Instance uploaded successfully. Solving started automatically.",
        "created_at": new_job.created_at.isoformat()
    }

@router.get("/jobs/{job_id}")
async def get_job_status(job_id: str, db: Session = Depends(get_db)):
    """Get job status, progress and results if complete"""
    job = _get_job(db, job_id)
    return {
        "job_id": job.job_id,
        "filename": job.filename,
        "instance": job.instance_name,
        "variant": job.variant,
        "seed": job.seed,
        "status": job.status,
        "progress": job.progress,
        "best_cost": job.best_cost,
        "gap": job.gap,
        "n_routes": job.n_routes,
        "created_at": job.created_at.isoformat() if job.created_at else None,
        "started_at": job.started_at.isoformat() if job.started_at else None,
        "completed_at": job.completed_at.isoformat() if job.completed_at else None,
        "processing_time": job.processing_time,
        "error_message": job.error_message
    }

@router.get("/jobs")
async def list_jobs(db: Session = Depends(get_db), limit: int = 10, offset: int = 0):
    """Paginated list of jobs, newest first"""
    jobs = db.query(SolveJob)\
        .order_by(SolveJob.created_at.desc())\
        .limit(limit)\
        .offset(offset)\
        .all()

    return {
        "jobs": [
            {
                "job_id": job.job_id,
                "instance": job.instance_name,
                "variant": job.variant,
                "status": job.status,
                "progress": job.progress,
                "best_cost": job.best_cost,
                "created_at": job.created_at.isoformat() if job.created_at else None,
            }
            for job in jobs
        ],
        "total": db.query(SolveJob).count(),
        "limit": limit,
        "offset": offset
    }

@router.delete("/jobs/{job_id}")
async def delete_job(job_id: str, db: Session = Depends(get_db)):
    """Delete a job and its files"""
    job = _get_job(db, job_id)
    cleanup_job_files(job_id)
    db.delete(job)
    db.commit()
    return {
        "message": "Job deleted successfully",
        "job_id": job_id
    }
