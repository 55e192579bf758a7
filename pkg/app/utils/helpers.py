"""
Helper utilities
"""
import uuid
import os
import shutil
from datetime import datetime

from app.config import settings
from app.utils.logging import logger

SOLUTION_FILE = "solution.sol"
RECORD_FILE = "record.jsonl"

def generate_job_id() -> str:
    """Generate unique job ID"""
    timestamp = datetime.utcnow().strftime("%Y%m%d%H%M%S")
    unique_id = str(uuid.uuid4())[:8]
    return f"{timestamp}_{unique_id}"

def get_job_directory(job_id: str) -> str:
    """Job directory path (created on demand)"""
    job_dir = os.path.join(settings.UPLOAD_DIR, job_id)
    os.makedirs(job_dir, exist_ok=True)
    return job_dir

def get_upload_path(job_id: str, filename: str) -> str:
    """Full path of the uploaded instance file; only the base name is kept"""
    return os.path.join(get_job_directory(job_id), os.path.basename(filename))

def cleanup_job_files(job_id: str) -> bool:
    """Delete all files for a job"""
    job_dir = os.path.join(settings.UPLOAD_DIR, job_id)
    if not os.path.exists(job_dir):
        return False
    try:
        shutil.rmtree(job_dir)
        return True
    except OSError as e:
        logger.error("job_cleanup_failed", job_id=job_id, error=str(e))
        return False
