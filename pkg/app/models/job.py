"""
SolveJob Model - Tracks solver runs started through the API
"""
from sqlalchemy import Column, Integer, String, DateTime, Float
from datetime import datetime
from app.database import Base

class SolveJob(Base):
    """Solve job database model"""
    __tablename__ = "solve_jobs"

    id = Column(Integer, primary_key=True, index=True)
    job_id = Column(String, unique=True, index=True, nullable=False)

    # Instance file
    filename = Column(String, nullable=False)
    file_size = Column(Integer, nullable=True)  # bytes
    instance_name = Column(String, nullable=True)
    n_customers = Column(Integer, nullable=True)

    # Run configuration
    variant = Column(String, nullable=False, default="ils-baseline")
    seed = Column(Integer, default=0)
    time_limit = Column(Float, nullable=True)  # seconds
    max_iterations = Column(Integer, nullable=True)

    # Processing status
    status = Column(String, default="queued")  # queued, processing, complete, failed
    progress = Column(Integer, default=0)  # 0-100

    # Results
    best_cost = Column(Float, nullable=True)
    gap = Column(Float, nullable=True)  # percent over best-known
    n_routes = Column(Integer, nullable=True)

    # Timing
    created_at = Column(DateTime, default=datetime.utcnow)
    started_at = Column(DateTime, nullable=True)
    completed_at = Column(DateTime, nullable=True)
    processing_time = Column(Float, nullable=True)  # seconds

    # Error handling
    error_message = Column(String, nullable=True)

    def __repr__(self):
        return f"<SolveJob {self.job_id} {self.variant} - {self.status}>"
