"""
Edge Selector - Main FastAPI Application
"""
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from sqlalchemy import text
import uvicorn
from datetime import datetime
from typing import Optional
import time

from app.config import settings
from app.database import SessionLocal, init_db
from app.api.upload import router as upload_router
from app.api.process import router as process_router
from app.services.errors import EdgeSelectorError
from app.services.metaheuristics import lookup_variant, variant_table
from app.utils.logging import logger

# Initialize database
init_db()
logger.info("database_initialized")

app = FastAPI(
    title="Edge Selector API",
    description="Learned edge selectors guiding VRP local search",
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc"
)

# Request logging middleware
@app.middleware("http")
async def log_requests(request: Request, call_next):
    """Log all requests"""
    start_time = time.time()

    logger.info(
        "request_started",
        method=request.method,
        path=request.url.path,
        client=request.client.host if request.client else None
    )

    response = await call_next(request)

    process_time = time.time() - start_time
    logger.info(
        "request_completed",
        method=request.method,
        path=request.url.path,
        status_code=response.status_code,
        process_time=f"{process_time:.3f}s"
    )

    return response

app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(upload_router)
app.include_router(process_router)

@app.exception_handler(EdgeSelectorError)
async def domain_error_handler(request: Request, exc: EdgeSelectorError):
    """Domain errors raised outside the routers' own checks become 400s"""
    logger.warning("domain_error", path=request.url.path, error=str(exc), kind=type(exc).__name__)
    return JSONResponse(status_code=400, content={"detail": str(exc)})

@app.get("/")
async def root():
    """Root endpoint - API information"""
    return {
        "name": "Edge Selector API",
        "version": "1.0.0",
        "status": "running",
        "environment": settings.ENVIRONMENT,
        "docs": "/docs"
    }

def _database_status() -> str:
    db = SessionLocal()
    try:
        db.execute(text("SELECT 1"))
        return "ok"
    except Exception as e:
        logger.error("database_check_failed", error=str(e))
        return "error"
    finally:
        db.close()

@app.get("/health")
async def health_check():
    """Health check endpoint for monitoring"""
    database = _database_status()
    return JSONResponse(
        status_code=200 if database == "ok" else 503,
        content={
            "status": "healthy" if database == "ok" else "degraded",
            "timestamp": datetime.utcnow().isoformat(),
            "environment": settings.ENVIRONMENT,
            "checks": {
                "api": "ok",
                "database": database,
            }
        }
    )

@app.get("/api/v1")
async def api_v1_root():
    """API v1 information"""
    return {
        "version": "1.0",
        "endpoints": {
            "variants": "/api/v1/variants",
            "instances": "/api/v1/instances",
            "jobs": "/api/v1/jobs",
            "results": "/api/v1/results/{job_id}",
            "download": "/api/v1/download/{job_id}/{filename}"
        }
    }

@app.get("/api/v1/variants")
async def list_variants():
    """Named driver / selector presets"""
    return {"variants": [variant.model_dump() for variant in variant_table()]}

@app.get("/api/v1/variants/{name}")
async def get_variant(name: str, n_nodes: Optional[int] = None):
    """Resolve a variant name (aliases, Greek letters, size-dependent presets)"""
    return lookup_variant(name, n_nodes).model_dump()

# Run with: uvicorn app.main:app --reload
if __name__ == "__main__":
    uvicorn.run(
        "app.main:app",
        host=settings.API_HOST,
        port=settings.API_PORT,
        reload=settings.DEBUG
    )
