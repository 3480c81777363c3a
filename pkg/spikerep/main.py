from fastapi import FastAPI, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.requests import Request
from dotenv import load_dotenv
import logging

from spikerep import __version__
from spikerep.utils.config import log_level, server_address

# Load environment variables (SPIKEREP_THREADS, SPIKEREP_LOG_LEVEL, ...)
load_dotenv()

# Configure logging
logging.basicConfig(level=log_level())
logger = logging.getLogger(__name__)

app = FastAPI(
    title="Spike Representation Pipeline API",
    description="Batch submission of spike sorting pipeline stages: synthesis, preprocessing, detection, training, sorting and evaluation",
    version=__version__,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

from spikerep.routers import pipeline

app.include_router(pipeline.router, prefix="/api/pipeline", tags=["Pipeline"])


@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    return JSONResponse(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        content={"success": False, "detail": exc.errors()}
    )


@app.get("/health")
async def health_check():
    return {
        "status": "healthy",
        "message": "Spike Representation Pipeline API is running",
        "version": __version__
    }


@app.get("/api")
async def root():
    return {
        "message": "Welcome to the Spike Representation Pipeline API",
        "documentation": "/docs",
        "health": "/health",
        "commands": "/api/pipeline/commands"
    }


if __name__ == "__main__":
    import uvicorn

    host, port = server_address()
    logger.info(f"Starting server on {host}:{port}")
    uvicorn.run("spikerep.main:app", host=host, port=port)
