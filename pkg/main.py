"""
FastAPI application entry point for the treatment-effect estimation service
"""
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from src.api.routes import router
from src.services.experiment_config import MODEL_KINDS
from src.utils.config import setup_logging

API_PREFIX = "/api"
VERSION = "1.0.0"

setup_logging()

app = FastAPI(
    title="Proxy Deconfound",
    description="Treatment-effect estimation under proxy-observed confounding: "
                "experiment runs, report summaries and closed-form linear-sem identification",
    version=VERSION
)

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(router, prefix=API_PREFIX, tags=["estimation"])


@app.get("/")
async def root():
    return {
        "message": "Proxy Deconfound treatment-effect estimation service",
        "version": VERSION,
        "endpoints": [API_PREFIX + route.path for route in router.routes],
    }


@app.get("/health")
async def health():
    return {"status": "healthy", "service": "estimation", "estimators": list(MODEL_KINDS)}
