from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
import logging
import time

from config import configure_logging

configure_logging()
logger = logging.getLogger(__name__)

app = FastAPI(title="Spinor metrology simulator API", version="1.0.0")

# Import route modules
from routes import scenarios

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.middleware("http")
async def log_requests(request, call_next):
    start_time = time.time()
    logger.debug(f"API CALL START: {request.method} {request.url.path}")

    response = await call_next(request)

    process_time = time.time() - start_time
    logger.info(f"API CALL END: {request.method} {request.url.path} - Status: {response.status_code} - Process Time: {process_time:.2f}s")
    return response


app.include_router(scenarios.router, prefix="/api/scenarios", tags=["scenarios"])


@app.get("/")
def read_root():
    return {"message": "Simulator API is healthy"}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000, log_level="info")
