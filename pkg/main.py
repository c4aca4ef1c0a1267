from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from routes.pipeline_router import router as pipeline_router
from routes.metrics_router import router as metrics_router
from dotenv import load_dotenv
import os

load_dotenv()

app = FastAPI(title="DPD Lab API")

app.add_middleware(
    CORSMiddleware,
    allow_origins=[
        "http://localhost:3000",
        "http://127.0.0.1:3000",
    ],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(pipeline_router)
app.include_router(metrics_router)

@app.get("/")
async def root():
    return {"message": "🚀 DPD Lab is running!"}

@app.get("/health")
async def health_check():
    return {
        "status": "healthy",
        "config": os.environ.get("DPDLAB_CONFIG", "configs/desk.cfg"),
        "seed_override": os.environ.get("DPDLAB_SEED", "Not set"),
    }

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
