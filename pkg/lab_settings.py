import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

REPO_ROOT = Path(__file__).resolve().parent
DEFAULT_CONFIG = "configs/desk.cfg"


def resolve_config_path(path: Optional[str] = None) -> Path:
    """Explicit path, then DPDLAB_CONFIG, then the shipped desk config"""
    candidates = []
    if path:
        candidates.append(Path(path))
    else:
        env_path = os.getenv("DPDLAB_CONFIG")
        if env_path:
            candidates.append(Path(env_path))
        candidates.append(Path(DEFAULT_CONFIG))
        candidates.append(REPO_ROOT / DEFAULT_CONFIG)

    for candidate in candidates:
        if candidate.exists():
            return candidate

    tried = " or ".join(str(c) for c in candidates)
    raise FileNotFoundError(
        f"Experiment config not found in {tried}. "
        "Pass --config or set DPDLAB_CONFIG in your environment or .env file."
    )


def seed_override() -> Optional[int]:
    value = os.getenv("DPDLAB_SEED")
    if not value:
        return None
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"DPDLAB_SEED must be an integer, got {value!r}")


def out_dir_override() -> Optional[str]:
    return os.getenv("DPDLAB_OUT_DIR") or None
