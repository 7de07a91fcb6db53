"""
Workspace resolution for FedDAE runs.

Priority:
  1. FEDDAE_WORKSPACE - User-defined workspace location
  2. Current working directory (zero-config fallback)

Datasets resolve through FEDDAE_DATA_DIR (falls back to <workspace>/data).
"""

import os
from pathlib import Path

# Aliases accepted by --dataset, relative to the data directory.
DATASET_ALIASES = {
    "ml-100k": Path("ml-100k") / "u.data",
    "ml-1m": Path("ml-1m") / "ratings.dat",
}


def get_workspace_root() -> Path:
    """
    Get the workspace root directory.

    Priority:
      1. FEDDAE_WORKSPACE env var (user-defined, must exist)
      2. Current working directory
    """
    workspace = os.environ.get("FEDDAE_WORKSPACE")
    if workspace:
        workspace_path = Path(workspace)
        if workspace_path.exists():
            return workspace_path
    return Path.cwd()


def get_data_dir() -> Path:
    """Get the directory that holds dataset folders."""
    data_dir = os.environ.get("FEDDAE_DATA_DIR")
    if data_dir:
        return Path(data_dir)
    return get_workspace_root() / "data"


def resolve_dataset_path(dataset: str) -> Path:
    """
    Resolve a --dataset value to a file path.

    Existing paths win; known aliases (ml-100k, ml-1m) map into the data
    directory; anything else is taken relative to the data directory.
    """
    candidate = Path(dataset).expanduser()
    if candidate.exists():
        return candidate
    alias = DATASET_ALIASES.get(dataset.lower())
    if alias is not None:
        return get_data_dir() / alias
    return get_data_dir() / dataset


def get_runs_dir() -> Path:
    """Get the directory default run outputs are written under."""
    return get_workspace_root() / "runs"


def get_runtime_state_dir(output_dir: Path) -> Path:
    """Get the runtime-state directory for spill files of one run."""
    runtime_dir = output_dir / "runtime-state"
    runtime_dir.mkdir(parents=True, exist_ok=True)
    return runtime_dir
