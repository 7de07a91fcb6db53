"""
Shared pytest fixtures for FedDAE tests.

Provides:
- Temporary workspace / data directory isolation
- Synthetic interaction files in MovieLens tab format
- Small RunConfig and split builders
- Mock target validation (stale mock detection)
"""

import sys
import unittest.mock
import warnings
from pathlib import Path

import numpy as np
import pytest

# Save reference before we wrap it
_original_patch_object = unittest.mock.patch.object

# Ensure feddae/lib is importable
FEDDAE_LIB = Path(__file__).parent.parent / "lib"
if str(FEDDAE_LIB) not in sys.path:
    sys.path.insert(0, str(FEDDAE_LIB))


@pytest.fixture
def tmp_workspace(tmp_path):
    """Create an isolated workspace with data and runs directories."""
    workspace = tmp_path / "workspace"
    data_dir = workspace / "data"
    runs_dir = workspace / "runs"
    data_dir.mkdir(parents=True)
    runs_dir.mkdir(parents=True)
    return {"root": workspace, "data": data_dir, "runs": runs_dir}


@pytest.fixture
def patch_workspace(tmp_workspace, monkeypatch):
    """Point workspace and data resolution at tmp_workspace."""
    monkeypatch.setenv("FEDDAE_WORKSPACE", str(tmp_workspace["root"]))
    monkeypatch.setenv("FEDDAE_DATA_DIR", str(tmp_workspace["data"]))
    return tmp_workspace


def write_interactions(path: Path, rows, sep: str = "\t") -> Path:
    """Write (user, item, rating, timestamp) tuples, one per line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(sep.join(str(v) for v in row) + "\n" for row in rows), encoding="utf-8")
    return path


def synthetic_rows(n_users: int = 12, n_items: int = 30, per_user: int = 12, seed: int = 0):
    """Every user rates per_user distinct items at strictly increasing timestamps."""
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(1, n_users + 1):
        items = rng.choice(np.arange(1, n_items + 1), size=per_user, replace=False)
        for j, item in enumerate(items):
            rows.append((u, int(item), int(rng.integers(1, 6)), 1000 * u + j))
    return rows


@pytest.fixture
def synthetic_dataset(tmp_workspace):
    """A 12-user, 30-item tab-separated file inside the tmp data directory."""
    return write_interactions(tmp_workspace["data"] / "synthetic.tsv", synthetic_rows())


@pytest.fixture
def small_config(synthetic_dataset, tmp_workspace):
    """A RunConfig that trains in well under a second on the synthetic dataset."""
    from run_config import RunConfig

    return RunConfig(
        dataset=str(synthetic_dataset),
        min_interactions=10,
        latent_dim=3,
        hidden_dim=6,
        n_layers=2,
        dropout_rate=0.5,
        rounds=2,
        local_epochs=2,
        lr=1e-2,
        top_k=5,
        seed=3,
        output_dir=str(tmp_workspace["runs"] / "small"),
    ).validate()


@pytest.fixture
def small_split(small_config):
    from data_pipeline import load_interactions, prepare_split

    mat = load_interactions(small_config.dataset, min_interactions=small_config.min_interactions)
    return prepare_split(mat, small_config.seed, small_config.negatives_per_positive)


# ── Mock Target Validation ────────────────────────────────────────────────────
# Wraps unittest.mock.patch.object to detect stale mock targets at runtime.
# If a test patches an attribute that no longer exists on the target module,
# this raises AttributeError immediately instead of silently creating a phantom.


def _strict_patch_object(target, attribute, *args, **kwargs):
    """Wrapper for patch.object that validates the target attribute exists.

    Intercepts patch.object(target, attribute, ...) calls and checks that
    `attribute` is a real attribute of `target` before delegating to the
    original patch.object.
    """
    if not hasattr(target, attribute):
        target_name = getattr(target, "__name__", repr(target))
        raise AttributeError(
            f"Mock target validation failed: '{target_name}' has no attribute '{attribute}'. "
            f"Update the mock target to match the current API."
        )
    if "autospec" not in kwargs and not kwargs.get("new_callable") and "create" not in kwargs:
        target_name = getattr(target, "__name__", repr(target))
        warnings.warn(
            f"patch.object({target_name}, '{attribute}') called without autospec=True.",
            UserWarning,
            stacklevel=2,
        )
    return _original_patch_object(target, attribute, *args, **kwargs)


# Install globally; every test in this directory gets strict validation
unittest.mock.patch.object = _strict_patch_object  # type: ignore[assignment]
