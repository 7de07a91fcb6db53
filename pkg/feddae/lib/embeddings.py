"""
Item representations read off encoder weights.

Multiplying the weight matrices of all encoder layers gives an m x 2k map
from items to the posterior head; each row is one item's representation.
Activations are ignored. Per user we export the global, local and
gate-combined matrices.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
from client_store import ClientState
from dae_model import dense_row, gate_weights
from data_pipeline import InteractionMatrix
from errors import ConfigurationError
from nn_core import DenseNet

logger = logging.getLogger(f"feddae.{__name__}")

REPRESENTATION_KINDS = ("global", "local", "combined")


def item_representation(encoder: DenseNet) -> np.ndarray:
    """(W_L ... W_2 W_1)^T, shape (m, 2k)."""
    product = encoder.layers[0].weight
    for layer in encoder.layers[1:]:
        product = layer.weight @ product
    return product.T.copy()


def user_representations(
    global_encoder: DenseNet, client: ClientState, fixed_weight: float | None = None
) -> tuple[dict[str, np.ndarray], tuple[float, float]]:
    """Global, local and w1*global + w2*local matrices plus the gate weights used."""
    r = dense_row(client.train_row, client.gate.n_items)
    if fixed_weight is None:
        w1, w2 = gate_weights(client.gate, r)
    else:
        w1, w2 = fixed_weight, 1.0 - fixed_weight
    global_rep = item_representation(global_encoder)
    local_rep = item_representation(client.local_encoder)
    reps = {"global": global_rep, "local": local_rep, "combined": w1 * global_rep + w2 * local_rep}
    return reps, (w1, w2)


def resolve_user(mat: InteractionMatrix, raw_user: int) -> int:
    """Dense index of a raw user id, or a ConfigurationError listing the valid range."""
    if not mat.has_user(raw_user):
        raise ConfigurationError(
            "users",
            f"unknown user id {raw_user}; valid raw ids range {int(mat.user_ids.min())}..{int(mat.user_ids.max())} "
            f"({mat.n_users} users)",
        )
    return mat.user_index(raw_user)


def export_user_embeddings(
    output_dir: Path,
    raw_user: int,
    reps: dict[str, np.ndarray],
    interacted: np.ndarray,
    item_ids: np.ndarray,
) -> list[Path]:
    """One CSV per representation kind: item_id, dim_0..dim_{2k-1}, interacted."""
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for kind in REPRESENTATION_KINDS:
        matrix = reps[kind]
        frame = pd.DataFrame(matrix, columns=[f"dim_{j}" for j in range(matrix.shape[1])])
        frame.insert(0, "item_id", item_ids)
        frame["interacted"] = np.asarray(interacted, dtype=np.int64)
        path = output_dir / f"user{raw_user}_{kind}.csv"
        frame.to_csv(path, index=False, float_format="%.17g")
        written.append(path)
    logger.info("Exported %d representation files for user %s to %s", len(written), raw_user, output_dir)
    return written
