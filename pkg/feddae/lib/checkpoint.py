"""
Checkpoint read/write.

A checkpoint is a flat map tensor-name -> float64 array plus a "__meta__"
JSON string:
  server.global_encoder.layers.{i}.weight|bias
  server.decoder.layers.{i}.weight|bias
  clients.{u}.local_encoder.layers.{i}.weight|bias
  clients.{u}.gate.psi

.npz files are written with fixed zip timestamps and sorted entries so two
identical runs produce byte-identical files. A .json variant with
{"shape": [...], "values": [...]} per tensor exists for inspection.
"""

import json
import logging
import zipfile
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from client_store import ClientState, ClientStore
from dae_model import DECODER, GLOBAL_ENCODER, LOCAL_ENCODER, GateParams
from errors import CheckpointError
from nn_core import DenseNet

logger = logging.getLogger(f"feddae.{__name__}")

FORMAT_VERSION = 1
META_KEY = "__meta__"
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any]

    @property
    def n_items(self) -> int:
        return int(self.meta["n_items"])

    @property
    def latent_dim(self) -> int:
        return int(self.meta["latent_dim"])

    @property
    def n_clients(self) -> int:
        return int(self.meta["n_clients"])


def _net_tensors(prefix: str, net: DenseNet) -> dict[str, np.ndarray]:
    return {f"{prefix}.{key}": value for key, value in net.named_parameters().items()}


def collect_tensors(global_encoder: DenseNet, decoder: DenseNet, store: ClientStore) -> dict[str, np.ndarray]:
    tensors = _net_tensors(f"server.{GLOBAL_ENCODER}", global_encoder)
    tensors.update(_net_tensors(f"server.{DECODER}", decoder))
    for u in store.ids():
        client = store.load(u)
        tensors.update(_net_tensors(f"clients.{u}.{LOCAL_ENCODER}", client.local_encoder))
        tensors[f"clients.{u}.gate.psi"] = client.gate.psi
    return tensors


def build_meta(
    config: Mapping[str, Any], global_encoder: DenseNet, decoder: DenseNet, n_clients: int, round_index: int
) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "config": dict(config),
        "n_items": global_encoder.in_dim,
        "latent_dim": decoder.in_dim,
        "n_clients": n_clients,
        "encoder_dims": global_encoder.dims,
        "encoder_activations": global_encoder.activations,
        "decoder_dims": decoder.dims,
        "decoder_activations": decoder.activations,
        "round": round_index,
    }


def save_checkpoint(path: Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_json = json.dumps(meta, sort_keys=True)
    if path.suffix == ".json":
        payload = {
            "meta": json.loads(meta_json),
            "tensors": {
                name: {"shape": list(np.shape(arr)), "values": np.asarray(arr, dtype=np.float64).ravel().tolist()}
                for name, arr in sorted(tensors.items())
            },
        }
        path.write_text(json.dumps(payload), encoding="utf-8")
    else:
        entries = {name: np.asarray(arr, dtype=np.float64) for name, arr in tensors.items()}
        entries[META_KEY] = np.array(meta_json)
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in sorted(entries):
                info = zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_EPOCH)
                with zf.open(info, "w", force_zip64=True) as f:
                    arr = entries[name]
                    np.lib.format.write_array(f, np.ascontiguousarray(arr) if arr.ndim else arr, allow_pickle=False)
    logger.info("Wrote checkpoint %s (%d tensors)", path, len(tensors))
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        if path.suffix == ".json":
            payload = json.loads(path.read_text(encoding="utf-8"))
            tensors = {
                name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
                for name, entry in payload["tensors"].items()
            }
            meta = payload["meta"]
        else:
            with np.load(path, allow_pickle=False) as archive:
                tensors = {name: archive[name] for name in archive.files if name != META_KEY}
                meta = json.loads(archive[META_KEY].reshape(()).item())
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format {meta.get('format_version')!r} in {path}")
    return Checkpoint(tensors, meta)


def check_compatible(ckpt: Checkpoint, n_items: int, n_clients: int) -> None:
    """Fail unless the checkpoint was trained on an item universe of n_items and n_clients users."""
    if ckpt.n_items != n_items or ckpt.n_clients != n_clients:
        raise CheckpointError(
            f"Checkpoint has m={ckpt.n_items}, k={ckpt.latent_dim}, n={ckpt.n_clients}; "
            f"dataset has m={n_items}, n={n_clients}"
        )


def _restore_net(ckpt: Checkpoint, prefix: str, activations: list[str], name: str) -> DenseNet:
    n_layers = len(activations)
    try:
        return DenseNet.from_arrays(
            [ckpt.tensors[f"{prefix}.layers.{i}.weight"] for i in range(n_layers)],
            [ckpt.tensors[f"{prefix}.layers.{i}.bias"] for i in range(n_layers)],
            activations,
            name=name,
        )
    except KeyError as e:
        raise CheckpointError(f"Checkpoint is missing tensor {e.args[0]}") from e


def restore_server_nets(ckpt: Checkpoint) -> tuple[DenseNet, DenseNet]:
    encoder = _restore_net(ckpt, f"server.{GLOBAL_ENCODER}", ckpt.meta["encoder_activations"], GLOBAL_ENCODER)
    decoder = _restore_net(ckpt, f"server.{DECODER}", ckpt.meta["decoder_activations"], DECODER)
    return encoder, decoder


def restore_client(ckpt: Checkpoint, client_id: int, train_row: np.ndarray) -> ClientState:
    """Local encoder and gate of one client; optimizer moments are not checkpointed."""
    prefix = f"clients.{client_id}"
    encoder = _restore_net(ckpt, f"{prefix}.{LOCAL_ENCODER}", ckpt.meta["encoder_activations"], LOCAL_ENCODER)
    psi = ckpt.tensors.get(f"{prefix}.gate.psi")
    if psi is None:
        raise CheckpointError(f"Checkpoint is missing tensor {prefix}.gate.psi")
    return ClientState(client_id, encoder, GateParams(psi), np.asarray(train_row, dtype=np.int64))
