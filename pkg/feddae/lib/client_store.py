"""
Client-private state and where it lives between rounds.

A ClientState bundles what never leaves the client: the local encoder,
the gate, their optimizer moments and the train positives. The memory
store keeps the objects themselves; the sqlite store spills them to
<output>/runtime-state/clients.db as npz blobs so only the clients of the
current round are resident.
"""

import io
import json
import logging
import sqlite3
import threading
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol

import numpy as np
from dae_model import LOCAL_ENCODER, GateParams
from errors import CheckpointError, ConfigurationError
from nn_core import AdamState, DenseNet
from workspace import get_runtime_state_dir

logger = logging.getLogger(f"feddae.{__name__}")

StoreKind = Literal["memory", "sqlite"]
STORE_KINDS: tuple[StoreKind, ...] = ("memory", "sqlite")
CLIENTS_DB_NAME = "clients.db"


@dataclass
class ClientState:
    client_id: int
    local_encoder: DenseNet
    gate: GateParams
    train_row: np.ndarray  # sorted train-positive item indices
    negatives: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    local_encoder_adam: AdamState = field(default_factory=AdamState)
    gate_adam: AdamState = field(default_factory=AdamState)

    @property
    def n_interactions(self) -> int:
        return int(self.train_row.size)

    def private_tensors(self) -> dict[str, np.ndarray]:
        """Every tensor of the state under a stable name (parameters, moments, rows)."""
        tensors: dict[str, np.ndarray] = {}
        for key, value in self.local_encoder.named_parameters().items():
            tensors[f"local_encoder.{key}"] = value
        tensors["gate.psi"] = self.gate.psi
        tensors.update(self.local_encoder_adam.named_moments("local_encoder_adam."))
        tensors.update(self.gate_adam.named_moments("gate_adam."))
        tensors["train_row"] = self.train_row
        tensors["negatives"] = self.negatives
        return tensors

    def describe(self) -> dict:
        """JSON-safe shape information needed to rebuild the state from tensors."""
        return {
            "client_id": self.client_id,
            "dims": self.local_encoder.dims,
            "activations": self.local_encoder.activations,
            "local_encoder_adam_step": self.local_encoder_adam.step,
            "gate_adam_step": self.gate_adam.step,
        }

    @classmethod
    def from_tensors(cls, description: dict, tensors: dict[str, np.ndarray]) -> "ClientState":
        activations = description["activations"]
        n_layers = len(activations)
        try:
            encoder = DenseNet.from_arrays(
                [tensors[f"local_encoder.layers.{i}.weight"] for i in range(n_layers)],
                [tensors[f"local_encoder.layers.{i}.bias"] for i in range(n_layers)],
                activations,
                name=LOCAL_ENCODER,
            )
            gate = GateParams(tensors["gate.psi"])
        except KeyError as e:
            raise CheckpointError(f"Client {description['client_id']}: missing tensor {e.args[0]}") from e
        return cls(
            client_id=int(description["client_id"]),
            local_encoder=encoder,
            gate=gate,
            train_row=np.asarray(tensors["train_row"], dtype=np.int64),
            negatives=np.asarray(tensors.get("negatives", np.empty(0)), dtype=np.int64),
            local_encoder_adam=_restore_adam(tensors, "local_encoder_adam.", description["local_encoder_adam_step"]),
            gate_adam=_restore_adam(tensors, "gate_adam.", description["gate_adam_step"]),
        )


def _restore_adam(tensors: dict[str, np.ndarray], prefix: str, step: int) -> AdamState:
    state = AdamState(step=int(step))
    for name, value in tensors.items():
        if name.startswith(f"{prefix}m."):
            state.first_moment[name[len(prefix) + 2 :]] = np.array(value, dtype=np.float64)
        elif name.startswith(f"{prefix}v."):
            state.second_moment[name[len(prefix) + 2 :]] = np.array(value, dtype=np.float64)
    return state


class ClientStore(Protocol):
    def load(self, client_id: int) -> ClientState: ...

    def save(self, state: ClientState) -> None: ...

    def ids(self) -> range: ...

    def close(self) -> None: ...


class MemoryClientStore:
    """All client states resident; load() hands out the stored object itself."""

    def __init__(self, states: list[ClientState]) -> None:
        self._states = {s.client_id: s for s in states}
        if sorted(self._states) != list(range(len(states))):
            raise ConfigurationError("clients", "client ids must be exactly 0..n-1")

    def load(self, client_id: int) -> ClientState:
        return self._states[client_id]

    def save(self, state: ClientState) -> None:
        self._states[state.client_id] = state

    def ids(self) -> range:
        return range(len(self._states))

    def close(self) -> None:
        pass


class SqliteClientStore:
    """
    SQLite-backed client state, one row per client.

    Rows hold a JSON description plus an npz blob of private_tensors().
    Writes are serialized by an in-process lock; readers open their own
    connection so worker threads never share one.
    """

    def __init__(self, db_path: Path, states: list[ClientState] | None = None) -> None:
        self.db_path = db_path
        self._lock = threading.Lock()
        db_path.parent.mkdir(parents=True, exist_ok=True)
        conn = self._connect()
        try:
            _ensure_schema(conn)
            self._count = conn.execute("SELECT COUNT(*) AS n FROM client_state").fetchone()["n"]
        finally:
            conn.close()
        for state in states or []:
            self.save(state)

    def load(self, client_id: int) -> ClientState:
        conn = self._connect()
        try:
            row = conn.execute(
                "SELECT meta_json, tensors FROM client_state WHERE client_id = ?",
                (client_id,),
            ).fetchone()
        finally:
            conn.close()
        if row is None:
            raise KeyError(client_id)
        with np.load(io.BytesIO(row["tensors"]), allow_pickle=False) as archive:
            tensors = {name: archive[name] for name in archive.files}
        return ClientState.from_tensors(json.loads(row["meta_json"]), tensors)

    def save(self, state: ClientState) -> None:
        buffer = io.BytesIO()
        np.savez(buffer, **state.private_tensors())
        with self._lock:
            conn = self._connect()
            try:
                cursor = conn.execute(
                    """
                    INSERT OR REPLACE INTO client_state (client_id, meta_json, tensors, updated_at)
                    VALUES (?, ?, ?, datetime('now'))
                    """,
                    (state.client_id, json.dumps(state.describe()), buffer.getvalue()),
                )
                conn.commit()
                if cursor.rowcount and state.client_id >= self._count:
                    self._count = state.client_id + 1
            finally:
                conn.close()

    def ids(self) -> range:
        return range(self._count)

    def close(self) -> None:
        logger.debug("Client store %s closed with %d clients", self.db_path, self._count)

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(str(self.db_path), timeout=5)
        conn.row_factory = sqlite3.Row
        return conn


def _ensure_schema(conn: sqlite3.Connection) -> None:
    conn.execute(
        """
        CREATE TABLE IF NOT EXISTS client_state (
            client_id INTEGER PRIMARY KEY,
            meta_json TEXT NOT NULL,
            tensors BLOB NOT NULL,
            updated_at TEXT NOT NULL
        )
        """
    )
    conn.commit()


def open_client_store(
    kind: StoreKind, n_clients: int, factory: Callable[[int], ClientState], output_dir: Path | None = None
) -> ClientStore:
    """Build n_clients fresh states with factory(u) and place them in the chosen store."""
    if kind == "memory":
        return MemoryClientStore([factory(u) for u in range(n_clients)])
    if kind == "sqlite":
        if output_dir is None:
            raise ConfigurationError("client_store", "the sqlite store needs an output directory")
        db_path = get_runtime_state_dir(output_dir) / CLIENTS_DB_NAME
        if db_path.exists():
            db_path.unlink()
        store = SqliteClientStore(db_path)
        for u in range(n_clients):
            store.save(factory(u))
        logger.info("Spilled %d client states to %s", n_clients, db_path)
        return store
    raise ConfigurationError("client_store", f"unknown store {kind!r}; expected one of {list(STORE_KINDS)}")
