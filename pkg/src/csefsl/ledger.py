"""Byte-exact communication accounting and server-side storage accounting."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Tuple

from .errors import UsageError

STRATEGIES = ("FSL_MC", "FSL_OC", "FSL_AN", "CSE_FSL")
LEDGER_COLUMNS = ("round", "client", "direction", "message_kind", "bytes")


class LedgerRow(NamedTuple):
    round: int
    client: int
    direction: str
    message_kind: str
    bytes: int


@dataclass
class CommLedger:
    """Running uplink/downlink totals; one smashed upload counts as one communication round."""
    bytes_per_element: int = 4
    label_bytes: int = 1
    uplink: int = 0
    downlink: int = 0
    comm_rounds: int = 0
    rows: List[LedgerRow] = field(default_factory=list)

    def record(self, message, round: int = 0) -> "CommLedger":
        nbytes = message.byte_size(self.bytes_per_element, self.label_bytes)
        if message.direction == "up":
            self.uplink += nbytes
        else:
            self.downlink += nbytes
        if message.kind == "smashed_upload":
            self.comm_rounds += 1
        self.rows.append(LedgerRow(round, message.client, message.direction, message.kind, nbytes))
        return self

    @property
    def total(self) -> int:
        return self.uplink + self.downlink

    def per_round(self) -> Dict[int, Tuple[int, int]]:
        out = defaultdict(lambda: [0, 0])
        for r in self.rows:
            out[r.round][0 if r.direction == "up" else 1] += r.bytes
        return {k: tuple(v) for k, v in sorted(out.items())}

    def per_client(self) -> Dict[int, Tuple[int, int]]:
        out = defaultdict(lambda: [0, 0])
        for r in self.rows:
            out[r.client][0 if r.direction == "up" else 1] += r.bytes
        return {k: tuple(v) for k, v in sorted(out.items())}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LEDGER_COLUMNS)
            w.writerows(self.rows)


@dataclass(frozen=True)
class LoadSizes:
    """Wire sizes in bytes: one batch of smashed data, its labels, the client model, the aux head."""
    smashed: int
    labels: int
    client_model: int
    aux: int = 0


def predict_epoch_load(strategy: str, n_clients: int, n_batches: int, sizes: LoadSizes,
                       h: int = 1) -> Tuple[int, int]:
    """Analytic (uplink, downlink) bytes for one epoch with one aggregation.

    Assumes every batch has the same size. Gradient-down messages are the size of
    the smashed activations.
    """
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}")
    N, B, s, l = n_clients, n_batches, sizes.smashed, sizes.labels
    if strategy in ("FSL_MC", "FSL_OC"):
        return N * (B * (s + l) + sizes.client_model), N * (B * s + sizes.client_model)
    if strategy == "FSL_AN":
        h = 1
    models = sizes.client_model + sizes.aux
    return N * (math.ceil(B / h) * (s + l) + models), N * models


def n_server_copies(strategy: str, n_clients: int) -> int:
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}")
    return 1 if strategy in ("FSL_OC", "CSE_FSL") else n_clients


def storage_of(strategy: str, n_clients: int, client_params: int, aux_params: int,
               server_params: int) -> int:
    """Parameters resident at the server during aggregation."""
    if min(client_params, aux_params, server_params) < 0:
        raise UsageError("parameter counts must be nonnegative")
    if strategy in ("FSL_MC", "FSL_OC") and aux_params:
        raise UsageError(f"{strategy} has no auxiliary network")
    copies = n_server_copies(strategy, n_clients)
    return n_clients * (client_params + aux_params) + copies * server_params
