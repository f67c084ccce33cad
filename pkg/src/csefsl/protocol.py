"""Client/server state machines for the four federated split learning strategies.

FSL_MC   one server model per client, gradients of the smashed data sent back
FSL_OC   one shared server model, gradients sent back, server gradient clipped
FSL_AN   one server model per client, clients train against an auxiliary head
CSE_FSL  one shared server model, auxiliary head, smashed upload every ``h`` batches

Messages are plain dataclasses; their wire size is derived from element counts.
"""
from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .data import Dataset, Partition, batches
from .errors import ConfigError, ProtocolError, UsageError
from .ledger import STRATEGIES, CommLedger
from .metrics import AssumptionEstimates, evaluate
from .nn import LrSchedule, ParamSet
from .seeding import substream
from .zoo import SplitModelSpec, build

DEFAULT_CLIP = 1.0
UPLOAD_POINTS = ("window_last", "window_end", "window_first")


@dataclass(frozen=True)
class Strategy:
    """A training strategy and its knobs.

    ``upload_point`` picks which activations a CSE_FSL window uploads:
    ``window_last`` sends the last batch's activations under the model that
    processed it (x_c^{t,h-1}), ``window_end`` recomputes the last batch under the
    post-window model, ``window_first`` sends the first batch's activations
    (the batch with m mod h == 0).
    """
    variant: str
    h: int = 1
    clip_threshold: Optional[float] = None
    upload_point: str = "window_last"

    def __post_init__(self):
        if self.variant not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.variant!r}; expected one of {STRATEGIES}")
        if self.h < 1:
            raise ConfigError("h must be at least 1")
        if self.h != 1 and self.variant != "CSE_FSL":
            raise ConfigError(f"h applies to CSE_FSL only; {self.variant} uploads every batch")
        if self.clip_threshold is not None:
            if self.variant != "FSL_OC":
                raise ConfigError("clip_threshold applies to FSL_OC only")
            if not self.clip_threshold > 0:
                raise ConfigError("clip_threshold must be positive")
        if self.upload_point not in UPLOAD_POINTS:
            raise ConfigError(f"upload_point must be one of {UPLOAD_POINTS}")

    @property
    def uses_aux(self) -> bool:
        return self.variant in ("FSL_AN", "CSE_FSL")

    @property
    def sends_grad_down(self) -> bool:
        return self.variant in ("FSL_MC", "FSL_OC")

    @property
    def single_server_model(self) -> bool:
        return self.variant in ("FSL_OC", "CSE_FSL")

    @property
    def clip(self) -> Optional[float]:
        if self.variant != "FSL_OC":
            return None
        return DEFAULT_CLIP if self.clip_threshold is None else self.clip_threshold

    def n_server_models(self, n_clients: int) -> int:
        return 1 if self.single_server_model else n_clients


# -- messages -----------------------------------------------------------------

def _count(p: Optional[ParamSet]) -> int:
    return nn.size(p)[0]


@dataclass
class ModelBroadcast:
    client: int
    x_c: ParamSet
    a_c: Optional[ParamSet] = None
    kind = "model_broadcast"
    direction = "down"

    def element_count(self) -> int:
        return _count(self.x_c) + _count(self.a_c)

    def byte_size(self, bytes_per_element: int = 4, label_bytes: int = 1) -> int:
        return self.element_count() * bytes_per_element


@dataclass
class SmashedUpload:
    client: int
    activations: np.ndarray
    labels: np.ndarray
    seq: int = 0
    kind = "smashed_upload"
    direction = "up"

    def element_count(self) -> int:
        return int(self.activations.size)

    def byte_size(self, bytes_per_element: int = 4, label_bytes: int = 1) -> int:
        return self.element_count() * bytes_per_element + int(self.labels.size) * label_bytes


@dataclass
class GradDown:
    client: int
    d_smashed: np.ndarray
    seq: int = 0
    kind = "grad_down"
    direction = "down"

    def element_count(self) -> int:
        return int(self.d_smashed.size)

    def byte_size(self, bytes_per_element: int = 4, label_bytes: int = 1) -> int:
        return self.element_count() * bytes_per_element


@dataclass
class ClientModelUpload:
    client: int
    x_c: ParamSet
    a_c: Optional[ParamSet] = None
    kind = "client_model_upload"
    direction = "up"

    def element_count(self) -> int:
        return _count(self.x_c) + _count(self.a_c)

    def byte_size(self, bytes_per_element: int = 4, label_bytes: int = 1) -> int:
        return self.element_count() * bytes_per_element


# -- state --------------------------------------------------------------------

@dataclass
class ClientState:
    client_id: int
    x_c: ParamSet
    a_c: Optional[ParamSet] = None
    m: int = 0
    pending: Dict[int, nn.ForwardTrace] = field(default_factory=dict)
    next_seq: int = 0


@dataclass
class ServerState:
    spec: SplitModelSpec
    strategy: Strategy
    server_models: List[ParamSet]
    x_c: ParamSet
    a_c: Optional[ParamSet]
    t: int = 0
    queue: Deque[SmashedUpload] = field(default_factory=deque)
    participants: frozenset = frozenset()

    def server_index(self, client: int) -> int:
        return 0 if self.strategy.single_server_model else client


@dataclass
class RoundReport:
    t: int
    eta: float
    epochs: Tuple[int, ...]
    participants: Tuple[int, ...]
    client_losses: Dict[int, List[float]]
    server_losses: List[Tuple[int, float]]
    message_counts: Counter
    uplink: int
    downlink: int
    comm_rounds: int
    messages: List[tuple] = field(default_factory=list)

    @property
    def train_loss(self) -> float:
        if not self.server_losses:
            return float("nan")
        return math.fsum(l for _, l in self.server_losses) / len(self.server_losses)


# -- operations ---------------------------------------------------------------

def broadcast_models(server: ServerState, participants: Sequence[int],
                     clients: Dict[int, ClientState]) -> List[ModelBroadcast]:
    """Step 1: every participant starts the round from the global client (and aux) model."""
    if not participants:
        raise UsageError("cannot broadcast to an empty participant set")
    msgs = []
    for c in participants:
        st = clients[c]
        st.x_c = server.x_c
        st.a_c = server.a_c
        st.m = 0
        st.pending.clear()
        msgs.append(ModelBroadcast(c, server.x_c, server.a_c))
    return msgs


def _local_step(spec: SplitModelSpec, x_c: ParamSet, a_c: ParamSet, x: np.ndarray,
                y: np.ndarray, eta: float):
    z, ctrace = nn.forward(spec.client_stack, x_c, x)
    logits, htrace = nn.forward(spec.aux_head, a_c, z)
    loss, d = nn.softmax_cross_entropy(logits, y)
    ga, dz = nn.backward(spec.aux_head, a_c, htrace, d)
    gc, _ = nn.backward(spec.client_stack, x_c, ctrace, dz)
    return z, loss, nn.sgd_step(x_c, gc, eta), nn.sgd_step(a_c, ga, eta), nn.sq_norm(gc) + nn.sq_norm(ga)


def client_local_window(client: ClientState, window: Sequence[Tuple[np.ndarray, np.ndarray]],
                        eta: float, spec: SplitModelSpec, strategy: Strategy,
                        estimates: Optional[AssumptionEstimates] = None
                        ) -> Tuple[ClientState, SmashedUpload, List[float]]:
    """Run one upload window of local aux-loss SGD steps and emit one smashed upload.

    ``window`` holds up to ``h`` (inputs, labels) batches. Each batch takes one SGD
    step on (x_c, a_c) at the fixed round step size ``eta``.
    """
    if not strategy.uses_aux:
        raise ConfigError(f"{strategy.variant} does not train against an auxiliary head")
    if client.a_c is None or not spec.has_aux:
        raise ConfigError("local window needs an auxiliary head")
    if not window:
        raise UsageError("empty window")
    losses = []
    first = last = None
    for j, (x, y) in enumerate(window):
        z, loss, client.x_c, client.a_c, gsq = _local_step(spec, client.x_c, client.a_c, x, y, eta)
        if estimates is not None:
            estimates.observe_client(gsq)
        losses.append(loss)
        client.m += 1
        if j == 0:
            first = (z, y)
        last = (z, y)
    if strategy.upload_point == "window_first":
        z, y = first
    elif strategy.upload_point == "window_end":
        y = window[-1][1]
        z, _ = nn.forward(spec.client_stack, client.x_c, window[-1][0])
    else:
        z, y = last
    upload = SmashedUpload(client.client_id, z, np.asarray(y), client.next_seq)
    client.next_seq += 1
    return client, upload, losses


def client_forward_baseline(client: ClientState, x: np.ndarray, y: np.ndarray,
                            spec: SplitModelSpec) -> SmashedUpload:
    """Forward the client stack and park the trace until the gradient comes back."""
    z, trace = nn.forward(spec.client_stack, client.x_c, x)
    seq = client.next_seq
    client.next_seq += 1
    client.pending[seq] = trace
    return SmashedUpload(client.client_id, z, np.asarray(y), seq)


def client_step_baseline(client: ClientState, grad_down: GradDown, eta: float,
                         spec: SplitModelSpec,
                         estimates: Optional[AssumptionEstimates] = None) -> ClientState:
    """Finish a baseline batch: backprop the returned gradient and step x_c."""
    if grad_down.client != client.client_id:
        raise ProtocolError(f"gradient for client {grad_down.client} delivered to "
                            f"client {client.client_id}")
    trace = client.pending.pop(grad_down.seq, None)
    if trace is None:
        raise ProtocolError(f"client {client.client_id} has no pending batch {grad_down.seq}")
    try:
        gc, _ = nn.backward(spec.client_stack, client.x_c, trace, grad_down.d_smashed)
    except ValueError as e:
        raise ProtocolError(f"gradient does not match the pending batch: {e}") from None
    if estimates is not None:
        estimates.observe_client(nn.sq_norm(gc))
    client.x_c = nn.sgd_step(client.x_c, gc, eta)
    client.m += 1
    return client


def server_ingest(server: ServerState, upload: SmashedUpload, eta: float,
                  estimates: Optional[AssumptionEstimates] = None
                  ) -> Tuple[Optional[GradDown], float]:
    """One sequential server SGD step on an uploaded batch of smashed data."""
    if upload.client not in server.participants:
        raise ProtocolError(f"upload from client {upload.client}, not a participant "
                            f"of round {server.t}")
    spec, strategy = server.spec, server.strategy
    k = server.server_index(upload.client)
    xs = server.server_models[k]
    logits, trace = nn.forward(spec.server_stack, xs, upload.activations)
    loss, d = nn.softmax_cross_entropy(logits, upload.labels)
    gs, dz = nn.backward(spec.server_stack, xs, trace, d)
    if estimates is not None:
        estimates.observe_server(nn.sq_norm(gs))
    if strategy.clip is not None:
        gs = nn.clip_by_global_norm(gs, strategy.clip)
    server.server_models[k] = nn.sgd_step(xs, gs, eta)
    if strategy.sends_grad_down:
        return GradDown(upload.client, dz, upload.seq), loss
    return None, loss


def drain(server: ServerState, eta: float,
          estimates: Optional[AssumptionEstimates] = None) -> List[Tuple[int, float]]:
    """Ingest every queued upload in arrival order."""
    out = []
    while server.queue:
        up = server.queue.popleft()
        gd, loss = server_ingest(server, up, eta, estimates)
        if gd is not None:
            raise ProtocolError("queued ingestion is only for strategies without gradient return")
        out.append((up.client, loss))
    return out


def _mean(sets: Sequence[ParamSet]) -> ParamSet:
    first = sets[0]
    for p in sets[1:]:
        nn.check_compatible(first, p)
    return {k: np.mean(np.stack([p[k] for p in sets]), axis=0) for k in first}


def aggregate(server: ServerState, uploads: Sequence[ClientModelUpload]) -> ServerState:
    """Unweighted mean of the participants' client (and aux) models; advances the round."""
    seen = [u.client for u in uploads]
    if len(set(seen)) != len(seen):
        raise ProtocolError(f"duplicate client model upload in {seen}")
    if set(seen) != set(server.participants):
        raise ProtocolError(f"uploads from {sorted(seen)} but participants are "
                            f"{sorted(server.participants)}")
    if server.queue:
        raise ProtocolError("aggregation with undrained smashed uploads")
    ordered = sorted(uploads, key=lambda u: u.client)
    server.x_c = _mean([u.x_c for u in ordered])
    if server.strategy.uses_aux:
        server.a_c = _mean([u.a_c for u in ordered])
    server.t += 1
    return server


def sample_participants(n_clients: int, fraction: float, seed: int, t: int) -> Tuple[int, ...]:
    """ceil(fraction * n) distinct clients, uniform without replacement, sorted."""
    if not 0 < fraction <= 1:
        raise UsageError("fraction must lie in (0, 1]")
    k = min(n_clients, max(1, math.ceil(fraction * n_clients - 1e-9)))
    if k == n_clients:
        return tuple(range(n_clients))
    pick = substream(seed, "sampling", t).choice(n_clients, size=k, replace=False)
    return tuple(sorted(int(c) for c in pick))


def _windows(plan_batches, h):
    return [list(plan_batches[i:i + h]) for i in range(0, len(plan_batches), h)]


class Simulation:
    """All client and server state for one training run, advanced a round at a time.

    Aggregation happens every ``aggregation_period`` units, where the unit is
    ``"epoch"`` (each participant works through that many epochs of its shard) or
    ``"window"`` (each participant runs that many upload windows, continuing its
    shard across rounds). Within a round, clients take turns window by window in
    client-id order, or in a seeded random order per slot when
    ``arrival="shuffled"``; the server ingests uploads first come first serve.
    """

    def __init__(self, spec: SplitModelSpec, strategy: Strategy, train: Dataset,
                 partition: Partition, *, batch_size: int, eta0: float, seed: int,
                 fraction: float = 1.0, aggregation_period: int = 1,
                 aggregation_unit: str = "epoch", arrival: str = "ordered",
                 bytes_per_element: int = 4, label_bytes: int = 1):
        if aggregation_unit not in ("epoch", "window"):
            raise ConfigError("aggregation_unit must be 'epoch' or 'window'")
        if aggregation_period < 1:
            raise ConfigError("aggregation_period must be at least 1")
        if arrival not in ("ordered", "shuffled"):
            raise ConfigError("arrival must be 'ordered' or 'shuffled'")
        if batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        partition.check(len(train))
        self.spec, self.strategy, self.train, self.partition = spec, strategy, train, partition
        self.batch_size, self.seed, self.fraction = batch_size, seed, fraction
        self.period, self.unit, self.arrival = aggregation_period, aggregation_unit, arrival
        self.schedule = LrSchedule(eta0)
        self.n_clients = partition.n_clients

        x_c, a_c, x_s = build(spec, seed, require_aux=strategy.uses_aux)
        if not strategy.uses_aux:
            a_c = None
        servers = [x_s] + [nn.copy_params(x_s) for _ in range(strategy.n_server_models(self.n_clients) - 1)]
        self.server = ServerState(spec, strategy, servers, x_c, a_c)
        self.clients = {c: ClientState(c, x_c, a_c) for c in range(self.n_clients)}
        self.ledger = CommLedger(bytes_per_element, label_bytes)
        self.estimates = AssumptionEstimates()
        # window-mode cursors: client -> (epoch, window index)
        self._cursor = {c: (0, 0) for c in range(self.n_clients)}
        self._plan_cache: Dict[int, tuple] = {}

    @property
    def t(self) -> int:
        return self.server.t

    def lr(self, t: Optional[int] = None) -> float:
        return nn.lr_at(self.schedule, self.t if t is None else t)

    def _client_windows(self, c: int) -> Tuple[list, Tuple[int, ...]]:
        h = self.strategy.h
        if self.unit == "epoch":
            epochs = tuple(range(self.t * self.period, (self.t + 1) * self.period))
            wins = []
            for e in epochs:
                plan = batches(self.partition, c, self.batch_size, e, self.seed)
                wins += _windows(plan.batches, h)
            return wins, epochs
        wins, epochs = [], []
        epoch, pos = self._cursor[c]
        while len(wins) < self.period:
            cached = self._plan_cache.get(c)
            if cached is None or cached[0] != epoch:
                plan = batches(self.partition, c, self.batch_size, epoch, self.seed)
                cached = (epoch, _windows(plan.batches, h))
                self._plan_cache[c] = cached
            ew = cached[1]
            if not epochs or epochs[-1] != epoch:
                epochs.append(epoch)
            take = ew[pos:pos + self.period - len(wins)]
            wins += take
            pos += len(take)
            if pos >= len(ew):
                epoch, pos = epoch + 1, 0
        self._cursor[c] = (epoch, pos)
        return wins, tuple(epochs)

    def _record(self, msg, report_msgs, counts):
        self.ledger.record(msg, self.t)
        counts[msg.kind] += 1
        report_msgs.append((msg.kind, msg.client, msg.direction,
                            msg.byte_size(self.ledger.bytes_per_element, self.ledger.label_bytes)))

    def run_round(self) -> RoundReport:
        t, eta = self.t, self.lr()
        spec, strategy, server = self.spec, self.strategy, self.server
        up0, down0, cr0 = self.ledger.uplink, self.ledger.downlink, self.ledger.comm_rounds
        counts: Counter = Counter()
        msgs: List[tuple] = []
        participants = sample_participants(self.n_clients, self.fraction, self.seed, t)
        server.participants = frozenset(participants)

        for msg in broadcast_models(server, participants, self.clients):
            self._record(msg, msgs, counts)

        windows, epochs = {}, set()
        for c in participants:
            windows[c], ep = self._client_windows(c)
            epochs.update(ep)
        client_losses = {c: [] for c in participants}
        server_losses = []
        X, Y = self.train.inputs, self.train.labels
        n_slots = max(len(w) for w in windows.values())
        for slot in range(n_slots):
            order = list(participants)
            if self.arrival == "shuffled":
                order = [order[i] for i in substream(self.seed, "arrival", t, slot).permutation(len(order))]
            for c in order:
                if slot >= len(windows[c]):
                    continue
                st = self.clients[c]
                win = [(X[ix], Y[ix]) for ix in windows[c][slot]]
                if strategy.uses_aux:
                    _, upload, losses = client_local_window(st, win, eta, spec, strategy,
                                                            self.estimates)
                    client_losses[c] += losses
                    self._record(upload, msgs, counts)
                    server.queue.append(upload)
                else:
                    x, y = win[0]
                    upload = client_forward_baseline(st, x, y, spec)
                    self._record(upload, msgs, counts)
                    gd, loss = server_ingest(server, upload, eta, self.estimates)
                    server_losses.append((c, loss))
                    self._record(gd, msgs, counts)
                    client_step_baseline(st, gd, eta, spec, self.estimates)
            if strategy.uses_aux:
                server_losses += drain(server, eta, self.estimates)

        uploads = []
        for c in participants:
            st = self.clients[c]
            up = ClientModelUpload(c, st.x_c, st.a_c)
            self._record(up, msgs, counts)
            uploads.append(up)
        aggregate(server, uploads)
        self.estimates.snapshot()
        return RoundReport(t, eta, tuple(sorted(epochs)), participants, client_losses,
                           server_losses, counts, self.ledger.uplink - up0,
                           self.ledger.downlink - down0, self.ledger.comm_rounds - cr0, msgs)

    def run(self, rounds: int) -> List[RoundReport]:
        return [self.run_round() for _ in range(rounds)]

    def evaluate(self, dataset: Dataset) -> Tuple[float, float]:
        """Accuracy/loss of the aggregated client model with the server model(s).

        With per-client server copies the figures are averaged over copies.
        """
        res = [evaluate(self.spec, self.server.x_c, xs, dataset) for xs in self.server.server_models]
        return (math.fsum(r[0] for r in res) / len(res), math.fsum(r[1] for r in res) / len(res))
