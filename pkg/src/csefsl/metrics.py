"""Evaluation and convergence monitors (learning-rate weighted gradient norms)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .data import Dataset
from .errors import UsageError
from .nn import LrSchedule, ParamSet
from .zoo import SplitModelSpec


def evaluate(spec: SplitModelSpec, client: ParamSet, server: ParamSet, dataset: Dataset,
             batch_size: int = 4096) -> Tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy of client stack followed by server stack.

    The auxiliary head is never used. Ties go to the lowest class index.
    """
    n = len(dataset)
    if n == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    correct, loss_sum = 0, 0.0
    for lo in range(0, n, batch_size):
        x = dataset.inputs[lo:lo + batch_size]
        y = dataset.labels[lo:lo + batch_size]
        z, _ = nn.forward(spec.client_stack, client, x)
        logits, _ = nn.forward(spec.server_stack, server, z)
        loss, _ = nn.softmax_cross_entropy(logits, y)
        loss_sum += loss * len(y)
        correct += int((np.argmax(logits, axis=1) == y).sum())
    return correct / n, loss_sum / n


def predict(spec: SplitModelSpec, client: ParamSet, server: ParamSet, x: np.ndarray) -> np.ndarray:
    z, _ = nn.forward(spec.client_stack, client, x)
    return np.argmax(nn.forward(spec.server_stack, server, z)[0], axis=1)


def client_grad_sq(spec: SplitModelSpec, client: ParamSet, aux: Optional[ParamSet],
                   server: ParamSet, probe: Dataset) -> float:
    """Squared norm of the full-batch client-side gradient on ``probe``.

    With an aux head this is the gradient of the local (aux) loss with respect to
    both client and aux parameters; otherwise of the end-to-end loss with respect
    to the client parameters.
    """
    z, ctrace = nn.forward(spec.client_stack, client, probe.inputs)
    if aux is not None:
        logits, htrace = nn.forward(spec.aux_head, aux, z)
        _, d = nn.softmax_cross_entropy(logits, probe.labels)
        ga, dz = nn.backward(spec.aux_head, aux, htrace, d)
        gc, _ = nn.backward(spec.client_stack, client, ctrace, dz)
        return nn.sq_norm(gc) + nn.sq_norm(ga)
    logits, strace = nn.forward(spec.server_stack, server, z)
    _, d = nn.softmax_cross_entropy(logits, probe.labels)
    _, dz = nn.backward(spec.server_stack, server, strace, d)
    gc, _ = nn.backward(spec.client_stack, client, ctrace, dz)
    return nn.sq_norm(gc)


def server_grad_sq(spec: SplitModelSpec, client: ParamSet, server: ParamSet,
                   probe: Dataset) -> float:
    """Squared norm of the full-batch server gradient on the probe's smashed data."""
    z, _ = nn.forward(spec.client_stack, client, probe.inputs)
    logits, strace = nn.forward(spec.server_stack, server, z)
    _, d = nn.softmax_cross_entropy(logits, probe.labels)
    gs, _ = nn.backward(spec.server_stack, server, strace, d)
    return nn.sq_norm(gs)


@dataclass
class ConvergenceTrace:
    etas: List[float] = field(default_factory=list)
    client_sq: List[float] = field(default_factory=list)
    server_sq: List[float] = field(default_factory=list)

    def record(self, eta: float, client_sq: float, server_sq: float) -> None:
        if not (eta > 0 and client_sq >= 0 and server_sq >= 0):
            raise UsageError("trace entries must be a positive step and nonnegative norms")
        if not (math.isfinite(client_sq) and math.isfinite(server_sq)):
            raise UsageError("gradient norms must be finite")
        self.etas.append(float(eta))
        self.client_sq.append(float(client_sq))
        self.server_sq.append(float(server_sq))

    def __len__(self):
        return len(self.etas)

    def gamma(self, T: Optional[int] = None) -> float:
        return math.fsum(self.etas[:len(self) if T is None else T])


def weighted_grad_average(trace: ConvergenceTrace, side: str, T: int) -> float:
    """(1/Gamma_T) * sum_{t<T} eta_t * ||grad F(x^t)||^2 for side 'client' or 'server'."""
    if T <= 0:
        raise UsageError("T must be positive")
    if T > len(trace):
        raise UsageError(f"only {len(trace)} rounds recorded, asked for T={T}")
    norms = {"client": trace.client_sq, "server": trace.server_sq}[side]
    num = math.fsum(e * g for e, g in zip(trace.etas[:T], norms[:T]))
    return num / trace.gamma(T)


@dataclass
class AssumptionEstimates:
    """Running maxima of stochastic gradient norms (estimates of G1 client-side, G2 server-side)."""
    G1_hat: float = 0.0
    G2_hat: float = 0.0
    history: List[Tuple[float, float]] = field(default_factory=list)

    def observe_client(self, sq_norm: float) -> None:
        self.G1_hat = max(self.G1_hat, math.sqrt(sq_norm))

    def observe_server(self, sq_norm: float) -> None:
        self.G2_hat = max(self.G2_hat, math.sqrt(sq_norm))

    def snapshot(self) -> None:
        self.history.append((self.G1_hat, self.G2_hat))


@dataclass(frozen=True)
class BoundConstants:
    loss_gap: float
    L: float = 0.0
    G: float = 0.0
    M: int = 1
    N: int = 1


def _etas(schedule: LrSchedule, T: int) -> np.ndarray:
    return schedule.eta0 / (1.0 + np.arange(T, dtype=np.float64))


def prop_bound_rhs(side: str, T: int, schedule: LrSchedule, c: BoundConstants) -> float:
    """Right-hand side of the client or server convergence bound.

    client: 4 gap / ((2M-1) Gamma_T) + 2 M^2 G^2 L / ((2M-1) Gamma_T) * sum eta_t^2
    server: 4 gap / ((2N-1) Gamma_T) + 4 G^2 / (2N-1) / Gamma_T * sum (L N^2 / 2) eta_t^2

    The server bound's distribution-distance term has no computable value and is
    left out, so the server figure is a partial bound.
    """
    if T < 1:
        raise UsageError("T must be positive")
    if min(c.loss_gap, c.L, c.G) < 0 or c.M < 1 or c.N < 1:
        raise UsageError("bound constants must be nonnegative with M, N >= 1")
    eta = _etas(schedule, T)
    gamma = math.fsum(eta)
    sq = math.fsum(eta * eta)
    if side == "client":
        k = 2 * c.M - 1
        return 4 * c.loss_gap / (k * gamma) + 2 * c.M ** 2 * c.G ** 2 * c.L / (k * gamma) * sq
    if side == "server":
        k = 2 * c.N - 1
        return 4 * c.loss_gap / (k * gamma) + 4 * c.G ** 2 / k / gamma * (c.L * c.N ** 2 / 2) * sq
    raise UsageError(f"side must be 'client' or 'server', got {side!r}")
