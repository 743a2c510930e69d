"""Round bounds for local training and UAV aggregation, with a synthetic
strongly convex FL task to check them against.

Each device holds a quadratic ``L_m(t) = t'A_m t / 2 - b_m't`` whose Hessian
eigenvalues lie in ``[upsilon, L]``.  A device trains the increment ``h`` on the
corrected local surrogate

    G_m(h) = L_m(theta + h) - (grad L_m(theta) - rho * grad L(theta))' h

by plain gradient steps from ``h = 0``, and the UAV adds the mean increment to
the global model.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RoundBounds",
    "local_rounds_bound",
    "global_rounds_bound",
    "round_bounds",
    "SyntheticFlTask",
    "make_task",
    "LocalTrace",
    "FlTrace",
    "local_train",
    "simulate_fl",
    "empirical_local_rounds",
    "empirical_global_slots",
    "trace_to_csv",
]


def local_rounds_bound(L: float, upsilon: float, lr: float, eps_local: float) -> float:
    """Local gradient rounds that guarantee relative accuracy ``eps_local``."""
    if not 0 < lr <= 2 / L:
        raise ValueError("learning rate must lie in (0, 2/L]")
    if not 0 < eps_local <= 1:
        raise ValueError("eps_local must lie in (0, 1]")
    denom = lr * upsilon * (2 - L * lr)
    if denom == 0:
        return math.inf
    return 2 / denom * math.log(1 / eps_local)


def global_rounds_bound(L: float, upsilon: float, rho: float, eps_local: float, eps_uav: float) -> float:
    """Aggregation slots that guarantee global relative accuracy ``eps_uav``."""
    if not 0 < rho <= upsilon / L:
        raise ValueError("rho must lie in (0, upsilon/L]")
    if not 0 < eps_local < 1:
        raise ValueError("eps_local must lie in (0, 1)")
    if not 0 < eps_uav <= 1:
        raise ValueError("eps_uav must lie in (0, 1]")
    return 2 * L**2 / (upsilon**2 * rho * (1 - eps_local)) * math.log(1 / eps_uav)


@dataclass(frozen=True)
class RoundBounds:
    L: float
    upsilon: float
    lr: float
    rho: float
    eps_local: float
    eps_uav: float
    local_rounds: float
    global_rounds: float

    def __post_init__(self) -> None:
        if not 0 < self.upsilon <= self.L:
            raise ValueError("need 0 < upsilon <= L")
        if not 0 < self.lr <= 2 / self.L:
            raise ValueError("learning rate must lie in (0, 2/L]")
        if not 0 <= self.rho <= self.upsilon / self.L:
            raise ValueError("rho must lie in [0, upsilon/L]")
        if self.eps_local < 1 and self.eps_uav < 1 and not (self.local_rounds > 0 and self.global_rounds > 0):
            raise ValueError("round bounds must be positive")

    @property
    def local_ceil(self) -> int:
        return int(math.ceil(self.local_rounds))

    @property
    def global_ceil(self) -> int:
        return int(math.ceil(self.global_rounds))


def round_bounds(L: float, upsilon: float, lr: float, rho: float, eps_local: float, eps_uav: float) -> RoundBounds:
    return RoundBounds(L, upsilon, lr, rho, eps_local, eps_uav,
                       local_rounds_bound(L, upsilon, lr, eps_local),
                       global_rounds_bound(L, upsilon, rho, eps_local, eps_uav))


@dataclass(frozen=True)
class SyntheticFlTask:
    A: np.ndarray  # (M, d, d)
    b: np.ndarray  # (M, d)
    L: float
    upsilon: float
    samples: np.ndarray  # (M,) dataset sizes, used by the weighted variant and the global loss
    theta0: np.ndarray

    def __post_init__(self) -> None:
        eig = np.linalg.eigvalsh(self.A)
        tol = 1e-9 * self.L
        if eig.min() < self.upsilon - tol or eig.max() > self.L + tol:
            raise ValueError("device Hessians leave [upsilon, L]")

    @property
    def n_devices(self) -> int:
        return self.A.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return self.samples / self.samples.sum()

    def device_loss(self, m: int, theta: np.ndarray) -> float:
        return float(0.5 * theta @ self.A[m] @ theta - self.b[m] @ theta)

    def device_grad(self, m: int, theta: np.ndarray) -> np.ndarray:
        return self.A[m] @ theta - self.b[m]

    def loss(self, theta: np.ndarray) -> float:
        w = self.weights
        return float(sum(w[m] * self.device_loss(m, theta) for m in range(self.n_devices)))

    def grad(self, theta: np.ndarray) -> np.ndarray:
        w = self.weights
        return np.einsum("m,mij,j->i", w, self.A, theta) - w @ self.b

    @property
    def optimum(self) -> np.ndarray:
        w = self.weights
        return np.linalg.solve(np.einsum("m,mij->ij", w, self.A), w @ self.b)

    def gap(self, theta: np.ndarray) -> float:
        return self.loss(theta) - self.loss(self.optimum)


def make_task(seed: int, n_devices: int = 4, dim: int = 5, L: float = 4.0, upsilon: float = 1.0,
              identical: bool = False) -> SyntheticFlTask:
    """Random quadratics with eigenvalues in ``[upsilon, L]``, both ends attained."""
    if not 0 < upsilon <= L:
        raise ValueError("need 0 < upsilon <= L")
    rng = np.random.default_rng(seed)
    A, b = [], []
    for m in range(n_devices):
        if identical and m:
            A.append(A[0])
            b.append(b[0])
            continue
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eig = rng.uniform(upsilon, L, dim)
        eig[0], eig[-1] = upsilon, L
        A.append((q * eig) @ q.T)
        b.append(rng.standard_normal(dim))
    A = np.array(A)
    A = 0.5 * (A + A.transpose(0, 2, 1))
    samples = rng.integers(100, 1000, n_devices).astype(float)
    return SyntheticFlTask(A, np.array(b), L, upsilon, samples, rng.standard_normal(dim) * 3)


@dataclass(frozen=True)
class LocalTrace:
    increment: np.ndarray
    surrogate: tuple[float, ...]  # G_m at rounds 0..R
    optimum: float  # min of G_m


def _surrogate(task: SyntheticFlTask, m: int, theta: np.ndarray, rho: float):
    c = task.device_grad(m, theta) - rho * task.grad(theta)
    base = task.device_loss

    def value(h: np.ndarray) -> float:
        return base(m, theta + h) - float(c @ h)

    def grad(h: np.ndarray) -> np.ndarray:
        return task.device_grad(m, theta + h) - c

    return value, grad


def local_train(task: SyntheticFlTask, m: int, theta: np.ndarray, lr: float, rho: float, rounds: int) -> LocalTrace:
    value, grad = _surrogate(task, m, theta, rho)
    h = np.zeros_like(theta)
    vals = [value(h)]
    for _ in range(rounds):
        h = h - lr * grad(h)
        vals.append(value(h))
    h_star = -rho * np.linalg.solve(task.A[m], task.grad(theta))
    return LocalTrace(h, tuple(vals), value(h_star))


@dataclass(frozen=True)
class FlTrace:
    local: tuple[tuple[LocalTrace, ...], ...]  # [slot][device]
    global_gap: tuple[float, ...]  # gap at slots 0..n
    thetas: tuple[np.ndarray, ...] = field(repr=False)


def simulate_fl(task: SyntheticFlTask, lr: float, rho: float, rounds: int, slots: int,
                weighted: bool = False, theta0: np.ndarray | None = None) -> FlTrace:
    """Run ``slots`` aggregation slots, each with ``rounds`` local steps per device.

    The UAV adds the uniform mean of the increments; ``weighted=True`` weights
    them by dataset size instead.
    """
    theta = np.array(task.theta0 if theta0 is None else theta0, dtype=float)
    w = task.weights if weighted else np.full(task.n_devices, 1 / task.n_devices)
    locs, gaps, thetas = [], [task.gap(theta)], [theta.copy()]
    for _ in range(slots):
        slot = tuple(local_train(task, m, theta, lr, rho, rounds) for m in range(task.n_devices))
        theta = theta + sum(w[m] * slot[m].increment for m in range(task.n_devices))
        locs.append(slot)
        gaps.append(task.gap(theta))
        thetas.append(theta.copy())
    return FlTrace(tuple(locs), tuple(gaps), tuple(thetas))


def _first_below(gaps, eps: float) -> int:
    target = eps * gaps[0]
    for i, g in enumerate(gaps):
        if g <= target:
            return i
    return -1


def empirical_local_rounds(task: SyntheticFlTask, theta: np.ndarray, lr: float, rho: float, eps_local: float,
                           max_rounds: int = 100_000) -> list[int]:
    """Per device, the first round whose surrogate gap is within ``eps_local`` of the start."""
    out = []
    for m in range(task.n_devices):
        value, grad = _surrogate(task, m, theta, rho)
        opt = local_train(task, m, theta, lr, rho, 0).optimum
        h = np.zeros_like(theta)
        g0 = value(h) - opt
        r = 0
        while value(h) - opt > eps_local * g0 and r < max_rounds:
            h = h - lr * grad(h)
            r += 1
        out.append(r)
    return out


def empirical_global_slots(task: SyntheticFlTask, lr: float, rho: float, rounds: int, eps_uav: float,
                           weighted: bool = False, max_slots: int = 100_000) -> int:
    theta = np.array(task.theta0, dtype=float)
    w = task.weights if weighted else np.full(task.n_devices, 1 / task.n_devices)
    g0 = task.gap(theta)
    n = 0
    while task.gap(theta) > eps_uav * g0 and n < max_slots:
        theta = theta + sum(w[m] * local_train(task, m, theta, lr, rho, rounds).increment
                            for m in range(task.n_devices))
        n += 1
    return n


def trace_to_csv(trace: FlTrace) -> str:
    """Rows ``slot, round, device, loss``; device ``-1`` holds the global gap."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["slot", "round", "device", "loss"])
    for n, g in enumerate(trace.global_gap):
        wr.writerow([n, 0, -1, repr(g)])
    for n, slot in enumerate(trace.local):
        for m, loc in enumerate(slot):
            for r, v in enumerate(loc.surrogate):
                wr.writerow([n, r, m, repr(v)])
    return buf.getvalue()
