"""Per-layer-type optimization.

Adder weights are updated with modulated SGD: the raw gradient is rescaled
so its root-mean-square equals a fixed constant eta, which makes one
learning rate work across adder layers whose raw gradient magnitudes vary
by orders of magnitude. Everything else (mul, shift, norm parameters) uses
a bias-corrected first/second-moment optimizer. Rates follow a cosine
annealing schedule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

ADAPTIVE_LR = (1e-3, 1e-6)
MODULATED_LR = (2e-2, 2e-3)
DEFAULT_ETA = 0.2

# layer kind -> optimizer kind; overridable through OptimRoute construction
DEFAULT_ROUTING = {"mul": "adaptive_moment", "shift": "adaptive_moment",
                   "norm": "adaptive_moment", "adder": "modulated_sgd"}


def modulate_gradient(g: np.ndarray, eta: float) -> np.ndarray:
    """Rescale g so RMS(g) == eta while preserving its direction.

    Equivalent to g * eta * sqrt(n) / ||g||_2 with n the element count.
    An all-zero gradient returns zeros (no update) and logs the event.
    """
    g = np.asarray(g)
    nrm = float(np.linalg.norm(g.astype(np.float64, copy=False)))
    if nrm == 0.0:
        log.warning("modulate_gradient: zero-norm gradient, skipping update")
        return np.zeros_like(g)
    scale = eta * math.sqrt(g.size) / nrm
    return (g * scale).astype(g.dtype, copy=False)


def modulated_sgd_step(w: np.ndarray, g: np.ndarray, lr: float, eta: float) -> np.ndarray:
    """w' = w - lr * modulate_gradient(g, eta); no momentum, no weight decay."""
    return (w - lr * modulate_gradient(g, eta)).astype(w.dtype, copy=False)


@dataclass
class MomentState:
    """First/second moment accumulators for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, w: np.ndarray) -> "MomentState":
        return cls(np.zeros_like(w), np.zeros_like(w))


def adaptive_moment_step(w: np.ndarray, g: np.ndarray, state: MomentState, lr: float,
                         beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
                         ) -> tuple[np.ndarray, MomentState]:
    """Bias-corrected moment update (beta1 0.9, beta2 0.999, eps 1e-8)."""
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    w2 = w - lr * mhat / (np.sqrt(vhat) + eps)
    return w2.astype(w.dtype, copy=False), MomentState(m.astype(w.dtype, copy=False),
                                                       v.astype(w.dtype, copy=False), t)


@dataclass
class CosineSchedule:
    """Cosine interpolation from lr_start at epoch 0 to lr_end at total_epochs.

    `cycles` > 1 gives warm restarts; the default single cycle is what the
    start/end rates pin down.
    """

    lr_start: float
    lr_end: float
    total_epochs: int
    cycles: int = 1

    def lr_at(self, epoch: float) -> float:
        if not 0 <= epoch <= self.total_epochs:
            raise ConfigError(f"epoch {epoch} outside [0, {self.total_epochs}]")
        if self.total_epochs == 0:
            return self.lr_start
        phase = epoch * self.cycles / self.total_epochs
        frac = 1.0 if (phase > 0 and phase == int(phase)) else phase % 1.0
        if frac == 0.0:  # cycle boundaries hit the endpoints exactly
            return self.lr_start
        if frac == 1.0:
            return self.lr_end
        return self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimRoute:
    """Binding of a layer kind to an optimizer kind, rate range and eta."""

    layer_kind: str
    optimizer_kind: str
    lr_start: float
    lr_end: float
    eta: float | None = None

    def __post_init__(self):
        if self.optimizer_kind == "modulated_sgd" and not (self.eta and self.eta > 0):
            raise ConfigError("modulated_sgd requires eta > 0")


@dataclass
class ParamGroup:
    route: OptimRoute
    params: list = field(default_factory=list)


def route_parameters(model, adaptive_lr=ADAPTIVE_LR, modulated_lr=MODULATED_LR,
                     eta: float = DEFAULT_ETA) -> list[ParamGroup]:
    """Partition trainables: adder weights -> modulated SGD, the rest -> adaptive moments.

    Every parameter lands in exactly one group; an unknown kind raises
    ConfigError. Empty groups are dropped (a homogeneous model yields one).
    """
    adaptive = ParamGroup(OptimRoute("mul/shift/norm", "adaptive_moment", *adaptive_lr))
    modulated = ParamGroup(OptimRoute("adder", "modulated_sgd", *modulated_lr, eta=eta))
    seen = set()
    for p in model.parameters():
        if id(p) in seen:
            raise ConfigError(f"parameter {p.name} listed twice")
        seen.add(id(p))
        if p.kind in ("mul", "shift", "norm"):
            adaptive.params.append(p)
        elif p.kind == "adder":
            modulated.params.append(p)
        else:
            raise ConfigError(f"parameter {p.name} has unrouted kind {p.kind!r}")
    return [g for g in (adaptive, modulated) if g.params]


class AdaptiveMoment:
    """Stateful wrapper applying adaptive_moment_step to a parameter list."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.hyper = (beta1, beta2, eps)
        self.state = {p.name: MomentState.zeros_like(p.data) for p in self.params}

    def step(self, lr: float):
        b1, b2, eps = self.hyper
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            p.data, self.state[p.name] = adaptive_moment_step(
                p.data, g, self.state[p.name], lr, b1, b2, eps)


class ModulatedSgd:
    """Stateless modulated-SGD wrapper for the adder parameter group."""

    def __init__(self, params, eta: float):
        self.params = list(params)
        self.eta = eta

    def step(self, lr: float):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            p.data = modulated_sgd_step(p.data, g, lr, self.eta)


def build_optimizers(groups: list[ParamGroup], total_epochs: int, cycles: int = 1):
    """Instantiate (optimizer, schedule, route) triples for the routed groups."""
    out = []
    for g in groups:
        sched = CosineSchedule(g.route.lr_start, g.route.lr_end, total_epochs, cycles)
        if g.route.optimizer_kind == "adaptive_moment":
            out.append((AdaptiveMoment(g.params), sched, g.route))
        elif g.route.optimizer_kind == "modulated_sgd":
            out.append((ModulatedSgd(g.params, g.route.eta), sched, g.route))
        else:
            raise ConfigError(f"unknown optimizer kind {g.route.optimizer_kind!r}")
    return out
