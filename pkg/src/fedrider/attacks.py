"""Free-rider update fabrication strategies.

A free rider never trains. It submits either white noise (uniform on
[-R, R] per component) or some variant of the difference between the last
two global models it received, which is exactly eta times the average honest
update of the previous round and therefore mimics plausible training.

Strategies are pure functions of (stored state, config, rng stream): free
riders act independently and never see other clients' updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fedsim import ClientUpdate, FedError, ModelParams

__all__ = [
    "AttackError",
    "AttackConfig",
    "FreeRiderState",
    "random_weights",
    "delta_weights",
    "advanced_delta",
    "dp_delta",
    "make_update",
]

ATTACK_KINDS = ("random", "delta", "advanced_delta", "dp_delta")
FALLBACKS = ("zeros", "random")


class AttackError(FedError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Which fabrication strategy a free rider runs, and its knobs.

    R bounds the uniform noise attack (and the random first-round fallback
    of the delta attacks); sigma is the Gaussian disguise of advanced_delta;
    divide_by_gap controls whether dp_delta divides by the round gap k.
    """

    kind: str
    R: float = 1e-4
    sigma: float = 1e-3
    first_round_fallback: str = "random"
    divide_by_gap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.first_round_fallback not in FALLBACKS:
            raise AttackError(f"unknown fallback {self.first_round_fallback!r}")
        if self.kind == "random" and self.R <= 0:
            raise AttackError("R must be positive for the random attack")
        if self.R < 0:
            raise AttackError("R must be non-negative")
        if self.sigma < 0:
            raise AttackError("sigma must be non-negative")


@dataclass
class FreeRiderState:
    """The two most recent global models one free rider received."""

    client_id: int
    received: list = field(default_factory=list)   # [(round_index, flat), ...]

    def push(self, round_index: int, flat: np.ndarray) -> None:
        if self.received and round_index <= self.received[-1][0]:
            raise AttackError(f"received rounds must increase, got {round_index} "
                              f"after {self.received[-1][0]}")
        self.received.append((int(round_index), np.array(flat, dtype=np.float64)))
        if len(self.received) > 2:
            self.received.pop(0)

    @property
    def has_pair(self) -> bool:
        return len(self.received) == 2

    def pair(self) -> tuple[tuple[int, np.ndarray], tuple[int, np.ndarray]]:
        if not self.has_pair:
            raise AttackError("fewer than two received models")
        return self.received[0], self.received[1]


def _wrap(flat: np.ndarray, template: ModelParams, client_id: int,
          round_index: int) -> ClientUpdate:
    return ClientUpdate(client_id, round_index, ModelParams(flat, template.shapes))


def random_weights(template: ModelParams, R: float, rng: np.random.Generator, *,
                   client_id: int = 0, round_index: int = 0) -> ClientUpdate:
    """Every component i.i.d. uniform on [-R, R]; R=0 degenerates to zeros."""
    if R < 0:
        raise AttackError("R must be non-negative")
    if R == 0.0:
        flat = np.zeros(template.size)
    else:
        flat = rng.uniform(-R, R, size=template.size)
    return _wrap(flat, template, client_id, round_index)


def _fallback(cfg_fallback: str, R: float, template: ModelParams,
              rng: np.random.Generator, client_id: int, round_index: int) -> ClientUpdate:
    if cfg_fallback == "zeros" or R == 0.0:
        return _wrap(np.zeros(template.size), template, client_id, round_index)
    return random_weights(template, R, rng, client_id=client_id, round_index=round_index)


def delta_weights(state: FreeRiderState, *, template: ModelParams,
                  rng: np.random.Generator | None = None,
                  fallback: str = "random", fallback_R: float = 1e-4,
                  client_id: int = 0, round_index: int = 0) -> ClientUpdate:
    """Difference of the two stored models: previous received minus current.

    In an all-honest regime this equals eta times the mean update of the
    previous round, i.e. a perfectly plausible gradient.
    """
    if not state.has_pair:
        if fallback == "random" and rng is None:
            raise AttackError("random fallback needs an rng")
        return _fallback(fallback, fallback_R, template, rng, client_id, round_index)
    (_, older), (_, newer) = state.pair()
    return _wrap(older - newer, template, client_id, round_index)


def advanced_delta(state: FreeRiderState, sigma: float, rng: np.random.Generator, *,
                   template: ModelParams, fallback: str = "random",
                   fallback_R: float = 1e-4, client_id: int = 0,
                   round_index: int = 0) -> ClientUpdate:
    """delta_weights plus i.i.d. N(0, sigma^2) disguise noise per component."""
    if sigma < 0:
        raise AttackError("sigma must be non-negative")
    base = delta_weights(state, template=template, rng=rng, fallback=fallback,
                         fallback_R=fallback_R, client_id=client_id,
                         round_index=round_index)
    if sigma == 0.0:
        return base
    noisy = base.grad.flat + rng.normal(0.0, sigma, size=template.size)
    return _wrap(noisy, template, client_id, round_index)


def dp_delta(state: FreeRiderState, *, template: ModelParams,
             rng: np.random.Generator | None = None, divide_by_gap: bool = True,
             fallback: str = "random", fallback_R: float = 1e-4,
             client_id: int = 0, round_index: int = 0) -> ClientUpdate:
    """Model difference across a participation gap, optionally divided by it.

    Under q-sampling a free rider receives models k rounds apart; dividing
    the difference by k approximates one round's average update.
    """
    if not state.has_pair:
        if fallback == "random" and rng is None:
            raise AttackError("random fallback needs an rng")
        return _fallback(fallback, fallback_R, template, rng, client_id, round_index)
    (r_old, older), (r_new, newer) = state.pair()
    k = r_new - r_old
    flat = older - newer
    if divide_by_gap:
        flat = flat / k
    return _wrap(flat, template, client_id, round_index)


def make_update(cfg: AttackConfig, state: FreeRiderState, template: ModelParams,
                rng: np.random.Generator, *, client_id: int,
                round_index: int) -> ClientUpdate:
    """Dispatch one free rider's submission for one round."""
    common = dict(client_id=client_id, round_index=round_index)
    if cfg.kind == "random":
        return random_weights(template, cfg.R, rng, **common)
    if cfg.kind == "delta":
        return delta_weights(state, template=template, rng=rng,
                             fallback=cfg.first_round_fallback,
                             fallback_R=cfg.R, **common)
    if cfg.kind == "advanced_delta":
        return advanced_delta(state, cfg.sigma, rng, template=template,
                              fallback=cfg.first_round_fallback,
                              fallback_R=cfg.R, **common)
    if cfg.kind == "dp_delta":
        return dp_delta(state, template=template, rng=rng,
                        divide_by_gap=cfg.divide_by_gap,
                        fallback=cfg.first_round_fallback,
                        fallback_R=cfg.R, **common)
    raise AttackError(f"unknown attack kind {cfg.kind!r}")
