"""Differential-privacy mechanics for the federated loop.

Three pieces: clients clip their reported update to an L2 ball of radius C,
the server adds isotropic Gaussian noise to the aggregated model before
broadcasting, and each client independently joins a round with probability q
(privacy amplification by sampling). Sampling has a side effect on free
riders: they receive global models only on rounds they join, so their
model-difference attacks span multi-round gaps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fedsim import ClientUpdate, FedError, GlobalModel, ModelParams

__all__ = ["PrivacyError", "DPConfig", "clip_update", "add_server_noise",
           "sample_participants"]


class PrivacyError(FedError):
    pass


@dataclass(frozen=True)
class DPConfig:
    clip_bound: float = 1.0
    server_noise_std: float = 1e-3
    participation_ratio: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.clip_bound <= 0:
            raise PrivacyError("clip_bound must be positive")
        if self.server_noise_std < 0:
            raise PrivacyError("server_noise_std must be non-negative")
        if not 0.0 < self.participation_ratio <= 1.0:
            raise PrivacyError("participation_ratio must lie in (0,1]")


def clip_update(update: ClientUpdate, clip_bound: float) -> ClientUpdate:
    """Scale the update by min(1, C/norm) so its L2 norm never exceeds C."""
    if clip_bound <= 0:
        raise PrivacyError("clip_bound must be positive")
    norm = float(np.linalg.norm(update.grad.flat))
    if norm <= clip_bound:
        return update
    scaled = update.grad.flat * (clip_bound / norm)
    return ClientUpdate(update.client_id, update.round_index,
                        ModelParams(scaled, update.grad.shapes))


def add_server_noise(model: GlobalModel, noise_std: float,
                     rng: np.random.Generator) -> GlobalModel:
    """Add i.i.d. N(0, noise_std^2) to every model component."""
    if noise_std < 0:
        raise PrivacyError("noise_std must be non-negative")
    if noise_std == 0.0:
        return model
    noisy = model.params.flat + rng.normal(0.0, noise_std, size=model.params.size)
    return GlobalModel(ModelParams(noisy, model.params.shapes), model.round_index)


def sample_participants(client_ids, q: float, round_index: int,
                        rng: np.random.Generator) -> frozenset:
    """Each client independently joins with probability q."""
    if not 0.0 < q <= 1.0:
        raise PrivacyError("q must lie in (0,1]")
    ids = [int(c) for c in client_ids]
    if q == 1.0:
        return frozenset(ids)
    draws = rng.random(len(ids))
    return frozenset(cid for cid, d in zip(ids, draws) if d < q)
