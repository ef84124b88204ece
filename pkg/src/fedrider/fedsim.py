"""Federated averaging simulator.

One round: the server broadcasts the current global model, every
participating client submits an update G (honest clients train locally and
report G = M_before - M_after; free riders fabricate G), and the server
applies

    M_next = M - eta * mean(G over participants)

so with eta = 1 and honest clients the rule is plain model averaging. All
randomness flows through generators keyed by (seed, stream, client, round),
which makes runs bit-reproducible and client order irrelevant.

RoundRecord keeps the exact pre-noise aggregate as model_after so the
averaging rule can always be re-verified from the record alone; when server
noise is enabled the simulation state advances from the noisy broadcast
instead.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import data as fdata
from . import numkit as nk

__all__ = [
    "FedError",
    "UpdateRejectedError",
    "SnapshotError",
    "ModelParams",
    "GlobalModel",
    "ClientUpdate",
    "FedConfig",
    "RoundRecord",
    "SimState",
    "ExperimentResult",
    "sizes_from_shapes",
    "init_global_model",
    "build_net",
    "local_train",
    "aggregate",
    "verify_round_record",
    "run_round",
    "run_experiment",
    "evaluate_accuracy",
    "save_round_record",
    "load_round_record",
]

SNAP_MAGIC = b"FRSNAP01"

# rng stream tags; every generator is keyed [seed, tag, ...] so streams
# never collide across purposes
_S_INIT = 0
_S_FR_SELECT = 1
_S_NOISE = 2
_S_SAMPLING = 3
_S_TRAIN = 10
_S_ATTACK = 11
_S_DETECT = 12


class FedError(Exception):
    """Base class for simulator failures."""


class UpdateRejectedError(FedError):
    """An update whose shape does not match the global model."""

    def __init__(self, client_id: int, message: str):
        self.client_id = client_id
        super().__init__(f"client {client_id}: {message}")


class SnapshotError(FedError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Flat float64 parameter vector plus the layer shapes it folds into.

    Flattening order is the network's parameter order (W0, b0, W1, b1, ...),
    each array row-major.
    """

    flat: np.ndarray
    shapes: tuple

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float64)
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "shapes", tuple(tuple(s) for s in self.shapes))
        if flat.ndim != 1:
            raise FedError(f"params must be a flat vector, got shape {flat.shape}")
        expect = sum(int(np.prod(s, dtype=np.int64)) for s in self.shapes)
        if flat.size != expect:
            raise FedError(f"flat size {flat.size} != {expect} from shapes")
        if not np.all(np.isfinite(flat)):
            raise FedError("non-finite parameter values")

    @property
    def size(self) -> int:
        return self.flat.size

    def as_arrays(self) -> list[np.ndarray]:
        out, offset = [], 0
        for s in self.shapes:
            n = int(np.prod(s, dtype=np.int64))
            out.append(self.flat[offset:offset + n].reshape(s))
            offset += n
        return out


@dataclass(frozen=True)
class GlobalModel:
    params: ModelParams
    round_index: int = 0

    def __post_init__(self):
        if self.round_index < 0:
            raise FedError("round_index must be non-negative")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round_index: int
    grad: ModelParams


@dataclass(frozen=True)
class FedConfig:
    n_clients: int
    eta: float
    rounds: int
    snapshot_rounds: frozenset
    local: nk.SgdConfig
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "snapshot_rounds", frozenset(int(r) for r in self.snapshot_rounds))
        if self.n_clients < 1:
            raise FedError("n_clients must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise FedError("eta must lie in (0,1]")
        if self.rounds < 1:
            raise FedError("rounds must be positive")
        bad = [r for r in self.snapshot_rounds if not 1 <= r <= self.rounds]
        if bad:
            raise FedError(f"snapshot rounds {sorted(bad)} outside [1, {self.rounds}]")


@dataclass(frozen=True)
class RoundRecord:
    """Everything one detection pass is allowed to see: a single round."""

    model_before: GlobalModel
    updates: tuple
    model_after: GlobalModel
    eta: float
    free_rider_ids: frozenset
    participant_ids: frozenset
    skipped: bool = False

    @property
    def round_index(self) -> int:
        return self.model_after.round_index


def sizes_from_shapes(shapes: Sequence[tuple]) -> tuple[int, ...]:
    """Recover dense layer widths from the (W0, b0, W1, b1, ...) shape list."""
    mats = [s for s in shapes if len(s) == 2]
    if not mats or len(shapes) != 2 * len(mats):
        raise FedError(f"unrecognized parameter shape list: {shapes}")
    sizes = [mats[0][0]]
    for m in mats:
        if m[0] != sizes[-1]:
            raise FedError(f"layer shapes do not chain: {shapes}")
        sizes.append(m[1])
    return tuple(sizes)


def build_net(params: ModelParams) -> nk.Mlp:
    """Materialize a trainable network holding a copy of the parameters."""
    net = nk.Mlp(np.random.default_rng(0), sizes_from_shapes(params.shapes))
    net.set_flat(params.flat)
    return net


def init_global_model(sizes: Sequence[int], seed: int) -> GlobalModel:
    net = nk.Mlp(np.random.default_rng([seed, _S_INIT]), sizes)
    return GlobalModel(ModelParams(net.get_flat(), net.param_shapes), round_index=0)


def local_train(model: GlobalModel, shard: fdata.Dataset, cfg: nk.SgdConfig, *,
                client_id: int = 0, round_index: int | None = None,
                rng: np.random.Generator | None = None) -> ClientUpdate:
    """Minibatch SGD from the received model; report G = M_before - M_after."""
    if shard.num_samples == 0:
        raise FedError("empty shard")
    if round_index is None:
        round_index = model.round_index + 1
    net = build_net(model.params)
    n = shard.num_samples
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = nk.tensor(shard.features[idx])
            loss = nk.cross_entropy_softmax(net(x), shard.labels[idx])
            grads = nk.backward(loss, params=net.params)
            nk.sgd_step(net.params, [grads[p] for p in net.params], cfg)
    grad_flat = model.params.flat - net.get_flat()
    return ClientUpdate(client_id, round_index,
                        ModelParams(grad_flat, model.params.shapes))


def aggregate(model: GlobalModel, updates: Sequence[ClientUpdate], eta: float) -> GlobalModel:
    """Apply M_next = M - eta * mean(G) over the received updates."""
    if not updates:
        raise FedError("aggregate needs at least one update")
    if not 0.0 < eta <= 1.0:
        raise FedError("eta must lie in (0,1]")
    for u in updates:
        if u.grad.shapes != model.params.shapes or u.grad.size != model.params.size:
            raise UpdateRejectedError(u.client_id, "update shape does not match global model")
    stack = np.stack([u.grad.flat for u in updates])
    new_flat = model.params.flat - eta * stack.mean(axis=0)
    return GlobalModel(ModelParams(new_flat, model.params.shapes), model.round_index + 1)


def verify_round_record(record: RoundRecord, tol: float = 1e-12) -> float:
    """Max abs deviation between the stored aggregate and a recomputation."""
    if record.skipped:
        dev = float(np.max(np.abs(record.model_after.params.flat
                                  - record.model_before.params.flat),
                           initial=0.0))
    else:
        redo = aggregate(record.model_before, record.updates, record.eta)
        dev = float(np.max(np.abs(redo.params.flat - record.model_after.params.flat)))
    if dev > tol:
        raise FedError(f"round record fails averaging-rule check: max dev {dev:.3e}")
    return dev


@dataclass
class SimState:
    """Mutable per-experiment state threaded through run_round."""

    cfg: FedConfig
    dataset: fdata.Dataset
    partition: fdata.Partition
    model: GlobalModel
    free_rider_ids: frozenset = frozenset()
    attack: object | None = None            # attacks.AttackConfig
    dp: object | None = None                # privacy.DPConfig
    fr_states: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.partition.n_clients != self.cfg.n_clients:
            raise FedError(f"partition has {self.partition.n_clients} shards "
                           f"for {self.cfg.n_clients} clients")
        if self.free_rider_ids and self.attack is None:
            raise FedError("free riders declared without an attack config")
        from . import attacks as fattacks
        for cid in self.free_rider_ids:
            self.fr_states.setdefault(cid, fattacks.FreeRiderState(client_id=cid))


def run_round(state: SimState) -> RoundRecord:
    """Execute one full round and advance the state's broadcast model."""
    from . import attacks as fattacks
    from . import privacy as fprivacy

    cfg = state.cfg
    j = state.model.round_index + 1
    ids = np.arange(cfg.n_clients)
    if state.dp is not None and state.dp.participation_ratio < 1.0:
        rng = np.random.default_rng([state.dp.seed, _S_SAMPLING, j])
        participants = fprivacy.sample_participants(ids, state.dp.participation_ratio, j, rng)
    else:
        participants = frozenset(int(i) for i in ids)

    received = state.model
    if not participants:
        after = GlobalModel(received.params, j)
        state.model = after
        return RoundRecord(received, (), after, cfg.eta,
                           frozenset(state.free_rider_ids), frozenset(), skipped=True)

    updates = []
    for cid in sorted(participants):
        if cid in state.free_rider_ids:
            fr = state.fr_states[cid]
            fr.push(j, received.params.flat)
            rng = np.random.default_rng([state.attack.seed, _S_ATTACK, cid, j])
            u = fattacks.make_update(state.attack, fr, received.params, rng,
                                     client_id=cid, round_index=j)
        else:
            rng = np.random.default_rng([cfg.seed, _S_TRAIN, cid, j])
            shard = state.dataset.take(state.partition.shards[cid])
            u = local_train(received, shard, cfg.local,
                            client_id=cid, round_index=j, rng=rng)
        if state.dp is not None:
            u = fprivacy.clip_update(u, state.dp.clip_bound)
        updates.append(u)

    model_after = aggregate(received, updates, cfg.eta)
    record = RoundRecord(received, tuple(updates), model_after, cfg.eta,
                         frozenset(state.free_rider_ids), frozenset(participants))
    broadcast = model_after
    if state.dp is not None and state.dp.server_noise_std > 0:
        rng = np.random.default_rng([state.dp.seed, _S_NOISE, j])
        broadcast = fprivacy.add_server_noise(model_after, state.dp.server_noise_std, rng)
    state.model = broadcast
    return record


def evaluate_accuracy(model: GlobalModel, ds: fdata.Dataset) -> float:
    net = build_net(model.params)
    logits = net(nk.tensor(ds.features)).values
    return float((logits.argmax(axis=1) == ds.labels).mean())


@dataclass
class ExperimentResult:
    """Everything one seeded experiment produced."""

    fingerprint: str
    seed: int
    n_clients: int
    rounds: int
    free_rider_ids: frozenset
    std_series: np.ndarray          # (rounds, n_clients); NaN where nothing submitted
    accuracy: np.ndarray            # (rounds,) train accuracy of the broadcast model
    detector_outputs: dict          # round -> detector kind -> DetectorOutput
    aucs: dict                      # round -> detector kind -> float or None
    ranks: dict                     # round -> detector kind -> RankReport
    skipped_rounds: tuple
    config: dict


def _select_free_riders(n_clients: int, n_free_riders: int, seed: int) -> frozenset:
    if not 0 <= n_free_riders <= n_clients:
        raise FedError("free rider count outside [0, n_clients]")
    if n_free_riders == 0:
        return frozenset()
    rng = np.random.default_rng([seed, _S_FR_SELECT])
    picked = rng.choice(n_clients, size=n_free_riders, replace=False)
    return frozenset(int(c) for c in picked)


def run_experiment(cfg: FedConfig, dataset: fdata.Dataset, partition: fdata.Partition,
                   attack=None, n_free_riders: int = 0, dp=None,
                   detectors: Sequence[str] = ("std", "autoencoder", "dagmm", "stddagmm"),
                   detector=None, hidden_sizes: Sequence[int] = (16,),
                   snapshot_dir=None, fingerprint: str = "",
                   free_rider_ids: Iterable[int] | None = None) -> ExperimentResult:
    """Full round loop with per-snapshot detection.

    The free-rider set is a seeded draw fixed before round 1 (pass
    free_rider_ids to pin it explicitly). Detection at a snapshot round sees
    exactly that round's submissions, nothing else.
    """
    from . import detect as fdetect

    if free_rider_ids is None:
        fr_ids = _select_free_riders(cfg.n_clients, n_free_riders, cfg.seed)
    else:
        fr_ids = frozenset(int(c) for c in free_rider_ids)
        if any(not 0 <= c < cfg.n_clients for c in fr_ids):
            raise FedError("free rider id outside client range")
    if detector is None:
        detector = fdetect.DetectorConfig()

    sizes = (dataset.feature_dim, *hidden_sizes, dataset.num_classes)
    state = SimState(cfg=cfg, dataset=dataset, partition=partition,
                     model=init_global_model(sizes, cfg.seed),
                     free_rider_ids=fr_ids, attack=attack, dp=dp)

    std_series = np.full((cfg.rounds, cfg.n_clients), np.nan)
    accuracy = np.zeros(cfg.rounds)
    detector_outputs: dict = {}
    aucs: dict = {}
    ranks: dict = {}
    skipped = []

    if snapshot_dir is not None:
        snapshot_dir = Path(snapshot_dir)
        snapshot_dir.mkdir(parents=True, exist_ok=True)

    for j in range(1, cfg.rounds + 1):
        record = run_round(state)
        if record.skipped:
            skipped.append(j)
        for u in record.updates:
            std_series[j - 1, u.client_id] = fdetect.std_stat(u.grad.flat)
        accuracy[j - 1] = evaluate_accuracy(state.model, dataset)

        if j in cfg.snapshot_rounds and not record.skipped:
            if snapshot_dir is not None:
                save_round_record(record, snapshot_dir / f"round_{j}.snap")
            outs, round_aucs, round_ranks = score_round(
                record, detectors, detector, experiment_seed=cfg.seed)
            detector_outputs[j] = outs
            aucs[j] = round_aucs
            ranks[j] = round_ranks

    return ExperimentResult(
        fingerprint=fingerprint, seed=cfg.seed, n_clients=cfg.n_clients,
        rounds=cfg.rounds, free_rider_ids=fr_ids, std_series=std_series,
        accuracy=accuracy, detector_outputs=detector_outputs, aucs=aucs,
        ranks=ranks, skipped_rounds=tuple(skipped),
        config=describe_config(cfg, attack, dp, detector, dataset, hidden_sizes,
                               n_free_riders=len(fr_ids)))


def score_round(record: RoundRecord, detectors: Sequence[str], detector_cfg,
                experiment_seed: int = 0) -> tuple[dict, dict, dict]:
    """Run the requested detectors on one round's submissions."""
    from . import detect as fdetect

    j = record.round_index
    batch = [fdetect.flatten(u) for u in record.updates]
    truth = frozenset(record.free_rider_ids & record.participant_ids)
    outs: dict = {}
    round_aucs: dict = {}
    round_ranks: dict = {}
    for idx, kind in enumerate(detectors):
        seed = [detector_cfg.seed, experiment_seed, _S_DETECT, j, idx]
        if kind == "std":
            scores = np.array([fdetect.std_stat(b) for b in batch])
            out = fdetect.DetectorOutput(
                kind="std", round_index=j,
                client_ids=np.array([b.client_id for b in batch]), scores=scores)
        elif kind == "autoencoder":
            out = fdetect.autoencoder_score(batch, **detector_cfg.autoencoder_kwargs(),
                                            seed=seed, round_index=j)
        elif kind == "dagmm":
            out = fdetect.dagmm_score(batch, **detector_cfg.dagmm_kwargs(),
                                      seed=seed, round_index=j)
        elif kind == "stddagmm":
            out = fdetect.stddagmm_score(batch, **detector_cfg.dagmm_kwargs(),
                                         seed=seed, round_index=j)
        else:
            raise FedError(f"unknown detector kind {kind!r}")
        outs[kind] = out
        if truth and len(truth) < len(batch):
            round_aucs[kind] = fdetect.auc(out, truth)
            round_ranks[kind] = fdetect.rank_report(out, truth)
        else:
            round_aucs[kind] = None
            round_ranks[kind] = None
    return outs, round_aucs, round_ranks


def describe_config(cfg: FedConfig, attack, dp, detector, dataset, hidden_sizes,
                    n_free_riders: int) -> dict:
    """Fully resolved, JSON-friendly echo of an experiment's configuration."""
    desc = {
        "n_clients": cfg.n_clients,
        "eta": cfg.eta,
        "rounds": cfg.rounds,
        "snapshot_rounds": sorted(cfg.snapshot_rounds),
        "local": {"learning_rate": cfg.local.learning_rate,
                  "batch_size": cfg.local.batch_size,
                  "epochs": cfg.local.epochs},
        "seed": cfg.seed,
        "n_free_riders": n_free_riders,
        "hidden_sizes": list(hidden_sizes),
        "dataset": {"num_samples": dataset.num_samples,
                    "feature_dim": dataset.feature_dim,
                    "num_classes": dataset.num_classes},
    }
    if attack is not None:
        desc["attack"] = {"kind": attack.kind, "R": attack.R, "sigma": attack.sigma,
                          "first_round_fallback": attack.first_round_fallback,
                          "divide_by_gap": attack.divide_by_gap, "seed": attack.seed}
    if dp is not None:
        desc["dp"] = {"clip_bound": dp.clip_bound,
                      "server_noise_std": dp.server_noise_std,
                      "participation_ratio": dp.participation_ratio,
                      "seed": dp.seed}
    if detector is not None:
        desc["detector"] = detector.describe()
    return desc


# ----------------------------------------------------------------- snapshots

def save_round_record(record: RoundRecord, path) -> None:
    """Write a RoundRecord to the binary snapshot format.

    Layout: 8-byte magic, uint32 little-endian header length, JSON header,
    then float64 little-endian payload holding model_before, model_after and
    each update's flat vector in header order.
    """
    path = Path(path)
    header = {
        "round": record.round_index,
        "eta": record.eta,
        "shapes": [list(s) for s in record.model_before.params.shapes],
        "client_ids": [u.client_id for u in record.updates],
        "free_rider_ids": sorted(record.free_rider_ids),
        "participant_ids": sorted(record.participant_ids),
        "skipped": record.skipped,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    chunks = [SNAP_MAGIC, struct.pack("<I", len(blob)), blob,
              record.model_before.params.flat.astype("<f8").tobytes(),
              record.model_after.params.flat.astype("<f8").tobytes()]
    chunks.extend(u.grad.flat.astype("<f8").tobytes() for u in record.updates)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_round_record(path) -> RoundRecord:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(SNAP_MAGIC) + 4 or raw[:len(SNAP_MAGIC)] != SNAP_MAGIC:
        raise SnapshotError(f"{path}: not a round snapshot")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise SnapshotError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise SnapshotError(f"{path}: corrupt header ({err})") from err
    shapes = tuple(tuple(s) for s in header["shapes"])
    psize = sum(int(np.prod(s, dtype=np.int64)) for s in shapes)
    client_ids = header["client_ids"]
    need = 12 + hlen + 8 * psize * (2 + len(client_ids))
    if len(raw) != need:
        raise SnapshotError(f"{path}: payload length {len(raw)} != expected {need}")
    vals = np.frombuffer(raw, dtype="<f8", offset=12 + hlen).astype(np.float64)
    j = int(header["round"])
    before = GlobalModel(ModelParams(vals[:psize], shapes), max(j - 1, 0))
    after = GlobalModel(ModelParams(vals[psize:2 * psize], shapes), j)
    updates = []
    for i, cid in enumerate(client_ids):
        lo = (2 + i) * psize
        updates.append(ClientUpdate(int(cid), j,
                                    ModelParams(vals[lo:lo + psize], shapes)))
    return RoundRecord(before, tuple(updates), after, float(header["eta"]),
                       frozenset(int(c) for c in header["free_rider_ids"]),
                       frozenset(int(c) for c in header["participant_ids"]),
                       skipped=bool(header["skipped"]))
