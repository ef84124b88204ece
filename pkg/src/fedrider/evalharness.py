"""Experiment orchestration on top of the round simulator.

One seeded experiment is a *cell*. A cell's fully resolved configuration
hashes to a fingerprint, the fingerprint names a results directory, and a
directory that already holds a result is never recomputed. Sweeps are
Cartesian grids over declared dimensions; aggregation and plot-data
emission read the saved files, so they work across process restarts.

Results directory layout, per cell:

    <out>/<fingerprint>/result.json          run summary + resolved config
    <out>/<fingerprint>/scores_round_<j>.csv one row per client, all detectors
    <out>/<fingerprint>/std_curves.csv       per-round per-client update STD
    <out>/<fingerprint>/round_<j>.snap       (optional) raw round snapshots

All CSV floats are written with repr(), which round-trips doubles exactly
and keeps repeated runs byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as fdata
from . import fedsim
from .attacks import AttackConfig
from .detect import DetectorConfig
from .fedsim import ExperimentResult, FedConfig, FedError
from .privacy import DPConfig

__all__ = [
    "HarnessError",
    "ExperimentResult",
    "DatasetSpec",
    "Scenario",
    "CellOutcome",
    "SWEEP_DIMENSIONS",
    "SCORE_COLUMNS",
    "FIGURE_KINDS",
    "resolved_config",
    "fingerprint",
    "run_cell",
    "grid_run",
    "auc_curves",
    "save_auc_curves",
    "figure_data",
    "load_result",
    "write_scores_csv",
]

DETECTOR_ORDER = ("std", "autoencoder", "dagmm", "stddagmm")
SCORE_COLUMNS = ("round", "client_id", "is_free_rider", "std", "ae_error",
                 "dagmm_energy", "stddagmm_energy", "dagmm_rank", "stddagmm_rank")
SWEEP_DIMENSIONS = ("eta", "R", "sigma", "free_rider_count", "partition", "q")
FIGURE_KINDS = ("std_curves", "energy_scatter", "energy_hist")
PARTITION_KINDS = ("iid", "sorted")


class HarnessError(FedError):
    """Base class for orchestration failures."""


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic task parameters plus how shards are dealt to clients."""

    num_classes: int = 10
    per_class: int = 300
    feature_dim: int = 20
    spread: float = 0.2
    partition: str = "iid"

    def __post_init__(self):
        if self.partition not in PARTITION_KINDS:
            raise HarnessError(f"unknown partition {self.partition!r}; "
                               f"expected one of {PARTITION_KINDS}")
        if min(self.num_classes, self.per_class, self.feature_dim) <= 0:
            raise HarnessError("dataset sizes must be positive")
        if self.spread <= 0:
            raise HarnessError("spread must be positive")

    def build(self, seed: int) -> fdata.Dataset:
        return fdata.synth_dataset(num_classes=self.num_classes,
                                   per_class=self.per_class,
                                   feature_dim=self.feature_dim,
                                   spread=self.spread, seed=seed)

    def split(self, ds: fdata.Dataset, n_clients: int, seed: int):
        if self.partition == "iid":
            return fdata.partition_iid(ds, n_clients, seed=seed)
        return fdata.partition_sorted(ds, n_clients)


@dataclass(frozen=True)
class Scenario:
    """Everything one cell needs, minus nothing: the unit of fingerprinting."""

    fed: FedConfig
    dataset: DatasetSpec = DatasetSpec()
    attack: AttackConfig | None = None
    n_free_riders: int = 0
    dp: DPConfig | None = None
    detector: DetectorConfig = DetectorConfig()
    detectors: tuple = DETECTOR_ORDER
    hidden_sizes: tuple = (16,)

    def with_seed(self, seed: int) -> "Scenario":
        return dataclasses.replace(self, fed=dataclasses.replace(self.fed, seed=seed))


def resolved_config(sc: Scenario) -> dict:
    """Fully explicit JSON-friendly form; the only input to fingerprint()."""
    cfg = {
        "n_clients": sc.fed.n_clients,
        "eta": sc.fed.eta,
        "rounds": sc.fed.rounds,
        "snapshot_rounds": sorted(sc.fed.snapshot_rounds),
        "local": {"learning_rate": sc.fed.local.learning_rate,
                  "batch_size": sc.fed.local.batch_size,
                  "epochs": sc.fed.local.epochs},
        "seed": sc.fed.seed,
        "dataset": {"kind": "synth",
                    "num_classes": sc.dataset.num_classes,
                    "per_class": sc.dataset.per_class,
                    "feature_dim": sc.dataset.feature_dim,
                    "spread": sc.dataset.spread,
                    "partition": sc.dataset.partition},
        "n_free_riders": sc.n_free_riders,
        "hidden_sizes": list(sc.hidden_sizes),
        "detectors": list(sc.detectors),
        "detector": sc.detector.describe(),
        "attack": None,
        "dp": None,
    }
    if sc.attack is not None:
        cfg["attack"] = {"kind": sc.attack.kind, "R": sc.attack.R,
                         "sigma": sc.attack.sigma,
                         "first_round_fallback": sc.attack.first_round_fallback,
                         "divide_by_gap": sc.attack.divide_by_gap,
                         "seed": sc.attack.seed}
    if sc.dp is not None:
        cfg["dp"] = {"clip_bound": sc.dp.clip_bound,
                     "server_noise_std": sc.dp.server_noise_std,
                     "participation_ratio": sc.dp.participation_ratio,
                     "seed": sc.dp.seed}
    return cfg


def fingerprint(resolved: dict) -> str:
    """Stable hex name for one resolved config (seed included)."""
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ------------------------------------------------------------- file emission

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def _scores_rows(j: int, outs: dict, ranks: dict, free_rider_ids):
    def column(kind):
        out = outs.get(kind)
        if out is None:
            return {}
        return {int(c): float(s) for c, s in zip(out.client_ids, out.scores)}

    def rank_col(kind):
        rep = ranks.get(kind)
        if rep is None:
            return {}
        return {int(c): int(r) for c, r in zip(rep.client_ids, rep.ranks)}

    std_c = column("std")
    ae_c = column("autoencoder")
    dg_c = column("dagmm")
    sdg_c = column("stddagmm")
    dg_r = rank_col("dagmm")
    sdg_r = rank_col("stddagmm")
    present = sorted(set().union(std_c, ae_c, dg_c, sdg_c))
    for cid in present:
        yield (j, cid, int(cid in free_rider_ids),
               *(col.get(cid, "")
                 for col in (std_c, ae_c, dg_c, sdg_c, dg_r, sdg_r)))


def write_scores_csv(path, round_index: int, outs: dict, ranks: dict,
                     free_rider_ids) -> Path:
    """One round's detector scores in the standard column layout.

    Detectors that were not run leave their columns empty.
    """
    path = Path(path)
    _write_csv(path, SCORE_COLUMNS,
               _scores_rows(round_index, outs, ranks, free_rider_ids))
    return path


def _write_cell_files(result: ExperimentResult, resolved: dict, cell: Path) -> None:
    scored = sorted(result.detector_outputs)
    summary = {
        "fingerprint": result.fingerprint,
        "seed": result.seed,
        "n_clients": result.n_clients,
        "rounds": result.rounds,
        "free_rider_ids": sorted(result.free_rider_ids),
        "skipped_rounds": list(result.skipped_rounds),
        "scored_rounds": scored,
        "accuracy": [float(a) for a in result.accuracy],
        "final_accuracy": float(result.accuracy[-1]),
        "aucs": {str(j): {k: (None if a is None else float(a))
                          for k, a in result.aucs[j].items()}
                 for j in scored},
        "free_rider_ranks": {
            str(j): {k: (None if rep is None else
                         {str(c): int(rep.rank_of(c))
                          for c in sorted(result.free_rider_ids)})
                     for k, rep in result.ranks[j].items()}
            for j in scored},
        "config": resolved,
    }
    (cell / "result.json").write_text(json.dumps(summary, indent=1, sort_keys=True))

    for j in scored:
        write_scores_csv(cell / f"scores_round_{j}.csv", j,
                         result.detector_outputs[j], result.ranks[j],
                         result.free_rider_ids)

    header = ["round"] + [f"c{c}" for c in range(result.n_clients)]
    truth = ["is_free_rider"] + [int(c in result.free_rider_ids)
                                 for c in range(result.n_clients)]
    rows = [truth]
    for j in range(1, result.rounds + 1):
        rows.append([j] + list(result.std_series[j - 1]))
    _write_csv(cell / "std_curves.csv", header, rows)


def load_result(cell_dir) -> dict:
    """The saved summary of one finished cell."""
    path = Path(cell_dir) / "result.json"
    if not path.exists():
        raise HarnessError(f"no result.json under {cell_dir}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------- cell runs

def run_cell(sc: Scenario, out_dir, *, save_snapshots: bool = False,
             force: bool = False) -> tuple[str, Path, ExperimentResult | None]:
    """Run one cell to its directory; an already-finished cell is a no-op.

    Returns (fingerprint, cell directory, result). The result is None when
    the cell was already on disk and nothing ran.
    """
    resolved = resolved_config(sc)
    fp = fingerprint(resolved)
    out = Path(out_dir)
    cell = out / fp
    if (cell / "result.json").exists():
        if not force:
            return fp, cell, None
        shutil.rmtree(cell)

    ds = sc.dataset.build(sc.fed.seed)
    parts = sc.dataset.split(ds, sc.fed.n_clients, sc.fed.seed)

    tmp = out / f".{fp}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        result = fedsim.run_experiment(
            sc.fed, ds, parts, attack=sc.attack, n_free_riders=sc.n_free_riders,
            dp=sc.dp, detectors=sc.detectors, detector=sc.detector,
            hidden_sizes=sc.hidden_sizes,
            snapshot_dir=tmp if save_snapshots else None, fingerprint=fp)
        _write_cell_files(result, resolved, tmp)
        if cell.exists():
            shutil.rmtree(cell)
        os.replace(tmp, cell)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    return fp, cell, result


# -------------------------------------------------------------------- grids

@dataclass(frozen=True)
class CellOutcome:
    point: dict
    seed: int
    fingerprint: str
    path: Path
    status: str          # "done" | "cached" | "failed"
    error: str = ""


def _apply_point(base: Scenario, point: dict) -> Scenario:
    sc = base
    for dim, v in point.items():
        if dim == "eta":
            sc = dataclasses.replace(sc, fed=dataclasses.replace(sc.fed, eta=v))
        elif dim == "R":
            if sc.attack is None:
                raise HarnessError("sweeping R needs an attack in the base scenario")
            sc = dataclasses.replace(sc, attack=dataclasses.replace(sc.attack, R=v))
        elif dim == "sigma":
            if sc.attack is None:
                raise HarnessError("sweeping sigma needs an attack in the base scenario")
            sc = dataclasses.replace(sc, attack=dataclasses.replace(sc.attack, sigma=v))
        elif dim == "free_rider_count":
            sc = dataclasses.replace(sc, n_free_riders=int(v))
        elif dim == "partition":
            sc = dataclasses.replace(
                sc, dataset=dataclasses.replace(sc.dataset, partition=v))
        elif dim == "q":
            if sc.dp is None:
                raise HarnessError("sweeping q needs a dp block in the base scenario")
            sc = dataclasses.replace(
                sc, dp=dataclasses.replace(sc.dp, participation_ratio=v))
        else:
            raise HarnessError(f"unknown sweep dimension {dim!r}; "
                               f"expected one of {SWEEP_DIMENSIONS}")
    return sc


def _grid_points(sweep: dict) -> list[dict]:
    dims = sorted(sweep)
    values = [list(sweep[d]) for d in dims]
    return [dict(zip(dims, combo)) for combo in itertools.product(*values)]


def _run_one(args):
    sc, out_dir, save_snapshots = args
    return run_cell(sc, out_dir, save_snapshots=save_snapshots)


def grid_run(base: Scenario, sweep: dict, seeds: Sequence[int], out_dir, *,
             workers: int = 1, save_snapshots: bool = False,
             log=None) -> list[CellOutcome]:
    """Cartesian sweep x seeds. Finished cells are skipped; a failing cell is
    reported in its outcome and the rest of the grid still runs."""
    for dim in sweep:
        if dim not in SWEEP_DIMENSIONS:
            raise HarnessError(f"unknown sweep dimension {dim!r}; "
                               f"expected one of {SWEEP_DIMENSIONS}")
    points = _grid_points(sweep)
    cells = [(point, seed, _apply_point(base, point).with_seed(seed))
             for point in points for seed in seeds]
    outcomes: list[CellOutcome] = []

    def finish(point, seed, fp, path, result) -> CellOutcome:
        status = "cached" if result is None else "done"
        oc = CellOutcome(point=point, seed=seed, fingerprint=fp,
                         path=path, status=status)
        if log is not None:
            log(f"[grid] {status} seed={seed} {point} -> {fp}")
        return oc

    if workers <= 1:
        for point, seed, sc in cells:
            try:
                fp, path, result = run_cell(sc, out_dir,
                                            save_snapshots=save_snapshots)
            except Exception as err:  # one bad cell must not sink the grid
                fp = fingerprint(resolved_config(sc))
                oc = CellOutcome(point=point, seed=seed, fingerprint=fp,
                                 path=Path(out_dir) / fp, status="failed",
                                 error=f"{type(err).__name__}: {err}")
                if log is not None:
                    log(f"[grid] failed seed={seed} {point}: {oc.error}")
                outcomes.append(oc)
                continue
            outcomes.append(finish(point, seed, fp, path, result))
        return outcomes

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [(point, seed,
                    pool.submit(_run_one, (sc, out_dir, save_snapshots)))
                   for point, seed, sc in cells]
        for point, seed, fut in futures:
            try:
                fp, path, result = fut.result()
            except Exception as err:
                sc = _apply_point(base, point).with_seed(seed)
                fp = fingerprint(resolved_config(sc))
                oc = CellOutcome(point=point, seed=seed, fingerprint=fp,
                                 path=Path(out_dir) / fp, status="failed",
                                 error=f"{type(err).__name__}: {err}")
                if log is not None:
                    log(f"[grid] failed seed={seed} {point}: {oc.error}")
                outcomes.append(oc)
                continue
            outcomes.append(finish(point, seed, fp, path, result))
    return outcomes


# -------------------------------------------------------------- aggregation

_VARY_PATH = {
    "eta": ("eta",),
    "R": ("attack", "R"),
    "sigma": ("attack", "sigma"),
    "free_rider_count": ("n_free_riders",),
    "partition": ("dataset", "partition"),
    "q": ("dp", "participation_ratio"),
}


def _dig(cfg: dict, path: tuple):
    node = cfg
    for key in path:
        if node is None or key not in node:
            raise HarnessError(f"config lacks {'.'.join(path)}")
        node = node[key]
    return node


def _strip(cfg: dict, vary: str) -> str:
    clean = json.loads(json.dumps(cfg))
    clean.pop("seed", None)
    node = clean
    path = _VARY_PATH[vary]
    for key in path[:-1]:
        node = node[key]
    node.pop(path[-1], None)
    return json.dumps(clean, sort_keys=True)


def auc_curves(cell_dirs: Sequence, vary: str) -> list[tuple]:
    """Mean and spread of each detector's AUC over seeds, per swept value.

    Rows: (vary value, snapshot round, detector, mean, std over seeds, n).
    The inputs must be runs of one scenario that differ only in the swept
    dimension and the seed.
    """
    if vary not in _VARY_PATH:
        raise HarnessError(f"unknown sweep dimension {vary!r}; "
                           f"expected one of {SWEEP_DIMENSIONS}")
    if not cell_dirs:
        raise HarnessError("no results to aggregate")
    buckets: dict = {}
    base_key = None
    for d in cell_dirs:
        summary = load_result(d)
        cfg = summary["config"]
        key = _strip(cfg, vary)
        if base_key is None:
            base_key = key
        elif key != base_key:
            raise HarnessError(
                f"{d}: config differs beyond {vary!r} and seed")
        value = _dig(cfg, _VARY_PATH[vary])
        for j_str, per_kind in summary["aucs"].items():
            for kind, auc_val in per_kind.items():
                if auc_val is None:
                    continue
                buckets.setdefault((value, int(j_str), kind), []).append(auc_val)

    def kind_order(kind: str) -> int:
        return (DETECTOR_ORDER.index(kind) if kind in DETECTOR_ORDER
                else len(DETECTOR_ORDER))

    rows = []
    for (value, j, kind) in sorted(buckets, key=lambda t: (str(t[0]), t[1],
                                                           kind_order(t[2]))):
        vals = np.array(buckets[(value, j, kind)])
        rows.append((value, j, kind, float(vals.mean()),
                     float(vals.std()), len(vals)))
    return rows


def save_auc_curves(rows: Sequence[tuple], path, vary: str) -> Path:
    path = Path(path)
    _write_csv(path, (vary, "round", "detector", "auc_mean", "auc_std", "seeds"),
               rows)
    return path


# -------------------------------------------------------------- figure data

def _read_scores_csv(path: Path) -> dict:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    cols = {name: [] for name in header}
    for line in lines[1:]:
        for name, v in zip(header, line.split(",")):
            cols[name].append(v)
    return cols


def figure_data(cell_dir, kind: str, *, detector: str = "stddagmm",
                round_index: int | None = None, bins: int = 30,
                out_dir=None) -> list[Path]:
    """Emit plain columnar plot data from one cell's saved files.

    std_curves: the full per-round STD fan, one column per client, truth row
    first. energy_scatter: client vs energy with truth flags, one file per
    scored round. energy_hist: counts over [min, max] in equal bins, free
    riders and honest clients in separate columns, one file per round.
    """
    cell = Path(cell_dir)
    target = Path(out_dir) if out_dir is not None else cell
    target.mkdir(parents=True, exist_ok=True)
    if kind not in FIGURE_KINDS:
        raise HarnessError(f"unknown figure kind {kind!r}; "
                           f"expected one of {FIGURE_KINDS}")

    if kind == "std_curves":
        src = cell / "std_curves.csv"
        if not src.exists():
            raise HarnessError(f"{cell}: no std_curves.csv")
        dst = target / "figure_std_curves.csv"
        dst.write_bytes(src.read_bytes())
        return [dst]

    if detector not in ("dagmm", "stddagmm"):
        raise HarnessError("energy figures need detector 'dagmm' or 'stddagmm'")
    summary = load_result(cell)
    rounds = summary["scored_rounds"]
    if round_index is not None:
        if round_index not in rounds:
            raise HarnessError(f"round {round_index} was not scored; "
                               f"have {rounds}")
        rounds = [round_index]

    written = []
    for j in rounds:
        cols = _read_scores_csv(cell / f"scores_round_{j}.csv")
        pairs = [(int(c), float(e), int(t)) for c, e, t in
                 zip(cols["client_id"], cols[f"{detector}_energy"],
                     cols["is_free_rider"]) if e != ""]
        if kind == "energy_scatter":
            dst = target / f"figure_energy_scatter_{detector}_round_{j}.csv"
            _write_csv(dst, ("client_id", "energy", "is_free_rider"),
                       [(c, e, t) for c, e, t in pairs])
        else:
            energies = np.array([e for _, e, _ in pairs])
            truth = np.array([t for _, _, t in pairs], dtype=bool)
            edges = np.histogram_bin_edges(energies, bins=bins)
            honest, _ = np.histogram(energies[~truth], bins=edges)
            riders, _ = np.histogram(energies[truth], bins=edges)
            dst = target / f"figure_energy_hist_{detector}_round_{j}.csv"
            _write_csv(dst, ("bin_lo", "bin_hi", "honest_count",
                             "free_rider_count"),
                       [(float(edges[i]), float(edges[i + 1]),
                         int(honest[i]), int(riders[i]))
                        for i in range(len(honest))])
        written.append(dst)
    return written
