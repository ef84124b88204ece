"""Command line entry point: run experiments, sweep grids, rescore saved
snapshots, emit plot data, and self-check the numeric core.

Config files are plain text, sectioned, one `key = value` per line:

    [dataset]
    num_classes = 10
    per_class = 300
    feature_dim = 20
    spread = 0.2
    partition = iid

    [federation]
    n_clients = 100
    eta = 1.0
    rounds = 80
    snapshot_rounds = 5 80
    local_learning_rate = 0.1
    local_batch_size = 10
    local_epochs = 2

    [attack]
    kind = random
    R = 1e-4
    free_riders = 1

    [run]
    seeds = 0 1 2 3 4

Unknown sections or keys are rejected with the file and line number; a
config never half-applies. Lists are space separated. `#` starts a comment.

The output directory resolves in order: --out flag, `out` under [run],
the FEDRIDER_OUT environment variable, then ./results.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import detect as fdetect
from . import evalharness as eh
from . import fedsim
from . import numkit as nk
from .attacks import ATTACK_KINDS, AttackConfig, delta_weights
from .detect import DetectorConfig
from .fedsim import FedConfig, FedError, SnapshotError
from .privacy import DPConfig, clip_update

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "main",
    "EXIT_OK",
    "EXIT_INTERNAL",
    "EXIT_USAGE",
    "EXIT_CONFIG",
    "EXIT_MISSING",
    "EXIT_SELFTEST",
]

EXIT_OK = 0
EXIT_INTERNAL = 1       # unexpected failure; a bug, not bad input
EXIT_USAGE = 2          # bad command line (argparse convention)
EXIT_CONFIG = 3         # unreadable or invalid config file
EXIT_MISSING = 4        # missing snapshot / results input
EXIT_SELFTEST = 5       # a selftest check failed

EXIT_CODE_DOC = """\
exit codes:
  0  success
  1  unexpected internal error
  2  command line usage error
  3  config file error (unreadable, unknown key or section, invalid value)
  4  missing input (snapshot file, results directory, round not scored)
  5  selftest check failed
"""


class ConfigError(Exception):
    """Config file problem, already formatted as path:line: message."""


# ------------------------------------------------------------ config parsing

def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple:
    return tuple(int(t) for t in s.split())


def _parse_floats(s: str) -> tuple:
    return tuple(float(t) for t in s.split())


def _parse_strs(s: str) -> tuple:
    return tuple(s.split())


def _parse_clip(s: str):
    return None if s.lower() == "none" else float(s)


SCHEMA = {
    "dataset": {
        "num_classes": int, "per_class": int, "feature_dim": int,
        "spread": float, "partition": str,
    },
    "federation": {
        "n_clients": int, "eta": float, "rounds": int,
        "snapshot_rounds": _parse_ints, "local_learning_rate": float,
        "local_batch_size": int, "local_epochs": int,
        "hidden_sizes": _parse_ints,
    },
    "attack": {
        "kind": str, "R": float, "sigma": float, "first_round_fallback": str,
        "divide_by_gap": _parse_bool, "seed": int, "free_riders": int,
    },
    "dp": {
        "clip_bound": float, "server_noise_std": float,
        "participation_ratio": float, "seed": int,
    },
    "detector": {
        "ae_hidden": _parse_ints, "ae_epochs": int, "ae_learning_rate": float,
        "dagmm_arch": _parse_ints, "lambda1": float, "lambda2": float,
        "K": int, "dagmm_epochs": int, "dagmm_learning_rate": float,
        "pretrain_epochs": int, "pretrain_learning_rate": float,
        "optimizer": str, "input_scale": str, "standardize_zr": _parse_bool,
        "zr_clip": _parse_clip, "eps": float, "seed": int,
    },
    "run": {
        "seeds": _parse_ints, "out": str, "detectors": _parse_strs,
        "save_snapshots": _parse_bool,
    },
    "sweep": {
        "eta": _parse_floats, "R": _parse_floats, "sigma": _parse_floats,
        "free_rider_count": _parse_ints, "partition": _parse_strs,
        "q": _parse_floats,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """One parsed config file: the scenario plus how to run it."""

    scenario: eh.Scenario
    seeds: tuple
    out: str | None
    sweep: dict
    save_snapshots: bool = False


def _parse_sections(text: str, name: str) -> dict:
    """text -> {section: {key: (raw value, line number)}}, schema-checked."""
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SCHEMA:
                raise ConfigError(f"{name}:{lineno}: unknown section [{current}]; "
                                  f"expected one of {sorted(SCHEMA)}")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{name}:{lineno}: expected key = value")
        if current is None:
            raise ConfigError(f"{name}:{lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA[current]:
            raise ConfigError(f"{name}:{lineno}: unknown key {key!r} in "
                              f"[{current}]; expected one of "
                              f"{sorted(SCHEMA[current])}")
        if key in sections[current]:
            raise ConfigError(f"{name}:{lineno}: duplicate key {key!r} in "
                              f"[{current}]")
        sections[current][key] = (value, lineno)
    return sections


def _typed(sections: dict, name: str) -> dict:
    out: dict = {}
    for section, entries in sections.items():
        out[section] = {}
        for key, (raw, lineno) in entries.items():
            try:
                out[section][key] = SCHEMA[section][key](raw)
            except ValueError as err:
                raise ConfigError(f"{name}:{lineno}: bad value for {key!r}: "
                                  f"{err}") from err
    return out


def _build(typed: dict, sections: dict, name: str) -> RunConfig:
    def section_line(sec: str) -> str:
        return f"{name}: [{sec}]"

    ds_kw = typed.get("dataset", {})
    try:
        dataset = eh.DatasetSpec(**ds_kw)
    except FedError as err:
        raise ConfigError(f"{section_line('dataset')}: {err}") from err

    fed_kw = dict(typed.get("federation", {}))
    local = nk.SgdConfig(
        learning_rate=fed_kw.pop("local_learning_rate", 0.1),
        batch_size=fed_kw.pop("local_batch_size", 10),
        epochs=fed_kw.pop("local_epochs", 2))
    hidden = fed_kw.pop("hidden_sizes", (16,))
    if "snapshot_rounds" in fed_kw:
        fed_kw["snapshot_rounds"] = frozenset(fed_kw["snapshot_rounds"])
    try:
        fed = FedConfig(local=local, **fed_kw)
    except (FedError, ValueError) as err:
        raise ConfigError(f"{section_line('federation')}: {err}") from err

    attack = None
    n_free_riders = 0
    if "attack" in typed:
        atk_kw = dict(typed["attack"])
        n_free_riders = atk_kw.pop("free_riders", 1)
        if "kind" not in atk_kw:
            raise ConfigError(f"{section_line('attack')}: missing key 'kind'")
        if atk_kw["kind"] == "advanced_delta" and "sigma" not in sections["attack"]:
            raise ConfigError(f"{section_line('attack')}: kind=advanced_delta "
                              f"needs an explicit sigma")
        try:
            attack = AttackConfig(**atk_kw)
        except FedError as err:
            raise ConfigError(f"{section_line('attack')}: {err}") from err

    dp = None
    if "dp" in typed:
        try:
            dp = DPConfig(**typed["dp"])
        except FedError as err:
            raise ConfigError(f"{section_line('dp')}: {err}") from err

    try:
        detector = DetectorConfig(**typed.get("detector", {}))
    except (FedError, ValueError, TypeError) as err:
        raise ConfigError(f"{section_line('detector')}: {err}") from err

    run_kw = typed.get("run", {})
    detectors = run_kw.get("detectors", eh.DETECTOR_ORDER)
    for kind in detectors:
        if kind not in eh.DETECTOR_ORDER:
            raise ConfigError(f"{section_line('run')}: unknown detector "
                              f"{kind!r}; expected among {eh.DETECTOR_ORDER}")

    scenario = eh.Scenario(fed=fed, dataset=dataset, attack=attack,
                           n_free_riders=n_free_riders, dp=dp,
                           detector=detector, detectors=tuple(detectors),
                           hidden_sizes=tuple(hidden))
    return RunConfig(scenario=scenario,
                     seeds=run_kw.get("seeds", (0,)),
                     out=run_kw.get("out"),
                     sweep=typed.get("sweep", {}),
                     save_snapshots=run_kw.get("save_snapshots", False))


def load_config(path) -> RunConfig:
    """Parse and validate one config file into a fully materialized RunConfig."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config: {err}") from err
    sections = _parse_sections(text, str(path))
    return _build(_typed(sections, str(path)), sections, str(path))


def _resolve_out(flag_value, cfg_value) -> Path:
    if flag_value:
        return Path(flag_value)
    if cfg_value:
        return Path(cfg_value)
    env = os.environ.get("FEDRIDER_OUT")
    if env:
        return Path(env)
    return Path("results")


# ------------------------------------------------------------- subcommands

def _cmd_run(args) -> int:
    rc = load_config(args.config)
    seeds = (args.seed,) if args.seed is not None else rc.seeds
    out = _resolve_out(args.out, rc.out)
    save_snaps = args.snapshot or rc.save_snapshots
    for seed in seeds:
        sc = rc.scenario.with_seed(seed)
        fp, cell, result = eh.run_cell(sc, out, save_snapshots=save_snaps)
        if result is None:
            print(f"[run] cached seed={seed} -> {cell}")
            continue
        summary = eh.load_result(cell)
        for j in summary["scored_rounds"]:
            aucs = summary["aucs"][str(j)]
            shown = " ".join(f"{k}={aucs[k]:.4f}" for k in sorted(aucs)
                             if aucs[k] is not None)
            print(f"[run] seed={seed} round={j} auc {shown}")
        print(f"[run] done seed={seed} acc={summary['final_accuracy']:.4f} "
              f"-> {cell}")
    return EXIT_OK


def _cmd_grid(args) -> int:
    rc = load_config(args.config)
    if not rc.sweep:
        raise ConfigError(f"{args.config}: grid needs a [sweep] section")
    seeds = (args.seed,) if args.seed is not None else rc.seeds
    out = _resolve_out(args.out, rc.out)
    outcomes = eh.grid_run(rc.scenario, rc.sweep, seeds, out,
                           workers=args.workers,
                           save_snapshots=args.snapshot or rc.save_snapshots,
                           log=print)
    failed = [oc for oc in outcomes if oc.status == "failed"]
    finished = [oc for oc in outcomes if oc.status != "failed"]
    if len(rc.sweep) == 1 and finished:
        vary = next(iter(rc.sweep))
        try:
            rows = eh.auc_curves([oc.path for oc in finished], vary)
            path = eh.save_auc_curves(rows, out / f"auc_curves_{vary}.csv", vary)
            print(f"[grid] wrote {path}")
        except eh.HarnessError as err:
            print(f"[grid] aggregation skipped: {err}", file=sys.stderr)
    print(f"[grid] {len(finished)} of {len(outcomes)} cells finished, "
          f"{len(failed)} failed")
    for oc in failed:
        print(f"[grid] failed: seed={oc.seed} {oc.point}: {oc.error}",
              file=sys.stderr)
    return EXIT_OK if not failed else EXIT_INTERNAL


def _cmd_score(args) -> int:
    try:
        record = fedsim.load_round_record(args.snapshot)
    except FileNotFoundError as err:
        raise SnapshotError(f"{args.snapshot}: no such snapshot") from err
    detector_cfg = DetectorConfig(seed=args.seed)
    if args.config:
        rc = load_config(args.config)
        detector_cfg = rc.scenario.detector
    detectors = tuple(args.detector) if args.detector else eh.DETECTOR_ORDER
    outs, aucs, ranks = fedsim.score_round(record, detectors, detector_cfg,
                                           experiment_seed=args.seed)
    out = _resolve_out(args.out, None)
    out.mkdir(parents=True, exist_ok=True)
    path = eh.write_scores_csv(out / f"scores_round_{record.round_index}.csv",
                               record.round_index, outs, ranks,
                               record.free_rider_ids)
    for kind in detectors:
        auc_txt = ("n/a" if aucs.get(kind) is None else f"{aucs[kind]:.4f}")
        print(f"[score] {kind} auc={auc_txt}")
    print(f"[score] wrote {path}")
    return EXIT_OK


def _cmd_figure(args) -> int:
    cell = Path(args.cell)
    if not cell.is_dir():
        raise eh.HarnessError(f"{cell}: not a results directory")
    written = eh.figure_data(cell, args.figure, detector=args.detector,
                             round_index=args.round, bins=args.bins,
                             out_dir=args.out)
    for path in written:
        print(f"[figure] wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------- selftest

def _check_autodiff() -> str:
    rng = np.random.default_rng(12)

    def mlp_loss():
        h = nk.tanh(nk.add(nk.matmul(x, w1), b1))
        out = nk.add(nk.matmul(h, w2), b2)
        return nk.mse(out, target)

    x = nk.tensor(rng.normal(size=(5, 4)))
    target = nk.tensor(rng.normal(size=(5, 2)))
    w1 = nk.param(rng.normal(size=(4, 6)) * 0.3)
    b1 = nk.param(np.zeros(6))
    w2 = nk.param(rng.normal(size=(6, 2)) * 0.3)
    b2 = nk.param(np.zeros(2))
    rep = nk.grad_check(mlp_loss, [w1, b1, w2, b2])
    if not rep.passed:
        return rep.summary()

    def mix_loss():
        z = nk.concat([nk.reshape(nk.softmax(a), (2, 3)),
                       nk.exp(nk.neg(nk.relu(b)))], axis=1)
        q = nk.matmul(nk.transpose(z), z)
        reg = nk.add(q, nk.tensor(np.eye(6)))
        return nk.add(nk.logdet(reg),
                      nk.reduce_mean(nk.sqrt(nk.add(nk.mul(z, z),
                                                    nk.tensor(1e-3)))))

    a = nk.param(rng.normal(size=(2, 3)))
    b = nk.param(rng.normal(size=(2, 3)) + 2.0)
    rep = nk.grad_check(mix_loss, [a, b])
    if not rep.passed:
        return rep.summary()
    return ""


def _check_gmm_energy() -> str:
    rng = np.random.default_rng(5)
    for trial in range(25):
        k = int(rng.integers(1, 5))
        d = int(rng.integers(1, 7))
        phi = rng.dirichlet(np.ones(k))
        mu = rng.normal(size=(k, d))
        sigma = np.empty((k, d, d))
        for i in range(k):
            m = rng.normal(size=(d, d))
            sigma[i] = m @ m.T + 0.5 * np.eye(d)
        gmm = fdetect.GMMParams(phi=phi, mu=mu, sigma=sigma)
        z = rng.normal(size=d)
        dens = 0.0
        for i in range(k):
            diff = z - mu[i]
            quad = diff @ np.linalg.inv(sigma[i]) @ diff
            norm = np.sqrt(((2 * np.pi) ** d) * np.linalg.det(sigma[i]))
            dens += phi[i] * np.exp(-0.5 * quad) / norm
        want = -np.log(dens)
        got = fdetect.gmm_energy(z, gmm)
        denom = max(abs(want), 1e-12)
        if abs(got - want) / denom > 1e-8:
            return (f"energy mismatch at trial {trial}: {got!r} vs "
                    f"brute-force {want!r}")
    one = fdetect.GMMParams(phi=np.array([1.0]), mu=np.zeros((1, 1)),
                            sigma=np.ones((1, 1, 1)))
    want = 0.5 * np.log(2 * np.pi)
    got = fdetect.gmm_energy(np.zeros(1), one)
    if abs(got - want) > 1e-12:
        return f"standard normal energy {got!r} != {want!r}"
    return ""


def _check_auc() -> str:
    rng = np.random.default_rng(9)
    for trial in range(50):
        n = int(rng.integers(3, 30))
        scores = np.round(rng.normal(size=n), 1)  # force some ties
        labels = rng.random(n) < 0.4
        if labels.all() or not labels.any():
            continue
        pos = scores[labels]
        neg = scores[~labels]
        wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
        want = wins / (len(pos) * len(neg))
        got = fdetect.auc(scores, labels)
        if abs(got - want) > 1e-12:
            return f"auc mismatch at trial {trial}: {got!r} vs {want!r}"
    return ""


def _check_delta_identity() -> str:
    from . import data as fdata
    ds = fdata.synth_dataset(num_classes=3, per_class=12, feature_dim=5, seed=1)
    parts = fdata.partition_iid(ds, 6, seed=1)
    eta = 0.77
    cfg = FedConfig(n_clients=6, eta=eta, rounds=2,
                    snapshot_rounds=frozenset({2}),
                    local=nk.SgdConfig(learning_rate=0.1, batch_size=4,
                                       epochs=1), seed=1)
    import tempfile
    with tempfile.TemporaryDirectory() as td:
        fedsim.run_experiment(cfg, ds, parts, detectors=(), snapshot_dir=td)
        rec = fedsim.load_round_record(Path(td) / "round_2.snap")
    mean_update = np.mean([u.grad.flat for u in rec.updates], axis=0)
    fabricated = rec.model_before.params.flat - rec.model_after.params.flat
    err = np.abs(fabricated - eta * mean_update).max()
    if err > 1e-12:
        return f"delta identity off by {err!r}"
    return ""


def _check_clip() -> str:
    rng = np.random.default_rng(3)
    c = 0.7
    for _ in range(1000):
        v = rng.normal(size=8)
        norm = np.linalg.norm(v)
        if norm > 0:
            v *= rng.uniform(0, 10 * c) / norm
        from .fedsim import ClientUpdate, ModelParams
        clipped = clip_update(ClientUpdate(0, 1, ModelParams(v, ((8,),))), c)
        if np.linalg.norm(clipped.grad.flat) > c + 1e-12:
            return f"clip exceeded bound: {np.linalg.norm(clipped.grad.flat)!r}"
    return ""


def _check_determinism() -> str:
    rng = np.random.default_rng(21)
    batch = [fdetect.flatten(rng.normal(0, 1e-3, size=12), client_id=i)
             for i in range(8)]
    a = fdetect.stddagmm_score(batch, epochs=10, seed=4)
    b = fdetect.stddagmm_score(batch, epochs=10, seed=4)
    if not np.array_equal(a.scores, b.scores):
        return "same-seed scores differ"
    return ""


SELFTEST_CHECKS = (
    ("autodiff_vs_finite_differences", _check_autodiff),
    ("gmm_energy_vs_bruteforce", _check_gmm_energy),
    ("auc_vs_pairwise_enumeration", _check_auc),
    ("delta_equals_eta_mean_update", _check_delta_identity),
    ("clip_norm_bound", _check_clip),
    ("same_seed_same_scores", _check_determinism),
)


def _cmd_selftest(_args) -> int:
    failed = 0
    for name, check in SELFTEST_CHECKS:
        detail = check()
        if detail:
            failed += 1
            print(f"[selftest] FAIL {name}: {detail}")
        else:
            print(f"[selftest] ok {name}")
    if failed:
        print(f"[selftest] {failed} of {len(SELFTEST_CHECKS)} checks failed")
        return EXIT_SELFTEST
    print(f"[selftest] all {len(SELFTEST_CHECKS)} checks passed")
    return EXIT_OK


# -------------------------------------------------------------------- main

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrider",
        description="Federated averaging under free-rider attacks: "
                    "simulate, detect, sweep, and inspect.",
        epilog=EXIT_CODE_DOC,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one configured experiment per seed")
    run.add_argument("--config", required=True, help="experiment config file")
    run.add_argument("--seed", type=int, default=None,
                     help="run only this seed (overrides [run] seeds)")
    run.add_argument("--out", default=None, help="results directory")
    run.add_argument("--snapshot", action="store_true",
                     help="also save per-round snapshots at snapshot rounds")
    run.set_defaults(func=_cmd_run)

    grid = sub.add_parser("grid", help="run the [sweep] grid from a config")
    grid.add_argument("--config", required=True)
    grid.add_argument("--seed", type=int, default=None)
    grid.add_argument("--out", default=None)
    grid.add_argument("--workers", type=int, default=1,
                      help="parallel grid cells (default 1)")
    grid.add_argument("--snapshot", action="store_true")
    grid.set_defaults(func=_cmd_grid)

    score = sub.add_parser("score",
                           help="re-run detectors on a saved round snapshot")
    score.add_argument("--snapshot", required=True,
                       help="round_<j>.snap file to score")
    score.add_argument("--detector", action="append",
                       choices=eh.DETECTOR_ORDER,
                       help="detector to run (repeatable; default all)")
    score.add_argument("--seed", type=int, default=0)
    score.add_argument("--config", default=None,
                       help="optional config supplying [detector] settings")
    score.add_argument("--out", default=None)
    score.set_defaults(func=_cmd_score)

    figure = sub.add_parser("figure",
                            help="emit plot data from a finished cell")
    figure.add_argument("cell", help="results cell directory (one fingerprint)")
    figure.add_argument("--figure", required=True, choices=eh.FIGURE_KINDS)
    figure.add_argument("--detector", default="stddagmm",
                        choices=("dagmm", "stddagmm"))
    figure.add_argument("--round", type=int, default=None,
                        help="restrict to one scored round")
    figure.add_argument("--bins", type=int, default=30,
                        help="histogram bin count (default 30)")
    figure.add_argument("--out", default=None,
                        help="write figure files here (default: the cell)")
    figure.set_defaults(func=_cmd_figure)

    selftest = sub.add_parser("selftest",
                              help="gradient checks and oracle equivalences")
    selftest.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"[config] {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SnapshotError, eh.HarnessError) as err:
        print(f"[{args.command}] {err}", file=sys.stderr)
        return EXIT_MISSING
    except FedError as err:
        print(f"[{args.command}] {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - last resort, report and fail
        print(f"[{args.command}] internal error: {type(err).__name__}: {err}",
              file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
