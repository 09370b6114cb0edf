"""Command-line entry point: generate, train, eval, sweep-fidelity.

Precedence is flags > config file (TOML or JSON) > defaults. Exit codes:
0 success, 1 invalid configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import pdegen
from .autodiff import value
from .baselines_gp import DrcModel, PcaGpModel, drc_fit
from .checkpoint import load_model, save_model
from .gpode import GpodeModel
from .ifc import IfcOde2Model, SfModel, pca_warm_start
from .nn import DEFAULT_HIDDEN
from .odeint import STEPS_PER_UNIT
from .trainer import TrainConfig, TrainReport, config_hash, evaluate, fit, nrmse

log = logging.getLogger("ifcode")

MODEL_KINDS = ("ifc-ode2", "ifc-gpode", "sf", "pca-gp", "drc")
COMMANDS = ("generate", "train", "eval", "sweep-fidelity")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    pde: str = "poisson"
    meshes: tuple = (8, 16, 32, 64)
    counts: tuple = (100, 50, 20, 5)
    test: int = 128
    test_mesh: int = 0
    model: str = "ifc-ode2"
    data: str = ""
    k: int = 10
    hidden: int = DEFAULT_HIDDEN
    lr: float = 1e-2
    epochs: int = 300
    steps: int = STEPS_PER_UNIT
    R: int = 2
    gp_iters: int = 200
    patience: int = 100
    seed: int = 0
    m: str = ""
    reference: str = ""
    out: str = ""

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if not self.out and self.command != "eval":
            raise ConfigError("--out is required")
        if self.command == "generate":
            pdegen.pde_spec(self.pde)
            if not self.meshes or len(self.meshes) != len(self.counts):
                raise ConfigError("--meshes and --counts need the same nonzero length")
            if any(s < 3 for s in self.meshes) or any(c < 0 for c in self.counts):
                raise ConfigError("mesh sizes must be >= 3 and counts >= 0")
            if list(self.meshes) != sorted(set(self.meshes)):
                raise ConfigError("mesh sizes must be strictly ascending")
            if self.test < 0 or (self.test_mesh and self.test_mesh < 3):
                raise ConfigError("invalid test split settings")
        if self.command == "train":
            if self.model not in MODEL_KINDS:
                raise ConfigError(f"--model must be one of {MODEL_KINDS}")
            if not self.data:
                raise ConfigError("--data is required")
            if self.k < 1 or self.hidden < 1 or self.steps < 1 or self.R < 1 or self.gp_iters < 0:
                raise ConfigError("k, hidden, steps and R must be positive")
            try:
                TrainConfig(lr=self.lr, epochs=self.epochs, seed=self.seed,
                            patience=self.patience).validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.command in ("eval", "sweep-fidelity") and not self.model:
            raise ConfigError("--model (a run directory) is required")
        if self.command == "eval" and not self.data:
            raise ConfigError("--data is required")
        if self.command == "sweep-fidelity":
            if not self.reference:
                raise ConfigError("--reference is required")
            parse_m_grid(self.m)

    def echo(self):
        out = asdict(self)
        out["meshes"] = list(self.meshes)
        out["counts"] = list(self.counts)
        out["config_hash"] = config_hash(asdict(self))
        return out


def derive_seed(seed, stream):
    """Independent reproducible seed for a named stream ("data", "init", ...)."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())]).generate_state(1)[0])


def parse_int_list(text):
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def parse_m_grid(text):
    """``start:stop:step`` (stop included) or a comma-separated list."""
    text = str(text).strip()
    if not text:
        raise ConfigError("--m is required")
    try:
        if ":" in text:
            start, stop, step = (float(t) for t in text.split(":"))
            if step <= 0 or stop < start:
                raise ConfigError(f"bad fidelity grid {text!r}")
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            grid = [round(start + i * step, 12) for i in range(n)]
            if grid[-1] < stop - 1e-9:
                grid.append(stop)
        else:
            grid = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad fidelity grid {text!r}") from None
    if not grid or min(grid) < 0:
        raise ConfigError("fidelities must be >= 0")
    return grid


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="ifcode", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON file with default settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("generate", help="solve PDEs and write a dataset")
    common(g)
    g.add_argument("--pde", choices=sorted(pdegen.SPECS))
    g.add_argument("--meshes", type=parse_int_list)
    g.add_argument("--counts", type=parse_int_list)
    g.add_argument("--test", type=int, help="number of test examples")
    g.add_argument("--test-mesh", dest="test_mesh", type=int,
                   help="mesh for the test split (default: finest training mesh)")

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--data")
    t.add_argument("--k", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int, help="RK4 steps per unit fidelity")
    t.add_argument("--R", type=int, help="output folding order (ifc-gpode)")
    t.add_argument("--gp-iters", dest="gp_iters", type=int)
    t.add_argument("--patience", type=int)

    e = sub.add_parser("eval", help="nRMSE of a trained model on a test split")
    common(e)
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--m", help="fidelity to predict at (default: the test mesh's fidelity)")

    s = sub.add_parser("sweep-fidelity", help="nRMSE over a grid of fidelities")
    common(s)
    s.add_argument("--model")
    s.add_argument("--m", help="start:stop:step or a comma-separated list")
    s.add_argument("--reference", help="dataset whose test split is the reference")
    return p


def load_config_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".json"):
        data = json.loads(raw.decode())
    else:
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(raw.decode())
    data.pop("config_hash", None)
    data.pop("command", None)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("meshes", "counts"):
        if key in data and isinstance(data[key], str):
            data[key] = parse_int_list(data[key])
        elif key in data:
            data[key] = tuple(int(v) for v in data[key])
    return data


def resolve_config(argv):
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise ConfigError(f"a subcommand is required: {', '.join(COMMANDS)}")
    settings = {}
    if getattr(args, "config", None):
        settings.update(load_config_file(args.config))
    for key, val in vars(args).items():
        if key in ("config", "verbose") or val is None:
            continue
        settings[key] = val
    if args.command == "eval" and settings.get("m") is None:
        settings["m"] = ""
    cfg = RunConfig(**settings)
    cfg.validate()
    return cfg, args


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _threads():
    try:
        return max(1, int(os.environ.get("IFC_NUM_THREADS", "1")))
    except ValueError:
        raise ConfigError("IFC_NUM_THREADS must be an integer") from None


def cmd_generate(cfg: RunConfig):
    ds = pdegen.generate_dataset(cfg.pde, cfg.meshes, cfg.counts, cfg.test,
                                 seed=derive_seed(cfg.seed, "data"),
                                 test_mesh=cfg.test_mesh or None, workers=_threads())
    ds.extra["run_config_hash"] = cfg.echo()["config_hash"]
    pdegen.save_dataset(ds, cfg.out)
    _write_json(os.path.join(cfg.out, "run_config.json"), cfg.echo())
    log.info("wrote %d train / %d test examples to %s", len(ds.train), len(ds.test), cfg.out)


def build_model(cfg: RunConfig, ds):
    p, d = len(ds.ranges), ds.d
    seed = derive_seed(cfg.seed, "init")
    Y = ds.train.Y
    if cfg.model == "ifc-ode2":
        model = IfcOde2Model(p, d, cfg.k, hidden=cfg.hidden, seed=seed, steps_per_unit=cfg.steps,
                             nu=pca_warm_start(Y, cfg.k))
        return model
    if cfg.model == "sf":
        return SfModel(p, d, cfg.k, hidden=cfg.hidden, seed=seed, b0=pca_warm_start(Y, cfg.k))
    if cfg.model == "ifc-gpode":
        return GpodeModel.warm_start(p, Y, cfg.k, ds.train.fidelities(), R=cfg.R,
                                     hidden=cfg.hidden, seed=seed, steps_per_unit=cfg.steps)
    raise ConfigError(f"{cfg.model} is not a gradient-trained model")


def _gp_report(cfg, model):
    """Per-iteration summed NLML of the score GPs, stage after stage."""
    report = TrainReport(seed=cfg.seed, config_hash=cfg.echo()["config_hash"])
    levels = model.levels if isinstance(model, DrcModel) else [model]
    for level in levels:
        n = max(len(gp.history) for gp in level.gps)
        for i in range(n):
            total = sum(gp.history[min(i, len(gp.history) - 1)] for gp in level.gps)
            report.add(total, 0.05)
    return report


def cmd_train(cfg: RunConfig):
    ds = pdegen.load_dataset(cfg.data)
    fits = sorted(set(ds.train.m.tolist()))
    if cfg.model == "pca-gp":
        top = ds.train.subset(np.flatnonzero(ds.train.m == fits[-1]))
        model = PcaGpModel.fit(top.X, top.Y, min(cfg.k, len(top)), cfg.gp_iters)
        report = _gp_report(cfg, model)
    elif cfg.model == "drc":
        groups = [ds.train.subset(np.flatnonzero(ds.train.m == m)) for m in fits]
        model = drc_fit([(g.X, g.Y) for g in groups], cfg.k, cfg.gp_iters)
        report = _gp_report(cfg, model)
    else:
        model = build_model(cfg, ds)
        tc = TrainConfig(lr=cfg.lr, epochs=cfg.epochs, seed=cfg.seed, patience=cfg.patience)
        report = fit(model, ds.train, tc)
        report.config_hash = cfg.echo()["config_hash"]
    m_test = float(ds.test.m[0]) if len(ds.test) else 1.0
    report.test_nrmse = evaluate(model, ds.test, m=m_test) if len(ds.test) else None
    os.makedirs(cfg.out, exist_ok=True)
    fmap = ds.fidelity_map
    save_model(model, cfg.out, extra={
        "fidelity_map": None if fmap is None else {"s0": fmap.s0, "s1": fmap.s1},
        "output_mesh": ds.output_mesh, "pde": ds.kind, "run_config_hash": cfg.echo()["config_hash"],
    })
    report.save(os.path.join(cfg.out, "report.csv"), os.path.join(cfg.out, "metrics.json"))
    _write_json(os.path.join(cfg.out, "run_config.json"), cfg.echo())
    log.info("test nRMSE %s", report.test_nrmse)


def _fidelity_of(header, mesh):
    fm = header.get("fidelity_map")
    if fm is None:
        return 0.0
    return pdegen.FidelityMap(fm["s0"], fm["s1"]).fidelity(mesh)


def _predict_on(model, X, m, out_mesh, target_mesh, solver="rk4"):
    pred = np.asarray(value(model.predict(X, m, solver=solver)))
    if out_mesh != target_mesh:
        pred = pdegen.resample_rows(pred, target_mesh)
    return pred


def cmd_eval(cfg: RunConfig):
    model, header = load_model(cfg.model)
    ds = pdegen.load_dataset(cfg.data)
    m = float(cfg.m) if cfg.m else _fidelity_of(header, ds.test_mesh)
    pred = _predict_on(model, ds.test.X, m, header["output_mesh"], ds.test_mesh)
    out = cfg.out or os.path.join(cfg.model, "eval.json")
    result = {"nrmse": nrmse(pred, ds.test.Y), "m": m, "test_mesh": ds.test_mesh,
              "n_test": len(ds.test), "nrmse_normalizer": "rms_truth",
              "config": cfg.echo()}
    _write_json(out, result)
    log.info("nRMSE %.6g at m=%g", result["nrmse"], m)


def sweep_fidelity(model, header, reference, grid, solver="dopri5"):
    """Rows (m, mesh, nrmse) comparing predictions with the reference test split.

    The fidelity ODEs are integrated adaptively here; training used fixed-step RK4.
    """
    fm = header.get("fidelity_map")
    fmap = None if fm is None else pdegen.FidelityMap(fm["s0"], fm["s1"])
    rows = []
    for m in grid:
        pred = _predict_on(model, reference.test.X, m, header["output_mesh"],
                           reference.test_mesh, solver)
        mesh = fmap.mesh(m) if fmap else float(header["output_mesh"])
        rows.append((m, mesh, nrmse(pred, reference.test.Y)))
    return rows


def cmd_sweep(cfg: RunConfig):
    model, header = load_model(cfg.model)
    ref = pdegen.load_dataset(cfg.reference)
    rows = sweep_fidelity(model, header, ref, parse_m_grid(cfg.m))
    os.makedirs(os.path.dirname(os.path.abspath(cfg.out)), exist_ok=True)
    with open(cfg.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "mesh", "nrmse"])
        for m, mesh, err in rows:
            w.writerow([repr(float(m)), repr(float(mesh)), repr(float(err))])
    _write_json(os.path.splitext(cfg.out)[0] + ".run_config.json", cfg.echo())


def run(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, args = resolve_config(sys.argv[1:] if argv is None else list(argv))
    except (ConfigError, ValueError, TypeError, OSError) as exc:
        print(f"ifcode: configuration error: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        log.setLevel(logging.INFO)
    handlers = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
                "sweep-fidelity": cmd_sweep}
    try:
        handlers[cfg.command](cfg)
    except ConfigError as exc:
        print(f"ifcode: configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"ifcode: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
