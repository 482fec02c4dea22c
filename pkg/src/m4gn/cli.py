"""Command-line entry point: ``m4gn <subcommand> [options]``.

Every subcommand accepts ``--config`` (JSON or TOML), ``--seed`` and ``--out``.
Values resolve as built-in defaults < top-level config keys < the config
section named after the subcommand < explicit flags. The resolved values are
written next to the outputs in ``run.json`` and embedded in JSON artifacts.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 validation or numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from . import oracle
from .mesh import (MeshFormatError, MeshValidationError, Trajectory, load_mesh,
                   load_segmentation, load_trajectory, save_mesh, save_trajectory,
                   segmentation_to_dict, write_json)
from .modal import EigenSolverError, ModalFeatures, compute_modal_features

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 0, 1, 2, 3
log = logging.getLogger("m4gn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# defaults per subcommand; flags are declared with default=None so that
# explicitly given values can be told apart from unset ones
DEFAULTS = {
    "gen": {"case": "diffusion", "n": 16, "length_cells": 20, "T": 50, "count": 1},
    "modal": {"mesh": None, "modes": 8, "physics": "auto"},
    "segment": {"mesh": None, "modal": None, "k": 6, "variant": "mdod_e", "tau": 1.0,
                "method": "slic", "delta": 0, "modes": 8},
    "train": {"data": None, "segmentation": None, "steps": 2000, "lr": 1e-3, "lr_final": 1e-6,
              "batch_size": 1, "d": 32, "L": 3, "L_S": 2, "heads": 4, "pe_steps": 8,
              "noise": 0.0, "use_node_pe": True, "use_segment_pe": True, "use_overlap": False,
              "val_count": 0},
    "rollout": {"checkpoint": None, "case": None, "segmentation": None, "T": None},
    "metrics": {"case": None, "pred": None, "segmentation": None, "oracle": False, "oracle_cases": 1},
    "report": {"case": None, "segmentation": None, "metrics": None},
}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    text = p.read_text()
    try:
        doc = tomllib.loads(text) if p.suffix.lower() == ".toml" else json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise MeshFormatError(f"{path}: cannot parse config ({exc})") from exc
    if not isinstance(doc, dict):
        raise MeshFormatError(f"{path}: config must be a table/object")
    return doc


def resolve(cmd: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags into one flat dict."""
    cfg = dict(DEFAULTS[cmd])
    doc = _load_config(args.config)
    section = doc.get(cmd, {})
    if not isinstance(section, dict):
        raise MeshFormatError(f"config section [{cmd}] must be a table")
    for key, value in doc.items():
        if key in cfg or key == "seed":
            cfg[key] = value
    unknown = set(section) - set(cfg) - {"seed"}
    if unknown:
        raise MeshValidationError(f"unknown keys in config section [{cmd}]: {sorted(unknown)}")
    cfg.update(section)
    cfg.setdefault("seed", 0)
    for key, value in vars(args).items():
        if key in ("command", "config", "out", "func", "verbose") or value is None:
            continue
        cfg[key] = value
    cfg["seed"] = int(cfg.get("seed", 0))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _case_dirs(path) -> list[Path]:
    p = Path(path)
    if (p / "mesh.json").exists():
        return [p]
    dirs = sorted(d for d in p.glob("case_*") if d.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no case directories (case_*/mesh.json) under {p}")
    return dirs


def _load_case(d: Path) -> tuple[dict, Trajectory]:
    mesh = load_mesh(d / "mesh.json")
    info = json.loads((d / "case.json").read_text())
    return info, load_trajectory(d / "trajectory.json", mesh)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: dict, out: Path) -> None:
    from .testbed import gen_beam_case, gen_diffusion_case

    for i in range(int(cfg["count"])):
        seed = cfg["seed"] + i
        if cfg["case"] == "diffusion":
            case = gen_diffusion_case(int(cfg["n"]), seed, int(cfg["T"]))
        elif cfg["case"] == "beam":
            case = gen_beam_case(int(cfg["length_cells"]), seed, int(cfg["T"]))
        else:
            raise MeshValidationError(f"unknown case {cfg['case']!r}; expected diffusion or beam")
        d = out / f"case_{i:03d}"
        d.mkdir(exist_ok=True)
        save_mesh(case.mesh, d / "mesh.json")
        save_trajectory(case.trajectory, d / "trajectory.json")
        write_json(d / "case.json", {"case": cfg["case"], "regime": case.regime, "seed": seed,
                                     "T": case.T, "params": case.params, "config": cfg})


def cmd_modal(cfg: dict, out: Path) -> None:
    _require(cfg, "mesh")
    g = load_mesh(_mesh_path(cfg["mesh"]))
    res, feats = compute_modal_features(g, int(cfg["modes"]), cfg["physics"])
    write_json(out / "modal.json", {"eigenvalues": res.eigenvalues.tolist(),
                                    "residuals": res.residuals.tolist(),
                                    "f_md": feats.f_md.tolist(), "d_obs": feats.d_obs.tolist(),
                                    "diameter": feats.diameter, "config": cfg})


def _mesh_path(p) -> Path:
    p = Path(p)
    return p / "mesh.json" if p.is_dir() else p


def _modal_from_file(path) -> ModalFeatures:
    doc = json.loads(Path(path).read_text())
    try:
        return ModalFeatures(np.asarray(doc["f_md"], dtype=float), np.asarray(doc["d_obs"], dtype=float),
                             np.asarray(doc["eigenvalues"], dtype=float), float(doc["diameter"]))
    except KeyError as exc:
        raise MeshFormatError(f"{path}: missing field {exc}") from exc


def cmd_segment(cfg: dict, out: Path) -> None:
    from .partition import multilevel_partition
    from .slic import default_config, hybrid_segment, random_balanced_segmentation

    _require(cfg, "mesh")
    g = load_mesh(_mesh_path(cfg["mesh"]))
    K = int(cfg["k"])
    method = cfg["method"]
    run: dict = {}
    if method == "slic":
        if cfg.get("modal"):
            feats = _modal_from_file(cfg["modal"])
            if len(feats.d_obs) != g.num_nodes:
                raise MeshValidationError("modal features do not match the mesh")
        else:
            _, feats = compute_modal_features(g, int(cfg["modes"]))
        scfg = default_config(g, K, cfg["variant"], float(cfg["tau"]))
        a = hybrid_segment(g, feats, scfg, K)
        run = {"S": scfg.S, **{k: v for k, v in a.meta.items()}}
    elif method == "multilevel":
        a = multilevel_partition(g, K)
        run = {"edge_cut": a.meta["edge_cut"]}
    elif method == "random":
        a = random_balanced_segmentation(g.num_nodes, K, cfg["seed"])
    else:
        raise MeshValidationError(f"unknown method {method!r}; expected slic, multilevel or random")
    doc = segmentation_to_dict(a)
    doc["delta"] = int(cfg["delta"])
    doc["log"] = run
    doc["config"] = cfg
    write_json(out / "segmentation.json", doc)


def _model_config(cfg: dict, regime: str, dim: int, out_dim: int, world_radius):
    from .model import ModelConfig

    return ModelConfig(d=int(cfg["d"]), L=int(cfg["L"]), L_S=int(cfg["L_S"]), heads=int(cfg["heads"]),
                       pe_steps=int(cfg["pe_steps"]), noise=float(cfg["noise"]),
                       use_node_pe=bool(cfg["use_node_pe"]), use_segment_pe=bool(cfg["use_segment_pe"]),
                       use_overlap=bool(cfg["use_overlap"]), regime=regime, dim=dim, out_dim=out_dim,
                       world_radius=world_radius, seed=cfg["seed"])


def cmd_train(cfg: dict, out: Path) -> None:
    from .model import M4GN
    from .train import TrainConfig, make_episode, one_step_rmse, save_checkpoint, train

    _require(cfg, "data", "segmentation")
    cases = [_load_case(d) for d in _case_dirs(cfg["data"])]
    info0, traj0 = cases[0]
    seg = load_segmentation(cfg["segmentation"])
    regime = info0["regime"]
    out_dim = traj0.features.shape[2] if regime == "eulerian" else traj0.mesh.dim
    mcfg = _model_config(cfg, regime, traj0.mesh.dim, out_dim, info0["params"].get("world_radius"))
    if seg.delta:
        mcfg.use_overlap, mcfg.overlap = True, seg.delta
    eps = [make_episode(t, seg, mcfg) for _, t in cases]
    nval = int(cfg["val_count"])
    if nval >= len(eps):
        raise MeshValidationError("val_count leaves no training cases")
    trn, val = eps[: len(eps) - nval], eps[len(eps) - nval:]
    model = M4GN(mcfg)
    tcfg = TrainConfig(steps=int(cfg["steps"]), lr=float(cfg["lr"]), lr_final=float(cfg["lr_final"]),
                       batch_size=int(cfg["batch_size"]), seed=cfg["seed"], log_every=0)
    hist = train(model, trn, tcfg)
    summary = {"final_loss": hist["loss"][-1] if hist["loss"] else None}
    if val:
        summary["val_rmse_1"] = one_step_rmse(model, val)
    save_checkpoint(model, out / "checkpoint", extra={"config": cfg})
    write_json(out / "history.json", {"loss": hist["loss"], "lr": hist["lr"], "summary": summary,
                                      "config": cfg})


def cmd_rollout(cfg: dict, out: Path) -> None:
    from .train import load_checkpoint, make_episode, rollout

    _require(cfg, "checkpoint", "case", "segmentation")
    model, _ = load_checkpoint(cfg["checkpoint"])
    d = _case_dirs(cfg["case"])[0]
    _, traj = _load_case(d)
    seg = load_segmentation(cfg["segmentation"])
    ep = make_episode(traj, seg, model.cfg)
    T = ep.T if cfg["T"] is None else int(cfg["T"])
    pred = rollout(model, ep, T)
    if model.cfg.regime == "eulerian":
        positions = traj.positions[: T + 1]
        feats = pred
    else:
        positions = pred
        feats = np.zeros_like(pred)
        feats[1:] = pred[1:] - pred[:-1]
    save_trajectory(Trajectory(traj.mesh, positions, feats, traj.times[: T + 1]), out / "rollout.json")
    truth = ep.states(model.cfg.regime)[: T + 1]
    summary = {"T": T, "regime": model.cfg.regime,
               "rmse_1": M.rollout_rmse(pred[1:], truth[1:], 1) if T else 0.0,
               "rmse_all": M.rollout_rmse(pred[1:], truth[1:]) if T else 0.0,
               "persistence_rmse_all": M.rollout_rmse(np.broadcast_to(truth[0], truth[1:].shape), truth[1:]) if T else 0.0,
               "config": cfg}
    write_json(out / "rollout_summary.json", summary)


def _oracle(cfg: dict, out: Path) -> int:
    rng = np.random.default_rng(cfg["seed"])
    results, ok = [], True
    for _ in range(int(cfg["oracle_cases"])):
        mesh, seg, pred, true = oracle.random_case(rng, max_nodes=10)
        cmp = oracle.compare(mesh, seg, pred, true, pred, true)
        results.append({k: {"fast": v[0], "naive": v[1], "match": v[2]} for k, v in cmp.items()})
        ok &= all(v[2] for v in cmp.values())
    write_json(out / "oracle.json", {"match": ok, "cases": results, "config": cfg})
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_metrics(cfg: dict, out: Path) -> int:
    if cfg["oracle"]:
        return _oracle(cfg, out)
    _require(cfg, "case", "pred")
    d = _case_dirs(cfg["case"])[0]
    info, truth = _load_case(d)
    pred = load_trajectory(cfg["pred"], truth.mesh)
    T = len(pred) - 1
    seg = load_segmentation(cfg["segmentation"], truth.mesh) if cfg.get("segmentation") else None
    if info["regime"] == "eulerian":
        rep = M.evaluate(pred.positions, truth.positions[: T + 1], truth.mesh, seg,
                         pred.features, truth.features[: T + 1])
    else:
        rep = M.evaluate(pred.positions, truth.positions[: T + 1], truth.mesh, seg)
    doc = rep.to_dict()
    doc["config"] = cfg
    write_json(out / "metrics.json", doc)
    return EXIT_OK


def cmd_report(cfg: dict, out: Path) -> None:
    _require(cfg, "case", "segmentation")
    d = _case_dirs(cfg["case"])[0]
    mesh = load_mesh(d / "mesh.json")
    seg = load_segmentation(cfg["segmentation"], mesh)
    cond, flagged = M.conductance(mesh, seg)
    sizes = seg.sizes()
    report = json.loads(Path(cfg["metrics"]).read_text()) if cfg.get("metrics") else {}
    report.pop("config", None)
    seg_summary = {"K": seg.K, "sizes": sizes.tolist(), "conductance": cond.tolist(),
                   "conductance_flagged": flagged, "edge_cut_ratio": M.edge_cut_ratio(mesh, seg),
                   "silhouette": M.silhouette(mesh, seg) if seg.K > 1 else 0.0}
    write_json(out / "report.json", {"metrics": report, "segmentation": seg_summary, "config": cfg})
    with open(out / "segments.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "size", "conductance", "centroid_x", "centroid_y"])
        for k in range(seg.K):
            c = mesh.positions[seg.node_sets[k]].mean(axis=0)
            w.writerow([k, int(sizes[k]), repr(float(cond[k])), repr(float(c[0])), repr(float(c[1]))])


COMMANDS = {"gen": cmd_gen, "modal": cmd_modal, "segment": cmd_segment, "train": cmd_train,
            "rollout": cmd_rollout, "metrics": cmd_metrics, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="m4gn", description="Mesh segmentation and two-level graph surrogate pipeline.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON or TOML config file")
        s.add_argument("--seed", type=int, help="RNG seed (default 0)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    s = add("gen", "generate testbed cases")
    s.add_argument("--case", choices=["diffusion", "beam"])
    s.add_argument("--n", type=int, help="diffusion mesh resolution")
    s.add_argument("--length-cells", dest="length_cells", type=int, help="beam length in cells")
    s.add_argument("--T", type=int, help="frames per trajectory")
    s.add_argument("--count", type=int, help="number of trajectories (seeds seed..seed+count-1)")

    s = add("modal", "solve the generalized eigenproblem and write modal features")
    s.add_argument("--mesh", help="mesh.json or case directory")
    s.add_argument("--modes", type=int)
    s.add_argument("--physics", choices=["auto", "laplacian", "elasticity"])

    s = add("segment", "segment a mesh")
    s.add_argument("--mesh", help="mesh.json or case directory")
    s.add_argument("--modal", help="modal.json from the modal subcommand")
    s.add_argument("--k", type=int, help="number of segments")
    s.add_argument("--variant", choices=["od", "od_l", "od_e", "md", "mdod_l", "mdod_e"])
    s.add_argument("--tau", type=float, help="spatial compactness weight")
    s.add_argument("--method", choices=["slic", "multilevel", "random"])
    s.add_argument("--delta", type=int, help="overlap rings recorded with the segmentation")
    s.add_argument("--modes", type=int)

    s = add("train", "train the surrogate")
    s.add_argument("--data", help="directory of case_* folders")
    s.add_argument("--segmentation")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-final", dest="lr_final", type=float)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--L", type=int)
    s.add_argument("--L-S", dest="L_S", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--val-count", dest="val_count", type=int)

    s = add("rollout", "autoregressive rollout from a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--case")
    s.add_argument("--segmentation")
    s.add_argument("--T", type=int)

    s = add("metrics", "evaluate a rollout, or check fast metrics against brute force")
    s.add_argument("--case")
    s.add_argument("--pred", help="rollout.json")
    s.add_argument("--segmentation")
    s.add_argument("--oracle", action="store_true", default=None)
    s.add_argument("--oracle-cases", dest="oracle_cases", type=int)

    s = add("report", "join a segmentation with metrics; per-segment CSV")
    s.add_argument("--case")
    s.add_argument("--segmentation")
    s.add_argument("--metrics")
    return p


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        out = _out(args)
        status = COMMANDS[args.command](cfg, out) or EXIT_OK
        write_json(out / "run.json", {"command": args.command, "config": cfg, "status": status})
        return status
    except UsageError as exc:
        print(f"m4gn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"m4gn {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MeshFormatError, MeshValidationError, ValueError, EigenSolverError, KeyError) as exc:
        print(f"m4gn {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
