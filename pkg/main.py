import os
import sys
import json
import asyncio
import logging
import argparse
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from core import config as settings
from core.config import build_chain_config, load_run_config
from core.data import infer_schema, load_dataset, schema_from_mapping, standardize, write_dataset
from core.diagnostics import compute_diagnostics, variable_importance
from core.errors import DataError, SaceError
from core.estimands import LikelySet, csace_draws, membership_posterior, summarize_fit
from core.models import PosteriorDraws, TrialDataset
from core.sampler import cross_validate, run_chains_async
from core.state import CheckpointStore, load_draws, read_json, save_draws, write_csv
from core.subgroup import run_subgroups
from core.synth import generate, get_preset, oracle_sace, write_truth
from core.utils import derive_chain_seed, metadata_header

log = logging.getLogger("sacebart")

COMMANDS = ("simulate", "cv", "fit", "summarize", "subgroups", "diagnose")


# =========================
# LOGGING
# =========================

def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        force=True,
    )


# =========================
# Helpers
# =========================

def _write_json(path: str, data: Dict[str, Any]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True, default=_json_default)
    os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"type non serialisable: {type(obj).__name__}")


def _header(cfg: Dict[str, Any], seeds, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return metadata_header(_echo(cfg), seeds, cfg["_suppress_timestamps"], extra)


def _echo(cfg: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def _load_data(cfg: Dict[str, Any], standardized: bool) -> TrialDataset:
    path = cfg["data"].get("path")
    if not path:
        raise DataError("data.path manquant dans la configuration")
    covariates = cfg["data"].get("covariates") or {}
    schema = schema_from_mapping(covariates) if covariates else infer_schema(path)
    dataset = load_dataset(path, schema)
    if standardized and cfg["data"].get("standardize", True) and dataset.n_covariates:
        dataset, _ = standardize(dataset)
    return dataset


def _draws_dir(cfg: Dict[str, Any]) -> str:
    return os.path.join(cfg["out"], "draws")


def _load_chains(cfg: Dict[str, Any], dataset: TrialDataset) -> List[PosteriorDraws]:
    chains = load_draws(_draws_dir(cfg))
    if chains[0].n_units != dataset.n_units:
        raise DataError(f"tirages sur {chains[0].n_units} unites, jeu de donnees de "
                        f"{dataset.n_units} unites")
    return chains


# =========================
# Commands
# =========================

def cmd_simulate(cfg: Dict[str, Any]) -> int:
    sim = cfg["simulate"]
    spec = get_preset(sim["dgp"], n_units=int(sim["n_units"]), seed=int(sim["seed"]))
    dataset, truth = generate(spec)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    write_dataset(dataset, os.path.join(out, "data.csv"))
    extra = {"metadata": _header(cfg, [spec.seed], {"dgp": spec.name})}
    if sim.get("oracle_mc"):
        mean, se = oracle_sace(spec, n_mc=int(sim["oracle_mc"]))
        extra["oracle_sace"] = {"mean": mean, "se": se, "n_mc": int(sim["oracle_mc"])}
    write_truth(truth, os.path.join(out, "truth.json"), extra)
    log.info("Simulation %s ecrite dans %s.", spec.name, out)
    return 0


def cmd_cv(cfg: Dict[str, Any]) -> int:
    dataset = _load_data(cfg, standardized=True)
    cv = cfg["cv"]
    chain = build_chain_config(cfg)
    w, J, table = cross_validate(
        dataset, cv["w_grid"], cv["J_grid"], folds=int(cv["folds"]), base=chain.bart,
        seed=chain.seed, n_sweeps=int(cv["n_sweeps"]), burn_in=int(cv["burn_in"]),
        a0=chain.a0, b0=chain.b0)
    out = os.path.join(cfg["out"], "cv")
    write_csv(pd.DataFrame([{k: r[k] for k in ("w", "J", "rmse")} for r in table]),
               os.path.join(out, "cv_table.csv"))
    _write_json(os.path.join(out, "cv.json"),
                {"metadata": _header(cfg, [chain.seed]), "selected": {"w": w, "J": J},
                 "table": table})
    log.info("Validation croisee: w=%g, J=%d retenus.", w, J)
    return 0


def cmd_fit(cfg: Dict[str, Any]) -> int:
    dataset = _load_data(cfg, standardized=True)
    chain = build_chain_config(cfg)
    n_chains = int(cfg["chains"])
    seeds = [derive_chain_seed(chain.seed, c) for c in range(n_chains)]
    ckpt_root = os.path.join(cfg["out"], "checkpoints")
    stores = [CheckpointStore(os.path.join(ckpt_root, f"chain_{c}")) for c in range(n_chains)]
    every = int(cfg["chain"].get("checkpoint_every") or 0) or None
    chains = asyncio.run(run_chains_async(
        dataset, chain, n_chains, threads=int(cfg["threads"]), model=cfg["model"],
        checkpoints=stores, checkpoint_every=every, resume=cfg["_resume"]))
    meta = _header(cfg, seeds, {
        "model": cfg["model"],
        "retained_per_chain": chain.n_retained,
        "covariate_spec": dataset.covariate_spec.to_dict(),
        "seed_rule": "seed_base + chain_index",
    })
    save_draws(_draws_dir(cfg), chains, meta)
    diag = compute_diagnostics(chains)
    _write_json(os.path.join(_draws_dir(cfg), "diagnostics.json"),
                {"metadata": _header(cfg, seeds), "diagnostics": diag})
    if cfg["model"] == "bart":
        write_csv(variable_importance(chains, dataset.covariate_spec.names),
                  os.path.join(_draws_dir(cfg), "variable_importance.csv"))
    for store in stores:
        store.clear()
    return 0


def cmd_summarize(cfg: Dict[str, Any]) -> int:
    dataset = _load_data(cfg, standardized=False)
    draws = PosteriorDraws.concatenate(_load_chains(cfg, dataset))
    s = cfg["summary"]
    result = summarize_fit(draws, dataset, p=s["p"], p_grid_bounds=s["p_grid"],
                           thresholds=s["thresholds"], d_mode=s["d_mode"],
                           grid_points=int(s["grid_points"]), band_draws=int(s["band_draws"]))
    out = os.path.join(cfg["out"], "summary")
    seeds = [c.get("seed") for c in draws.metadata.get("chains", [])]
    likely: LikelySet = result["likely"]
    balance = result["balance"]
    _write_json(os.path.join(out, "summary.json"),
                {"metadata": _header(cfg, seeds, {"model": draws.model}),
                 "summary": result["summary"], "balance_excluded": balance.attrs["excluded"]})
    write_csv(result["per_unit"], os.path.join(out, "per_unit.csv"))
    write_csv(result["grids"], os.path.join(out, "csace_grid.csv"))
    write_csv(balance, os.path.join(out, "balance.csv"))
    write_csv(pd.DataFrame({"draw": np.arange(result["Q_draws"].size), "Q": result["Q_draws"]}),
               os.path.join(out, "Q_draws.csv"))
    _write_json(os.path.join(out, "likely_set.json"),
                {"metadata": _header(cfg, seeds), "p": likely.p, "n11": likely.n11,
                 "indices": likely.indices.tolist(), "ids": dataset.ids[likely.indices].tolist()})
    log.info("SACE = %.4f [%.4f, %.4f], p=%.2f, N11=%d.", result["summary"]["sace"]["mean"],
             result["summary"]["sace"]["lower"], result["summary"]["sace"]["upper"],
             likely.p, likely.n11)
    return 0


def cmd_subgroups(cfg: Dict[str, Any]) -> int:
    dataset = _load_data(cfg, standardized=True)
    draws = PosteriorDraws.concatenate(_load_chains(cfg, dataset))
    manifest = read_json(os.path.join(cfg["out"], "summary", "likely_set.json"))
    likely = LikelySet(indices=np.asarray(manifest["indices"], dtype=int), p=float(manifest["p"]),
                       n_units=dataset.n_units)
    if likely.n11 == 0:
        raise DataError("ensemble des always-survivors probables vide")
    sg = cfg["subgroups"]
    report = run_subgroups(
        csace_draws(draws), likely, dataset, membership=membership_posterior(draws),
        min_leaf=int(sg["min_leaf"]), max_depth=int(sg["max_depth"]),
        min_improvement=float(sg["min_improvement"]), stop_gain=float(sg["stop_gain"]))
    out = os.path.join(cfg["out"], "subgroups")
    seeds = [c.get("seed") for c in draws.metadata.get("chains", [])]
    _write_json(os.path.join(out, "report.json"),
                {"metadata": _header(cfg, seeds), "report": report.to_dict()})
    leaf_draws = pd.DataFrame(report.leaf_draws,
                              columns=[f"leaf_{e['leaf']}" for e in report.leaf_posteriors])
    leaf_draws.insert(0, "draw", np.arange(leaf_draws.shape[0]))
    write_csv(leaf_draws, os.path.join(out, "leaf_draws.csv"))
    log.info("Sous-groupes: %d feuille(s), covariables %s.", report.tree.n_leaves, report.selected)
    return 0


def cmd_diagnose(cfg: Dict[str, Any]) -> int:
    chains = load_draws(_draws_dir(cfg))
    diag = compute_diagnostics(chains)
    seeds = [c.metadata.get("seed") for c in chains]
    _write_json(os.path.join(_draws_dir(cfg), "diagnostics.json"),
                {"metadata": _header(cfg, seeds), "diagnostics": diag})
    for name, s in diag["series"].items():
        log.info("%s: ESS=%s, R-hat=%s", name, s["ess_bulk"], s["rhat"])
    return 0


HANDLERS = {
    "simulate": cmd_simulate,
    "cv": cmd_cv,
    "fit": cmd_fit,
    "summarize": cmd_summarize,
    "subgroups": cmd_subgroups,
    "diagnose": cmd_diagnose,
}


# =========================
# CLI
# =========================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sacebart", description="SACE/CSACE par melange BART.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="fichier de configuration JSON")
    parser.add_argument("--seed", type=int, help="graine de base (surcharge la configuration)")
    parser.add_argument("--threads", type=int, help="nombre de threads pour les chaines")
    parser.add_argument("--out", help="repertoire de sortie")
    parser.add_argument("--dgp", help="simulate: nom du DGP")
    parser.add_argument("--n-units", type=int, help="simulate: nombre d'unites")
    parser.add_argument("--resume", action="store_true", help="fit: reprendre depuis les checkpoints")
    parser.add_argument("--no-timestamps", action="store_true",
                        help="ne pas ecrire d'horodatage dans les metadonnees")
    parser.add_argument("--verbose", action="store_true")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    if args.seed is not None:
        out["chain"] = {"seed": args.seed}
        out["simulate"] = {"seed": args.seed}
    if args.threads is not None:
        out["threads"] = args.threads
    if args.out:
        out["out"] = args.out
    if args.dgp:
        out.setdefault("simulate", {})["dgp"] = args.dgp
    if args.n_units is not None:
        out.setdefault("simulate", {})["n_units"] = args.n_units
    return out


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        cfg = load_run_config(args.config, _overrides(args))
        cfg = _echo(cfg)
        cfg["_resume"] = args.resume
        cfg["_suppress_timestamps"] = args.no_timestamps or settings.SUPPRESS_TIMESTAMPS
        handler = HANDLERS[args.command]
        log.info("Commande %s (sortie: %s).", args.command, cfg["out"])
        return handler(cfg)
    except SaceError as e:
        log.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
