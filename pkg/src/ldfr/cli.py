"""Command-line front end.

Subcommands: ``simulate``, ``fit``, ``predict``, ``fpca`` and ``report``. Run
settings come from a ``key = value`` config file (``--config``) and from
``key=value`` arguments after the subcommand; the flags ``--seed``,
``--replicates``, ``--out`` and ``--threads`` override both.

Exit codes
----------
0 success; 1 other model error; 2 usage or configuration error; 3 input
schema error; 4 convergence failure; 5 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import warnings
from typing import Dict, List, Optional

import numpy as np

from ldfr.errors import (
    ConfigurationError,
    ConvergenceError,
    DataError,
    DegenerateCovarianceError,
    DimensionError,
    LdfrError,
    NumericalRankError,
    SchemaError,
    SpecError,
)

logger = logging.getLogger("ldfr")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_CONVERGENCE = 4
EXIT_IO = 5

COMMANDS = ("simulate", "fit", "predict", "fpca", "report")

_MODEL_KEYS = {"pve", "pve_scores", "mean_knots", "cov_knots", "score_knots", "link", "degree",
               "n_knots", "random_effects", "smoothing"}
_RUN_KEYS = {"seed", "replicates", "threads", "out"}
ALLOWED_KEYS = {
    "simulate": _RUN_KEYS | _MODEL_KEYS | {"n_subjects", "design", "noise", "response", "effect",
                                          "delta", "tasks", "n_s", "n_t"},
    "fit": _RUN_KEYS | _MODEL_KEYS | {"predictors", "responses", "covariates", "factors",
                                     "bundle"},
    "predict": _RUN_KEYS | {"bundle", "subjects", "predictors", "t_eval", "level"},
    "fpca": _RUN_KEYS | {"predictors", "pve", "pve_scores", "mean_knots", "cov_knots",
                        "score_knots"},
    "report": _RUN_KEYS | {"bundle", "results"},
}
_PATH_KEYS = {"predictors", "responses", "bundle", "results"}


class RunConfig:
    """Validated settings of one CLI invocation."""

    def __init__(self, command: str, values: Dict[str, str]):
        self.command = command
        unknown = sorted(set(values) - ALLOWED_KEYS[command])
        if unknown:
            raise ConfigurationError(f"unknown keys for '{command}': {', '.join(unknown)}")
        self.values = dict(values)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def has(self, key) -> bool:
        return key in self.values

    def text_list(self, key, default=()) -> List[str]:
        if key not in self.values:
            return list(default)
        return [v.strip() for v in self.values[key].split(",") if v.strip()]

    def number(self, key, default=None, kind=float):
        if key not in self.values:
            return default
        try:
            return kind(self.values[key])
        except ValueError:
            raise ConfigurationError(f"{key} = {self.values[key]!r} is not a valid "
                                     f"{kind.__name__}") from None

    def numbers(self, key, default=None, kind=float) -> Optional[List]:
        if key not in self.values:
            return default
        try:
            return [kind(v) for v in self.text_list(key)]
        except ValueError:
            raise ConfigurationError(f"{key} = {self.values[key]!r} is not a list of "
                                     f"{kind.__name__}") from None

    @property
    def seed(self) -> int:
        seed = self.number("seed", 0, int)
        if not 0 <= seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        return seed

    @property
    def out(self) -> str:
        return self.get("out", ".")

    def as_dict(self) -> Dict[str, str]:
        return {"command": self.command, **self.values}


def read_config_file(path) -> Dict[str, str]:
    """``key = value`` lines; ``#`` and ``;`` start comments, no section header needed."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config file {path}: {exc}") from exc
    if parser.sections() != ["run"]:
        raise ConfigurationError(f"{path}: sections are not supported")
    return dict(parser["run"])


def _overrides(items) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(args) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    base = os.path.dirname(os.path.abspath(args.config)) if args.config else os.getcwd()
    # relative paths in a config file are relative to that file
    for key in _PATH_KEYS & set(values):
        if not os.path.isabs(values[key]) and not (key == "bundle" and args.command == "fit"):
            values[key] = os.path.join(base, values[key])
    values.update(_overrides(args.settings))
    for flag in ("seed", "replicates", "threads", "out"):
        val = getattr(args, flag)
        if val is not None:
            values[flag] = str(val)
    return RunConfig(args.command, values)


def _check_inputs(cfg: RunConfig, keys):
    for key in keys:
        path = cfg.get(key)
        if path is not None and not os.path.isfile(path):
            raise FileNotFoundError(f"{key} file not found: {path}")


def _out_path(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def _provenance(cfg: RunConfig) -> Dict:
    from ldfr import __version__

    return {"config": cfg.as_dict(), "seed": cfg.seed, "version": __version__}


def model_config(cfg: RunConfig, binary: Optional[bool] = None):
    """``LdfrConfig`` from the model keys."""
    from ldfr.pipeline import LdfrConfig
    from ldfr.regression import LdfrModelSpec

    link = cfg.get("link", "logit" if binary else "identity")
    try:
        spec = LdfrModelSpec(link=link, degree=cfg.number("degree", 1, int),
                             n_knots=cfg.number("n_knots", 15, int),
                             random_effects=cfg.get("random_effects", "intercept"))
    except SpecError as exc:
        raise ConfigurationError(str(exc)) from exc
    mean_knots = cfg.numbers("mean_knots", [35, 35], int)
    if len(mean_knots) == 1:
        mean_knots = mean_knots * 2
    smoothing = cfg.numbers("smoothing")
    if smoothing is not None and len(smoothing) != 2:
        raise ConfigurationError("smoothing takes two values: lambda0, lambda")
    pve = cfg.number("pve", 0.95)
    pve_scores = cfg.number("pve_scores", 0.95)
    for name, val in (("pve", pve), ("pve_scores", pve_scores)):
        if not 0 < val <= 1:
            raise ConfigurationError(f"{name} must be in (0, 1]")
    return LdfrConfig(pve=pve, pve_scores=pve_scores, mean_knots=tuple(mean_knots),
                      cov_knots=cfg.number("cov_knots", 35, int),
                      score_knots=cfg.number("score_knots", 10, int), model=spec,
                      fixed_smoothing=None if smoothing is None else tuple(smoothing))


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig) -> int:
    """Monte Carlo replicates for every delta in ``delta`` (comma list)."""
    from ldfr.simulation import (
        ScenarioConfig,
        format_summary,
        run_replicates,
        scenario_tag,
        write_results_csv,
    )

    deltas = cfg.numbers("delta", [0.0])
    tasks = tuple(cfg.text_list("tasks", ["split"]))
    n_rep = cfg.number("replicates", 10, int)
    threads = cfg.number("threads", os.cpu_count() or 1, int)
    if n_rep < 1 or threads < 1:
        raise ConfigurationError("replicates and threads must be positive")
    scenarios = [ScenarioConfig(n_subjects=cfg.number("n_subjects", 100, int),
                                design=cfg.get("design", "sparse"), noise=cfg.get("noise", "B1"),
                                response=cfg.get("response", "D1ii"),
                                effect=cfg.get("effect", "E1"), delta=d, seed=cfg.seed,
                                n_s=cfg.number("n_s", 101, int), n_t=cfg.number("n_t", 41, int))
                 for d in deltas]
    mcfg = model_config(cfg, scenarios[0].binary)
    results_path = _out_path(cfg, "results.csv")
    blocks = []
    for n, sc in enumerate(scenarios):
        # one master seed per scenario block, derived from the run seed
        block_seed = int(np.random.SeedSequence(cfg.seed).spawn(n + 1)[n].generate_state(1)[0])
        results = run_replicates(sc, n_rep, seed=block_seed, tasks=tasks, threads=threads,
                                 model_config=mcfg)
        header = {**_provenance(cfg), "scenario": scenario_tag(sc), "block_seed": block_seed}
        write_results_csv(results, results_path, header=header, append=True)
        blocks.append(format_summary(results, title=f"[{scenario_tag(sc)}]"))
    text = "\n\n".join(blocks)
    with open(_out_path(cfg, "summary.txt"), "w") as fh:
        fh.write(f"# {json.dumps(_provenance(cfg), sort_keys=True)}\n{text}\n")
    print(text)
    return EXIT_OK


def _load_dataset(cfg: RunConfig):
    from ldfr.ingest import read_dataset

    ds, report, info = read_dataset(cfg.get("predictors"), cfg.get("responses"),
                                    covariates=cfg.text_list("covariates") if cfg.has(
                                        "covariates") else None,
                                    factors=cfg.text_list("factors"))
    if report.imputed:
        logger.warning("interpolated %d missing grid points on %d curves",
                       report.n_imputed, len(report.imputed))
    return ds, info


def cmd_fit(cfg: RunConfig) -> int:
    from ldfr.bundle import model_summary, save_model
    from ldfr.pipeline import LDFR

    for key in ("predictors", "responses"):
        if not cfg.has(key):
            raise ConfigurationError(f"'fit' needs {key} = <csv>")
    _check_inputs(cfg, ("predictors", "responses"))
    ds, info = _load_dataset(cfg)
    mcfg = model_config(cfg)
    if info["covariates"]:
        kinds = tuple("factor" if c in cfg.text_list("factors") else "linear"
                      for c in info["covariates"])
        mcfg.model.covariate_kinds = kinds
    if mcfg.model.random_effects == "group-intercept-slope" and ds.group is None:
        raise SchemaError("group-intercept-slope needs a group_id column in the predictor file")
    model = LDFR(mcfg).fit(ds)
    path = _out_path(cfg, cfg.get("bundle", "fit.ldfr"))
    save_model(model, path, {**_provenance(cfg), "ingest": info})
    print(json.dumps(model_summary(model), indent=2))
    return EXIT_OK


def _t_eval(cfg: RunConfig, model) -> np.ndarray:
    if cfg.has("t_eval"):
        vals = cfg.text_list("t_eval")
        if len(vals) == 1 and ":" in vals[0]:
            lo, hi, n = vals[0].split(":")
            return np.linspace(float(lo), float(hi), int(n))
        return np.array([float(v) for v in vals])
    lo, hi = model.fit_.basis.domain
    return np.linspace(lo, hi, 41)


def cmd_predict(cfg: RunConfig) -> int:
    import csv

    from ldfr.bundle import load_model
    from ldfr.ingest import read_dataset

    if not cfg.has("bundle"):
        raise ConfigurationError("'predict' needs bundle = <file>")
    _check_inputs(cfg, ("bundle", "predictors"))
    model = load_model(cfg.get("bundle"))
    t = _t_eval(cfg, model)
    level = cfg.number("level", 0.95)
    gaussian = model.fit_.spec.link == "identity"
    preds = []
    subjects = cfg.text_list("subjects")
    if subjects == ["all"]:
        subjects = [str(x) for x in model.subject_labels]
    for label in subjects:
        preds.append((label, model.predict_existing(label, t)))
    if cfg.has("predictors"):
        new, _, _ = read_dataset(cfg.get("predictors"))
        for i in range(new.n_subjects):
            rows = new.subject_rows(i)
            preds.append((str(new.subject_labels[i]),
                          model.predict_new(new.w[rows], new.t[rows], t)))
    if not preds:
        raise ConfigurationError("nothing to predict: give subjects = ... or predictors = ...")
    path = _out_path(cfg, "predictions.csv")
    with open(path, "w", newline="") as fh:
        fh.write(f"# {json.dumps(_provenance(cfg), sort_keys=True)}\n")
        wr = csv.writer(fh)
        wr.writerow(["subject_id", "kind", "t", "mu", "y_hat", "se", "lower", "upper"])
        for label, p in preds:
            band = model.band(p, level) if gaussian else None
            for n in range(t.size):
                extra = ([band.se[n], band.lower[n], band.upper[n]] if band is not None
                         else ["", "", ""])
                wr.writerow([label, p.kind, t[n], p.mu[n], p.y_hat[n], *extra])
    print(f"wrote {len(preds)} trajectories to {path}")
    return EXIT_OK


def cmd_fpca(cfg: RunConfig) -> int:
    import csv

    from ldfr.ingest import read_dataset
    from ldfr.lfpca import fit_lfpca

    if not cfg.has("predictors"):
        raise ConfigurationError("'fpca' needs predictors = <csv>")
    _check_inputs(cfg, ("predictors",))
    ds, _, _ = read_dataset(cfg.get("predictors"))
    mk = cfg.numbers("mean_knots", [35, 35], int)
    lf = fit_lfpca(ds, pve=cfg.number("pve", 0.95), pve_scores=cfg.number("pve_scores", 0.95),
                   mean_knots=tuple(mk * 2 if len(mk) == 1 else mk),
                   cov_knots=cfg.number("cov_knots", 35, int),
                   score_knots=cfg.number("score_knots", 10, int))
    m = lf.marginal
    with open(_out_path(cfg, "eigenfunctions.csv"), "w", newline="") as fh:
        fh.write(f"# {json.dumps(_provenance(cfg), sort_keys=True)}\n")
        wr = csv.writer(fh)
        wr.writerow(["s"] + [f"phi{k + 1}" for k in range(m.k)])
        for r, s in enumerate(m.grid):
            wr.writerow([s, *m.eigenfunctions[r]])
    with open(_out_path(cfg, "score_functions.csv"), "w", newline="") as fh:
        fh.write(f"# {json.dumps(_provenance(cfg), sort_keys=True)}\n")
        wr = csv.writer(fh)
        wr.writerow(["k", "t"] + [f"psi{l + 1}" for l in range(max(p.n_components
                                                                  for p in lf.processes))])
        for p in lf.processes:
            for n, tt in enumerate(p.grid):
                wr.writerow([p.k + 1, tt, *p.eigenfunctions[n]])
    summary = {**_provenance(cfg), "K": m.k, "eigenvalues": m.eigenvalues.tolist(),
               "sigma2_w": m.sigma2_w,
               "L_k": [p.n_components for p in lf.processes],
               "score_eigenvalues": [p.eigenvalues.tolist() for p in lf.processes],
               "score_noise": [p.sigma2 for p in lf.processes]}
    with open(_out_path(cfg, "fpca.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps({k: summary[k] for k in ("K", "eigenvalues", "L_k")}))
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    from ldfr.bundle import read_bundle
    from ldfr.simulation import format_summary, read_results_csv

    if not (cfg.has("bundle") or cfg.has("results")):
        raise ConfigurationError("'report' needs bundle = <file> or results = <csv>")
    _check_inputs(cfg, ("bundle", "results"))
    if cfg.has("bundle"):
        payload = read_bundle(cfg.get("bundle"))
        print(json.dumps({"summary": payload["summary"],
                          "provenance": payload["provenance"]}, indent=2, default=str))
    if cfg.has("results"):
        rows, _ = read_results_csv(cfg.get("results"))
        by_tag: Dict[str, list] = {}
        for r in rows:
            by_tag.setdefault(r.scenario, []).append(r)
        print("\n\n".join(format_summary(v, title=f"[{k}]") for k, v in by_tag.items()))
    return EXIT_OK


HANDLERS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "fpca": cmd_fpca,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldfr", description="Longitudinal dynamic functional regression.",
        epilog="exit codes: 0 ok, 1 model error, 2 usage/config, 3 schema, 4 convergence, 5 I/O")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"simulate": "run Monte Carlo replicates of a scenario",
             "fit": "fit a model to CSV data and save a bundle",
             "predict": "predict trajectories and bands from a bundle",
             "fpca": "predictor eigenbasis and score processes only",
             "report": "summarize a bundle or a results CSV"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--replicates", type=int, help="number of replicates")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker processes")
        p.add_argument("settings", nargs="*", metavar="key=value",
                       help="settings overriding the config file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # key=value settings may follow the flags
    bad = [x for x in extra if "=" not in x or x.startswith("-")]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.settings = list(args.settings) + extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        cfg = build_config(args)
        return HANDLERS[cfg.command](cfg)
    except ConfigurationError as exc:
        print(f"ldfr: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, DataError, DimensionError) as exc:
        print(f"ldfr: input error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ConvergenceError, NumericalRankError, DegenerateCovarianceError) as exc:
        print(f"ldfr: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"ldfr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LdfrError as exc:
        print(f"ldfr: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
