"""Command-line front end.

Every subcommand reads its inputs from ``--output`` (or ``data.dir`` for raw
subjects), writes its own files there and refreshes ``manifest.txt``.  Exit
codes: 0 success, 1 usage/configuration, 2 data or format problem,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from . import config as cfgmod
from .config import RunConfig
from .data_model import SubjectData, TemporalSplit
from .errors import DataError, EmptySubset, ScnError, UsageError
from .fileio import load_atlas, load_coords, load_matrix, write_atlas, write_coords, write_matrix
from .ica import GroupMaps, IcaOptions, group_ica_baseline
from .l21 import L21Options
from .lasso_ridge import LassoOptions
from .network import SubjectNetwork, cohort_profiles, subject_network
from .reports import parse_index_list, read_tsv, sha256_file, write_kv, write_tsv
from .selection import LagData, PathConfig, Stage1Result, Stage2Result, fit_stage2, run_stage1, significance_test
from .similarity import cluster_features, dominance_summary
from .synth import PlantedSourceSpec, gen_source_cohort, gen_var_subject, make_var_spec

logger = logging.getLogger("scnet")

COMMANDS = ("synth", "stage1", "stage2", "significance", "ica", "group-ica", "similarity", "cluster", "pipeline")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- run context ----------------------------------------------------------------

class Run:
    """Resolved configuration, output layout and manifest bookkeeping."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg["run.output"])
        self.timings: dict[str, float] = {}
        self.outputs: list[Path] = []

    @property
    def data_dir(self) -> Path:
        return Path(self.cfg["data.dir"]) if self.cfg["data.dir"] else self.out / "data"

    def subject_dir(self, name: str) -> Path:
        return self.out / "subjects" / name

    def record(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return path

    def matrix(self, path: Path, X) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_matrix(path, X)
        self.record(path)

    def path_config(self) -> PathConfig:
        c = self.cfg
        n_mu = c["ridge.n_mu"]
        factors = tuple(np.logspace(math.log10(c["ridge.mu_min"]), math.log10(c["ridge.mu_max"]), n_mu).tolist())
        return PathConfig(stage1_n_lambdas=c["stage1.n_lambdas"], stage2_n_lambdas=c["stage2.n_lambdas"],
                          lambda_ratio=c["path.lambda_ratio"], refit=c["stage2.refit"], mu_factors=factors,
                          center=c["preprocess.center"], scale=c["preprocess.scale"],
                          permutation=c["significance.scheme"], threads=c["run.threads"],
                          l21=L21Options(eps=c["l21.eps"], max_iter=c["l21.max_iter"], tol=c["l21.tol"]),
                          lasso=LassoOptions(max_sweeps=c["lasso.max_sweeps"], tol=c["lasso.tol"]))

    def ica_options(self) -> IcaOptions:
        return IcaOptions(max_iter=self.cfg["ica.max_iter"], tol=self.cfg["ica.tol"])

    def split_for(self, T: int) -> TemporalSplit:
        tr = math.floor(self.cfg["split.train_fraction"] * T)
        va = tr + math.floor(self.cfg["split.val_fraction"] * T)
        return TemporalSplit(tr, va)

    # -- subjects

    def subject_names(self) -> list[str]:
        names = list(self.cfg["data.subjects"])
        if names:
            return names
        d = self.data_dir
        if not d.is_dir():
            raise DataError(f"data directory not found: {d}")
        names = sorted(p.stem for p in d.glob("*.fmat") if not p.stem.startswith("truth"))
        if not names:
            raise DataError(f"no subject matrices (*.fmat) in {d}")
        return names

    def load_subject(self, name: str) -> SubjectData:
        d = self.data_dir
        paths = {ext: d / f"{name}.{ext}" for ext in ("fmat", "atls", "ctbl")}
        for ext in ("fmat", "atls"):
            if not paths[ext].is_file():
                raise DataError(f"missing input file: {paths[ext]}")
        X = load_matrix(paths["fmat"])
        atlas = load_atlas(paths["atls"])
        coords = load_coords(paths["ctbl"]) if paths["ctbl"].is_file() else None
        return SubjectData(X, atlas, self.split_for(X.shape[1]), coords, name)

    def standardized(self, subject: SubjectData) -> SubjectData:
        return subject.standardized(center=self.cfg["preprocess.center"], scale=self.cfg["preprocess.scale"])

    def subject_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.cfg["run.seed"], index]).generate_state(1)[0])

    # -- manifest

    def write_manifest(self, command: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        cfg_path = self.out / "config.txt"
        cfg_path.write_text(self.cfg.serialize(), encoding="utf-8")
        items: dict[str, object] = {
            "command": command,
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg["run.seed"],
            "threads": self.cfg["run.threads"],
            "version.scnet": __version__,
            "version.python": platform.python_version(),
            "version.numpy": np.__version__,
            "version.scipy": scipy.__version__,
        }
        for stage, secs in self.timings.items():
            items[f"time.{stage}"] = round(secs, 3)
        for p in sorted(set(self.outputs)):
            rel = p.relative_to(self.out).as_posix() if p.is_relative_to(self.out) else p.as_posix()
            items[f"sha256.{rel}"] = sha256_file(p)
        return write_kv(self.out / "manifest.txt", items)


class _timed:
    def __init__(self, run: Run, stage: str):
        self.run, self.stage = run, stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        logger.info("stage %s started", self.stage)

    def __exit__(self, *exc):
        dt = time.perf_counter() - self.t0
        self.run.timings[self.stage] = self.run.timings.get(self.stage, 0.0) + dt
        logger.info("stage %s finished in %.2f s", self.stage, dt)


# -- synth ----------------------------------------------------------------------

def cmd_synth(run: Run) -> None:
    c = run.cfg
    d = run.data_dir
    d.mkdir(parents=True, exist_ok=True)
    if c["synth.kind"] == "var":
        rows = []
        for s in range(c["synth.n_subjects"]):
            name = f"sub-{s + 1:02d}"
            spec = make_var_spec(V=c["synth.V"], T=c["synth.T"], n_regions=c["synth.n_regions"],
                                 n_drivers=c["synth.n_drivers"], driven_fraction=c["synth.driven_fraction"],
                                 snr=c["synth.snr"], driver_radius=c["synth.driver_radius"],
                                 noise=c["synth.noise"], seed=run.subject_seed(s))
            subj, truth = gen_var_subject(spec, name)
            _write_subject(run, subj)
            rows.append((name, truth.drivers, truth.driven))
        write_tsv(run.record(d / "truth.tsv"), ["subject", "drivers", "driven"], rows)
    else:
        g = c["synth.grid"]
        spec = PlantedSourceSpec(n_subjects=c["synth.n_subjects"], grid=(g, g, g), n_sources=c["synth.n_sources"],
                                 n_hidden=c["synth.n_hidden"], T=c["synth.T"], seed=c["run.seed"])
        cohort = gen_source_cohort(spec)
        for subj in cohort.subjects:
            _write_subject(run, subj)
        gd = run.out / "group_input"
        for subj in cohort.group_input:
            gd.mkdir(parents=True, exist_ok=True)
            run.matrix(gd / f"{subj.name}.fmat", subj.data)
        run.matrix(d / "truth_maps.fmat", cohort.maps)
        write_tsv(run.record(d / "truth.tsv"), ["source", "hidden"],
                  [(k, k in set(cohort.hidden.tolist())) for k in range(cohort.maps.shape[0])])


def _write_subject(run: Run, subj: SubjectData) -> None:
    d = run.data_dir
    run.matrix(d / f"{subj.name}.fmat", subj.data)
    write_atlas(d / f"{subj.name}.atls", subj.atlas)
    run.record(d / f"{subj.name}.atls")
    if subj.coords is not None:
        write_coords(d / f"{subj.name}.ctbl", subj.coords)
        run.record(d / f"{subj.name}.ctbl")


# -- stages 1 and 2 -------------------------------------------------------------

def cmd_stage1(run: Run, names=None) -> dict[str, Stage1Result]:
    pc = run.path_config()
    out = {}
    for name in names or run.subject_names():
        subj = run.standardized(run.load_subject(name))
        with _timed(run, "stage1"):
            res = run_stage1(subj, pc)
        sd = run.subject_dir(name)
        write_tsv(run.record(sd / "stage1.tsv"),
                  ["region", "n_voxels", "lambda", "lambda_max", "val_mse", "n_selected", "selected"],
                  [(f.region, f.n_voxels, f.lam, f.lam_max, f.val_mse, f.selected.size, f.selected)
                   for f in res.regions])
        write_tsv(run.record(sd / "stage1_selected.tsv"), ["voxel"], [(v,) for v in res.selected])
        out[name] = res
    return out


def _load_stage1(run: Run, name: str) -> Stage1Result:
    p = run.subject_dir(name) / "stage1_selected.tsv"
    if not p.is_file():
        raise DataError(f"missing stage-1 output: {p} (run the stage1 subcommand first)")
    _, rows = read_tsv(p)
    return Stage1Result([], np.array([int(r[0]) for r in rows], dtype=np.intp))


def cmd_stage2(run: Run, stage1: dict[str, Stage1Result] | None = None) -> dict[str, Stage2Result | None]:
    pc = run.path_config()
    out: dict[str, Stage2Result | None] = {}
    for name in run.subject_names():
        s1 = stage1[name] if stage1 else _load_stage1(run, name)
        subj = run.standardized(run.load_subject(name))
        sd = run.subject_dir(name)
        if s1.selected.size == 0:
            logger.warning("%s: stage 1 selected no voxels; stage 2 skipped", name)
            write_tsv(run.record(sd / "stage2.tsv"),
                      ["voxel", "lambda", "lasso_val_mse", "mu", "ridge_val_mse", "support_size", "support"], [])
            write_tsv(run.record(sd / "stage2_selected.tsv"), ["voxel"], [])
            out[name] = None
            continue
        with _timed(run, "stage2"):
            res = fit_stage2(LagData.from_subject(subj), s1.selected, pc)
        write_tsv(run.record(sd / "stage2.tsv"),
                  ["voxel", "lambda", "lasso_val_mse", "mu", "ridge_val_mse", "support_size", "support"],
                  [(j, res.lam[j], res.lasso_val_mse[j], res.mu[j], res.ridge_val_mse[j],
                    res.support(j).size, res.support(j)) for j in range(subj.n_voxels)])
        write_tsv(run.record(sd / "stage2_selected.tsv"), ["voxel"], [(v,) for v in res.selected])
        run.matrix(sd / "ridge_W.fmat", res.ridge_W)
        out[name] = res
    return out


def _load_stage2(run: Run, name: str) -> Stage2Result | None:
    s1 = _load_stage1(run, name)
    sd = run.subject_dir(name)
    if s1.selected.size == 0:
        return None
    wpath = sd / "ridge_W.fmat"
    if not wpath.is_file():
        raise DataError(f"missing stage-2 output: {wpath} (run the stage2 subcommand first)")
    W3 = load_matrix(wpath)
    _, rows = read_tsv(sd / "stage2.tsv")
    V = W3.shape[1]
    lasso_W = np.zeros((V, s1.selected.size))
    lam, lmse, mu, rmse = (np.empty(V) for _ in range(4))
    for r in rows:
        j = int(r[0])
        lam[j], lmse[j], mu[j], rmse[j] = float(r[1]), float(r[2]), float(r[3]), float(r[4])
        sup = parse_index_list(r[6]) if len(r) > 6 else np.empty(0, np.intp)
        # the LASSO coefficients themselves are not persisted; mark the support
        lasso_W[j, np.searchsorted(s1.selected, sup)] = 1.0
    return Stage2Result(s1.selected, lasso_W, lam, lmse, W3, mu, rmse)


def cmd_significance(run: Run, stage2: dict[str, Stage2Result | None] | None = None) -> None:
    pc = run.path_config()
    rows_summary = []
    for i, name in enumerate(run.subject_names()):
        s2 = stage2[name] if stage2 is not None else _load_stage2(run, name)
        s1 = s2.s1_voxels if s2 is not None else _load_stage1(run, name).selected
        subj = run.standardized(run.load_subject(name))
        with _timed(run, "significance"):
            rep = significance_test(subj, s1, None if s2 is None else s2.ridge_W, run.cfg["significance.n_perm"],
                                    run.subject_seed(i), pc, run.cfg["significance.alpha"])
        sd = run.subject_dir(name)
        write_tsv(run.record(sd / "significance.tsv"), ["voxel", "test_mse", "p_value", "significant"],
                  [(j, rep.observed[j], rep.p_values[j], rep.significant[j]) for j in range(subj.n_voxels)])
        rows_summary.append((name, rep.fraction_significant))
    write_tsv(run.record(run.out / "significance_summary.tsv"), ["subject", "fraction_significant"], rows_summary)


# -- ICA and similarity ---------------------------------------------------------

def cmd_ica(run: Run, stage2: dict[str, Stage2Result | None] | None = None) -> dict[str, SubjectNetwork]:
    c = run.cfg
    nets = {}
    for i, name in enumerate(run.subject_names()):
        subj = run.standardized(run.load_subject(name))
        s2 = None
        if c["ica.voxels"] == "selected":
            s2 = stage2[name] if stage2 is not None else _load_stage2(run, name)
        try:
            with _timed(run, "ica"):
                net = subject_network(subj, s2, c["ica.n_components"], run.subject_seed(i), run.ica_options(),
                                      c["ica.block"], c["ica.voxels"])
        except EmptySubset as exc:
            logger.warning("%s; subject left out of the network analysis", exc)
            continue
        sd = run.subject_dir(name)
        run.matrix(sd / "ica_M.fmat", net.decomposition.M)
        run.matrix(sd / "ica_S.fmat", net.decomposition.S)
        run.matrix(sd / "Q.fmat", net.Q)
        write_kv(run.record(sd / "ica.txt"), {"n_components": net.n_components, "voxels": net.voxels,
                                             "iterations": net.decomposition.n_iter,
                                             "converged": net.decomposition.converged})
        nets[name] = net
    return nets


def cmd_group_ica(run: Run) -> GroupMaps:
    c = run.cfg
    gdir = run.out / "group"
    if c["group.maps"]:
        src = Path(c["group.maps"])
        ctbl = src.with_suffix(".ctbl")
        for p in (src, ctbl):
            if not p.is_file():
                raise DataError(f"missing group map file: {p}")
        group = GroupMaps(load_matrix(src), load_coords(ctbl))
        if group.maps.shape[1] != group.coords.n_voxels:
            raise DataError(f"{src}: {group.maps.shape[1]} map columns but {group.coords.n_voxels} coordinates")
    else:
        names = run.subject_names()
        series, coords = [], []
        gin = run.out / "group_input"
        for name in names:
            subj = run.load_subject(name)
            if subj.coords is None:
                raise DataError(f"group ICA needs coordinates: {run.data_dir / (name + '.ctbl')} missing")
            alt = gin / f"{name}.fmat"
            data = load_matrix(alt) if alt.is_file() else subj.data
            subj = run.standardized(replace(subj, data=data))
            series.append(subj.train if c["ica.block"] == "train" else subj.data)
            coords.append(subj.coords)
        sc = c["group.subject_components"] or None
        with _timed(run, "group-ica"):
            group = group_ica_baseline(series, coords, c["group.n_components"], c["run.seed"], sc, run.ica_options())
    run.matrix(gdir / "maps.fmat", group.maps)
    write_coords(gdir / "maps.ctbl", group.coords)
    run.record(gdir / "maps.ctbl")
    return group


def _load_networks(run: Run) -> list[SubjectNetwork]:
    nets = []
    for name in run.subject_names():
        q = run.subject_dir(name) / "Q.fmat"
        if not q.is_file():
            logger.warning("%s: no maps (%s); left out", name, q)
            continue
        subj = run.load_subject(name)
        nets.append(SubjectNetwork(name, np.empty(0, np.intp), None, load_matrix(q), subj.coords))  # type: ignore[arg-type]
    return nets


def _load_group(run: Run) -> GroupMaps:
    g = run.out / "group" / "maps.fmat"
    if not g.is_file():
        raise DataError(f"missing group maps: {g} (run the group-ica subcommand first)")
    return GroupMaps(load_matrix(g), load_coords(g.with_suffix(".ctbl")))


def cmd_similarity(run: Run, nets: list[SubjectNetwork] | None = None, group: GroupMaps | None = None):
    nets = nets if nets is not None else _load_networks(run)
    group = group if group is not None else _load_group(run)
    if len(nets) < 2:
        raise DataError(f"similarity needs at least two subjects with maps, got {len(nets)}")
    radius = run.cfg["blur.radius"] or None
    with _timed(run, "similarity"):
        prof = cohort_profiles(nets, group, run.cfg["blur.sigma"], radius)
        dom = dominance_summary(prof)
    sdir = run.out / "similarity"
    names = prof.subjects
    write_tsv(run.record(sdir / "profiles.tsv"),
              ["subject", "component"] + [f"IS.{n}" for n in names] + ["IGS", "dominant"],
              [(names[prof.owner[i]], prof.component[i], *prof.IS[i], prof.IGS[i], dom.ic_pass[i])
               for i in range(prof.owner.size)])
    write_tsv(run.record(sdir / "dominance.tsv"), ["subject", "fraction_dominant", "pass"],
              [(names[s], dom.subject_fraction[s], dom.subject_pass[s]) for s in range(len(names))])
    run.matrix(sdir / "features.fmat", prof.features())
    return prof


def cmd_cluster(run: Run, features: np.ndarray | None = None):
    c = run.cfg
    sdir = run.out / "similarity"
    if features is None:
        f = sdir / "features.fmat"
        if not f.is_file():
            raise DataError(f"missing similarity features: {f} (run the similarity subcommand first)")
        features = load_matrix(f)
    IS, IGS = features[:, :-1], features[:, -1]
    with _timed(run, "cluster"):
        res = cluster_features(IS, IGS, c["cluster.n_clusters"], c["cluster.metric"], c["cluster.linkage"])
    cdir = run.out / "cluster"
    write_tsv(run.record(cdir / "labels.tsv"), ["profile", "cluster", "candidate"],
              [(i, res.labels[i], res.labels[i] == res.candidate) for i in range(res.labels.size)])
    write_tsv(run.record(cdir / "linkage.tsv"), ["left", "right", "height", "size"],
              [(int(a), int(b), h, int(n)) for a, b, h, n in res.linkage])
    write_tsv(run.record(cdir / "clusters.tsv"), ["cluster", "size", "mean_IS", "mean_IGS", "candidate"],
              [(k + 1, int((res.labels == k + 1).sum()), res.mean_is[k], res.mean_igs[k], k + 1 == res.candidate)
               for k in range(res.n_clusters)])
    return res


def cmd_pipeline(run: Run) -> None:
    if not run.data_dir.is_dir():
        cmd_synth(run)
    s2 = None
    if run.cfg["ica.voxels"] == "selected":
        s1 = cmd_stage1(run)
        s2 = cmd_stage2(run, s1)
        cmd_significance(run, s2)
    nets = cmd_ica(run, s2)
    group = cmd_group_ica(run)
    prof = cmd_similarity(run, list(nets.values()), group)
    cmd_cluster(run, prof.features())


HANDLERS = {
    "synth": cmd_synth, "stage1": cmd_stage1, "stage2": cmd_stage2, "significance": cmd_significance,
    "ica": cmd_ica, "group-ica": cmd_group_ica, "similarity": cmd_similarity, "cluster": cmd_cluster,
    "pipeline": cmd_pipeline,
}


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scnet", description="Sparse causal voxel selection and ICA network analysis.")
    p.add_argument("--version", action="version", version=f"scnet {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="master seed (run.seed)")
    common.add_argument("--threads", type=int, help="worker threads (run.threads)")
    common.add_argument("--output", help="output directory (run.output)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key; may be repeated")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def resolve_config(args, environ=None) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config else RunConfig()
    cfg = cfgmod.apply_env(cfg, environ)
    flags = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = cfgmod.parse_value(k.strip(), v)
    if args.seed is not None:
        flags["run.seed"] = args.seed
    if args.threads is not None:
        flags["run.threads"] = args.threads
    if args.output is not None:
        flags["run.output"] = args.output
    return cfg.updated(flags).validate()


def main(argv=None, environ=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        run = Run(resolve_config(args, environ))
        # BLAS runs single-threaded so results do not depend on the thread count.
        with threadpool_limits(limits=1):
            HANDLERS[args.command](run)
        run.write_manifest(args.command)
        return 0
    except ScnError as exc:
        print(f"scnet: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"scnet: error: file not found: {exc.filename}", file=sys.stderr)
        return 2


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
