"""Batch command-line front end: sampling, reconstruction, denoising, balancing and metrics."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .balance import greedy_balance
from .config import DENOISERS, parse_config
from .errors import PcgspError
from .graph import laplacian, load_edge_list, save_edge_list
from .metrics import c2c, c2p, deltacon_similarity, lambda_min_report, relative_error
from .pcio import PointCloud, kmeans_partition, load_cloud, save_cloud
from .restore import denoise_fglr_l1, denoise_fglr_l2, denoise_gtv_admm, superresolve
from .sampling import SamplingSet, build_prior, sample_subcloud
from .synthetic import make_cloud

CSV_COLUMNS = ("model", "ratio", "method", "seed", "c2c", "c2p", "re", "dcs", "lambda_min")
THREADS_ENV = "PC_TOOL_THREADS"
# smallest sub-cloud budget that still supports k-NN normals in reconstruction
MIN_SAMPLES = 4


def thread_count():
    """Worker count from ``PC_TOOL_THREADS`` or the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise PcgspError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise PcgspError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def budget(n, ratio, m=None):
    """Samples to keep out of ``n`` points: ``m`` if given, else ``round(ratio n)``, at least 4."""
    want = int(m) if m is not None else int(round(ratio * n))
    return min(n, max(want, MIN_SAMPLES))


# ------------------------------------------------------------------ pipeline


@dataclass
class SubCloudResult:
    cluster: int
    members: np.ndarray
    reconstruction: np.ndarray | None = None
    lambda_min: float = math.nan
    re: float = math.nan
    dcs: float = math.nan
    error: str | None = None


@dataclass
class RunResult:
    """Metrics of one (ratio, seed, method) pipeline run."""

    model: str
    ratio: float
    method: str
    seed: int
    c2c: float
    c2p: float
    re: float
    dcs: float
    lambda_min: float
    failures: list = field(default_factory=list)
    reconstruction: PointCloud | None = None

    def row(self):
        return {c: getattr(self, c) for c in CSV_COLUMNS}


def _random_selection(n, m, seed, cluster):
    rng = np.random.default_rng([seed, cluster])
    return SamplingSet(np.sort(rng.choice(n, size=m, replace=False)), n)


def _process_subcloud(cloud, members, cluster, ratio, seed, method, cfg):
    res = SubCloudResult(cluster, members)
    sub = cloud.subset(members)
    n = len(sub)
    try:
        m = budget(n, ratio, cfg.m)
        if method == "ours":
            sampling, diag = sample_subcloud(sub, cfg.graph, cfg.solver.mu, m, seed=seed,
                                             linearization=cfg.linearization, delta=cfg.delta,
                                             similarity=cfg.compute_dcs)
            Lcal = diag["prior"].Lcal
            res.re = diag["relative_error"]
            res.dcs = math.nan if diag["dcs"] is None else diag["dcs"]
        else:
            sampling = _random_selection(n, m, seed, cluster)
            Lcal = build_prior(sub, cfg.graph, cfg.linearization).Lcal
        res.lambda_min = lambda_min_report(sampling, Lcal, cfg.solver.mu)
        rec = superresolve(sub.points[sampling.selected], n, cfg.graph, cfg.solver)
        res.reconstruction = rec.points
    except (PcgspError, ValueError, np.linalg.LinAlgError) as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def run_single(cloud, cfg, ratio, seed, method, model):
    """Cluster, sample, reconstruct and score one configuration.

    Sub-cloud jobs run on a pool of ``PC_TOOL_THREADS`` workers; results are
    assembled in cluster order so the output does not depend on scheduling.
    """
    part = kmeans_partition(cloud, cfg.cluster_size, seed=seed)
    jobs = [part.members(c) for c in range(part.cluster_count)]
    jobs = [(c, idx) for c, idx in enumerate(jobs) if idx.size]
    workers = min(thread_count(), len(jobs))

    def work(job):
        return _process_subcloud(cloud, job[1], job[0], ratio, seed, method, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    ok = [r for r in results if r.error is None]
    failures = [{"model": model, "ratio": ratio, "method": method, "seed": seed,
                 "cluster": r.cluster, "error": r.error} for r in results if r.error is not None]
    if ok:
        gt = cloud.points[np.concatenate([r.members for r in ok])]
        rec = PointCloud(np.vstack([r.reconstruction for r in ok]))
        dist_c2c, dist_c2p = c2c(gt, rec), c2p(gt, rec, cfg.metrics)
    else:
        rec, dist_c2c, dist_c2p = None, math.nan, math.nan
    return RunResult(model, float(ratio), method, int(seed), dist_c2c, dist_c2p,
                     _nanmean([r.re for r in ok]), _nanmean([r.dcs for r in ok]),
                     _nanmean([r.lambda_min for r in ok]), failures, rec)


def _model_name(cfg):
    if cfg.model:
        return cfg.model
    return Path(cfg.input).stem if cfg.input else "cloud"


def run_pipeline(cfg, cloud=None):
    """Run every (ratio, seed, method) combination of the config.

    Returns
    -------
    list of RunResult
        Sorted by (model, ratio, seed, method).
    """
    cloud = cloud if cloud is not None else load_cloud(cfg.input)
    model = _model_name(cfg)
    runs = [run_single(cloud, cfg, r, s, meth, model)
            for r in cfg.ratios for s in cfg.seeds for meth in cfg.methods]
    runs.sort(key=lambda r: (r.model, r.ratio, r.seed, r.method))
    return runs


# ------------------------------------------------------------------ reporting


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_csv(results):
    """CSV text with a fixed column order; floats use their shortest round-trip form."""
    if not results:
        raise ValueError("no results to report")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in results:
        writer.writerow([_fmt(r.row()[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def versions():
    import numba

    return {"pcgsp": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def report_summary(results, cfg):
    """JSON-ready summary: the CSV rows, failures, config echo and library versions.

    Non-finite numbers become ``null``.
    """
    return {
        "columns": list(CSV_COLUMNS),
        "rows": [{k: _json_safe(v) for k, v in r.row().items()} for r in results],
        "failures": [f for r in results for f in r.failures],
        "config": cfg.to_dict(),
        "versions": versions(),
    }


def emit_report(results, cfg, csv_path=None):
    """Write the CSV (stdout if no path) and a ``.json`` summary next to it."""
    text = report_csv(results)
    summary = report_summary(results, cfg)
    if csv_path is None:
        sys.stdout.write(text)
        return text, summary
    csv_path = Path(csv_path)
    csv_path.write_text(text)
    csv_path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return text, summary


def _save_reconstructions(results, output):
    if output is None:
        return
    out = Path(output)
    for r in results:
        if r.reconstruction is None:
            continue
        if len(results) == 1:
            save_cloud(r.reconstruction, out)
        else:
            name = f"{out.stem}_{r.method}_r{r.ratio:g}_s{r.seed}{out.suffix}"
            save_cloud(r.reconstruction, out.with_name(name))


# ------------------------------------------------------------------ commands


def cmd_pipeline(cfg):
    results = run_pipeline(cfg)
    _save_reconstructions(results, cfg.output)
    emit_report(results, cfg, cfg.report)
    failures = [f for r in results for f in r.failures]
    for f in failures:
        print(f"sub-cloud {f['cluster']} failed (ratio={f['ratio']}, seed={f['seed']}, "
              f"method={f['method']}): {f['error']}", file=sys.stderr)
    return 1 if failures else 0


def cmd_sample(cfg):
    cloud = load_cloud(cfg.input)
    part = kmeans_partition(cloud, cfg.cluster_size, seed=cfg.seed)
    selected, worst_T, failed = [], math.inf, 0
    for c in range(part.cluster_count):
        members = part.members(c)
        if not members.size:
            continue
        try:
            m = budget(len(members), cfg.ratio, None)
            sampling, diag = sample_subcloud(cloud.subset(members), cfg.graph, cfg.solver.mu, m,
                                             seed=cfg.seed, linearization=cfg.linearization,
                                             delta=cfg.delta)
        except (PcgspError, ValueError) as exc:
            print(f"sub-cloud {c} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            failed += 1
            continue
        selected.append(members[sampling.selected])
        worst_T = min(worst_T, diag["achieved_T"])
    idx = np.sort(np.concatenate(selected)) if selected else np.zeros(0, dtype=np.int64)
    sampling = SamplingSet(idx, len(cloud))
    if cfg.output:
        sampling.save(cfg.output, worst_T)
    print(json.dumps({"n": sampling.n, "m": sampling.m, "achieved_T": _json_safe(worst_T)}))
    return 1 if failed else 0


def cmd_superres(cfg):
    samples = load_cloud(cfg.input)
    target = cfg.target_n if cfg.target_n is not None else int(round(len(samples) / cfg.ratio))
    rec = superresolve(samples, target, cfg.graph, cfg.solver)
    if cfg.output:
        save_cloud(rec, cfg.output)
    print(json.dumps({"input_points": len(samples), "output_points": len(rec)}))
    return 0


def cmd_denoise(cfg):
    cloud = load_cloud(cfg.input)
    s = cfg.solver
    if cfg.denoiser == "l2":
        res = denoise_fglr_l2(cloud.points, cfg.graph, s.gamma, s.outer_iters, solver="cg",
                              order=s.lanczos_order, tol=s.inner_tol, seed=cfg.seed)
    elif cfg.denoiser == "l1":
        res = denoise_fglr_l1(cloud.points, cfg.graph, s.gamma, s.outer_iters, step=s.step,
                              apg_iters=s.apg_iters, tol=s.inner_tol, seed=cfg.seed)
    else:
        res = denoise_gtv_admm(cloud.points, cfg.graph, s.gamma, s.rho, s.admm_iters, s.outer_iters,
                               s.admm_tol, seed=cfg.seed, step=s.step, apg_iters=s.apg_iters)
    if cfg.output:
        save_cloud(PointCloud(res.points), cfg.output)
    summary = {"denoiser": cfg.denoiser, "outer_iterations": res.outer_iterations}
    if cfg.denoiser == "gtv":
        summary["stagnated_runs"] = int(sum(res.history["stagnated"]))
        summary["max_final_residual"] = max((r[-1] for r in res.history["residuals"] if r), default=0.0)
    print(json.dumps(summary))
    return 0


def cmd_balance(cfg):
    g, _ = load_edge_list(cfg.input)
    out = greedy_balance(g, seed=cfg.seed, delta=cfg.delta)
    if cfg.output:
        save_edge_list(out.graph, cfg.output, coloring=out.coloring)
    summary = {"re": relative_error(laplacian(g), out.L_B),
               "dcs": deltacon_similarity(g, out.graph, cfg.metrics),
               "psd_gap_mineig": _json_safe(out.psd_gap_mineig),
               "removed_or_updated": int(len(out.events))}
    print(json.dumps(summary))
    return 0


def cmd_metrics(cfg):
    rec = load_cloud(cfg.input)
    gt = load_cloud(cfg.reference)
    print(json.dumps({"c2c": c2c(gt, rec), "c2p": c2p(gt, rec, cfg.metrics)}))
    return 0


def cmd_synth(cfg):
    sc = cfg.synth
    _, noisy = make_cloud(sc.shape, sc.n, sc.sigma, cfg.seed, sc.spacing)
    if cfg.output is None:
        raise PcgspError("synth needs --output")
    save_cloud(noisy, cfg.output)
    print(json.dumps({"shape": sc.shape, "n": sc.n, "output": cfg.output}))
    return 0


COMMAND_HANDLERS = {"pipeline": cmd_pipeline, "sample": cmd_sample, "superres": cmd_superres,
                    "denoise": cmd_denoise, "balance": cmd_balance, "metrics": cmd_metrics,
                    "synth": cmd_synth}


def build_parser():
    parser = argparse.ArgumentParser(prog="pcgsp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--input")
        p.add_argument("--output")
        p.add_argument("--ratio", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--mu", type=float)
        p.add_argument("--gamma", type=float)
        return p

    common(sub.add_parser("sample", help="choose sample points per sub-cloud"))
    p = common(sub.add_parser("superres", help="reconstruct a denser cloud from samples"))
    p.add_argument("--target-n", type=int, dest="target_n")
    p = common(sub.add_parser("denoise", help="FGLR (l2, l1) or GTV denoising"))
    p.add_argument("denoiser", choices=DENOISERS)
    common(sub.add_parser("balance", help="balance a signed graph edge list"))
    p = common(sub.add_parser("metrics", help="C2C and C2P between two clouds"))
    p.add_argument("--reference", required=False)
    p = common(sub.add_parser("pipeline", help="cluster, sample, reconstruct and report"))
    p.add_argument("--report", help="CSV path; a .json summary is written next to it")
    p.add_argument("--method", choices=("ours", "random"))
    p = common(sub.add_parser("synth", help="write a synthetic plane, sphere or cube cloud"))
    p.add_argument("--shape", choices=("plane", "sphere", "cube"))
    p.add_argument("--n", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--spacing", type=float)
    return parser


def _overrides(args):
    ns = vars(args)
    out = {k: ns.get(k) for k in ("command", "input", "output", "ratio", "seed", "target_n",
                                  "denoiser", "reference", "report", "method")}
    solver = {k: ns.get(k) for k in ("mu", "gamma") if ns.get(k) is not None}
    if solver:
        out["solver"] = solver
    synth = {k: ns.get(k) for k in ("shape", "n", "sigma", "spacing") if ns.get(k) is not None}
    if synth:
        out["synth"] = synth
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, _overrides(args))
        return COMMAND_HANDLERS[cfg.command](cfg)
    except PcgspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
