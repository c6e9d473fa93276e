"""Stages behind the command line.

Each stage reads the resolved config, checks that the artifacts it depends on
exist in the output directory, writes its own artifacts and a manifest
``<stage>.manifest.json`` next to the exact config it ran with
(``<stage>.config.json``).
"""

import json
import logging
import platform
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .approximator import MLP, OptimizerConfig
from .config import config_hash, stage_seed
from .guidance import (
    AnalyticH,
    Guide,
    HModel,
    QModel,
    cov_targets,
    load_guidance,
    martingale_loss,
    save_guidance,
    train_h,
    train_q,
)
from .guided import GuidedSamplerConfig, constraint_rate, sample_guided
from .metrics import ks_statistic, tv_histogram, w2_exact, w2_1d
from .oracle import analytic_h, rejection_sample, truncated_normal_cdf
from .sampler import TrajectoryBatch, sample_sde
from .schedule import NoiseSchedule, make_grid
from .score import AnalyticScore, GaussianMixture, LearnedScore, dsm_train
from .sets import Box, set_from_dict

log = logging.getLogger(__name__)


class DependencyError(RuntimeError):
    pass


def versions():
    return {
        "cdguide": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def opt_config(d):
    return OptimizerConfig(**d)


class Run:
    """Output directory, resolved config and per-stage seeds."""

    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(cfg)

    def seed(self, stage):
        return stage_seed(self.cfg["seed"], stage)

    def path(self, name):
        return self.out / name

    def require(self, name, stage):
        p = self.path(name)
        if not p.exists():
            raise DependencyError(f"missing {p}; run `{stage}` first")
        return p

    def manifest(self, stage, **fields):
        (self.out / f"{stage}.config.json").write_text(json.dumps(self.cfg, indent=2, sort_keys=True) + "\n")
        doc = {
            "stage": stage,
            "config_hash": self.hash,
            "seed": self.cfg["seed"],
            "versions": versions(),
            **fields,
        }
        (self.out / f"{stage}.manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return doc


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x)}")


# --- builders ---------------------------------------------------------------


def build_schedule(cfg):
    return NoiseSchedule.from_dict(cfg["schedule"])


def build_prior(cfg):
    d = cfg["data"]
    if d["kind"] != "gaussian":
        return None
    return GaussianMixture(d["weights"], d["means"], d["covs"])


def data_dim(cfg):
    d = cfg["data"]
    if d["kind"] == "gaussian":
        return len(d["means"][0])
    if d["kind"] == "exp_log":
        return 1
    raise ValueError(f"data kind {d['kind']!r} has no fixed dimension here")


def data_samples(cfg, seed):
    d = cfg["data"]
    rng = np.random.default_rng(seed)
    if d["kind"] == "gaussian":
        return build_prior(cfg).sample(rng, int(d["n"]))
    if d["kind"] == "exp_log":
        return np.log(rng.exponential(1.0 / d["rate"], (int(d["n"]), 1)))
    raise ValueError(f"cannot draw samples for data kind {d['kind']!r}")


def build_set(cfg):
    S = set_from_dict(cfg["guidance_set"])
    return S


def build_score(run):
    cfg = run.cfg
    sched = build_schedule(cfg)
    sc = cfg["score"]
    if sc["variant"] == "analytic":
        prior = build_prior(cfg)
        if prior is None:
            raise ValueError("analytic score needs Gaussian data")
        return AnalyticScore(sched, prior)
    if sc["variant"] != "learned":
        raise ValueError(f"unknown score variant {sc['variant']!r}")
    p = run.path("score.params")
    if p.exists():
        return LearnedScore.load(p)
    data = data_samples(cfg, run.seed("data"))
    net = MLP(data.shape[1], sc["hidden"], data.shape[1], sc["activation"], T=sched.T, seed=run.seed("score-init"))
    t0 = time.time()
    model = dsm_train(net, data, sched, opt_config(sc["optimizer"]), weight=sc["weight"], seed=run.seed("score"))
    log.info("score: DSM training took %.1fs", time.time() - t0)
    model.save(p)
    return model


def oracle_available(cfg):
    prior = build_prior(cfg)
    S = build_set(cfg)
    return prior is not None and prior.n_components == 1 and isinstance(S, Box) and cfg["score"]["variant"] == "analytic"


# --- stages -----------------------------------------------------------------


def simulate(run):
    cfg = run.cfg
    sched = build_schedule(cfg)
    score = build_score(run)
    sim = cfg["simulate"]
    grid = make_grid(sched, sim["K"], sim["spacing"], sim["eps_T"])
    t0 = time.time()
    batch = sample_sde(score, sched, grid, sim["n_paths"], run.seed("simulate"))
    log.info("simulate: %d paths in %.1fs", batch.n_paths, time.time() - t0)
    batch.save(run.path("pretrained.traj"))
    batch.save_terminal_csv(run.path("pretrained_terminal.csv"))
    rate, se = constraint_rate(batch, build_set(cfg))
    return run.manifest(
        "simulate", n_paths=batch.n_paths, flagged=batch.flagged, K=batch.K,
        constraint_rate=rate, constraint_rate_se=se, stage_seed=run.seed("simulate"),
    )


def _load_batch(run):
    return TrajectoryBatch.load(run.require("pretrained.traj", "simulate"))


def train_h_stage(run):
    cfg = run.cfg
    batch = _load_batch(run)
    sched = NoiseSchedule.from_dict(batch.schedule)
    S = build_set(cfg)
    hc = cfg["h"]
    h = HModel.create(batch.dim, sched.T, hc["hidden"], hc["activation"], run.seed("h-init"), hc["eps_h"])
    t0 = time.time()
    train_h(h, [batch], S, opt_config(hc["optimizer"]), seed=run.seed("h"))
    log.info("train-h: %.1fs", time.time() - t0)
    save_guidance(h, run.path("h.params"), S, sched, run.seed("h"), "h")
    return run.manifest(
        "train-h", final_loss=float(h.trace[-1, 1]), martingale_loss=martingale_loss(h, batch, S),
    )


def train_q_stage(run):
    cfg = run.cfg
    batch = _load_batch(run)
    h_path = run.require("h.params", "train-h")
    h, S, sched_d = load_guidance(h_path)
    sched = NoiseSchedule.from_dict(sched_d)
    qc = cfg["q"]
    t0 = time.time()
    targets = cov_targets(h, batch, mode=qc["mode"])
    q = QModel.create(batch.dim, sched.T, qc["hidden"], qc["activation"], run.seed("q-init"))
    train_q(q, targets, opt_config(qc["optimizer"]), seed=run.seed("q"))
    log.info("train-q: %.1fs", time.time() - t0)
    save_guidance(q, run.path("q.params"), S, sched, run.seed("q"), "q")
    return run.manifest(
        "train-q", final_loss=float(q.trace[-1, 1]), n_targets=len(targets), mode=qc["mode"],
        target_std=float(np.std(targets.target)),
    )


def build_guide(run, mode):
    cfg = run.cfg
    sched = build_schedule(cfg)
    sc = cfg["sample"]
    if mode == "oracle":
        if not oracle_available(cfg):
            raise ValueError("oracle guidance needs a single Gaussian prior, an analytic score and a box set")
        return Guide("oracle", AnalyticH(sched, build_prior(cfg), build_set(cfg)), sched.T, c_clip=sc["c_clip"])
    h, _, _ = load_guidance(run.require("h.params", "train-h"))
    q = None
    if mode.upper() == "MCL":
        q, _, _ = load_guidance(run.require("q.params", "train-q"))
    return Guide(mode, h, sched.T, q=q, c_clip=sc["c_clip"])


def sample_stage(run, mode=None):
    cfg = run.cfg
    sc = dict(cfg["sample"])
    if mode is not None:
        sc["mode"] = mode
    mode = sc["mode"]
    sched = build_schedule(cfg)
    score = build_score(run)
    guide = build_guide(run, mode)
    gcfg = GuidedSamplerConfig(
        mode=mode, integrator=sc["integrator"], eta=sc["eta"], eps_T=sc["eps_T"], c_clip=sc["c_clip"],
        K=sc["K"], spacing=sc["spacing"], n_paths=sc["n_paths"], seed=run.seed("sample"),
    )
    t0 = time.time()
    batch = sample_guided(score, sched, guide, gcfg)
    log.info("sample %s/%s eta=%g: %.1fs", mode, sc["integrator"], sc["eta"], time.time() - t0)
    tag = f"{mode}_{sc['integrator']}"
    batch.save_terminal_csv(run.path(f"samples_{tag}.csv"))
    rate, se = constraint_rate(batch, build_set(cfg))
    return run.manifest(
        f"sample_{tag}", mode=mode, integrator=sc["integrator"], eta=sc["eta"], n_paths=batch.n_paths,
        flagged=batch.flagged, constraint_rate=rate, constraint_rate_se=se,
        clip_fraction=batch.meta.get("clip_fraction"), samples=f"samples_{tag}.csv",
    )


def _read_samples(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))


def reference_sample(cfg, n, seed):
    """Draws from the data law conditioned on S."""
    S = build_set(cfg)
    prior = build_prior(cfg)
    if prior is not None:
        return rejection_sample(prior, S, n, seed=seed).samples
    x = data_samples(cfg, seed)
    keep = x[S.contains(x)]
    if len(keep) < n:
        raise ValueError(f"only {len(keep)} conditioned reference draws, need {n}")
    return keep[:n]


def eval_stage(run):
    from . import plotting

    cfg = run.cfg
    ec = cfg["eval"]
    files = sorted(run.out.glob("samples_*.csv"))
    if not files:
        raise DependencyError(f"no samples_*.csv in {run.out}; run `sample` first")
    S = build_set(cfg)
    ref = reference_sample(cfg, int(ec["n_reference"]), run.seed("reference"))
    d = ref.shape[1]
    exact_cdf = None
    prior = build_prior(cfg)
    if d == 1 and prior is not None and prior.n_components == 1 and isinstance(S, Box):
        exact_cdf = truncated_normal_cdf(prior.means[0, 0], prior.covs[0, 0, 0], S.lower[0], S.upper[0])
    rows, samples = [], {}
    for f in files:
        tag = f.stem[len("samples_"):]
        x = _read_samples(f)
        samples[tag] = x
        rate, se = constraint_rate(x, S)
        res = {"sample": tag, "n": len(x), "constraint_rate": rate, "constraint_rate_se": se}
        if d == 1:
            res["ks"] = ks_statistic(x[:, 0], exact_cdf) if exact_cdf else ks_statistic(x[:, 0], ref[:, 0])
            res["ks_reference"] = "truncated-normal cdf" if exact_cdf else "conditioned data sample"
            res["w2"] = w2_1d(x[:, 0], ref[:, 0])
            res["tv_hist"] = tv_histogram(x[:, 0], ref[:, 0], int(ec["bins"]))
        else:
            n = min(int(ec["w2_n"]), len(x), len(ref))
            res["w2_exact"] = w2_exact(x[:n], ref[:n])
            # squared transport cost, for comparison with figures quoted as emd2-style cost
            res["w2_squared"] = res["w2_exact"] ** 2
            res["w2_n"] = n
            for k in range(d):
                res[f"ks_axis{k}"] = ks_statistic(x[:, k], ref[:, k])
        rows.append(res)
    keys = sorted({k for r in rows for k in r} - {"sample"})
    with open(run.path("eval.csv"), "w") as fh:
        fh.write("sample," + ",".join(keys) + "\n")
        for r in rows:
            fh.write(r["sample"] + "," + ",".join(_fmt(r.get(k, "")) for k in keys) + "\n")
    figures = plotting.sample_figures(run.out, samples, ref, S)
    return run.manifest("eval", results=rows, figures=figures)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def oracle_stage(run):
    from . import plotting

    cfg = run.cfg
    if not oracle_available(cfg):
        raise ValueError("oracle grids need a single Gaussian prior, an analytic score and a box set")
    sched = build_schedule(cfg)
    prior = build_prior(cfg)
    S = build_set(cfg)
    oc = cfg["oracle"]
    t = np.linspace(0.0, sched.T * (1 - 1e-3), int(oc["n_t"]))
    mu, sd = prior.means[0, 0], np.sqrt(prior.covs[0, 0, 0])
    y_range = oc["y_range"] or [mu - 6 * sd, mu + 6 * sd]
    y = np.linspace(*y_range, int(oc["n_y"]))
    tt, yy = np.meshgrid(t, y, indexing="ij")
    pts = np.tile(prior.means[0], (tt.size, 1))
    pts[:, 0] = yy.ravel()
    h, gl = analytic_h(sched, prior, S, tt.ravel(), pts)
    table = np.column_stack([tt.ravel(), yy.ravel(), h, gl[:, 0]])
    np.savetxt(run.path("oracle_h.csv"), table, delimiter=",", header="t,y,h,dlogh_dy", comments="", fmt="%.17g")
    fig = plotting.h_heatmap(run.path("oracle_h.png"), t, y, h.reshape(tt.shape))
    return run.manifest("oracle", grid="oracle_h.csv", figures=[fig], n_t=len(t), n_y=len(y))


def stress_stage(run):
    """Stress scenarios on windows of daily returns.

    Windows of ``N`` standardized days are flattened to ``N * d`` vectors; the
    guidance set asks the last ``k`` days of the conditioned tickers to sum
    below ``tau``.  Portfolios are fit on the first ``N - k`` rows and scored
    on the cumulative return of the last ``m``.
    """
    from . import plotting
    from . import stress as st

    cfg = run.cfg
    sc = cfg["stress"]
    sched = build_schedule(cfg)
    if sc["csv"]:
        source = sc["csv"]
    else:
        dates, tickers, raw = st.synthetic_returns(sc["synthetic_days"], sc["tickers"], seed=run.seed("returns"))
        source = run.path("returns_synthetic.csv")
        st.write_returns_csv(source, dates, tickers, raw)
    panel = st.ingest(source, winsor=sc["winsor"])
    N, k, m, tau = int(sc["N"]), int(sc["k"]), int(sc["m"]), float(sc["tau"])
    cond = sc["cond_tickers"]
    ws = st.window(panel, N, k, m, tau, cond)
    real = ws.subset(ws.mask)
    log.info("stress: %d windows, %d meet the condition", len(ws), len(real))
    if len(real) == 0:
        raise ValueError(f"no real windows meet the condition ({int(ws.mask.sum())} hits of {len(ws)})")
    S = st.condition_set(panel, N, k, tau, cond)
    data = ws.flat()
    dim = data.shape[1]

    score_cfg = cfg["score"]
    p = run.path("stress_score.params")
    if p.exists():
        score = LearnedScore.load(p)
    else:
        net = MLP(dim, score_cfg["hidden"], dim, score_cfg["activation"], T=sched.T, seed=run.seed("stress-score-init"))
        score = dsm_train(net, data, sched, opt_config(score_cfg["optimizer"]), weight=score_cfg["weight"], seed=run.seed("stress-score"))
        score.save(p)

    sim = cfg["simulate"]
    grid = make_grid(sched, sim["K"], sim["spacing"], sim["eps_T"])
    batch = sample_sde(score, sched, grid, sim["n_paths"], run.seed("stress-simulate"))
    pre_rate, _ = constraint_rate(batch, S)
    hc, qc = cfg["h"], cfg["q"]
    h = HModel.create(dim, sched.T, hc["hidden"], hc["activation"], run.seed("stress-h-init"), hc["eps_h"])
    train_h(h, [batch], S, opt_config(hc["optimizer"]), seed=run.seed("stress-h"))
    targets = cov_targets(h, batch, mode=qc["mode"])
    del batch
    q = QModel.create(dim, sched.T, qc["hidden"], qc["activation"], run.seed("stress-q-init"))
    train_q(q, targets, opt_config(qc["optimizer"]), seed=run.seed("stress-q"))
    del targets
    save_guidance(h, run.path("stress_h.params"), S, sched, run.seed("stress-h"), "h")
    save_guidance(q, run.path("stress_q.params"), S, sched, run.seed("stress-q"), "q")

    smp = cfg["sample"]
    generated, telemetry = {}, []
    for mode, etas in (("ML", sc["eta_ml"]), ("MCL", sc["eta_mcl"])):
        for eta in etas:
            guide = Guide(mode, h, sched.T, q=q if mode == "MCL" else None, c_clip=smp["c_clip"])
            gcfg = GuidedSamplerConfig(
                mode=mode, integrator=smp["integrator"], eta=float(eta), eps_T=smp["eps_T"], c_clip=smp["c_clip"],
                K=smp["K"], spacing=smp["spacing"], n_paths=int(sc["n_generated"]),
                seed=run.seed(f"stress-sample-{mode}-{eta}"),
            )
            out = sample_guided(score, sched, guide, gcfg)
            rate, se = constraint_rate(out, S)
            telemetry.append({"source": f"CDG-{mode}", "eta": float(eta), "constraint_rate": rate,
                              "constraint_rate_se": se, "clip_fraction": out.meta.get("clip_fraction"),
                              "flagged": out.flagged})
            generated[(f"CDG-{mode}", float(eta))] = st.WindowSet(out.terminal.reshape(-1, N, len(panel.tickers)), N, k, m, tau)
    rows = st.stress_report(generated, real, panel.record)
    meta = {
        "n_windows": len(ws), "n_real": len(real), "pretrained_constraint_rate": pre_rate,
        "threshold": {"tau": tau, "tau_standardized": st.tau_standardized(panel, tau, ws.cond_idx).tolist(),
                      "conversion": "tau / std per conditioned ticker; weekday means neglected"},
        "generated": telemetry, "preprocessing": panel.record.to_dict(),
    }
    st.write_report(rows, run.path("stress_report.csv"), run.path("stress_report.json"), meta)
    figures = plotting.stress_figures(run.out, generated, real, panel.record)
    return run.manifest("stress", report="stress_report.csv", figures=figures, **meta)


def all_synthetic(run):
    out = {"simulate": simulate(run), "train-h": train_h_stage(run), "train-q": train_q_stage(run)}
    for mode in ("ML", "MCL"):
        out[f"sample-{mode}"] = sample_stage(run, mode)
    out["eval"] = eval_stage(run)
    return out


STAGES = {
    "simulate": simulate,
    "train-h": train_h_stage,
    "train-q": train_q_stage,
    "sample": sample_stage,
    "eval": eval_stage,
    "oracle": oracle_stage,
    "stress": stress_stage,
    "all-synthetic": all_synthetic,
}
