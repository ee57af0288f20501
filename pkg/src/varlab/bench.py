"""Multi-seed experiment harness: training runs, evaluation curves, and the
statistics/diagnostics toolbox (variance decomposition, paired-seed
correlation, random-action probes, performance profiles, saturation reports).

All functions are deterministic given their seed arguments; seed runs are
shared-nothing and safe to execute in parallel, with aggregation sorted by
seed so results never depend on completion order.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from varlab.agent import AbortRunError, Agent, AgentConfig, RunStreams, UpdateMetrics
from varlab.envs import EnvSpec, rollout

SATURATION_ABS_ACTION = 0.95
STUCK_SATURATED_FRAC = 0.90


def config_hash(cfg: AgentConfig) -> str:
    """Stable short hash of every config field."""
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class DiagWindow:
    """Mean update diagnostics over one eval interval."""
    step: int                    # last env step of the window (1-based)
    n_updates: int
    means: dict[str, float]      # mean of each UpdateMetrics field
    frac_saturated: float        # fraction of updates with avg|a| > threshold


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    curve: list[tuple[int, float]] = field(default_factory=list)
    eval_scores: list[list[float]] = field(default_factory=list)  # [point][episode]
    diag: list[DiagWindow] = field(default_factory=list)
    failed: bool = False
    fail_reason: str = ""

    @property
    def final_score(self) -> float:
        """Mean of the last eval point's episodes; 0 if no eval completed."""
        return self.curve[-1][1] if self.curve else 0.0


@dataclass
class SummaryStats:
    mu: float
    sigma: float
    rel: float | None   # sigma / mu, absent unless mu > 0
    n_seeds: int


@dataclass
class VarDecomp:
    alg_var: float        # between-run variance, bias-corrected and floored at 0
    sample_var: float     # mean within-run unbiased variance
    alg_var_raw: float    # before flooring (reconstruction identity uses this)
    n_runs: int
    n_samples: int


def _eval_point(agent: Agent, streams: RunStreams, point: int,
                episodes: int) -> list[float]:
    scores = []
    for ep in range(episodes):
        rng = RunStreams._gen(tuple(streams.eval_entropy) + (point, ep))
        _, total = rollout(agent.spec, agent.policy_action, rng)
        scores.append(total)
    return scores


def run_seed(
    cfg: AgentConfig,
    spec: EnvSpec,
    seed: int,
    total_steps: int,
    eval_every: int = 1000,
    eval_episodes: int = 10,
    streams: RunStreams | None = None,
    return_agent: bool = False,
) -> RunRecord:
    """Train one agent; evaluate the deterministic policy every ``eval_every``
    steps over ``eval_episodes`` episodes; aggregate update diagnostics per
    eval window. Non-finite training aborts produce a partial record flagged
    ``failed`` instead of raising.
    """
    if total_steps < cfg.seed_frames:
        raise ValueError("total_steps must cover the seed phase")
    streams = streams if streams is not None else RunStreams.from_seed(seed)
    agent = Agent(cfg, spec, streams)
    rec = RunRecord(seed=seed, config_hash=config_hash(cfg))

    sums = {k: 0.0 for k in UpdateMetrics.FIELDS}
    n_upd = 0
    n_sat = 0
    point = 0
    for step in range(total_steps):
        try:
            m = agent.step(step)
        except AbortRunError as e:
            rec.failed = True
            rec.fail_reason = str(e)
            break
        if m is not None:
            n_upd += 1
            if m.avg_abs_action > SATURATION_ABS_ACTION:
                n_sat += 1
            for k in UpdateMetrics.FIELDS:
                sums[k] += getattr(m, k)
        if (step + 1) % eval_every == 0:
            scores = _eval_point(agent, streams, point, eval_episodes)
            rec.eval_scores.append(scores)
            rec.curve.append((step + 1, float(np.mean(scores))))
            rec.diag.append(DiagWindow(
                step=step + 1,
                n_updates=n_upd,
                means={k: (sums[k] / n_upd if n_upd else 0.0)
                       for k in UpdateMetrics.FIELDS},
                frac_saturated=(n_sat / n_upd if n_upd else 0.0),
            ))
            sums = {k: 0.0 for k in UpdateMetrics.FIELDS}
            n_upd = 0
            n_sat = 0
            point += 1
    return (rec, agent) if return_agent else rec


def final_scores(records: list[RunRecord], at_step: int | None = None) -> list[float]:
    """Final score per record: last eval point at or before ``at_step``."""
    out = []
    for r in records:
        pts = [m for s, m in r.curve if at_step is None or s <= at_step]
        out.append(pts[-1] if pts else 0.0)
    return out


def summarize(records: list[RunRecord], at_step: int | None = None) -> SummaryStats:
    if len(records) < 2:
        raise ValueError("need at least 2 records to summarize")
    scores = np.array(final_scores(records, at_step))
    mu = float(np.mean(scores))
    sigma = float(np.std(scores, ddof=1))
    rel = sigma / mu if mu > 0 else None
    return SummaryStats(mu=mu, sigma=sigma, rel=rel, n_seeds=len(scores))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        raise ZeroDivisionError("zero-variance input to pearson")
    return float(np.clip(dx @ dy / denom, -1.0, 1.0))


@dataclass
class PairedCorrelation:
    per_point: list[tuple[int, float]]   # (step, rho) at points where defined
    time_avg: float
    skipped: int                          # eval points with zero variance
    records_a: list[RunRecord]
    records_b: list[RunRecord]


def paired_seed_correlation(
    cfg: AgentConfig,
    spec: EnvSpec,
    n_pairs: int,
    total_steps: int,
    eval_every: int = 1000,
    eval_episodes: int = 10,
    master_seed: int = 0,
    run_fn=None,
) -> PairedCorrelation:
    """Pearson correlation between paired runs that share initialization and
    seed-phase experience but use independent exploration/sampling streams.

    ``run_fn``, when given, maps the (cfg, spec, seed, ...) run arguments to a
    RunRecord and lets callers parallelize the underlying runs.
    """
    if n_pairs < 3:
        raise ValueError("need at least 3 pairs")
    run = run_fn if run_fn is not None else run_seed
    recs_a, recs_b = [], []
    for p in range(n_pairs):
        pair_seed = master_seed * 10_000 + p
        recs_a.append(run(cfg, spec, pair_seed, total_steps, eval_every,
                          eval_episodes, streams=RunStreams.paired(pair_seed, 0)))
        recs_b.append(run(cfg, spec, pair_seed, total_steps, eval_every,
                          eval_episodes, streams=RunStreams.paired(pair_seed, 1)))
    return correlate_pairs(recs_a, recs_b)


def correlate_pairs(recs_a: list[RunRecord],
                    recs_b: list[RunRecord]) -> PairedCorrelation:
    # partial (failed) runs shorten the comparable range
    n_points = min((len(r.curve) for r in recs_a + recs_b), default=0)
    per_point = []
    skipped = 0
    for k in range(n_points):
        step = recs_a[0].curve[k][0]
        xa = np.array([r.curve[k][1] for r in recs_a])
        xb = np.array([r.curve[k][1] for r in recs_b])
        try:
            per_point.append((step, pearson(xa, xb)))
        except ZeroDivisionError:
            skipped += 1
    avg = float(np.mean([r for _, r in per_point])) if per_point else 0.0
    return PairedCorrelation(per_point, avg, skipped, recs_a, recs_b)


def random_action_probe(
    policy,
    spec: EnvSpec,
    p_grid: list[float],
    episodes: int,
    seed: int,
) -> list[tuple[float, float, float]]:
    """Evaluate ``policy`` while swapping each action, with probability p, for
    a uniform random one. Returns (p, mean_return, std_return) per p.

    The environment stream depends only on (seed, episode), so the p=0 row
    equals plain evaluation with the same seed, and the p=1 row is independent
    of the policy.
    """
    out = []
    for pi, p in enumerate(p_grid):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probe probability {p} outside [0, 1]")
        returns = []
        for ep in range(episodes):
            env_rng = RunStreams._gen((seed, ep))
            probe_rng = RunStreams._gen((seed, ep, 1))

            def probed(obs):
                swap = probe_rng.uniform() < p
                rand = probe_rng.uniform(-1.0, 1.0, spec.action_dim)
                return rand if swap else policy(obs)

            _, total = rollout(spec, probed, env_rng)
            returns.append(total)
        out.append((p, float(np.mean(returns)), float(np.std(returns, ddof=0))))
    return out


def variance_decomposition(eval_scores: np.ndarray) -> VarDecomp:
    """Split score variance over an R-runs x S-episodes matrix into
    between-run (algorithm) and within-run (sample) components.

    sample_var is the mean unbiased within-run variance; alg_var is the
    unbiased variance of run means minus sample_var/S (plug-in bias
    correction), floored at zero.
    """
    scores = np.asarray(eval_scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 2 or scores.shape[1] < 2:
        raise ValueError("need an R x S matrix with R >= 2 and S >= 2")
    n_runs, n_samples = scores.shape
    sample_var = float(np.mean(np.var(scores, axis=1, ddof=1)))
    means_var = float(np.var(np.mean(scores, axis=1), ddof=1))
    raw = means_var - sample_var / n_samples
    return VarDecomp(alg_var=max(raw, 0.0), sample_var=sample_var,
                     alg_var_raw=raw, n_runs=n_runs, n_samples=n_samples)


def eval_gain_ratio(decomp: VarDecomp, s_from: int, s_to: int) -> float:
    """Std-of-estimate ratio from evaluating over s_from vs s_to episodes:
    sqrt((alg + sample/s_from) / (alg + sample/s_to)).
    """
    if s_from < 1 or s_to < 1:
        raise ValueError("episode counts must be >= 1")
    denom = decomp.alg_var + decomp.sample_var / s_to
    if denom == 0.0:
        raise ZeroDivisionError("zero total variance at s_to")
    return math.sqrt((decomp.alg_var + decomp.sample_var / s_from) / denom)


def performance_profile(
    scores_by_method: dict[str, list[float]],
    tau_grid: list[float],
) -> dict[str, list[float]]:
    """Empirical tail P[score > tau] (strict) per method per threshold."""
    out = {}
    for name, scores in scores_by_method.items():
        if not scores:
            raise ValueError(f"method {name!r} has no scores")
        arr = np.asarray(scores, dtype=np.float64)
        out[name] = [float(np.mean(arr > tau)) for tau in tau_grid]
    return out


@dataclass
class SaturationReport:
    frac_saturated: float          # update steps with avg|a| > 0.95
    first_learning_step: int | None  # first eval step with mean above floor
    stuck: bool                    # saturated >= 90% of steps AND final below floor


def saturation_report(record: RunRecord, floor: float) -> SaturationReport:
    total_upd = sum(w.n_updates for w in record.diag)
    sat_upd = sum(round(w.frac_saturated * w.n_updates) for w in record.diag)
    frac = sat_upd / total_upd if total_upd else 0.0
    first = next((s for s, m in record.curve if m > floor), None)
    stuck = frac >= STUCK_SATURATED_FRAC and record.final_score < floor
    return SaturationReport(frac_saturated=frac, first_learning_step=first,
                            stuck=stuck)


def sparse_q_report(record: RunRecord) -> list[tuple[int, float, float]]:
    """Per-window (step, fraction of nonzero Q-targets, fraction of nonzero
    rewards) extracted from the stored diagnostics."""
    return [(w.step, w.means["fnz_qtarget"], w.means["fnz_reward"])
            for w in record.diag]


def lr_sweep(
    cfg: AgentConfig,
    spec: EnvSpec,
    lrs: list[float],
    seeds: list[int],
    total_steps: int,
    eval_every: int = 1000,
    eval_episodes: int = 10,
    run_fn=None,
) -> dict[float, tuple[SummaryStats, list[RunRecord]]]:
    """Grid of run_seed x summarize over learning rates. Failed runs count
    with their partial final score."""
    run = run_fn if run_fn is not None else run_seed
    out = {}
    for lr in lrs:
        c = dataclasses.replace(cfg, lr=lr)
        recs = [run(c, spec, s, total_steps, eval_every, eval_episodes) for s in seeds]
        recs.sort(key=lambda r: r.seed)
        out[lr] = (summarize(recs) if len(recs) >= 2 else
                   SummaryStats(recs[0].final_score, 0.0, None, 1), recs)
    return out
