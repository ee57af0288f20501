"""Command-line entry points: train / bench / analyze / probe.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 aborted run
(non-finite training diagnostics). Worker parallelism comes from --parallel,
overridden by the VARLAB_THREADS environment variable; aggregation is sorted
by (preset, env, seed) so outputs are byte-identical at any worker count.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from varlab import bench, fileio
from varlab.envs import env_spec
from varlab.fileio import ConfigError, ExperimentConfig
from varlab.nets import mlp_forward
from varlab.presets import PRESETS, preset_config

EXIT_OK = 0
EXIT_BAD_CONFIG = 1
EXIT_ABORTED = 2


def _n_workers(args) -> int:
    env = os.environ.get("VARLAB_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"VARLAB_THREADS must be an integer, got {env!r}")
    return max(1, args.parallel)


def _write_run(out_dir: str, rec: bench.RunRecord) -> None:
    base = os.path.join(out_dir, f"run_{rec.seed}")
    fileio.atomic_write(base + ".jsonl", fileio.run_to_jsonl(rec))
    fileio.atomic_write(base + ".summary.json", fileio.run_summary_json(rec))


def _load_runs(run_dir: str) -> list[bench.RunRecord]:
    paths = sorted(glob.glob(os.path.join(run_dir, "run_*.jsonl")))
    recs = [fileio.load_run(p) for p in paths]
    recs.sort(key=lambda r: r.seed)
    return recs


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = fileio.load_config(args.config)
    spec = env_spec(cfg.env)
    rec, agent = bench.run_seed(cfg.agent, spec, args.seed, cfg.total_steps,
                                cfg.eval_every, cfg.eval_episodes,
                                return_agent=True)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_run(cfg.out_dir, rec)
    if not rec.failed:
        # the deterministic policy, for later probing
        fileio.save_policy(os.path.join(cfg.out_dir, f"policy_{args.seed}.bin"),
                           agent.actor)
    if rec.failed:
        print(f"run {args.seed} aborted: {rec.fail_reason}", file=sys.stderr)
        return EXIT_ABORTED
    print(f"run {args.seed}: final score {rec.final_score:.6g}")
    return EXIT_OK


# -- bench --------------------------------------------------------------------

def _bench_task(task):
    preset, env, seed, agent_kw, run_kw = task
    cfg = preset_config(preset, **agent_kw)
    rec = bench.run_seed(cfg, env_spec(env), seed, **run_kw)
    return preset, env, seed, rec


def cmd_bench(args) -> int:
    cfg = fileio.load_config(args.config)
    presets = [p for chunk in args.preset for p in chunk.split(",") if p]
    if not presets:
        presets = ["baseline"]
    for p in presets:
        if p not in PRESETS:
            raise ConfigError(
                f"unknown preset {p!r}; valid: {', '.join(sorted(PRESETS))}")
    envs = [e for chunk in args.env for e in chunk.split(",") if e] or [cfg.env]
    seeds = (list(range(args.seeds)) if args.seeds is not None
             else cfg.seed_list())

    agent_kw = {f.name: getattr(cfg.agent, f.name)
                for f in dataclasses.fields(cfg.agent)}
    run_kw = dict(total_steps=cfg.total_steps, eval_every=cfg.eval_every,
                  eval_episodes=cfg.eval_episodes)
    # preset flags beat the config's agent block
    tasks = []
    for preset in presets:
        kw = dict(agent_kw)
        kw.update(PRESETS[preset])
        for env in envs:
            for seed in seeds:
                tasks.append((preset, env, seed, kw, run_kw))

    workers = _n_workers(args)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bench_task, tasks))
    else:
        results = [_bench_task(t) for t in tasks]
    results.sort(key=lambda r: (r[0], r[1], r[2]))

    by_cell: dict[tuple[str, str], list[bench.RunRecord]] = {}
    for preset, env, seed, rec in results:
        cell_dir = os.path.join(cfg.out_dir, preset, env)
        os.makedirs(cell_dir, exist_ok=True)
        _write_run(cell_dir, rec)
        by_cell.setdefault((preset, env), []).append(rec)

    rows = []
    for (preset, env), recs in sorted(by_cell.items()):
        stats = bench.summarize(recs)
        for metric, value in (("mu", stats.mu),
                              ("rel", stats.rel if stats.rel is not None
                               else float("nan")),
                              ("sigma", stats.sigma)):
            v = value if value == value else "NA"
            rows.append([preset, env, metric, v, stats.n_seeds])
    fileio.write_csv(os.path.join(cfg.out_dir, "summary.csv"),
                     ["preset", "env", "metric", "value", "n_seeds"], rows)
    print(f"wrote {os.path.join(cfg.out_dir, 'summary.csv')} "
          f"({len(rows)} rows)")
    return EXIT_OK


# -- analyze ------------------------------------------------------------------

def _analyze_decomp(run_dir: str, recs, args) -> None:
    scores = np.array([r.eval_scores[-1] for r in recs])
    d = bench.variance_decomposition(scores)
    fileio.write_csv(os.path.join(run_dir, "decomp.csv"),
                     ["quantity", "value"],
                     [["alg_var", d.alg_var], ["sample_var", d.sample_var],
                      ["alg_var_raw", d.alg_var_raw],
                      ["n_runs", d.n_runs], ["n_samples", d.n_samples]])


def _analyze_gain_ratio(run_dir: str, recs, args) -> None:
    scores = np.array([r.eval_scores[-1] for r in recs])
    d = bench.variance_decomposition(scores)
    ratio = bench.eval_gain_ratio(d, args.s_from, args.s_to)
    print(f"sqrt((alg + sample/S_from) / (alg + sample/S_to)) with "
          f"alg={d.alg_var:.17g} sample={d.sample_var:.17g} "
          f"S_from={args.s_from} S_to={args.s_to} -> {ratio:.17g}")
    fileio.write_csv(os.path.join(run_dir, "gain_ratio.csv"),
                     ["alg_var", "sample_var", "s_from", "s_to", "ratio"],
                     [[d.alg_var, d.sample_var, args.s_from, args.s_to, ratio]])


def _analyze_corr(run_dir: str, recs, args) -> None:
    recs_a = _load_runs(os.path.join(run_dir, "arm_a"))
    recs_b = _load_runs(os.path.join(run_dir, "arm_b"))
    if len(recs_a) < 2 or len(recs_a) != len(recs_b):
        raise ConfigError("corr needs matching arm_a/ and arm_b/ run dirs "
                          "with >= 2 runs each")
    res = bench.correlate_pairs(recs_a, recs_b)
    n_failed = sum(r.failed for r in recs_a + recs_b)
    print(f"time-averaged rho {res.time_avg:.6g} over "
          f"{len(res.per_point)} points ({res.skipped} zero-variance points "
          f"skipped; {n_failed} failed runs included)")
    fileio.write_csv(os.path.join(run_dir, "corr.csv"), ["step", "rho"],
                     [[s, r] for s, r in res.per_point])


def _analyze_profile(run_dir: str, recs, args) -> None:
    scores = {"all": bench.final_scores(recs)}
    lo, hi = min(scores["all"]), max(scores["all"])
    taus = [lo - 1.0 + (hi - lo + 2.0) * i / 20 for i in range(21)]
    prof = bench.performance_profile(scores, taus)
    fileio.write_csv(os.path.join(run_dir, "profile.csv"),
                     ["tau", "fraction"],
                     [[t, f] for t, f in zip(taus, prof["all"])])


def _analyze_saturation(run_dir: str, recs, args) -> None:
    rows = []
    for r in recs:
        rep = bench.saturation_report(r, args.floor)
        rows.append([r.seed, rep.frac_saturated,
                     -1 if rep.first_learning_step is None
                     else rep.first_learning_step,
                     int(rep.stuck)])
    fileio.write_csv(os.path.join(run_dir, "saturation.csv"),
                     ["seed", "frac_saturated", "first_learning_step", "stuck"],
                     rows)


def _analyze_sparse_q(run_dir: str, recs, args) -> None:
    rows = []
    for r in recs:
        for step, fq, fr in bench.sparse_q_report(r):
            rows.append([r.seed, step, fq, fr])
    fileio.write_csv(os.path.join(run_dir, "sparse_q.csv"),
                     ["seed", "step", "fnz_qtarget", "fnz_reward"], rows)


_ANALYSES = {"decomp": _analyze_decomp, "corr": _analyze_corr,
             "profile": _analyze_profile, "saturation": _analyze_saturation,
             "sparse-q": _analyze_sparse_q, "gain-ratio": _analyze_gain_ratio}


def cmd_analyze(args) -> int:
    recs = _load_runs(args.run_dir)
    if args.what != "corr" and len(recs) < 2:
        raise ConfigError(f"analysis needs >= 2 runs, found {len(recs)}")
    _ANALYSES[args.what](args.run_dir, recs, args)
    return EXIT_OK


# -- probe --------------------------------------------------------------------

def cmd_probe(args) -> int:
    params = fileio.load_policy(args.policy)
    spec = env_spec(args.env)

    def policy(obs):
        apre, _ = mlp_forward(params, obs)
        return np.tanh(apre)

    p_grid = [float(p) for chunk in args.p_grid for p in chunk.split(",") if p]
    if not p_grid:
        p_grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    rows = bench.random_action_probe(policy, spec, p_grid, args.episodes,
                                     args.seed)
    out = args.out or "probe.csv"
    fileio.write_csv(out, ["p", "mean_return", "std_return"],
                     [[p, m, s] for p, m, s in rows])
    for p, m, s in rows:
        print(f"p={p:g} mean_return={m:.6g} std_return={s:.6g}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="varlab",
                                 description="multi-seed RL variance lab")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one seed from a config file")
    t.add_argument("config")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    b = sub.add_parser("bench", help="multi-preset multi-seed benchmark")
    b.add_argument("config")
    b.add_argument("--preset", action="append", default=[],
                   help="preset name(s), repeatable or comma-separated")
    b.add_argument("--env", action="append", default=[],
                   help="env name(s); defaults to the config's env")
    b.add_argument("--seeds", type=int, default=None,
                   help="number of seeds (0..N-1); defaults to the config")
    b.add_argument("--parallel", type=int, default=1)
    b.set_defaults(fn=cmd_bench)

    a = sub.add_parser("analyze", help="statistics over a run directory")
    a.add_argument("run_dir")
    a.add_argument("--what", choices=sorted(_ANALYSES), required=True)
    a.add_argument("--s-from", type=int, default=10)
    a.add_argument("--s-to", type=int, default=100)
    a.add_argument("--floor", type=float, default=1.0,
                   help="eval-score floor for the saturation stuck flag")
    a.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("probe", help="random-action probe of a saved policy")
    p.add_argument("policy")
    p.add_argument("env")
    p.add_argument("--p-grid", action="append", default=[])
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_probe)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
