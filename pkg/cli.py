"""Command-line surface: ``run`` experiments, ``verify`` the reward theory, ``bench`` the graph."""

import argparse
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from agents import run_element
from config import OUTPUT_DIR_ENV, ExperimentConfig, load_config
from encoder import build_encoder, make_episode
from entropy import (
    KernelConfig,
    kde_entropy,
    kde_entropy_truncated,
    kernel_sum_gap,
    knn_entropy,
    renyi2_truncated,
    renyi_matrix_entropy,
    threshold_separated_states,
)
from envs import MazeEnv, PointMassEnv, load_bundled_maze
from errors import ConfigError, ElementError, MazeParseError
from knn_graph import (
    KnnGraph,
    SearchConfig,
    SearchStats,
    brute_force_knn,
    edge_accuracy,
    gnns_search,
    gnns_search_batch,
    graph_insert,
    graph_new,
    graph_save,
    recall_at_k,
    smooth_random_walk,
)
from metrics import angular_coverage, emit_csv, emit_endpoints, emit_heatmap, radial_extent
from rewards import decomposition_loss, optimal_reward_closed_form, upper_bound_loss

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_environment(cfg: ExperimentConfig):
    if cfg.environment == "maze":
        env = MazeEnv(load_bundled_maze(cfg.maze_path))
    else:
        env = PointMassEnv(cfg.pointmass)
    return env, build_encoder(cfg.encoder, env.obs_dim, env.state_dim)


def _run_seed(cfg: ExperimentConfig, seed: int, out_dir: str) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env, encoder = build_environment(cfg)
    log = run_element(
        env,
        encoder,
        cfg.reward,
        cfg.schedule,
        cfg.estimator,
        seed,
        agent_cfg=cfg.agent,
        search_cfg=cfg.search,
        eval_cfg=cfg.evaluation,
    )
    artifacts = log.artifacts

    emit_csv(log, out / "run.csv")
    emit_heatmap(np.log1p(artifacts.coverage.counts), out / "coverage.pgm")
    if isinstance(artifacts.memory, KnnGraph):
        (out / "graph.knng").write_bytes(graph_save(artifacts.memory))
    else:
        logger.info("Lifelong memory is a FIFO queue; no graph file written")
    for episode, (ep_grid, l_grid) in sorted(artifacts.reward_maps.items()):
        emit_heatmap(ep_grid, out / f"reward_ep_{episode}.pgm")
        emit_heatmap(l_grid, out / f"reward_l_{episode}.pgm")
    if cfg.environment == "pointmass":
        emit_endpoints(artifacts.endpoints, out / "endpoints.csv")
        if artifacts.clamped_actions:
            logger.warning("Seed %d: %d point-mass actions were clamped", seed, artifacts.clamped_actions)

    last = log.records[-1]
    summary = {
        "seed": seed,
        "episodes": len(log),
        "steps": last.steps,
        "unique_cells": last.unique_cells,
        "graph_size": last.graph_size,
        "mean_entropy_eval": float(np.nanmean(log.to_frame()["entropy_eval"])),
    }
    if cfg.environment == "pointmass":
        summary["max_radius"] = artifacts.max_radius
        summary["radial_extent"] = radial_extent(artifacts.endpoints)
        summary["angular_coverage"] = angular_coverage(artifacts.endpoints)
    return summary


def cmd_run(config_path: str) -> int:
    try:
        cfg = load_config(config_path)
        build_environment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, MazeParseError) as exc:
        print(f"config error: maze_path: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    root = Path(cfg.output_dir)
    if len(cfg.seeds) == 1:
        targets = [(cfg.seeds[0], str(root))]
    else:
        targets = [(seed, str(root / f"seed_{seed}")) for seed in cfg.seeds]

    try:
        if cfg.workers > 1 and len(targets) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                futures = [pool.submit(_run_seed, cfg, seed, out) for seed, out in targets]
                summaries = [f.result() for f in futures]
        else:
            summaries = [_run_seed(cfg, seed, out) for seed, out in targets]
    except (ElementError, OSError) as exc:
        logger.error("Run failed: %s", exc)
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:
        logger.exception("Run crashed")
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    summary = pd.DataFrame(summaries)
    if len(summaries) > 1:
        root.mkdir(parents=True, exist_ok=True)
        summary.to_csv(root / "summary.csv", index=False, float_format="%.17g")
    print(summary.to_string(index=False))
    return EXIT_OK


@dataclass
class CheckResult:
    check: str
    passed: bool
    value: float
    detail: str


def _random_episode_set(rng: np.random.Generator, n_states=30, n_episodes=10, length=20):
    """Episodes over a shared pool of tabular states; no state repeats inside one episode."""
    pool = rng.normal(size=(n_states, 2))
    episodes = []
    for _ in range(n_episodes):
        keys = rng.choice(n_states, size=length, replace=False)
        episodes.append((make_episode(pool[keys], keys=[int(k) for k in keys]), float(rng.uniform(0.5, 3.0))))
    return episodes


def _perturbations_beating(best, episodes, rng, n_trials=1000, scale=0.05) -> int:
    base = upper_bound_loss(best, episodes)
    beaten = 0
    for _ in range(n_trials):
        trial = {key: value + rng.normal(0.0, scale) for key, value in best.items()}
        if upper_bound_loss(trial, episodes) < base - 1e-12:
            beaten += 1
    return beaten


def _max_gradient(best, episodes, h=1e-4) -> float:
    grad = 0.0
    for key in best:
        up, down = dict(best), dict(best)
        up[key] += h
        down[key] -= h
        grad = max(grad, abs(upper_bound_loss(up, episodes) - upper_bound_loss(down, episodes)) / (2 * h))
    return grad


def _check_optimality(rng, inject_fault: bool, n_instances=50) -> List[CheckResult]:
    scale = 2.0 if inject_fault else 1.0
    beaten, grad, identity_gap = 0, 0.0, 0.0
    for _ in range(n_instances):
        episodes = _random_episode_set(rng)
        best = optimal_reward_closed_form(episodes, denominator_scale=scale)
        beaten += _perturbations_beating(best, episodes, rng)
        grad = max(grad, _max_gradient(best, episodes))

        rewards = {key: float(rng.uniform(0.0, 1.0)) for key in best}
        T = episodes[0][0].length
        variance = np.mean([np.var([rewards[k] for k in ep.keys]) * T * T for ep, _ in episodes])
        bound = upper_bound_loss(rewards, episodes)
        identity_gap = max(identity_gap, abs(bound - (decomposition_loss(rewards, episodes) + variance)))

    return [
        CheckResult("closed_form_optimal", beaten == 0, float(beaten),
                    f"{beaten} of {n_instances}x1000 perturbations beat it"),
        CheckResult("closed_form_gradient", grad < 1e-8, grad, f"max |dL/dr| over {n_instances} instances"),
        CheckResult("upper_bound_identity", identity_gap < 1e-10, identity_gap, "max |U - (L + E[T^2 Var])|"),
    ]


def _check_variable_length() -> CheckResult:
    short = make_episode(np.arange(10.0), keys=["s"] + [f"a{i}" for i in range(9)])
    long = make_episode(np.arange(20.0), keys=["s"] + [f"b{i}" for i in range(19)])
    value = optimal_reward_closed_form([(short, 2.0), (long, 8.0)], variable_length=True)["s"]
    return CheckResult("variable_length_closed_form", abs(value - 0.36) < 1e-12, value, "expected 0.36")


def _check_estimators() -> List[CheckResult]:
    kernel = KernelConfig(1.0)
    pair = np.array([[0.0], [1.0]])
    half = KernelConfig(0.5)
    kde_pair = float(kde_entropy(pair, half))
    knn_pair = float(knn_entropy(pair, 1))
    renyi_pair = float(renyi_matrix_entropy(pair, 2.0, half))
    same = np.zeros((6, 3))
    kde_same = float(kde_entropy(same, kernel))
    renyi_same = float(renyi_matrix_entropy(same, 1.001, kernel))
    far = np.arange(8.0).reshape(-1, 1) * 100.0
    renyi_far = float(renyi_matrix_entropy(far, 1.001, kernel))
    kde_expected = -math.log((1.0 + math.exp(-1.0)) / 2.0)
    renyi_expected = -math.log2((1.0 + math.exp(-2.0)) / 2.0)
    return [
        CheckResult("kde_two_points", abs(kde_pair - kde_expected) < 1e-6, kde_pair, f"expected {kde_expected:.7f}"),
        CheckResult("knn_two_points", abs(knn_pair - 1.9635101) < 1e-6, knn_pair, "expected 1.9635101"),
        CheckResult("renyi_two_points", abs(renyi_pair - renyi_expected) < 1e-6, renyi_pair,
                    f"expected {renyi_expected:.7f}"),
        CheckResult("kde_identical_states", abs(kde_same) < 1e-12, kde_same, "expected 0"),
        CheckResult("renyi_identical_states", abs(renyi_same) < 1e-9, renyi_same, "expected 0"),
        CheckResult("renyi_separated_states", abs(renyi_far - 3.0) < 1e-9, renyi_far, "expected log2(8) = 3"),
    ]


def _check_truncation(rng, n_configs=100, epsilon=1e-6) -> List[CheckResult]:
    worst_gap, kde_slack, renyi_slack, unmet = 0.0, 0.0, 0.0, 0
    for _ in range(n_configs):
        states, k, kernel = threshold_separated_states(rng, epsilon)
        gap, ok = kernel_sum_gap(states, k, kernel, epsilon)
        if not ok:
            unmet += 1
            continue
        worst_gap = max(worst_gap, gap)
        kde_diff = abs(float(kde_entropy(states, kernel)) - float(kde_entropy_truncated(states, k, kernel)))
        kde_slack = max(kde_slack, kde_diff - gap)
        renyi_diff = abs(float(renyi_matrix_entropy(states, 2.0, kernel)) - float(renyi2_truncated(states, k, kernel)))
        renyi_slack = max(renyi_slack, renyi_diff + math.log2(1.0 - gap))

    tight, _ = kernel_sum_gap(rng.normal(size=(4, 2)), 3, KernelConfig(1.0), epsilon)
    return [
        CheckResult("gap_below_epsilon", unmet == 0 and worst_gap <= epsilon, worst_gap,
                    f"max gap over {n_configs} configurations, {unmet} missed the threshold"),
        CheckResult("truncated_kde_within_gap", kde_slack <= 1e-12, kde_slack, "max |H - H_knn| - gap"),
        CheckResult("truncated_renyi2_within_gap", renyi_slack <= 1e-12, renyi_slack,
                    "max |H2 - H2_knn| + log2(1 - gap)"),
        CheckResult("gap_zero_at_k_plus_one", tight == 0.0, tight, "N = k + 1"),
    ]


def _check_graph(rng) -> List[CheckResult]:
    results = []
    g = graph_new(3, 0)
    for p in rng.uniform(size=(50, 2)):
        graph_insert(g, p, SearchConfig())
    exhaustive = recall_at_k(g, rng.uniform(size=(50, 2)), SearchConfig(R1=50, R2=2000))
    results.append(CheckResult("exhaustive_recall", exhaustive == 1.0, exhaustive, "50 nodes, R1=50, R2=2000"))

    cfg = SearchConfig(R1=20, R2=20, depth=2)
    for dim in (2, 8):
        g = graph_new(3, dim)
        walk = smooth_random_walk(10_000, dim, rng)
        for i, p in enumerate(walk, start=1):
            graph_insert(g, p, cfg)
            if dim == 2 and i == 2000:
                accuracy = edge_accuracy(g)
                results.append(CheckResult(f"edge_accuracy_d{dim}", accuracy >= 0.7, accuracy,
                                           "N=2000, fraction of exact kNN edges, need >= 0.7"))
        degrees_ok = all(len(node.out_edges) == g.k for node in g.nodes())
        results.append(CheckResult(f"degree_invariant_d{dim}", degrees_ok, float(g.k), "every node has k out-edges"))

        queries = walk[rng.integers(0, len(walk), size=1000)] + rng.normal(scale=0.1, size=(1000, dim))
        stats = SearchStats()
        gnns_search_batch(g, queries, cfg, stats)
        bound = cfg.R1 * cfg.R2 * g.k + g.k
        touched = int(stats.touched.max())
        results.append(CheckResult(f"touched_bound_d{dim}", touched <= bound, float(touched), f"bound {bound}"))

        recall = recall_at_k(g, queries, cfg)
        results.append(CheckResult(f"recall_at_3_d{dim}", recall >= 0.8, recall,
                                   "N=10^4 random walk, 1000 queries, need >= 0.8"))
    return results


def run_checks(inject_fault: bool = False, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    results.extend(_check_optimality(rng, inject_fault))
    results.append(_check_variable_length())
    results.extend(_check_estimators())
    results.extend(_check_truncation(rng))
    results.extend(_check_graph(rng))
    return results


def cmd_verify(inject_fault: bool = False, seed: int = 0) -> int:
    if inject_fault:
        logger.warning("Fault injection enabled: closed-form denominator scaled by 2")
    results = run_checks(inject_fault, seed)
    table = pd.DataFrame([asdict(r) for r in results])
    with pd.option_context("display.max_colwidth", 80, "display.width", 160):
        print(table.to_string(index=False))
    failures = [r.check for r in results if not r.passed]
    if failures:
        print(f"FAILED: {', '.join(failures)}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def bench_sizes(n_points: int) -> List[int]:
    sizes = [10 ** e for e in range(3, int(math.log10(n_points)) + 1)]
    return [s for s in sizes if s <= n_points]


def _time_per_query(fn, queries) -> float:
    start = time.perf_counter()
    for q in queries:
        fn(q)
    return (time.perf_counter() - start) / len(queries)


def run_bench(n_points: int, dim: int, k: int, R1: int, R2: int, n_queries: int = 100, seed: int = 0) -> pd.DataFrame:
    if n_points < 1000:
        raise ConfigError(f"must be >= 1000, got {n_points}", field="n")
    rng = np.random.default_rng(seed)
    cfg = SearchConfig(R1=R1, R2=R2)
    stream = smooth_random_walk(n_points, dim, rng)
    g = graph_new(k, seed)
    rows = []
    checkpoints = set(bench_sizes(n_points))
    for i, p in enumerate(stream):
        graph_insert(g, p, cfg)
        size = i + 1
        if size not in checkpoints:
            continue
        points = g.points
        queries = points[rng.integers(0, size, size=n_queries)] + rng.normal(scale=0.1, size=(n_queries, dim))
        gnns_search(g, queries[0], cfg)  # compile outside the timed region
        graph_s = _time_per_query(lambda q: gnns_search(g, q, cfg), queries)
        brute_s = _time_per_query(lambda q: brute_force_knn(points, q, k), queries)
        stats = SearchStats()
        gnns_search_batch(g, queries, cfg, stats)
        rows.append(
            {
                "n": size,
                "graph_us": graph_s * 1e6,
                "brute_us": brute_s * 1e6,
                "speedup": brute_s / graph_s,
                "touched_max": int(stats.touched.max()),
                "touched_bound": R1 * R2 * k + k,
                "recall": recall_at_k(g, queries, cfg),
            }
        )
        logger.info("bench n=%d: graph %.1fus, brute %.1fus", size, graph_s * 1e6, brute_s * 1e6)
    return pd.DataFrame(rows)


def cmd_bench(n_points: int, dim: int, k: int, R1: int, R2: int, out: Optional[str] = None,
              n_queries: int = 100, seed: int = 0) -> int:
    try:
        table = run_bench(n_points, dim, k, R1, R2, n_queries, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ElementError as exc:
        print(f"bench failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    out_dir = Path(out or os.getenv(OUTPUT_DIR_ENV) or "runs/bench")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "bench.csv", index=False, float_format="%.17g")
    except OSError as exc:
        print(f"cannot write {out_dir / 'bench.csv'}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(table.to_string(index=False))
    if (table["touched_max"] > table["touched_bound"]).any():
        print("touched-node bound exceeded", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="element", description="Episodic entropy plus lifelong novelty rewards")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment from a JSON config")
    run.add_argument("config", help="Path to the experiment config")

    verify = sub.add_parser("verify", help="Check reward optimality, estimators and graph search")
    verify.add_argument("--inject-fault", action="store_true", help="Scale the closed-form denominator (must fail)")
    verify.add_argument("--seed", type=int, default=0)

    bench = sub.add_parser("bench", help="Graph search vs brute force on a random-walk stream")
    bench.add_argument("--n", type=int, default=100_000, help="Number of stream points")
    bench.add_argument("--dim", type=int, default=2)
    bench.add_argument("--k", type=int, default=3)
    bench.add_argument("--r1", type=int, default=20)
    bench.add_argument("--r2", type=int, default=20)
    bench.add_argument("--queries", type=int, default=100)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", default=None, help="Directory for bench.csv")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "verify":
        return cmd_verify(args.inject_fault, args.seed)
    return cmd_bench(args.n, args.dim, args.k, args.r1, args.r2, args.out, args.queries, args.seed)
