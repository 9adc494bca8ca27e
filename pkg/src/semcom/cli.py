"""Command-line entry points: train, curves, verify, kb."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import comm, kb as kbmod
from .gflownet import (
    AddEdge,
    FlowNet,
    RewardSpec,
    TrainConfig,
    apply_action,
    initial_state,
    reward_distribution_exact,
    terminal_distribution_exact,
    total_variation,
    train_structure,
)
from .harness import (
    ExperimentConfig,
    PLOT_SCRIPT,
    load_artifacts,
    run_bits_vs_error,
    run_error_vs_crossover,
    save_artifacts,
    train_pipeline,
)
from .nn import Mlp, gradient_check
from .worldmodel import Dataset, WeightedSem, Dag, assign_weights, is_acyclic, sample_er_graph, sample_observations


def _load_config(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = ExperimentConfig.load(path)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    artifacts, report = train_pipeline(cfg)
    save_artifacts(artifacts, out)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
        fh.write("\n")
    print(f"trained; report and checkpoints in {out}")
    if "chance_constraint" in report:
        cc = report["chance_constraint"]
        status = "PASS" if cc["satisfied"] else "FAIL"
        print(
            f"chance constraint at p={cc['channel_p']:g}: reliability "
            f"{cc['reliability']:.4f} vs target {cc['target']:.4f} [{status}]"
        )
    return 0


def _cmd_curves(args) -> int:
    cfg = _load_config(args)
    ckpt = Path(args.checkpoints or "runs/train")
    if not (ckpt / "artifacts.json").exists():
        raise FileNotFoundError(f"no trained artifacts in {ckpt}; run `semcom train` first")
    artifacts = load_artifacts(ckpt)
    if args.config or args.seed is not None:
        artifacts.config = cfg
    out = Path(args.out or "runs/curves")
    out.mkdir(parents=True, exist_ok=True)
    run_error_vs_crossover(artifacts.config, artifacts, out_dir=out)
    result = run_bits_vs_error(artifacts.config, artifacts, out_dir=out)
    with open(out / "plot.py", "w", encoding="utf-8") as fh:
        fh.write(PLOT_SCRIPT)
    summary = result["summary"]
    print(f"curves written to {out}")
    print(
        f"bits ratio at {summary['task_events']} events, "
        f"p={summary['task_channel_p']:g}: {summary['bits_ratio']:.2f}x "
        f"(semantic error {summary['semantic_error']:.4f}, "
        f"classical error {summary['classical_error']:.4f})"
    )
    return 0


def _check(name: str, ok: bool, detail: str, failures: list) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    if not ok:
        failures.append(name)


def _cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    failures: list[str] = []

    # two-node closed form: empty graph vs the one-edge class at reward 3:1
    def toy_reward(adj):
        return 3.0 if adj.sum() == 0 else 0.5

    spec2 = RewardSpec(reward_fn=toy_reward, data=Dataset(np.zeros((3, 2))))
    net2 = FlowNet.create(2, hidden=(32, 32), rng=np.random.default_rng(seed))
    net2, _ = train_structure(
        net2, spec2, TrainConfig(iterations=400, batch_size=16, learning_rate=0.02, seed=seed)
    )
    dist2 = terminal_distribution_exact(net2)
    empty_key = initial_state(2).adj.tobytes()
    p_empty = dist2.get(empty_key, 0.0)
    _check(
        "two-node closed form",
        abs(p_empty - 0.75) <= 0.03,
        f"P(empty)={p_empty:.4f} target 0.75 +/- 0.03",
        failures,
    )

    # three-node enumeration: trained policy vs normalized reward
    rng = np.random.default_rng(seed)
    dag3 = sample_er_graph(3, 0.5, rng)
    sem3 = assign_weights(dag3, rng=rng)
    data3 = sample_observations(sem3, 120, rng)
    spec3 = RewardSpec(data=data3, dl_coeff=0.1)
    net3 = FlowNet.create(3, rng=np.random.default_rng(seed + 1))
    net3, _ = train_structure(
        net3, spec3, TrainConfig(iterations=1500, batch_size=16, learning_rate=0.01, seed=seed)
    )
    tv = total_variation(
        terminal_distribution_exact(net3), reward_distribution_exact(spec3, 3)
    )
    _check("three-node enumeration", tv <= 0.05, f"TV={tv:.4f} target <= 0.05", failures)

    # gradient fidelity on random smooth nets
    worst = 0.0
    for s in range(20):
        g = np.random.default_rng(1000 + s)
        net = Mlp.create((4, 8, 8, 2), rng=g)
        x = g.normal(size=4)
        w = g.normal(size=2)
        report = gradient_check(net, lambda y: float(np.tanh(y) @ w), x)
        worst = max(worst, report.max_rel_error)
    _check(
        "gradient fidelity", worst <= 1e-4, f"max rel err {worst:.2e} target <= 1e-4", failures
    )

    # acyclicity mask fuzz against the DAG checker
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(1000):
        state = initial_state(5)
        while True:
            valid = state.valid_edges()
            if not valid or rng.random() < 0.25:
                break
            state = apply_action(state, AddEdge(*valid[rng.integers(len(valid))]))
            if not is_acyclic(state.adj):
                ok = False
                break
        if not ok:
            break
    _check("acyclicity mask fuzz", ok, "1000 random action sequences stay acyclic", failures)

    # causal-influence hand value
    kl = comm.kl_divergence(np.array([0.9, 0.1]), np.array([0.5, 0.5]))
    _check(
        "KL hand value",
        abs(kl - 0.3681) <= 1e-4,
        f"KL={kl:.6f} target 0.3681 +/- 1e-4",
        failures,
    )

    if failures:
        print(f"{len(failures)} check(s) failed: {', '.join(failures)}")
        return 1
    print("all checks passed")
    return 0


def _cmd_kb(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"knowledge base file not found: {path}")
    kb = kbmod.load_kb(path)
    print(f"entities:   {len(kb.entities)}")
    print(f"predicates: {len(kb.predicates)}")
    print(f"relations:  {len(kb.relations)}")
    print(f"facts:      {len(kb.facts)}")
    print(f"formulas:   {len(kb.formulas)}")
    for f in kb.formulas:
        print(f"  {kbmod.formula_to_prefix(f)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        kbmod.save_kb(kb, out / path.name)
        print(f"re-serialized to {out / path.name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semcom",
        description="Semantic communication simulator: train, evaluate, verify.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--out", type=str, default=None, help="output directory")

    p_train = sub.add_parser("train", help="run the training pipeline")
    common(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_curves = sub.add_parser("curves", help="run both experiments from checkpoints")
    common(p_curves)
    p_curves.add_argument(
        "--checkpoints", type=str, default=None, help="directory holding trained artifacts"
    )
    p_curves.set_defaults(func=_cmd_curves)

    p_verify = sub.add_parser("verify", help="run the enumeration and gradient oracles")
    common(p_verify)
    p_verify.set_defaults(func=_cmd_verify)

    p_kb = sub.add_parser("kb", help="inspect a serialized knowledge base")
    common(p_kb)
    p_kb.add_argument("path", type=str, help="knowledge base JSON file")
    p_kb.set_defaults(func=_cmd_kb)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
