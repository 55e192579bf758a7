"""
Command-line interface

    python -m app.cli solve X-n101-k25.vrp --variant ils-alpha --seed 0 --time-limit 60
    python -m app.cli bench suite.toml --output records.jsonl
    python -m app.cli generate data/desk --count 500 --kind tabular
    python -m app.cli train-tabular data/desk --kind gbt
    python -m app.cli train-gnn data/graph --epochs 5
    python -m app.cli label inst.vrp inst.sol --model models/gbt.npz
    python -m app.cli stats wilcoxon a.csv b.csv --alpha 0.05
    python -m app.cli report records.jsonl --group-by size
"""
from pathlib import Path
from typing import List, Optional
import argparse
import json
import sys

import numpy as np
import pandas as pd
import uvicorn

from app.config import resolve_solver_defaults, settings
from app.services.bench import load_suite, report_tables, run_suite, wilcoxon_one_tailed
from app.services.errors import EdgeSelectorError
from app.services.instance import load_instance, render_instance
from app.services.labeling import ThresholdRule
from app.services.metaheuristics import lookup_variant, run_variant
from app.services.records import BksRegistry, load_records, save_records
from app.services.selector_graph import GraphSelector, load_checkpoint, save_checkpoint
from app.services.selector_tabular import label_solution_tabular, load_tabular_model
from app.services.solution import read_solution, write_solution
from app.services import training
from app.utils.logging import logger, setup_logging

TABULAR_DATASET = "dataset.csv"


def _solve(args) -> int:
    instance = load_instance(args.instance)
    defaults = resolve_solver_defaults(args.config, {"granularity": args.gamma})
    cfg = lookup_variant(args.variant, instance.n_nodes).with_overrides(
        seed=args.seed,
        time_limit=args.time_limit,
        max_iterations=args.max_iterations,
        model_path=args.model,
        gamma=args.gamma if args.gamma is not None else defaults.granularity,
    )
    bks = args.bks
    if bks is None:
        registry = BksRegistry.load()
        bks = registry.get(instance.name) if instance.name in registry else None
    solution, record = run_variant(instance, cfg, bks=bks, defaults=defaults)
    if args.solution:
        write_solution(args.solution, solution)
    if args.output == "jsonl":
        sys.stdout.write(record.model_dump_json() + "\n")
    else:
        for k, route in enumerate(solution.route_lists(), start=1):
            sys.stdout.write(f"Route #{k}: {' '.join(map(str, route))}\n")
        sys.stdout.write(f"Cost {solution.cost}\n")
        if record.gap is not None:
            sys.stdout.write(f"Gap {record.gap:.3f}%\n")
    return 0


def _bench(args) -> int:
    suite = load_suite(args.suite)
    records = run_suite(suite, threads=args.threads, defaults=resolve_solver_defaults(args.config))
    output = args.output or suite.output
    if output:
        save_records(records, output)
    else:
        for record in records:
            sys.stdout.write(record.model_dump_json() + "\n")
    return 0


def _generate(args) -> int:
    out = Path(args.directory)
    defaults = resolve_solver_defaults(args.config)
    corpus = training.generate_corpus(args.count, (args.min_n, args.max_n), args.seed)
    if args.kind == "tabular":
        dataset = training.build_tabular_dataset(corpus, seed=args.seed, threads=args.threads, defaults=defaults)
        training.save_dataset(dataset, out / TABULAR_DATASET)
    elif args.kind == "graph":
        training.save_graph_dataset(training.build_graph_dataset(corpus, seed=args.seed, defaults=defaults), out)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for instance in corpus:
            (out / f"{instance.name}.vrp").write_text(render_instance(instance), encoding="utf-8")
    logger.info("corpus_written", directory=str(out), count=len(corpus), kind=args.kind)
    return 0


def _train_tabular(args) -> int:
    dataset = training.load_dataset(Path(args.dataset) / TABULAR_DATASET)
    train, validation = training.split_dataset(dataset, args.validation, args.seed)
    model_path = args.model or str(Path(settings.MODEL_DIR) / f"{args.kind}.npz")
    training.train_tabular(train, args.kind, model_path, seed=args.seed)
    model = load_tabular_model(model_path)
    probs = model.predict_proba(validation[list(training.FEATURE_COLUMNS)].to_numpy(dtype=np.float64))
    accuracy = float(((probs > 0.5).astype(int) == validation["label"].to_numpy()).mean())
    sys.stdout.write(json.dumps({"model": model_path, "validation_accuracy": accuracy,
                                 **training.class_ratio(dataset)}) + "\n")
    return 0


def _train_gnn(args) -> int:
    examples = training.load_graph_dataset(args.dataset)
    stages = training.curriculum_from_examples(examples, epochs=args.epochs)
    model = load_checkpoint(args.resume) if args.resume else None
    checkpoint_dir = Path(args.checkpoint_dir or settings.MODEL_DIR)
    model, metrics = training.train_convnet(
        stages, hidden=args.hidden, layers=args.layers, learning_rate=args.lr, seed=args.seed,
        model=model, checkpoint_dir=checkpoint_dir, metrics_path=checkpoint_dir / "metrics.csv",
    )
    save_checkpoint(model, checkpoint_dir / "convnet.pt")
    sys.stdout.write(metrics.to_string(index=False) + "\n")
    return 0


def _label(args) -> int:
    instance = load_instance(args.instance)
    solution = read_solution(args.solution, instance)
    defaults = resolve_solver_defaults(args.config, {"granularity": args.gamma})
    rng = np.random.default_rng(args.seed)
    if Path(args.model).suffix == ".pt":
        selector = GraphSelector(load_checkpoint(args.model), args.threshold, depot_truncate=defaults.depot_truncate)
        labeling = selector.label(solution)
    else:
        rule = ThresholdRule(args.rule, args.threshold, epsilon=defaults.threshold_epsilon,
                             acceptance=args.acceptance)
        labeling = label_solution_tabular(solution, load_tabular_model(args.model), rule,
                                          gamma=defaults.granularity, rng=rng)
    labeling.to_frame().to_csv(sys.stdout, index=False)
    return 0


def _column(path: str, column: str) -> List[float]:
    frame = pd.read_csv(path)
    if column not in frame.columns:
        raise EdgeSelectorError(f"{path} has no column '{column}'")
    return frame[column].astype(float).tolist()


def _stats(args) -> int:
    a, b = _column(args.a, args.column), _column(args.b, args.column)
    p_value, reject = wilcoxon_one_tailed(a, b, args.alpha)
    sys.stdout.write(json.dumps({"p_value": p_value, "reject": reject, "alpha": args.alpha, "n": len(a)}) + "\n")
    return 0


def _report(args) -> int:
    _, text = report_tables(load_records(args.records), args.group_by, args.csv)
    sys.stdout.write(text + "\n")
    return 0


def _serve(args) -> int:
    uvicorn.run("app.main:app", host=args.host or settings.API_HOST, port=args.port or settings.API_PORT,
                reload=settings.DEBUG)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edge-selector", description="Learned edge selectors for VRP local search")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="Run one variant on one instance")
    solve.add_argument("instance")
    solve.add_argument("--variant", default="ils-baseline")
    solve.add_argument("--seed", type=int, default=0)
    solve.add_argument("--time-limit", type=float, default=None)
    solve.add_argument("--max-iterations", type=int, default=None)
    solve.add_argument("--gamma", type=int, default=None, help="Granularity")
    solve.add_argument("--model", default=None, help="Selector model file")
    solve.add_argument("--config", default=None, help="TOML file with solver parameters")
    solve.add_argument("--bks", type=float, default=None)
    solve.add_argument("--solution", default=None, help="Write the best solution here")
    solve.add_argument("--output", choices=["jsonl", "text"], default="text")
    solve.set_defaults(handler=_solve)

    bench = sub.add_parser("bench", help="Run a benchmark manifest")
    bench.add_argument("suite")
    bench.add_argument("--output", default=None)
    bench.add_argument("--threads", type=int, default=None)
    bench.add_argument("--config", default=None, help="TOML file with solver parameters")
    bench.set_defaults(handler=_bench)

    generate = sub.add_parser("generate", help="Write a desk-scale corpus")
    generate.add_argument("directory")
    generate.add_argument("--count", type=int, default=500)
    generate.add_argument("--min-n", type=int, default=20)
    generate.add_argument("--max-n", type=int, default=100)
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--kind", choices=["instances", "tabular", "graph"], default="tabular")
    generate.add_argument("--threads", type=int, default=None)
    generate.add_argument("--config", default=None, help="TOML file with solver parameters")
    generate.set_defaults(handler=_generate)

    tabular = sub.add_parser("train-tabular", help="Train a GBT or FNN selector")
    tabular.add_argument("dataset")
    tabular.add_argument("--kind", choices=["gbt", "fnn"], default="gbt")
    tabular.add_argument("--model", default=None)
    tabular.add_argument("--validation", type=float, default=0.2)
    tabular.add_argument("--seed", type=int, default=0)
    tabular.set_defaults(handler=_train_tabular)

    gnn = sub.add_parser("train-gnn", help="Curriculum training of the ConvNet selector")
    gnn.add_argument("dataset")
    gnn.add_argument("--epochs", type=int, default=5)
    gnn.add_argument("--hidden", type=int, default=64)
    gnn.add_argument("--layers", type=int, default=4)
    gnn.add_argument("--lr", type=float, default=1e-3)
    gnn.add_argument("--seed", type=int, default=0)
    gnn.add_argument("--resume", default=None, help="Warm-start checkpoint")
    gnn.add_argument("--checkpoint-dir", default=None)
    gnn.set_defaults(handler=_train_gnn)

    label = sub.add_parser("label", help="Label the edges of a solution")
    label.add_argument("instance")
    label.add_argument("solution")
    label.add_argument("--model", required=True)
    label.add_argument("--rule", choices=["deterministic", "stochastic"], default="deterministic")
    label.add_argument("--threshold", type=float, default=0.8)
    label.add_argument("--acceptance", type=float, default=0.9)
    label.add_argument("--seed", type=int, default=0)
    label.add_argument("--gamma", type=int, default=None, help="Granularity")
    label.add_argument("--config", default=None, help="TOML file with solver parameters")
    label.set_defaults(handler=_label)

    stats = sub.add_parser("stats", help="Statistical comparisons")
    stats_sub = stats.add_subparsers(dest="test", required=True)
    wilcoxon = stats_sub.add_parser("wilcoxon", help="One-tailed signed-rank test that b improves on a")
    wilcoxon.add_argument("a")
    wilcoxon.add_argument("b")
    wilcoxon.add_argument("--alpha", type=float, default=0.05)
    wilcoxon.add_argument("--column", default="best_cost")
    wilcoxon.set_defaults(handler=_stats)

    report = sub.add_parser("report", help="Gap tables from run records")
    report.add_argument("records")
    report.add_argument("--group-by", choices=["size", "distribution", "variant", "instance"], default="size")
    report.add_argument("--csv", default=None)
    report.set_defaults(handler=_report)

    serve = sub.add_parser("serve", help="Start the HTTP API")
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    serve.set_defaults(handler=_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        setup_logging(args.log_level)
    try:
        return args.handler(args)
    except (EdgeSelectorError, FileNotFoundError) as e:
        logger.error("command_failed", command=args.command, error=str(e))
        sys.stderr.write(f"error: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
