"""Command-line driver: train, attack, bench, finetune and report.

Every output file carries the resolved experiment configuration and the
model content hash, so two outputs with equal provenance are byte-identical.
Exit codes: 0 success, 2 usage or configuration error (including missing
input files), 3 unreadable data or model file, 4 numerical or attack failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import attacks
from .attacks import AttackConfig
from .data import DATA_DIR_ENV, resolve_dataset, split
from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateGradientError,
    DimensionError,
    ModelFormatError,
    TrainingError,
)
from .models import load_model, save_model
from .robustness import (
    AttackSpec,
    RobustnessReport,
    compare_attacks,
    evaluate_robustness,
)
from .training import (
    FinetuneConfig,
    TrainConfig,
    finetune_experiment,
    train,
    train_config_from_metadata,
    trace_to_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("deepfool")


@dataclass
class ExperimentConfig:
    """All knobs of one invocation, embedded into every output.

    ``threads`` is deliberately absent: results do not depend on it.
    """

    command: str
    data: Optional[str] = None
    data_dir: Optional[str] = None
    split: Optional[list] = None
    split_seed: int = 0
    model: Optional[str] = None
    arch: Optional[str] = None
    seed: int = 0
    outputs: dict = field(default_factory=dict)
    attacks: list = field(default_factory=list)
    overshoot: float = 0.02
    p: str = "2"
    max_iterations: int = 50
    fgs_epsilon: Optional[float] = None
    fgs_target_rate: float = 0.9
    fgs_epsilon_max: Optional[float] = None
    fgs_grid_steps: int = 100
    train: Optional[dict] = None
    finetune: Optional[dict] = None
    limit: Optional[int] = None
    subset: Optional[str] = None
    index: Optional[int] = None
    include_misclassified: bool = False
    timing: bool = False

    def as_dict(self):
        return asdict(self)


def dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _with_header(csv_text, head):
    return "# " + json.dumps(head, sort_keys=True) + "\n" + csv_text


# -- argument plumbing -------------------------------------------------------------


def _fractions(text):
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}") from None
    if len(values) != 2:
        raise argparse.ArgumentTypeError("split takes TRAIN,TEST fractions")
    return values


def _norm_order(text):
    if text in ("inf", "infinity"):
        return "inf"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad norm order {text!r}") from None
    return f"{value:g}"


def _add_data_args(p, required=True):
    p.add_argument("--data", required=required,
                   help="mnist | idx:IMAGES,LABELS | csv:PATH | blobs[:k=v,...]")
    p.add_argument("--data-dir", help=f"MNIST directory (default ${DATA_DIR_ENV})")
    p.add_argument("--split", type=_fractions, default=[0.8, 0.2],
                   help="TRAIN,TEST fractions for sources without a test split")
    p.add_argument("--split-seed", type=int, default=0)


def _add_attack_args(p):
    p.add_argument("--eta", type=float, default=0.02, help="overshoot (default 0.02)")
    p.add_argument("--p", type=_norm_order, default="2", help="norm order, 1..inf")
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--eps", type=float, help="fixed FGS epsilon (default: search)")
    p.add_argument("--target-rate", type=float, default=0.9)
    p.add_argument("--eps-max", type=float)
    p.add_argument("--grid-steps", type=int, default=100)


def build_parser():
    parser = argparse.ArgumentParser(prog="deepfool", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier")
    _add_data_args(p)
    p.add_argument("--arch", required=True, help="fc:200,100,10 or affine:10")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--trace", help="training trace CSV (default OUT.trace.csv)")

    p = sub.add_parser("attack", help="attack a single input")
    p.add_argument("--model", required=True)
    _add_data_args(p, required=False)
    p.add_argument("--subset", choices=("train", "test", "all"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--input", help=".npy file with one input (instead of --data)")
    p.add_argument("--attack", default="deepfool",
                   choices=("deepfool", "fgs", "penalized_oracle"))
    _add_attack_args(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("bench", help="robustness of a model under several attacks")
    p.add_argument("--model", required=True)
    _add_data_args(p)
    p.add_argument("--attack", action="append", dest="attacks",
                   help="attack spec, repeatable (default: deepfool and fgs)")
    _add_attack_args(p)
    p.add_argument("--limit", type=int, help="evaluate the first N test samples")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--include-misclassified", action="store_true")
    p.add_argument("--timing", action="store_true",
                   help="record wall times (outputs then differ between runs)")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("finetune", help="fine-tune on adversarial examples")
    p.add_argument("--model", required=True)
    _add_data_args(p)
    p.add_argument("--attack", default="deepfool", choices=("deepfool", "fgs", "none"))
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr-factor", type=float, default=0.5)
    p.add_argument("--eval-size", type=int, default=500)
    p.add_argument("--control", action="store_true",
                   help="also fine-tune on the clean data")
    p.add_argument("--seed", type=int, default=0)
    _add_attack_args(p)
    p.add_argument("--out", required=True, help="fine-tuned model file")
    p.add_argument("--trace", help="trace CSV (default OUT.trace.csv)")

    p = sub.add_parser("report", help="summarize report files")
    p.add_argument("reports", nargs="+", help="report .json or .csv files")
    p.add_argument("--out", help="write the summary JSON here")
    return parser


def _attack_config(args):
    return AttackConfig(
        overshoot=args.eta,
        max_iterations=args.max_iter,
        p=float(args.p),
    )


def _attack_spec(text, args):
    return AttackSpec.parse(
        text,
        config=_attack_config(args),
        **({"epsilon": args.eps} if args.eps is not None and text == "fgs" else {}),
        target_rate=args.target_rate,
        epsilon_max=args.eps_max,
        steps=args.grid_steps,
    )


def _base_config(args):
    cfg = ExperimentConfig(command=args.command)
    if getattr(args, "data", None):
        cfg.data = args.data
        cfg.data_dir = args.data_dir
        cfg.split = list(args.split)
        cfg.split_seed = args.split_seed
    if hasattr(args, "eta"):
        cfg.overshoot = args.eta
        cfg.p = args.p
        cfg.max_iterations = args.max_iter
        cfg.fgs_epsilon = args.eps
        cfg.fgs_target_rate = args.target_rate
        cfg.fgs_epsilon_max = args.eps_max
        cfg.fgs_grid_steps = args.grid_steps
    return cfg


def _splits(args):
    data, test = resolve_dataset(args.data, args.data_dir)
    if test is None:
        data, test = split(data, args.split, seed=args.split_seed)
    return data, test


# -- subcommands -------------------------------------------------------------------


def cmd_train(args):
    cfg = _base_config(args)
    train_set, test_set = _splits(args)
    tcfg = TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        init_scale=args.init_scale,
    )
    trace_path = args.trace or args.out + ".trace.csv"
    cfg.arch, cfg.seed, cfg.train = args.arch, args.seed, asdict(tcfg)
    cfg.outputs = {"model": args.out, "trace": trace_path}
    model, trace = train(args.arch, train_set, tcfg, test_set)
    model.metadata["experiment"] = cfg.as_dict()
    save_model(model, args.out)
    head = {"experiment": cfg.as_dict(), "model_hash": model.content_hash()}
    _write(trace_path, _with_header(trace_to_csv(trace), head))
    last = trace[-1] if trace else {}
    print(dump_json({
        "model": args.out,
        "model_hash": model.content_hash(),
        "train_acc": last.get("train_acc"),
        "test_acc": last.get("test_acc"),
    }), end="")
    return EXIT_OK


def cmd_attack(args):
    cfg = _base_config(args)
    model = load_model(args.model)
    cfg.model = args.model
    if args.input:
        path = Path(args.input)
        if not path.exists():
            raise FileNotFoundError(f"input file not found: {path}")
        x = np.load(path).astype(np.float64).reshape(-1)
        y = None
        cfg.subset, cfg.index = "file:" + args.input, None
        pool = None
    elif args.data:
        train_set, test_set = _splits(args)
        pool = {"train": train_set, "test": test_set}.get(args.subset)
        if pool is None:
            pool, _ = resolve_dataset(args.data, args.data_dir)
        if not 0 <= args.index < len(pool):
            raise ConfigError(f"index {args.index} outside [0, {len(pool)})")
        x, y = pool.x[args.index], int(pool.y[args.index])
        cfg.subset, cfg.index = args.subset, args.index
    else:
        raise ConfigError("attack needs --data or --input")
    cfg.attacks = [args.attack]
    out = Path(args.out_dir)
    cfg.outputs = {
        "adversarial": str(out / "adversarial.npy"),
        "perturbation": str(out / "perturbation.npy"),
        "record": str(out / "attack.json"),
    }
    acfg = _attack_config(args)
    extra = {}
    if args.attack == "deepfool":
        res = attacks.deepfool(model, x, acfg)
    elif args.attack == "penalized_oracle":
        res = attacks.penalized_oracle(model, x, cfg=acfg)
    else:
        label = y if y is not None else int(model.predict(x))
        eps = args.eps
        if eps is None:
            if pool is None:
                raise ConfigError("fgs on a raw input needs --eps")
            spec = _attack_spec("fgs", args)
            search = attacks.fgs_epsilon_search(
                model, pool, spec.target_rate,
                spec.epsilon_max or pool.dynamic_range(), spec.steps,
            )
            eps = search.epsilon
            extra["epsilon_search"] = {"reached": search.reached, "rate": search.rate}
        res = attacks.fgs_attack(model, x, label, eps)
        extra["epsilon"] = eps
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "adversarial.npy", res.adversarial)
    np.save(out / "perturbation.npy", res.perturbation)
    record = {
        "experiment": cfg.as_dict(),
        "model_hash": model.content_hash(),
        "attack": args.attack,
        "p": args.p,
        "true_label": y,
        "original_label": res.original_label,
        "adversarial_label": res.adversarial_label,
        "fooled": res.fooled,
        "iterations": res.iterations,
        "overshoot": res.overshoot,
        "norm2_raw": res.norm2_raw,
        "norm2_overshoot": res.norm2_overshoot,
        "norm_inf_raw": res.norm_inf_raw,
        "norm_inf_overshoot": res.norm_inf_overshoot,
        "x_norm2": float(np.linalg.norm(x)),
        **extra,
    }
    _write(out / "attack.json", dump_json(record))
    print(dump_json({k: record[k] for k in (
        "original_label", "adversarial_label", "fooled", "iterations", "norm2_raw")}),
        end="")
    return EXIT_OK


def _summary_rows(reports, comparisons):
    cols = ("attack", "n_attacked", "n_failed", "rho_adv", "rho_adv_inf",
            "fooling_rate", "mean_iterations", "mean_ratio", "median_ratio")
    lines = [",".join(cols)]
    for i, rep in enumerate(reports):
        agg = rep.aggregates
        name = rep.records[0].attack if rep.records else rep.metadata["attack"]["name"]
        comp = comparisons[i - 1] if i else None
        row = [
            name,
            agg["n_attacked"],
            agg["n_failed"],
            agg["rho_adv"],
            agg["rho_adv_inf"],
            agg["fooling_rate"],
            agg["mean_iterations"],
            comp["mean_ratio"] if comp else 1.0,
            comp["median_ratio"] if comp else 1.0,
        ]
        lines.append(",".join(v if isinstance(v, str) else repr(v) for v in row))
    return "\n".join(lines) + "\n"


def cmd_bench(args):
    cfg = _base_config(args)
    model = load_model(args.model)
    cfg.model = args.model
    _, test_set = _splits(args)
    if args.limit is not None:
        if args.limit < 1:
            raise ConfigError("--limit must be >= 1")
        test_set = test_set.subset(np.arange(min(args.limit, len(test_set))))
    cfg.limit = args.limit
    cfg.include_misclassified = args.include_misclassified
    cfg.timing = args.timing
    texts = args.attacks or ["deepfool", "fgs"]
    specs = [_attack_spec(t, args) for t in texts]
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate attacks requested: {labels}")
    cfg.attacks = texts
    out = Path(args.out_dir)
    cfg.outputs = {"dir": str(out)}
    head = {"experiment": cfg.as_dict(), "model_hash": model.content_hash()}
    reports = []
    for spec in specs:
        log.info("running %s on %d samples", spec.label, len(test_set))
        rep = evaluate_robustness(
            model, test_set, spec,
            exclude_misclassified=not args.include_misclassified,
            threads=args.threads, timing=args.timing,
            metadata={"experiment": cfg.as_dict()},
        )
        _write(out / f"report_{spec.label}.json", rep.to_json())
        _write(out / f"report_{spec.label}.csv", rep.to_csv())
        reports.append(rep)
    comparisons = [compare_attacks(rep, reports[0]) for rep in reports[1:]]
    if comparisons:
        _write(out / "comparison.json", dump_json({**head, "comparisons": comparisons}))
    _write(out / "summary.csv", _with_header(_summary_rows(reports, comparisons), head))
    print(_summary_rows(reports, comparisons), end="")
    return EXIT_OK


def cmd_finetune(args):
    cfg = _base_config(args)
    model = load_model(args.model)
    cfg.model = args.model
    cfg.seed = args.seed
    train_set, test_set = _splits(args)
    tcfg = train_config_from_metadata(model.metadata)
    fcfg = FinetuneConfig(
        source_attack=args.attack,
        epochs=args.epochs,
        lr_factor=args.lr_factor,
        alpha=args.alpha,
        include_clean_control=args.control,
        eval_size=args.eval_size,
        attack_config=_attack_config(args),
    )
    trace_path = args.trace or args.out + ".trace.csv"
    cfg.attacks = [args.attack]
    cfg.train = asdict(tcfg)
    cfg.finetune = {
        "source_attack": fcfg.source_attack,
        "epochs": fcfg.epochs,
        "lr_factor": fcfg.lr_factor,
        "alpha": fcfg.alpha,
        "include_clean_control": fcfg.include_clean_control,
        "eval_size": fcfg.eval_size,
    }
    cfg.outputs = {"model": args.out, "trace": trace_path}
    if args.control:
        cfg.outputs["control_trace"] = trace_path + ".control.csv"
    result = finetune_experiment(model, train_set, test_set, fcfg, tcfg, args.seed)
    tuned, trace = result["runs"][args.attack]
    tuned.metadata["experiment"] = cfg.as_dict()
    save_model(tuned, args.out)
    head = {
        "experiment": cfg.as_dict(),
        "model_hash": model.content_hash(),
        "finetuned_hash": tuned.content_hash(),
        "baseline_rho_adv": result["baseline_rho"],
        "adversarial_set": result["adversarial_set"],
    }
    _write(trace_path, _with_header(trace_to_csv(trace), head))
    if args.control and "none" in result["runs"]:
        _, ctrace = result["runs"]["none"]
        _write(cfg.outputs["control_trace"], _with_header(trace_to_csv(ctrace), head))
    print(dump_json({
        "baseline_rho_adv": result["baseline_rho"],
        "final_rho_adv": trace[-1]["rho_adv"],
        "final_test_acc": trace[-1]["test_acc"],
    }), end="")
    return EXIT_OK


def _load_report(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"report not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".csv":
            return RobustnessReport.from_csv(text)
        return RobustnessReport.from_json(text)
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise DataFormatError(f"{path}: not a robustness report ({exc})") from None


def cmd_report(args):
    reports = [_load_report(p) for p in args.reports]
    comparisons = [compare_attacks(rep, reports[0]) for rep in reports[1:]]
    table = _summary_rows(reports, comparisons)
    print(table, end="")
    if args.out:
        _write(args.out, dump_json({
            "inputs": list(args.reports),
            "aggregates": [rep.aggregates for rep in reports],
            "comparisons": comparisons,
        }))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "bench": cmd_bench,
    "finetune": cmd_finetune,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (DataFormatError, ModelFormatError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateGradientError, TrainingError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
