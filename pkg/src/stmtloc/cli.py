"""Command-line interface.

Subcommands: generate (synthetic corpus), train, eval, ablate (the
three contrastive variants side by side). Every flag can also live in
a key=value config file passed with --config; explicit flags win over
the file, and the resolved configuration is persisted next to the run
artifacts. Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .corpus import (
    DataError,
    SyntheticConfig,
    Vocabulary,
    build_vocabulary,
    encode_corpus,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
    split_corpus,
)
from .evaluator import (
    compute_metrics,
    emit_report,
    predict_corpus,
    report_to_row,
    write_metrics_csv,
)
from .trainer import (
    NumericsError,
    TrainConfig,
    fit,
    load_checkpoint,
    save_checkpoint,
    write_history_csv,
)

CHECKPOINT_NAME = "checkpoint.pkl"
HISTORY_NAME = "history.csv"
VOCAB_NAME = "vocab.txt"
METRICS_NAME = "metrics.csv"
REPORT_NAME = "report.txt"
ABLATION_NAME = "ablation.csv"


class UsageError(RuntimeError):
    """Bad flags, bad config keys, or inconsistent values."""


def _parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


@dataclass
class RunConfig:
    # optimization
    lr: float = 1e-3
    tau: float = 0.5
    temp: float = 0.5
    dim_dnn: int = 100
    clusters: int = 5
    train_epochs: int = 10
    alpha: float = 1.0
    eta: float = 1e-2
    topk: int = 10
    semi_fraction: float = 0.0
    method_variant: str = "cscl"
    seed: int = 42
    batch_size: int = 100
    grad_clip: float = 25.0
    # data shaping
    max_statements: int = 100
    max_tokens: int = 50
    embed_dim: int = 150
    kernel_size: int = 3
    use_conv: bool = True
    min_count: int = 1
    split: str = "0.8,0.1,0.1"
    metric_scope: str = "vulnerable"
    # paths and modes
    data: str = ""
    home_dir: str = "run"
    do_train: bool = False
    do_eval: bool = False
    seeds: str = ""
    # synthetic generator
    out: str = ""
    n_functions: int = 500
    length_min: int = 6
    length_max: int = 10
    n_patterns: int = 3
    pattern_len: int = 3
    vuln_ratio: float = 0.5
    gen_vocab_size: int = 40

    def split_ratios(self) -> tuple[float, float, float]:
        try:
            parts = tuple(float(x) for x in self.split.split(","))
        except ValueError as exc:
            raise UsageError(f"--split must be three comma-separated numbers: {exc}")
        if len(parts) != 3:
            raise UsageError(f"--split must have three parts, got {self.split!r}")
        return parts

    def seed_list(self) -> list[int]:
        if not self.seeds:
            return [self.seed]
        try:
            return [int(x) for x in self.seeds.split(",")]
        except ValueError as exc:
            raise UsageError(f"--seeds must be comma-separated integers: {exc}")

    def to_train_config(self) -> TrainConfig:
        config = TrainConfig(
            learning_rate=self.lr,
            batch_size=self.batch_size,
            epochs=self.train_epochs,
            gate_temperature=self.temp,
            contrastive_temperature=self.tau,
            alpha=self.alpha,
            k_clusters=self.clusters,
            topk=self.topk,
            eta=self.eta,
            semi_fraction=self.semi_fraction,
            grad_clip_norm=self.grad_clip,
            seed=self.seed,
            max_statements=self.max_statements,
            max_tokens=self.max_tokens,
            embed_dim=self.embed_dim,
            hidden_dim=self.dim_dnn,
            kernel_size=self.kernel_size,
            use_conv=self.use_conv,
            method_variant=self.method_variant,
            split_ratios=self.split_ratios(),
        )
        try:
            config.validate()
        except ValueError as exc:
            raise UsageError(str(exc))
        return config

    def generator_config(self) -> SyntheticConfig:
        return SyntheticConfig(
            n_functions=self.n_functions,
            length_range=(self.length_min, self.length_max),
            n_patterns=self.n_patterns,
            pattern_len=self.pattern_len,
            vuln_ratio=self.vuln_ratio,
            vocab_size=self.gen_vocab_size,
        )


# name -> (type converter, help); booleans handled specially by argparse.
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_BOOL_FIELDS = {"use_conv", "do_train", "do_eval"}
_FLAG_HELP = {
    "lr": "Adam learning rate",
    "tau": "contrastive temperature",
    "temp": "gate relaxation temperature",
    "dim_dnn": "hidden layer width of selector and classifier",
    "clusters": "k for per-batch clustering",
    "train_epochs": "number of training epochs",
    "alpha": "weight of the contrastive term",
    "eta": "weight of the annotation likelihood term",
    "topk": "number of statements kept per function",
    "semi_fraction": "fraction of vulnerable training functions with statement annotations",
    "method_variant": "contrastive variant: cscl, cl, or none",
    "seed": "base random seed",
    "batch_size": "mini-batch size",
    "grad_clip": "global gradient norm clip",
    "max_statements": "statements kept per function (padding/truncation length)",
    "max_tokens": "tokens kept per statement",
    "embed_dim": "token embedding and conv output width",
    "kernel_size": "conv kernel width (odd)",
    "use_conv": "true for conv+maxpool encoding, false for maxpool only",
    "min_count": "minimum token frequency for the vocabulary",
    "split": "train,valid,test ratios",
    "metric_scope": "coverage metric scope: vulnerable or all",
    "data": "input corpus (JSONL)",
    "home_dir": "output directory for run artifacts",
    "do_train": "run training",
    "do_eval": "run evaluation",
    "seeds": "comma-separated seeds for ablation",
    "out": "output path for the generated corpus",
    "n_functions": "number of synthetic functions",
    "length_min": "minimum statements per synthetic function",
    "length_max": "maximum statements per synthetic function",
    "n_patterns": "number of distinct planted flaw patterns",
    "pattern_len": "statements per planted pattern",
    "vuln_ratio": "fraction of vulnerable synthetic functions",
    "gen_vocab_size": "identifier pool size for the generator",
}


def _convert(field: str, text: str):
    if field in _BOOL_FIELDS:
        return _parse_bool(text)
    kind = _FIELD_TYPES[field]
    caster = {"int": int, "float": float, "str": str}[
        kind if isinstance(kind, str) else kind.__name__
    ]
    try:
        return caster(text)
    except ValueError as exc:
        raise UsageError(f"bad value for {field}: {exc}")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _add_flags(parser: argparse.ArgumentParser, names: list[str]) -> None:
    for name in names:
        if name in _BOOL_FIELDS and name in ("do_train", "do_eval"):
            parser.add_argument(f"--{name}", action="store_const", const=True,
                                default=None, help=_FLAG_HELP[name])
        elif name in _BOOL_FIELDS:
            parser.add_argument(f"--{name}", type=_parse_bool, default=None,
                                metavar="BOOL", help=_FLAG_HELP[name])
        else:
            parser.add_argument(f"--{name}", type=str, default=None,
                                help=_FLAG_HELP[name])


_TRAIN_FLAGS = [
    "lr", "tau", "temp", "dim_dnn", "clusters", "train_epochs", "alpha", "eta",
    "topk", "semi_fraction", "method_variant", "seed", "batch_size", "grad_clip",
    "max_statements", "max_tokens", "embed_dim", "kernel_size", "use_conv",
    "min_count", "split", "metric_scope", "data", "home_dir", "do_train", "do_eval",
]
_GENERATE_FLAGS = [
    "seed", "out", "n_functions", "length_min", "length_max", "n_patterns",
    "pattern_len", "vuln_ratio", "gen_vocab_size",
]


def build_parser() -> _Parser:
    parser = _Parser(prog="stmtloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for command, flags in (
        ("generate", _GENERATE_FLAGS),
        ("train", _TRAIN_FLAGS),
        ("eval", ["data", "home_dir", "topk", "metric_scope", "seed"]),
        ("ablate", _TRAIN_FLAGS + ["seeds"]),
    ):
        p = sub.add_parser(command)
        p.add_argument("--config", type=str, default=None,
                       help="key=value file providing defaults for any flag")
        _add_flags(p, flags)
    return parser


def read_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value.strip()
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, text in read_config_file(args.config).items():
            setattr(cfg, key, _convert(key, text))
    for key in _FIELD_TYPES:
        value = getattr(args, key, None)
        if value is None:
            continue
        setattr(cfg, key, value if key in _BOOL_FIELDS else _convert(key, str(value)))
    return cfg


def persist_config(cfg: RunConfig, path: str) -> None:
    fields = dataclasses.asdict(cfg)
    with open(path, "w", encoding="ascii") as fh:
        for key in sorted(fields):
            fh.write(f"{key}={fields[key]}\n")


def _prepare_home(cfg: RunConfig, command: str) -> Path:
    home = Path(cfg.home_dir)
    home.mkdir(parents=True, exist_ok=True)
    persist_config(cfg, str(home / f"config.{command}.txt"))
    return home


def cmd_generate(cfg: RunConfig) -> None:
    if not cfg.out:
        raise UsageError("generate needs --out")
    records = generate_synthetic(cfg.generator_config(), cfg.seed)
    save_jsonl(records, cfg.out)
    manifest = {
        "seed": cfg.seed,
        "n_functions": cfg.n_functions,
        "length_range": [cfg.length_min, cfg.length_max],
        "n_patterns": cfg.n_patterns,
        "pattern_len": cfg.pattern_len,
        "vuln_ratio": cfg.vuln_ratio,
        "vocab_size": cfg.gen_vocab_size,
    }
    with open(cfg.out + ".manifest.json", "w", encoding="ascii") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_splits(cfg: RunConfig, train_config: TrainConfig):
    if not cfg.data:
        raise UsageError("missing --data")
    records = load_jsonl(cfg.data)
    return split_corpus(records, train_config.split_ratios, train_config.seed)


def _evaluate(state, test_records, cfg: RunConfig, home: Path, ks: list[int]) -> list[dict]:
    test = encode_corpus(
        test_records, state.vocab, state.config.max_statements, state.config.max_tokens
    )
    dataset = Path(cfg.data).stem
    rows = []
    for k in ks:
        predictions = predict_corpus(state, test, k)
        report = compute_metrics(predictions, k, scope=cfg.metric_scope)
        rows.append(
            report_to_row(report, dataset, "test", state.config.method_variant,
                          state.config.seed)
        )
    predictions = predict_corpus(state, test, ks[0])
    emit_report(predictions, test_records, ks[0], str(home / REPORT_NAME))
    return rows


def _eval_ks(cfg: RunConfig) -> list[int]:
    return [cfg.topk] if cfg.topk == 5 else [cfg.topk, 5]


def _train_once(cfg: RunConfig, train_config: TrainConfig, home: Path):
    train_records, valid_records, test_records = _load_splits(cfg, train_config)
    vocab = build_vocabulary(train_records, min_count=cfg.min_count)
    train = encode_corpus(train_records, vocab, train_config.max_statements,
                          train_config.max_tokens)
    valid = encode_corpus(valid_records, vocab, train_config.max_statements,
                          train_config.max_tokens)
    state, history = fit(train, valid, train_config, vocab)
    save_checkpoint(state, str(home / CHECKPOINT_NAME))
    write_history_csv(history, str(home / HISTORY_NAME))
    vocab.save(str(home / VOCAB_NAME))
    return state, test_records


def cmd_train(cfg: RunConfig) -> None:
    train_config = cfg.to_train_config()
    home = _prepare_home(cfg, "train")
    state, test_records = _train_once(cfg, train_config, home)
    if cfg.do_eval:
        rows = _evaluate(state, test_records, cfg, home, _eval_ks(cfg))
        write_metrics_csv(rows, str(home / METRICS_NAME))


def cmd_eval(cfg: RunConfig) -> None:
    home = _prepare_home(cfg, "eval")
    checkpoint = home / CHECKPOINT_NAME
    if not checkpoint.exists():
        raise DataError(f"no checkpoint at {checkpoint}")
    state = load_checkpoint(str(checkpoint))
    _, _, test_records = _load_splits(cfg, state.config)
    rows = _evaluate(state, test_records, cfg, home, _eval_ks(cfg))
    write_metrics_csv(rows, str(home / METRICS_NAME))


def cmd_ablate(cfg: RunConfig) -> None:
    home = _prepare_home(cfg, "ablate")
    rows = []
    for seed in cfg.seed_list():
        for variant in ("none", "cl", "cscl"):
            sub_cfg = dataclasses.replace(cfg, seed=seed, method_variant=variant,
                                          home_dir=str(home / f"{variant}_s{seed}"))
            train_config = sub_cfg.to_train_config()
            sub_home = Path(sub_cfg.home_dir)
            sub_home.mkdir(parents=True, exist_ok=True)
            persist_config(sub_cfg, str(sub_home / "config.train.txt"))
            state, test_records = _train_once(sub_cfg, train_config, sub_home)
            rows.extend(_evaluate(state, test_records, sub_cfg, sub_home, _eval_ks(cfg)))
    write_metrics_csv(rows, str(home / ABLATION_NAME))


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        _COMMANDS[args.command](cfg)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
