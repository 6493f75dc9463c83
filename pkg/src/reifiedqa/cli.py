"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 audit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SynthSpec, evaluate, generate_synth, load_dataset
from .exceptions import ConfigError, ReifiedQAError, ResolutionError
from .kg import build_kg, read_triples, reachable_subgraph, save_snapshot
from .model import QAExample, QAModel
from .report import format_trace
from .resolver import build_alias_table, read_aliases, write_aliases
from .text import EmbeddingTable
from .training import TrainConfig, grad_audit, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("reifiedqa")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_AUDIT = 0, 1, 2, 3

_PATH_KEYS = ("triples", "aliases", "train", "dev", "test", "checkpoint_dir", "log")


@dataclass
class RunConfig:
    triples: str
    train: str
    dev: str
    checkpoint_dir: str
    aliases: str | None = None
    test: str | None = None
    log: str | None = None
    dim: int = 64
    max_span_len: int = 6
    log_wall_time: bool = False
    audit_tolerance: float = 1e-4
    audit_examples: int = 3
    train_config: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path(".")) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        own = {f.name for f in fields(cls)} - {"train_config"}
        tc_keys = TrainConfig.field_names()
        unknown = set(raw) - own - tc_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("triples", "train", "dev", "checkpoint_dir"):
            if key not in raw:
                raise ConfigError(f"missing required config key {key!r}")
        kwargs = {k: raw[k] for k in own if k in raw}
        for key in _PATH_KEYS:
            if kwargs.get(key) is not None:
                kwargs[key] = str((base_dir / kwargs[key]).resolve())
        try:
            tc = TrainConfig(**{k: raw[k] for k in tc_keys if k in raw})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls(**kwargs, train_config=tc)
        cfg._raw = dict(raw)
        for name in ("dim", "max_span_len", "audit_examples"):
            value = getattr(cfg, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent)

    def check_inputs(self, *keys: str) -> None:
        for key in keys:
            value = getattr(self, key)
            if value is not None and not Path(value).is_file():
                raise ConfigError(f"{key} file {value} does not exist")

    def echo(self) -> dict:
        """Effective settings with paths as written in the config file."""
        d = {k: v for k, v in asdict(self).items() if k != "train_config"}
        d.update(asdict(self.train_config))
        raw = getattr(self, "_raw", {})
        for key in _PATH_KEYS:
            d[key] = raw.get(key)
        return d


def _load_structure(cfg: RunConfig):
    kg = build_kg(read_triples(cfg.triples))
    aliases = read_aliases(cfg.aliases) if cfg.aliases else []
    return kg, build_alias_table(kg, aliases)


def _model_from_checkpoint(cfg: RunConfig, kg, table):
    ckpt = Path(cfg.checkpoint_dir)
    vocab = EmbeddingTable.load_vocab(ckpt / "vocab.txt", dim=cfg.dim)
    model = QAModel(kg, table, vocab, dim=cfg.dim, t_max=cfg.train_config.t_max, max_span_len=cfg.max_span_len)
    params, _ = load_checkpoint(ckpt)
    model.check_params(params)
    return model, params


def _fresh_model(cfg: RunConfig, kg, table, train_questions):
    vocab = EmbeddingTable.from_questions(train_questions, dim=cfg.dim)
    model = QAModel(kg, table, vocab, dim=cfg.dim, t_max=cfg.train_config.t_max, max_span_len=cfg.max_span_len)
    return model, model.init_params(cfg.train_config.seed)


def cmd_build(args) -> int:
    kg = build_kg(read_triples(args.triples))
    aliases = read_aliases(args.aliases) if args.aliases else []
    build_alias_table(kg, aliases)
    if args.seed_entities is not None:
        labels = [s for s in args.seed_entities.split(",") if s]
        seeds = [kg.entity_id(s) for s in labels]
        kg, _ = reachable_subgraph(kg, seeds, args.t_max)
        if kg.n_triples == 0:
            print(f"warning: the restricted subgraph is empty (t_max={args.t_max})", file=sys.stderr)
    out = save_snapshot(kg, args.out)
    write_aliases([(e, a) for e, a in aliases if e in kg.entity_vocab], out / "aliases.tsv")
    print(json.dumps({"n_triples": kg.n_triples, "n_entities": kg.n_entities, "n_relations": kg.n_relations, "out": str(out)}))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        spec = SynthSpec.from_dict(raw)
    except FileNotFoundError:
        raise ConfigError(f"spec file {args.spec} not found") from None
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth spec: {exc}") from None
    result = generate_synth(spec)
    out = result.write(args.out)
    run_config = {"triples": "triples.tsv", "aliases": "aliases.tsv", "train": "train.tsv", "dev": "dev.tsv",
                  "test": "test.tsv", "checkpoint_dir": "checkpoint"}
    (out / "config.json").write_text(json.dumps(run_config, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({
        "out": str(out),
        "n_triples": result.kg.n_triples,
        "n_entities": result.kg.n_entities,
        "n_relations": result.kg.n_relations,
        **{f"n_{k}": len(v) for k, v in result.records.items()},
    }))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.check_inputs("triples", "aliases", "train", "dev")
    kg, table = _load_structure(cfg)
    ds = load_dataset({"train": cfg.train, "dev": cfg.dev}, kg)
    if not ds["train"] or not ds["dev"]:
        raise ConfigError("train and dev splits must be nonempty")
    model, params = _fresh_model(cfg, kg, table, [ex.question for ex in ds["train"]])
    ckpt = Path(cfg.checkpoint_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    log_path = cfg.log or ckpt / "train_log.tsv"
    result = train(model, params, ds["train"], ds["dev"], cfg.train_config, log_path=log_path, log_wall_time=cfg.log_wall_time)
    model.table.save_vocab(ckpt / "vocab.txt")
    save_checkpoint(ckpt, result.params, cfg.echo(), {"best_step": result.best_step, "best_dev_hits1": result.best_dev})
    print(json.dumps({"best_step": result.best_step, "best_dev_hits1": result.best_dev, "steps_run": result.steps_run,
                      "stopped_early": result.stopped_early, "checkpoint": str(ckpt)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    split_path = getattr(cfg, args.split, None) if args.split in ("train", "dev", "test") else None
    if split_path is None:
        raise ConfigError(f"config has no path for split {args.split!r}")
    cfg.check_inputs("triples", "aliases", args.split)
    kg, table = _load_structure(cfg)
    ds = load_dataset({args.split: split_path}, kg)
    if args.init:
        train_questions = [ex.question for ex in load_dataset({"train": cfg.train}, kg)["train"]]
        model, params = _fresh_model(cfg, kg, table, train_questions)
    else:
        model, params = _model_from_checkpoint(cfg, kg, table)
    variant = args.variant or cfg.train_config.variant
    metrics = evaluate(model, params, ds[args.split], variant)
    print(json.dumps({"split": args.split, "variant": variant, **metrics}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.check_inputs("triples", "aliases", "train")
    kg, table = _load_structure(cfg)
    train_ex = load_dataset({"train": cfg.train}, kg)["train"]
    model, params = _fresh_model(cfg, kg, table, [ex.question for ex in train_ex])
    variant = args.variant or cfg.train_config.variant
    reports = []
    for ex in train_ex:
        if len(reports) == cfg.audit_examples:
            break
        try:
            model.forward(params, ex, variant)
        except ResolutionError:
            continue
        reports.append(grad_audit(model, params, ex, variant, tolerance=cfg.audit_tolerance, rng=len(reports)))
    if not reports:
        raise ResolutionError("no training example passes the variant's preconditions")
    worst = max(r.max_rel_error for r in reports)
    passed = all(r.passed for r in reports)
    print(json.dumps({"variant": variant, "passed": passed, "max_rel_error": worst, "tolerance": cfg.audit_tolerance,
                      "n_examples": len(reports)}))
    return EXIT_OK if passed else EXIT_AUDIT


def _parse_span(text):
    i, sep, j = text.partition(":")
    if not sep or not i.isdigit() or not j.isdigit() or int(i) > int(j):
        raise ConfigError(f"--gold-span {text!r} is not of the form i:j with i <= j")
    return int(i), int(j)


def cmd_answer(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.check_inputs("triples", "aliases")
    if not (Path(cfg.checkpoint_dir) / "manifest.json").is_file():
        raise ConfigError(f"no checkpoint in {cfg.checkpoint_dir}")
    kg, table = _load_structure(cfg)
    model, params = _model_from_checkpoint(cfg, kg, table)
    variant = args.variant or cfg.train_config.variant
    gold = tuple(kg.entity_id(g) for g in args.gold_entity) if args.gold_entity else None
    answers = tuple(kg.entity_id(a) for a in args.answer) if args.answer else None
    span = _parse_span(args.gold_span) if args.gold_span else None
    ex = QAExample(args.question, answers or (0,), gold, span)
    try:
        fwd = model.forward(params, ex, variant)
    except ResolutionError as exc:
        print(format_trace(kg, None, args.question, gold, answers))
        print(f"# {exc}", file=sys.stderr)
        return EXIT_DATA
    print(format_trace(kg, fwd, args.question, gold, answers))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reifiedqa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a KG snapshot")
    p.add_argument("--triples", required=True)
    p.add_argument("--aliases")
    p.add_argument("--out", required=True)
    p.add_argument("--seed-entities", help="comma-separated entity labels")
    p.add_argument("--t-max", type=int, default=1)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("synth", help="generate a synthetic task")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print metrics for one split as JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--variant", choices=("baseline", "er", "e2e"))
    p.add_argument("--init", action="store_true", help="evaluate freshly initialized parameters")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", choices=("baseline", "er", "e2e"))
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("answer", help="answer one question with a diagnostic trace")
    p.add_argument("--config", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--variant", choices=("baseline", "er", "e2e"))
    p.add_argument("--gold-entity", action="append")
    p.add_argument("--gold-span")
    p.add_argument("--answer", action="append", help="expected answer label (adds a correctness mark)")
    p.set_defaults(func=cmd_answer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReifiedQAError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
