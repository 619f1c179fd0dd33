"""Command-line entry point: ``adin gen | train | eval | ablate``.

Every command reads one INI config file. ``--set section.key=value`` and the
few dedicated flags only override keys from that file. The fully resolved
config is echoed to ``<out_dir>/config.ini`` so a run can be repeated from
the echo alone.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AdinError, ConfigError, DataError, DivergenceError
from .experiment import FixtureConfig, ModelConfig, make_fixture, probe_features, run_method, summarize
from .models import load_checkpoint, save_checkpoint
from .retrieval import (CSV_HEADER, POLICIES, METRICS, direct_transfer_eval, write_report_csv,
                        write_report_json)
from .scheduler import TrainConfig, default_arch, train
from .synthdata import Dataset, histograms, load_dataset, save_dataset, split_query_gallery

log = logging.getLogger("adin")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


@dataclass
class RunSection:
    seed: int | None = None
    out_dir: str = "runs/default"
    data_format: str = "binary"  # binary | json
    checkpoint_format: str = "binary"
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 disables them


@dataclass
class EvalSection:
    metric: str = "cosine"
    policy: str = "same-id-same-nuisance"
    method: str = "model"
    checkpoint: str = ""  # empty: <out_dir>/model.ckpt
    source: str = ""  # empty: files written by ``gen`` in out_dir
    query: str = ""
    gallery: str = ""

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"metric: expected one of {METRICS}, got {self.metric!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy: expected one of {POLICIES}, got {self.policy!r}")


@dataclass
class AblateSection:
    methods: list[str] = field(default_factory=lambda: ["baseline", "ne", "cane"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        bad = [m for m in self.methods if m not in ("baseline", "rg", "ne", "cane")]
        if bad or not self.methods:
            raise ConfigError(f"methods: unknown or empty method list {self.methods!r}")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")


SECTIONS = {"run": RunSection, "data": FixtureConfig, "model": ModelConfig, "train": TrainConfig,
            "eval": EvalSection, "ablate": AblateSection}


@dataclass
class RunConfig:
    run: RunSection
    data: FixtureConfig
    model: ModelConfig
    train: TrainConfig
    eval: EvalSection
    ablate: AblateSection

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    def train_config(self, seed=None) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed if seed is None else seed)


# config parsing ---------------------------------------------------------------

def _coerce(text: str, type_name: str, key: str):
    text = text.strip()
    optional = "None" in type_name
    if optional and text.lower() in ("", "none", "null"):
        return None
    try:
        if type_name.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if type_name.startswith("list"):
            items = json.loads(text) if text.startswith("[") else [t for t in text.split(",") if t.strip()]
            inner = int if "int" in type_name else str
            return [inner(str(i).strip()) for i in items]
        if type_name.startswith("int"):
            return int(text)
        if type_name.startswith("float"):
            return float(text)
        return text
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(f"{key}: cannot read {text!r} as {type_name}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    """Merge the INI file with ``section.key=value`` overrides and validate every section."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)

    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    built = {}
    for name, cls in SECTIONS.items():
        types = {f.name: str(f.type) for f in dataclasses.fields(cls)}
        kwargs = {}
        if parser.has_section(name):
            for key, text in parser.items(name):
                if key not in types:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
                kwargs[key] = _coerce(text, types[key], f"{name}.{key}")
        try:
            built[name] = cls(**kwargs)
        except ConfigError as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    cfg = RunConfig(**built)
    if cfg.run.seed is None:
        raise ConfigError("run.seed is required")
    return cfg


def dump_config(cfg: RunConfig, path: Path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
    parser["train"]["seed"] = _format(cfg.seed)
    with open(path, "w") as fh:
        parser.write(fh)


def _prepare_out(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.ini")
    return out


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _dataset_path(cfg: RunConfig, name: str) -> Path:
    suffix = ".json" if cfg.run.data_format == "json" else ".bin"
    return cfg.out_dir / f"{name}{suffix}"


# commands ---------------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> int:
    """Write the source and target datasets and print their histograms."""
    out = _prepare_out(cfg)
    source, query, gallery, _ = make_fixture(cfg.data, cfg.seed)
    for name, ds in (("source", source), ("target_query", query), ("target_gallery", gallery)):
        save_dataset(ds, _dataset_path(cfg, name), cfg.run.data_format)
    summary = {}
    for name, ds in (("source", source), ("target", _merge(query, gallery))):
        h = histograms(ds)
        summary[name] = h
        per_id = np.array(list(h["samples_per_identity"].values()))
        classes = np.bincount(list(h["classes_per_identity"].values()))
        print(f"{name}: {len(ds)} samples, {len(per_id)} identities, "
              f"{per_id.min()}-{per_id.max()} samples per identity")
        print(f"  nuisance classes per identity: "
              + ", ".join(f"{k}: {c}" for k, c in enumerate(classes) if c))
        print(f"  nuisance marginal: {h['nuisance_marginal']}")
    with open(out / "histograms.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return EXIT_OK


def _merge(a: Dataset, b: Dataset) -> Dataset:
    return Dataset(np.vstack([a.x, b.x]), np.concatenate([a.y_id, b.y_id]), np.vstack([a.y_nuisance, b.y_nuisance]),
                   a.nuisance_classes, a.first_identity, a.n_identities)


def _load_source(cfg: RunConfig):
    path = Path(cfg.eval.source) if cfg.eval.source else _dataset_path(cfg, "source")
    if path.is_file():
        return load_dataset(path)
    log.info("no dataset at %s; generating the fixture from [data]", path)
    return make_fixture(cfg.data, cfg.seed)[0]


def cmd_train(cfg: RunConfig) -> int:
    """Train one model and write its checkpoint plus a JSONL event log."""
    out = _prepare_out(cfg)
    source = _load_source(cfg)
    tcfg = cfg.train_config()
    m = cfg.model
    arch = default_arch(source, source.n_identities, m.hidden, m.d_feat, m.dual_branch, m.d_local)
    fmt = cfg.run.checkpoint_format
    events = open(out / "events.jsonl", "w")

    def on_epoch(bundle, record):
        events.write(json.dumps(record, default=_json_default) + "\n")
        events.flush()
        every = cfg.run.checkpoint_every
        if every and record["epoch"] >= 0 and (record["epoch"] + 1) % every == 0:
            save_checkpoint(bundle, out / f"epoch{record['epoch'] + 1:04d}.ckpt", fmt)

    try:
        bundle, state = train(tcfg, source, arch, on_epoch=on_epoch)
    except DivergenceError as exc:
        if exc.state is not None:
            save_checkpoint(exc.state, out / "last_good.ckpt", fmt)
        events.write(json.dumps({"event": "divergence", "epoch": exc.epoch, "message": str(exc)}) + "\n")
        raise
    finally:
        events.close()
    save_checkpoint(bundle, out / "model.ckpt", fmt)
    print(f"trained {state.epoch + 1 if tcfg.epochs else 0} epochs; val_I={state.val_i:.3f} "
          f"val_N={state.val_n:.3f}; checksum {bundle.checksum()[:16]}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    """Evaluate a checkpoint on the target split and write JSON and CSV reports."""
    out = _prepare_out(cfg)
    ckpt = Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else out / "model.ckpt"
    if not ckpt.is_file():
        raise DataError(f"checkpoint {ckpt} does not exist")
    bundle = load_checkpoint(ckpt)
    query = load_dataset(cfg.eval.query or _dataset_path(cfg, "target_query"))
    gallery = load_dataset(cfg.eval.gallery or _dataset_path(cfg, "target_gallery"))
    source = load_dataset(cfg.eval.source or _dataset_path(cfg, "source"))
    e = cfg.eval
    transfer = direct_transfer_eval(bundle, query, gallery, e.metric, e.policy)
    sq, sg = split_query_gallery(source, cfg.seed)
    in_domain = direct_transfer_eval(bundle, sq, sg, e.metric, e.policy)
    probe = probe_features(bundle, source, cfg.seed)
    write_report_json(out / "report.json", {"method": e.method, "transfer": transfer, "in_domain": in_domain,
                                            "probe": probe, "checksum": bundle.checksum()})
    write_report_csv(out / "report.csv", [transfer.row(f"{e.method}:transfer"),
                                          in_domain.row(f"{e.method}:in-domain")])
    print(f"transfer  top1={transfer.top(1):.4f} mAP={transfer.map:.4f}  "
          f"in-domain top1={in_domain.top(1):.4f}  probe={probe.accuracy[0]:.3f} "
          f"(chance {probe.chance[0]:.3f})")
    return EXIT_OK


RUN_COLUMNS = CSV_HEADER + ["seed", "probe", "chance", "val_I", "diverged", "checksum"]


def cmd_ablate(cfg: RunConfig) -> int:
    """Train every configured method on every seed and tabulate mean and std."""
    out = _prepare_out(cfg)
    results = []
    for seed in cfg.ablate.seeds:
        fixture = make_fixture(cfg.data, seed)
        for method in cfg.ablate.methods:
            r = run_method(method, seed, cfg.train, cfg.data, cfg.model, fixture)
            results.append(r)
            log.info("%s seed %d: top1=%.3f probe=%.3f diverged=%s", method, seed, r.top1, r.probe, r.diverged)
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RUN_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in results:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})
    summary = summarize(results)
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for method, s in summary.items():
            w.writerow([method] + [f"{100 * s[k]:.2f}±{100 * s[k + '_std']:.2f}"
                                   for k in ("top1", "top5", "top10", "map")])
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"{'method':<10}{'top1':>16}{'mAP':>16}{'probe':>16}  diverged")
    for method, s in summary.items():
        cells = [f"{100 * s[k]:6.2f}±{100 * s[k + '_std']:5.2f}" for k in ("top1", "map", "probe")]
        print(f"{method:<10}" + "".join(f"{c:>16}" for c in cells) + f"  {s['diverged']}/{s['runs']}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adin", description="Generate fixtures, train, evaluate and compare nuisance-invariant encoders.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("-c", "--config", help="INI config file")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", help="overrides run.out_dir")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    sub.choices["train"].add_argument("--data", help="overrides eval.source: training dataset file")
    sub.choices["eval"].add_argument("--checkpoint", help="overrides eval.checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out_dir={args.out}")
    if getattr(args, "data", None):
        overrides.append(f"eval.source={args.data}")
    if getattr(args, "checkpoint", None):
        overrides.append(f"eval.checkpoint={args.checkpoint}")
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AdinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
