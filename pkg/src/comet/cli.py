"""Command-line pipeline: synth, preprocess, pretrain, finetune, eval, all.

Settings come from one JSON file with the sections ``dataset``, ``encoder``,
``train``, ``loss`` and ``eval``; every key is optional and unknown keys are
rejected.  Command-line flags override the file.  Exit status: 0 success,
2 configuration error, 3 data error, 4 numeric failure.

Example config::

    {
      "dataset": {"synth": {"patients": 16}, "seed": 41},
      "train": {"epochs": 20, "batch_size": 64, "dtype": "float64"},
      "loss": {"lambdas": [0.25, 0.25, 0.25, 0.25], "tau": 0.1},
      "eval": {"fractions": [1.0, 0.1], "seeds": [41, 42]}
    }
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .augment import MaskSpec
from .datamodel import (
    SHUFFLE_KINDS,
    LeveledDataset,
    SplitSpec,
    concat_datasets,
    label_fraction_indices,
    make_pseudo_trials,
    patient_independent_split,
    validate,
)
from .encoder import EncoderConfig, load_checkpoint
from .errors import CometError, ConfigError, DataError, NumericError
from .evaluate import (
    METRIC_NAMES,
    FineTuneConfig,
    MetricsRow,
    ProbeConfig,
    anomaly_eval,
    classifier_scores,
    clustering_eval,
    compute_metrics,
    embed_dataset,
    finetune_full,
    fit_linear_probe,
    format_table,
    summarize,
    write_metrics_csv,
)
from .ingest import (
    RawTrial,
    SynthConfig,
    heartbeat_segment,
    read_dataset,
    resample_linear,
    sliding_window_segment,
    standard_scale,
    synth_generate,
    write_dataset,
)
from .losses import LossWeights
from .trainer import PAPER_MASKS, TrainConfig, pretrain, write_history_csv

log = logging.getLogger("comet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
EVAL_TASKS = ("linear", "finetune", "cluster", "anomaly")


# ---------------------------------------------------------------------------
# config


@dataclass
class DatasetSection:
    path: str | None = None
    synth: dict | None = None
    seed: int = 41
    val_patients: list | None = None
    test_patients: list | None = None
    pseudo_trial_group: int | None = None


@dataclass
class EncoderSection:
    proj_hidden: int = 128
    proj_out: int = 64
    blocks: int = 10
    conv_hidden: int = 64
    out_dim: int = 320


@dataclass
class TrainSection:
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 100
    shuffle: str = "batch"
    seed: int = 41
    dtype: str = "float32"


@dataclass
class LossSection:
    lambdas: list = field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    tau: float = 0.1
    masks: list | None = None


@dataclass
class EvalSection:
    fractions: list = field(default_factory=lambda: [1.0, 0.1, 0.01])
    seeds: list = field(default_factory=lambda: [41, 42, 43, 44, 45])
    tasks: list = field(default_factory=lambda: ["finetune"])
    finetune_epochs: int | None = None
    finetune_lr: float = 1e-4
    finetune_batch_size: int = 128
    probe_c: float = 1.0
    probe_max_iter: int = 100_000
    cluster_k: int = 2
    neg_frac: float = 0.9
    dtype: str = "float64"


SECTIONS = {
    "dataset": DatasetSection,
    "encoder": EncoderSection,
    "train": TrainSection,
    "loss": LossSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def weights(self) -> LossWeights:
        return LossWeights.from_lambdas(self.loss.lambdas, self.loss.tau)

    def masks(self) -> tuple[MaskSpec, ...]:
        if self.loss.masks is None:
            return PAPER_MASKS
        if len(self.loss.masks) != 4:
            raise ConfigError(f"loss.masks needs 4 entries (observation, sample, trial, patient), got {len(self.loss.masks)}")
        return tuple(MaskSpec(m) if isinstance(m, str) else MaskSpec.from_dict(m) for m in self.loss.masks)


def _section(cls, name: str, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key {name}.{unknown[0]} (allowed: {sorted(known)})")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from None


def parse_config(doc: dict) -> RunConfig:
    """Build a RunConfig from a decoded JSON object, validating eagerly."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section {unknown[0]!r} (allowed: {sorted(SECTIONS)})")
    cfg = RunConfig(**{k: _section(SECTIONS[k], k, v) for k, v in doc.items()})
    check_config(cfg)
    return cfg


def check_config(cfg: RunConfig) -> None:
    try:
        _check_config(cfg)
    except CometError:
        raise
    except (TypeError, ValueError) as exc:
        # e.g. a string where a number belongs
        raise ConfigError(f"invalid config value: {exc}") from None


def _check_config(cfg: RunConfig) -> None:
    cfg.weights()  # lambda sum rule and tau
    cfg.masks()
    if cfg.dataset.path is None and cfg.dataset.synth is None:
        cfg.dataset.synth = {}
    if cfg.dataset.path is not None and cfg.dataset.synth is not None:
        raise ConfigError("dataset.path and dataset.synth are mutually exclusive")
    if cfg.dataset.synth is not None:
        _synth_config(cfg.dataset.synth)
    bad = [t for t in cfg.eval.tasks if t not in EVAL_TASKS]
    if bad:
        raise ConfigError(f"eval.tasks: unknown task {bad[0]!r} (allowed: {list(EVAL_TASKS)})")
    for f in cfg.eval.fractions:
        if not 0.0 < float(f) <= 1.0:
            raise ConfigError(f"eval.fractions: {f} is outside (0, 1]")
    if not cfg.eval.seeds:
        raise ConfigError("eval.seeds must not be empty")
    if cfg.eval.dtype not in ("float32", "float64"):
        raise ConfigError(f"eval.dtype must be float32 or float64, got {cfg.eval.dtype!r}")
    TrainConfig(
        lr=cfg.train.lr,
        batch_size=cfg.train.batch_size,
        epochs=cfg.train.epochs,
        shuffle=cfg.train.shuffle,
        dtype=cfg.train.dtype,
    )
    if cfg.train.shuffle not in SHUFFLE_KINDS:
        raise ConfigError(f"train.shuffle must be one of {SHUFFLE_KINDS}, got {cfg.train.shuffle!r}")


def _synth_config(d: dict) -> SynthConfig:
    known = {f.name for f in fields(SynthConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key dataset.synth.{unknown[0]} (allowed: {sorted(known)})")
    return SynthConfig(**d)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        check_config(cfg)
        return cfg
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(doc)


def _csv_floats(s: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _csv_ints(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Flags win over the config file."""
    pairs = (
        ("data", cfg.dataset, "path"),
        ("epochs", cfg.train, "epochs"),
        ("lr", cfg.train, "lr"),
        ("batch_size", cfg.train, "batch_size"),
        ("shuffle", cfg.train, "shuffle"),
        ("dtype", cfg.train, "dtype"),
        ("lambdas", cfg.loss, "lambdas"),
        ("tau", cfg.loss, "tau"),
        ("fractions", cfg.eval, "fractions"),
        ("seeds", cfg.eval, "seeds"),
        ("tasks", cfg.eval, "tasks"),
        ("finetune_epochs", cfg.eval, "finetune_epochs"),
    )
    for flag, section, key in pairs:
        v = getattr(args, flag, None)
        if v is not None:
            setattr(section, key, v)
    if getattr(args, "data", None) is not None:
        cfg.dataset.synth = None
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.dataset.seed = args.seed
    if getattr(args, "dtype", None) is not None:
        cfg.eval.dtype = args.dtype
    check_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# pipeline steps


def load_dataset(cfg: RunConfig) -> LeveledDataset:
    d = cfg.dataset
    if d.path is not None:
        ds = read_dataset(d.path)
    else:
        ds = synth_generate(_synth_config(d.synth or {}), d.seed)
    if d.pseudo_trial_group:
        ds = make_pseudo_trials(ds, d.pseudo_trial_group)
    return validate(ds)


def split_dataset(ds: LeveledDataset, cfg: RunConfig):
    """Explicit patient lists, or by default the last 2 patients for test and
    the 2 before them for validation."""
    d = cfg.dataset
    if d.val_patients is None and d.test_patients is None:
        pats = ds.patients().tolist()
        if len(pats) < 6:
            raise DataError(f"default split needs at least 6 patients, dataset has {len(pats)}; set dataset.val_patients/test_patients")
        spec = SplitSpec(set(pats[-4:-2]), set(pats[-2:]))
    else:
        spec = SplitSpec(set(d.val_patients or []), set(d.test_patients or []))
    return patient_independent_split(ds, spec)


def encoder_config(cfg: RunConfig, input_dim: int) -> EncoderConfig:
    e = cfg.encoder
    return EncoderConfig(input_dim, e.proj_hidden, e.proj_out, e.blocks, e.conv_hidden, 3, e.out_dim)


def run_pretrain(cfg: RunConfig, out: Path) -> Path:
    ds = load_dataset(cfg)
    train, _, _ = split_dataset(ds, cfg)
    tc = TrainConfig(
        lr=cfg.train.lr,
        batch_size=cfg.train.batch_size,
        epochs=cfg.train.epochs,
        weights=cfg.weights(),
        masks=cfg.masks(),
        shuffle=cfg.train.shuffle,
        seed=cfg.train.seed,
        dtype=cfg.train.dtype,
        checkpoint=str(out / "encoder.ckpt"),
    )
    out.mkdir(parents=True, exist_ok=True)
    log.info("pre-training on %d samples from %d patients", len(train), train.patients().size)
    result = pretrain(train, encoder_config(cfg, ds.n_channels), tc)
    write_history_csv(result.history, out / "loss_history.csv")
    return out / "encoder.ckpt"


def run_eval(cfg: RunConfig, ckpt: Path, out: Path) -> list[MetricsRow]:
    """Downstream tasks over fractions x seeds on the held-out test patients."""
    dtype = np.dtype(cfg.eval.dtype)
    params = load_checkpoint(ckpt, dtype=dtype)
    ds = load_dataset(cfg)
    train, val, test = split_dataset(ds, cfg)
    if len(test) == 0:
        raise DataError("the split leaves no test patients")
    n_classes = int(ds.label.max()) + 1
    rows: list[MetricsRow] = []
    cluster_rows = []
    out.mkdir(parents=True, exist_ok=True)

    if "linear" in cfg.eval.tasks:
        pc = ProbeConfig(C=cfg.eval.probe_c, max_iter=cfg.eval.probe_max_iter)
        Z_train, Z_test = embed_dataset(train, params), embed_dataset(test, params)
        for frac in cfg.eval.fractions:
            for seed in cfg.eval.seeds:
                sub_idx = label_fraction_indices(train, float(frac), int(seed))
                probe = fit_linear_probe(Z_train[sub_idx], train.label[sub_idx], pc, n_classes)
                rows.append(MetricsRow("P-FT", float(frac), int(seed), compute_metrics(test.label, probe.predict_proba(Z_test))))

    if "finetune" in cfg.eval.tasks or "anomaly" in cfg.eval.tasks:
        if len(val) == 0:
            raise DataError("fine-tuning needs validation patients")
        fracs = cfg.eval.fractions if "finetune" in cfg.eval.tasks else [1.0]
        for frac in fracs:
            for seed in cfg.eval.seeds:
                fc = FineTuneConfig(
                    lr=cfg.eval.finetune_lr,
                    batch_size=cfg.eval.finetune_batch_size,
                    epochs=cfg.eval.finetune_epochs,
                    seed=int(seed),
                    dtype=cfg.eval.dtype,
                )
                log.info("fine-tuning fraction=%g seed=%d", frac, seed)
                enc, head, rec = finetune_full(params, train, val, float(frac), fc, n_classes)
                if "finetune" in cfg.eval.tasks:
                    scores = classifier_scores(enc, head, test.values)
                    rows.append(MetricsRow("F-FT", float(frac), int(seed), compute_metrics(test.label, scores)))
                if "anomaly" in cfg.eval.tasks and float(frac) == 1.0:
                    rep = anomaly_eval(test, lambda x: classifier_scores(enc, head, x), cfg.eval.neg_frac, int(seed))
                    rows.append(MetricsRow("anomaly", 1.0, int(seed), rep))

    if "cluster" in cfg.eval.tasks:
        Z_test = embed_dataset(test, params)
        for seed in cfg.eval.seeds:
            sil, ari, nmi = clustering_eval(Z_test, test.label, cfg.eval.cluster_k, int(seed))
            cluster_rows.append((int(seed), sil, ari, nmi))
        with open(out / "clustering.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("seed", "silhouette", "ari", "nmi"))
            for seed, sil, ari, nmi in cluster_rows:
                w.writerow([seed, repr(sil), repr(ari), repr(nmi)])

    if rows:
        write_metrics_csv(rows, out / "metrics.csv")
        _write_summary(rows, out / "metrics_summary.csv")
        (out / "metrics.txt").write_text(format_table(rows), encoding="utf-8")
    return rows


def _write_summary(rows: list[MetricsRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setup", "fraction", "n"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")])
        for s in summarize(rows):
            w.writerow([s["setup"], repr(float(s["fraction"])), s["n"]] + [repr(v) for m in METRIC_NAMES for v in s[m]])


def load_raw_trials(path: Path) -> list[tuple[RawTrial, np.ndarray | None]]:
    """Raw recordings as ``*.npz`` files with ``values`` [L,F], ``patient_id``,
    ``trial_id``, ``label``, ``sample_rate_hz`` and optionally ``rpeaks``."""
    files = sorted(path.glob("*.npz")) if path.is_dir() else [path]
    if not files:
        raise DataError(f"no .npz recordings under {path}")
    trials = []
    for f in files:
        try:
            z = np.load(f, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise DataError(f"{f}: cannot read recording ({exc})") from None
        missing = {"values", "patient_id", "trial_id", "label", "sample_rate_hz"} - set(z.files)
        if missing:
            raise DataError(f"{f}: missing arrays {sorted(missing)}")
        tr = RawTrial(z["values"], int(z["patient_id"]), int(z["trial_id"]), int(z["label"]), float(z["sample_rate_hz"]))
        trials.append((tr, z["rpeaks"] if "rpeaks" in z.files else None))
    return trials


def run_preprocess(args) -> Path:
    trials = load_raw_trials(Path(args.input))
    parts = []
    for tr, rpeaks in trials:
        if args.resample_hz and args.mode == "window":
            tr = tr.with_values(resample_linear(tr.values, tr.sample_rate_hz, args.resample_hz), args.resample_hz)
        if args.scale:
            tr = standard_scale(tr)
        if args.mode == "window":
            parts.append(sliding_window_segment(tr, args.window, args.overlap))
        else:
            if rpeaks is None:
                raise DataError(f"trial {tr.trial_id}: heartbeat mode needs an 'rpeaks' array")
            parts.append(heartbeat_segment(tr, rpeaks, group_size=args.group_size))
    renumber = args.mode == "heartbeat"
    ds = validate(concat_datasets(parts, name=args.name, renumber_trials=renumber))
    return write_dataset(ds, args.out)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comet", description="Hierarchical contrastive pre-training for leveled time series.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, eval_flags=False):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        sp.add_argument("--data", help="dataset directory (overrides dataset.path)")
        sp.add_argument("--seed", type=int, help="overrides train.seed and dataset.seed")
        sp.add_argument("--dtype", choices=("float32", "float64"), help="numeric precision for training and evaluation")
        if eval_flags:
            sp.add_argument("--fractions", type=_csv_floats, help="label fractions, e.g. 1.0,0.1,0.01")
            sp.add_argument("--seeds", type=_csv_ints, help="fine-tuning seeds, e.g. 41,42,43,44,45")
            sp.add_argument("--tasks", type=lambda s: [t for t in s.split(",") if t], help=f"comma list from {','.join(EVAL_TASKS)}")
            sp.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)

    def train_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--shuffle", choices=("trial", "batch", "random"))
        sp.add_argument("--lambdas", type=_csv_floats, help="patient,trial,sample,observation weights")
        sp.add_argument("--tau", type=float)

    sp = sub.add_parser("synth", help="write a synthetic leveled dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    for f in fields(SynthConfig):
        sp.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default))

    sp = sub.add_parser("preprocess", help="segment raw .npz recordings into a dataset directory")
    sp.add_argument("--input", required=True, help=".npz file or directory of them")
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("window", "heartbeat"), default="window")
    sp.add_argument("--window", type=int, default=256)
    sp.add_argument("--overlap", type=float, default=0.5)
    sp.add_argument("--resample-hz", dest="resample_hz", type=float)
    sp.add_argument("--group-size", dest="group_size", type=int, default=10)
    sp.add_argument("--no-scale", dest="scale", action="store_false")
    sp.add_argument("--name", default="dataset")

    sp = sub.add_parser("pretrain", help="self-supervised pre-training")
    common(sp)
    train_flags(sp)

    for name, help_ in (("finetune", "full fine-tuning over fractions x seeds"), ("eval", "run the configured downstream tasks")):
        sp = sub.add_parser(name, help=help_)
        common(sp, eval_flags=True)
        sp.add_argument("--ckpt", help="encoder checkpoint (default: OUT/encoder.ckpt)")

    sp = sub.add_parser("all", help="pretrain then eval")
    common(sp, eval_flags=True)
    train_flags(sp)
    return p


def _configure_threads():
    n = os.environ.get("COMET_THREADS", "1")
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"COMET_THREADS must be an integer, got {n!r}") from None
    if n < 1:
        raise ConfigError(f"COMET_THREADS must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _dispatch(args) -> None:
    if args.command == "preprocess":
        path = run_preprocess(args)
        print(f"wrote {path}")
        return
    cfg = load_config(getattr(args, "config", None))
    out = Path(args.out)
    if args.command == "synth":
        d = dict(cfg.dataset.synth or {})
        for f in fields(SynthConfig):
            v = getattr(args, f.name)
            if v is not None:
                d[f.name] = v
        seed = args.seed if args.seed is not None else cfg.dataset.seed
        path = write_dataset(synth_generate(_synth_config(d), seed), out)
        print(f"wrote {path}")
        return
    cfg = apply_overrides(cfg, args)
    if args.command in ("pretrain", "all"):
        ckpt = run_pretrain(cfg, out)
        print(f"wrote {ckpt} and {out / 'loss_history.csv'}")
        if args.command == "pretrain":
            return
    else:
        ckpt = Path(args.ckpt) if args.ckpt else out / "encoder.ckpt"
        if args.command == "finetune":
            cfg.eval.tasks = ["finetune"]
    rows = run_eval(cfg, ckpt, out)
    if rows:
        sys.stdout.write(format_table(rows))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _configure_threads():
            _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CometError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
