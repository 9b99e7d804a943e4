"""Command-line orchestration for the uncertainty pipeline.

Commands: generate, train, train-ensemble, evaluate, uncertainty,
decide, subgroups, embeddings. Every option can come from the command
line or from an INI config file (``--config``); command-line values win,
unknown file keys are rejected, and each run writes its fully resolved
configuration next to its outputs as ``run_config.ini``.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import configparser
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import insight, uq
from .checkpoint import load_checkpoint, save_checkpoint
from .cohort import (
    GeneratorConfig,
    Vocabulary,
    generate_synthetic,
    ingest,
    serialize,
    split,
    subgroups,
)
from .decide import DecisionPolicy, decide, decision_distribution, optimize_threshold, write_decision_report
from .profiles import VARIANTS, make_config
from .seqmodel import (
    CohortSchema,
    EnsembleSpec,
    SequenceModel,
    encode_records,
    predict_samples,
    train,
    train_ensemble,
)
from .uq import MetricReport, PredictiveUncertainty, format_value

log = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad flags or config file content; exits with code 2."""


# option tables: key -> (type, default, help). ``argparse`` flags are
# generated from these; config-file keys are validated against them.
RUN_OPTIONS = {
    "seed": (int, 0, "root random seed"),
    "out": (str, None, "output directory"),
    "profile": (str, "desk", "hyperparameter profile (desk or paper)"),
}

MODEL_OVERRIDES = {
    "batch_size": int,
    "learning_rate": float,
    "annealing_steps": int,
    "prior_std": float,
    "dense_embedding_dim": int,
    "embedding_dim_multiplier": float,
    "rnn_dim": int,
    "num_rnn_layers": int,
    "hidden_layer_dim": int,
}

COMMAND_OPTIONS = {
    "generate": {
        "n": (int, 5000, "number of patients"),
        "vocab_size": (int, 120, "event vocabulary size"),
        "classes": (int, 2, "2 for binary, K for multiclass"),
        "positive_rate": (float, 0.20, "target positive fraction (binary)"),
        "neonate_rate": (float, 0.12, "fraction of neonates"),
        "mean_days": (float, 5.0, "median length of stay in days"),
        "events_per_day": (float, 4.0, "mean events per day"),
    },
    "train": {
        "variant": (str, "deterministic", f"one of {sorted(VARIANTS)}"),
        "data": (str, None, "directory produced by generate"),
        "epochs": (int, 30, "max training epochs"),
        "patience": (int, 5, "early-stop patience on validation NLL"),
        **{k: (t, None, "model override") for k, t in MODEL_OVERRIDES.items()},
    },
    "train-ensemble": {
        "variant": (str, "deterministic", f"one of {sorted(VARIANTS)}"),
        "data": (str, None, "directory produced by generate"),
        "epochs": (int, 30, "max training epochs"),
        "patience": (int, 5, "early-stop patience on validation NLL"),
        "m": (int, 10, "ensemble size"),
        "seed_base": (int, 100, "member seeds are seed_base..seed_base+m-1"),
        "workers": (int, 1, "concurrent member trainings"),
        **{k: (t, None, "model override") for k, t in MODEL_OVERRIDES.items()},
    },
    "evaluate": {
        "checkpoint": (str, None, "checkpoint path(s), comma-separated for ensembles"),
        "data": (str, None, "directory produced by generate"),
        "split": (str, "validation", "train, validation, or test"),
        "m_samples": (int, 30, "posterior samples for a single Bayesian model"),
        "bins": (int, 10, "calibration bins"),
        "bootstrap": (int, 1000, "bootstrap resamples for CIs"),
    },
    "uncertainty": {
        "checkpoint": (str, None, "checkpoint path(s)"),
        "data": (str, None, "data directory"),
        "split": (str, "validation", "split to analyze"),
        "m_samples": (int, 30, "posterior samples for a single Bayesian model"),
        "patient": (str, None, "emit one patient's sampled probabilities"),
    },
    "decide": {
        "checkpoint": (str, None, "checkpoint path(s)"),
        "data": (str, None, "data directory"),
        "split": (str, "validation", "split to report decisions on"),
        "m_samples": (int, 30, "posterior samples for a single Bayesian model"),
        "target_recall": (float, 0.7, "required sensitivity"),
    },
    "subgroups": {
        "checkpoint": (str, None, "checkpoint path(s)"),
        "data": (str, None, "data directory"),
        "split": (str, "validation", "split to analyze"),
        "m_samples": (int, 30, "frozen global samples for a Bayesian model"),
        "target_recall": (float, 0.7, "sensitivity target for decision variance"),
    },
    "embeddings": {
        "checkpoint": (str, None, "checkpoint with stochastic embeddings"),
        "data": (str, None, "data directory (vocabulary source)"),
        "top": (int, 10, "highest-uncertainty tokens to print"),
        "bottom": (int, 10, "lowest-uncertainty tokens to print"),
    },
}


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(prog="seqrisk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in COMMAND_OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", type=str, default=None, help="INI config file")
        for key, (typ, _default, help_text) in RUN_OPTIONS.items():
            p.add_argument(f"--{key}", type=typ, default=None, help=help_text)
        for key, (typ, _default, help_text) in options.items():
            flag = "--" + key.replace("_", "-")
            choices = None
            if key == "variant":
                choices = sorted(VARIANTS)
            elif key == "split":
                choices = ["train", "validation", "test"]
            p.add_argument(flag, type=typ, default=None, help=help_text, choices=choices)
    return parser


def load_config_file(path, command):
    """Read an INI file, validating sections and keys."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file not found: {path}")
    allowed_sections = {"run", command}
    known = {"run": set(RUN_OPTIONS), command: set(COMMAND_OPTIONS[command])}
    values = {}
    for section in parser.sections():
        if section not in allowed_sections:
            raise UsageError(f"unknown config section [{section}] for command {command!r}")
        for key in parser[section]:
            if key not in known[section]:
                raise UsageError(f"unknown config key {key!r} in section [{section}]")
            values[key] = parser[section][key]
    return values


def resolve_options(args, command):
    """Merge CLI > config file > defaults into one flat dict."""
    file_values = {}
    if args.config:
        file_values = load_config_file(args.config, command)
    resolved = {}
    table = {**RUN_OPTIONS, **COMMAND_OPTIONS[command]}
    for key, (typ, default, _help) in table.items():
        cli_value = getattr(args, key)
        if cli_value is not None:
            resolved[key] = cli_value
        elif key in file_values:
            try:
                resolved[key] = typ(file_values[key])
            except ValueError as e:
                raise UsageError(f"config key {key!r}: {e}") from None
        else:
            resolved[key] = default
    if resolved["profile"] not in ("desk", "paper"):
        raise UsageError(f"unknown profile {resolved['profile']!r}")
    return resolved


def write_resolved_config(opts, command, out_dir):
    cfg = configparser.ConfigParser()
    cfg["run"] = {k: str(opts[k]) for k in RUN_OPTIONS if opts[k] is not None}
    cfg[command] = {
        k: str(opts[k]) for k in COMMAND_OPTIONS[command] if opts[k] is not None
    }
    with open(Path(out_dir) / "run_config.ini", "w", encoding="utf-8") as fh:
        cfg.write(fh)


def _require(opts, *keys):
    for key in keys:
        if opts[key] is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _out_dir(opts):
    _require(opts, "out")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# data plumbing


def load_dataset(data_dir):
    """Read the three split files and the frozen vocabulary."""
    data_dir = Path(data_dir)
    vocab = Vocabulary.load(data_dir / "vocabulary.tsv")
    parts = {}
    for name in ("train", "validation", "test"):
        records, _ = ingest(data_dir / f"{name}.jsonl", vocab=vocab, frozen=True)
        encode_records(records, vocab, frozen=True)
        parts[name] = records
    from .cohort import CohortSplit

    return CohortSplit(parts["train"], parts["validation"], parts["test"], 0), vocab


def load_models(opts):
    _require(opts, "checkpoint")
    paths = [p.strip() for p in str(opts["checkpoint"]).split(",") if p.strip()]
    models = [load_checkpoint(p).model for p in paths]
    return models


def sample_predictions(models, records, opts):
    """(n, M, dim) prediction samples for an ensemble or a Bayesian model."""
    if len(models) > 1:
        return predict_samples(models, records)
    return predict_samples(
        models[0], records, m_samples=opts["m_samples"], seed=opts["seed"]
    )


# ---------------------------------------------------------------------------
# commands


def cmd_generate(opts):
    out = _out_dir(opts)
    gen = GeneratorConfig(
        n_patients=opts["n"],
        vocab_size=opts["vocab_size"],
        num_classes=opts["classes"],
        positive_rate=opts["positive_rate"],
        neonate_rate=opts["neonate_rate"],
        mean_days=opts["mean_days"],
        events_per_day=opts["events_per_day"],
    )
    records, vocab = generate_synthetic(gen, seed=opts["seed"])
    data = split(records, seed=opts["seed"])
    vocab.recount(data.train)
    serialize(data.train, vocab, out / "train.jsonl")
    serialize(data.validation, vocab, out / "validation.jsonl")
    serialize(data.test, vocab, out / "test.jsonl")
    vocab.save(out / "vocabulary.tsv")
    write_resolved_config(opts, "generate", out)
    print(f"wrote {len(data.train)}/{len(data.validation)}/{len(data.test)} records to {out}")
    return 0


def _model_config(opts, seed):
    overrides = {k: opts[k] for k in MODEL_OVERRIDES if opts.get(k) is not None}
    task = "binary"
    num_classes = 2
    return make_config(
        opts["variant"], opts["profile"], seed=seed, task=task,
        num_classes=num_classes, **overrides,
    )


def _task_adjusted(config, data):
    labels = {r.label for part in (data.train, data.validation, data.test) for r in part}
    k = max(labels) + 1
    if k > 2:
        from dataclasses import replace

        return replace(config, task="multiclass", num_classes=k)
    return config


def cmd_train(opts):
    out = _out_dir(opts)
    _require(opts, "data")
    data, vocab = load_dataset(opts["data"])
    config = _task_adjusted(_model_config(opts, opts["seed"]), data)
    model = SequenceModel(config, CohortSchema.from_vocabulary(vocab))
    history = train(
        model, data, epochs=opts["epochs"], patience=opts["patience"],
        log_file=str(out / "train_log.txt"),
    )
    save_checkpoint(model, out / "model.ckpt", global_step=history.global_step)
    write_resolved_config(opts, "train", out)
    print(
        f"trained {opts['variant']} to val NLL {history.best_val_nll:.4f} "
        f"(best epoch {history.best_epoch}); checkpoint at {out / 'model.ckpt'}"
    )
    return 0


def cmd_train_ensemble(opts):
    out = _out_dir(opts)
    _require(opts, "data")
    data, vocab = load_dataset(opts["data"])
    config = _task_adjusted(_model_config(opts, opts["seed"]), data)
    seeds = tuple(opts["seed_base"] + i for i in range(opts["m"]))
    spec = EnsembleSpec(config, seeds)
    models = train_ensemble(
        spec, data, CohortSchema.from_vocabulary(vocab),
        epochs=opts["epochs"], patience=opts["patience"],
        workers=opts["workers"], log_dir=str(out),
    )
    for seed, model in zip(seeds, models):
        save_checkpoint(model, out / f"member_{seed}.ckpt")
    write_resolved_config(opts, "train-ensemble", out)
    print(f"trained {len(models)} members; checkpoints in {out}")
    return 0


def _split_records(data, name):
    try:
        return {"train": data.train, "validation": data.validation, "test": data.test}[name]
    except KeyError:
        raise UsageError(f"unknown split {name!r}") from None


def _binary_scores(samples):
    if samples.shape[2] != 1:
        raise UsageError("this command needs a binary-task model")
    return samples[:, :, 0]


def cmd_evaluate(opts):
    out = _out_dir(opts)
    _require(opts, "data")
    models = load_models(opts)
    data, _ = load_dataset(opts["data"])
    records = _split_records(data, opts["split"])
    labels = np.array([r.label for r in records])
    samples = sample_predictions(models, records, opts)
    marginal = samples.mean(axis=1)
    binary = samples.shape[2] == 1
    bins, n_boot, seed, split_name = opts["bins"], opts["bootstrap"], opts["seed"], opts["split"]

    reports = []

    def add(name, fn, scores):
        value = fn(scores, labels)
        lo, hi = uq.bootstrap_ci(fn, scores, labels, n_boot=n_boot, seed=seed)
        reports.append(MetricReport(name, split_name, value, min(lo, value), max(hi, value)))

    if binary:
        flat = marginal[:, 0]
        add("auc_pr", uq.auc_pr, flat)
        add("auc_roc", uq.auc_roc, flat)
        add("nll", uq.nll, flat)
        add("ece", lambda s, y: uq.ece(s, y, bins), flat)
        add("ace", lambda s, y: uq.ace(s, y, bins), flat)
    else:
        add("nll", uq.nll, marginal)
        add("ece", lambda s, y: uq.ece(s, y, bins), marginal)
        add("ace", lambda s, y: uq.ace(s, y, bins), marginal)
        k = min(5, marginal.shape[1])
        for field in ("recall", "precision", "f1"):
            add(
                f"top{k}_{field}",
                lambda s, y, f=field: getattr(uq.top_k(s, y, k), f),
                marginal,
            )
    uq.write_metric_reports(reports, out / "metrics.csv")
    _write_member_metrics(samples, labels, bins, out / "member_metrics.csv", binary)
    write_resolved_config(opts, "evaluate", out)
    for r in reports:
        print(f"{r.metric} [{r.split}] = {r.value:.6f} (95% CI {r.ci_lo:.6f}..{r.ci_hi:.6f})")
    return 0


def _write_member_metrics(samples, labels, bins, path, binary):
    """Per-member (or per-sample) dataset-level metrics, plus mean/std rows."""
    m = samples.shape[1]
    if binary:
        metric_fns = {
            "auc_pr": uq.auc_pr,
            "auc_roc": uq.auc_roc,
            "nll": uq.nll,
            "ece": lambda s, y: uq.ece(s, y, bins),
            "ace": lambda s, y: uq.ace(s, y, bins),
        }
        per_member_scores = samples[:, :, 0].T
    else:
        k = min(5, samples.shape[2])
        metric_fns = {
            "nll": uq.nll,
            "ece": lambda s, y: uq.ece(s, y, bins),
            "ace": lambda s, y: uq.ace(s, y, bins),
            f"top{k}_recall": lambda s, y: uq.top_k(s, y, k).recall,
        }
        per_member_scores = [samples[:, j, :] for j in range(m)]
    table = {
        name: [fn(per_member_scores[j], labels) for j in range(m)]
        for name, fn in metric_fns.items()
    }
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member"] + list(table))
        for j in range(m):
            writer.writerow([str(j)] + [format_value(table[name][j]) for name in table])
        values = {name: np.asarray(vals) for name, vals in table.items()}
        writer.writerow(["mean"] + [format_value(values[name].mean()) for name in table])
        writer.writerow(["std"] + [format_value(values[name].std()) for name in table])


def cmd_uncertainty(opts):
    out = _out_dir(opts)
    _require(opts, "data")
    models = load_models(opts)
    data, _ = load_dataset(opts["data"])
    records = _split_records(data, opts["split"])
    samples = _binary_scores(sample_predictions(models, records, opts))
    if opts["patient"] is not None:
        index = {r.patient_id: i for i, r in enumerate(records)}
        if opts["patient"] not in index:
            raise UsageError(f"patient {opts['patient']!r} not in split {opts['split']}")
        row = samples[index[opts["patient"]]]
        with open(out / "patient_samples.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample", "lambda"])
            for j, value in enumerate(row):
                writer.writerow([str(j), format_value(value)])
        print(f"wrote {len(row)} sampled probabilities for patient {opts['patient']}")
    else:
        stds = samples.std(axis=1)
        ranges = samples.max(axis=1) - samples.min(axis=1)
        with open(out / "patient_uncertainty.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient_id", "mean_lambda", "std_lambda", "range_lambda"])
            for rec, row, s, rg in zip(records, samples, stds, ranges):
                writer.writerow(
                    [rec.patient_id, format_value(row.mean()), format_value(s), format_value(rg)]
                )
        uq.write_histogram(stds, out / "std_histogram.csv", bins=20, lo=0.0, hi=max(0.5, stds.max()))
        uq.write_histogram(ranges, out / "range_histogram.csv", bins=20, lo=0.0, hi=1.0)
        print(f"wrote uncertainty summaries for {len(records)} patients")
    write_resolved_config(opts, "uncertainty", out)
    return 0


def _fit_policy(models, data, opts):
    """Per-member thresholds calibrated on the validation split."""
    val_samples = _binary_scores(sample_predictions(models, data.validation, opts))
    val_labels = np.array([r.label for r in data.validation])
    return DecisionPolicy.fit(val_samples.T, val_labels, opts["target_recall"]), val_samples, val_labels


def cmd_decide(opts):
    out = _out_dir(opts)
    _require(opts, "data")
    models = load_models(opts)
    data, _ = load_dataset(opts["data"])
    policy, val_samples, val_labels = _fit_policy(models, data, opts)
    marg_threshold = optimize_threshold(
        val_samples.mean(axis=1), val_labels, opts["target_recall"]
    )
    records = _split_records(data, opts["split"])
    samples = _binary_scores(sample_predictions(models, records, opts))
    rows = []
    for rec, row in zip(records, samples):
        pu = PredictiveUncertainty(row.reshape(-1, 1))
        dist = decision_distribution(pu, policy)
        mean = float(row.mean())
        rows.append((rec.patient_id, mean, float(row.std()), dist.phi, decide(mean, marg_threshold)))
    write_decision_report(rows, out / "decisions.csv")
    with open(out / "thresholds.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member", "threshold"])
        for j, t in enumerate(policy.thresholds):
            writer.writerow([str(j), format_value(t)])
        writer.writerow(["marginal", format_value(marg_threshold)])
    write_resolved_config(opts, "decide", out)
    print(f"wrote decisions for {len(rows)} patients at target recall {opts['target_recall']}")
    return 0


def cmd_subgroups(opts):
    out = _out_dir(opts)
    _require(opts, "data")
    models = load_models(opts)
    data, _ = load_dataset(opts["data"])
    records = _split_records(data, opts["split"])
    labels = np.array([r.label for r in records])
    samples = _binary_scores(sample_predictions(models, records, opts))
    policy, _, _ = _fit_policy(models, data, opts)
    partitions = subgroups(records)
    pus = [PredictiveUncertainty(row.reshape(-1, 1)) for row in samples]
    dists = [decision_distribution(pu, policy) for pu in pus]
    correlations = []
    for part_name, partition in partitions.items():
        report = insight.stratified_metrics(
            samples.T, labels, partition, uq.auc_pr, "auc_pr"
        )
        insight.write_subgroup_member_csv(report, out / f"subgroup_{part_name}_members.csv")
        names = [g for g in partition if g not in report.flags]
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                try:
                    r = insight.cross_subgroup_correlation(report, a, b)
                except ValueError:
                    continue
                correlations.append((part_name, a, b, r))
        summaries = insight.uncertainty_by_subgroup(pus, dists, partition)
        insight.write_uncertainty_by_subgroup_csv(
            summaries, out / f"subgroup_{part_name}_uncertainty.csv"
        )
    gender_report = insight.stratified_metrics(
        samples.T, labels, partitions["gender"], uq.auc_pr, "auc_pr"
    )
    if not gender_report.flags:
        insight.write_subgroup_pair_csv(gender_report, "F", "M", out / "gender_pair.csv")
    with open(out / "subgroup_correlations.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["partition", "group_a", "group_b", "pearson_r"])
        for part_name, a, b, r in correlations:
            writer.writerow([part_name, a, b, format_value(r)])
    write_resolved_config(opts, "subgroups", out)
    print(f"wrote subgroup reports for {len(records)} patients to {out}")
    return 0


def cmd_embeddings(opts):
    out = _out_dir(opts)
    _require(opts, "data")
    models = load_models(opts)
    if len(models) != 1:
        raise UsageError("embedding analysis takes exactly one checkpoint")
    data_dir = Path(opts["data"])
    vocab = Vocabulary.load(data_dir / "vocabulary.tsv")
    try:
        report = insight.entropy_frequency_report(models[0], vocab)
    except ValueError as e:
        raise UsageError(str(e)) from None
    insight.write_entropy_csv(report, out / "embedding_entropy.csv")
    with open(out / "entropy_extremes.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "token", "count", "entropy"])
        for token, entropy, count in report.top(opts["top"]):
            writer.writerow(["highest", token, str(count), format_value(entropy)])
        for token, entropy, count in report.bottom(opts["bottom"]):
            writer.writerow(["lowest", token, str(count), format_value(entropy)])
    write_resolved_config(opts, "embeddings", out)
    print(f"entropy/log10(count) Pearson r = {report.pearson_log10:.4f}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "train-ensemble": cmd_train_ensemble,
    "evaluate": cmd_evaluate,
    "uncertainty": cmd_uncertainty,
    "decide": cmd_decide,
    "subgroups": cmd_subgroups,
    "embeddings": cmd_embeddings,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        opts = resolve_options(args, args.command)
        return COMMANDS[args.command](opts)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("traceback", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
