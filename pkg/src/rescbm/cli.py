"""Command-line surface: bank assembly, training, discovery, evaluation,
synthetic-task generation, and a self-check.

Exit codes: 0 success, 1 validation error, 2 runtime error.  Every command
is deterministic given its configuration and seed.
"""

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data_io, evaluation
from .concept_bank import assemble_base_bank, build_bank, load_bank, save_bank
from .concept_discovery import run_incremental_discovery, save_snap_history
from .config import ConfigError, RunConfig, build_run_config, save_config_file
from .data_io import EmbeddingMatrix, generate_synthetic_task
from .evaluation import RunReport, accuracy, cue, emit_report
from .optimizer_core import (
    LinearClassifier,
    RegularizerSpec,
    cross_entropy,
    elastic_net,
    finite_difference_check,
    forward,
    gradients,
)
from .residual_trainer import (
    init_residual_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    stratified_split,
    train_pcbm,
    train_residual,
)

_CONFIG_FLAGS = (
    "features",
    "labels",
    "classes",
    "bank",
    "candidates",
    "class_embeddings",
    "output_dir",
    "lam",
    "l1_ratio",
    "n_residual",
    "batch_size",
    "epochs",
    "learning_rate",
    "epsilon",
    "val_fraction",
    "patience",
    "alpha",
    "top_m",
    "noise_scale",
    "discovery_epochs",
    "discovery_learning_rate",
    "seed",
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    for key in _CONFIG_FLAGS:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)


def _config_from_args(args) -> RunConfig:
    overrides = {key: getattr(args, key) for key in _CONFIG_FLAGS}
    return build_run_config(args.config, overrides)


def _load_dataset(config: RunConfig):
    config.require("features", "labels", "classes")
    features = data_io.load_embedding_matrix(config.features)
    class_names = data_io.load_token_list(config.classes)
    table = data_io.load_label_table(config.labels, class_names)
    if features.rows != len(table):
        raise ConfigError(
            f"features have {features.rows} rows but labels describe {len(table)} samples"
        )
    return features, table


def _write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "pass1_loss", "pass2_loss", "val_accuracy"])
        for i, (p1, p2, acc) in enumerate(
            zip(trace.pass1_losses, trace.pass2_losses, trace.val_accuracy)
        ):
            writer.writerow([i, repr(p1), repr(p2), repr(acc)])
        fh.write(f"# wall_clock_seconds = {trace.wall_clock:.3f}\n")


def _model_report(model, val_accuracy, config, snaps=(), snap_ref="", variant="residual"):
    n_concepts = len(model.base_bank) + model.n_residual
    snapshot = dict(config.snapshot())
    snapshot["variant"] = variant
    return RunReport(
        accuracy=val_accuracy,
        n_concepts=n_concepts,
        avg_letters=model.base_bank.avg_letters,
        cue=cue(val_accuracy, n_concepts, model.base_bank.avg_letters),
        seed=config.training.seed,
        config=snapshot,
        snap_history=tuple(snaps),
        snap_history_ref=snap_ref,
    )


def cmd_assemble_bank(args) -> int:
    general = data_io.load_token_list(args.general)
    associated = data_io.load_token_list(args.associated) if args.associated else []
    candidate = load_bank(args.candidates)
    tokens = assemble_base_bank(general, associated, candidate)
    if not tokens:
        print("warning: assembled bank is empty", file=sys.stderr)
        return 1
    index = {t: i for i, t in enumerate(candidate.tokens)}
    rows = candidate.embeddings.data[[index[t] for t in tokens]]
    bank = build_bank(tokens, EmbeddingMatrix(rows))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_bank(bank, out / "bank.manifest", out / "bank_tokens.txt", out / "bank_embeddings.emb")
    print(f"assembled bank with {len(bank)} concepts -> {out / 'bank.manifest'}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    config.require("bank")
    features, table = _load_dataset(config)
    bank = load_bank(config.bank)
    n_classes = len(table.class_names)

    model = init_residual_model(bank, n_classes, config.training)
    model, trace = train_residual(model, features, table.labels)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint")
    _write_trace_csv(trace, out / "trace.csv")
    variant = "pcbm-equivalent" if config.training.n_residual == 0 else "residual"
    report = _model_report(model, trace.val_accuracy[-1], config, variant=variant)
    emit_report(report, out / "report.txt")
    print(f"validation accuracy {trace.val_accuracy[-1]:.4f}, cue {report.cue:.4f}")
    print(f"checkpoint -> {out / 'checkpoint'}")
    return 0


def cmd_discover(args) -> int:
    config = _config_from_args(args)
    config.require("candidates")
    features, table = _load_dataset(config)
    model = load_checkpoint(args.checkpoint)
    candidates = load_bank(config.candidates)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    if model.n_residual == 0:
        print("checkpoint has no residual vectors; nothing to discover")
        return 0

    class_embeddings = None
    if config.class_embeddings is not None:
        class_embeddings = data_io.load_embedding_matrix(config.class_embeddings)
    model, history = run_incremental_discovery(
        model, candidates, features, table.labels,
        class_name_embeddings=class_embeddings,
    )
    save_checkpoint(model, out / "checkpoint")
    save_snap_history(history, out / "snap_history.txt")
    report = _model_report(
        model,
        history[-1].accuracy_after,
        config,
        snaps=history,
        snap_ref="snap_history.txt",
        variant="discovered",
    )
    emit_report(report, out / "report.txt")
    for rec in history:
        print(
            f"round {rec.round_index}: snapped {rec.token!r} (cosine {rec.cosine:.3f}), "
            f"accuracy {rec.accuracy_before:.4f} -> {rec.accuracy_after:.4f}"
        )
    return 0


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    features, table = _load_dataset(config)
    model = load_checkpoint(args.checkpoint)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.shots is not None:
        train_idx = evaluation.few_shot_split(table, args.shots, model.config.seed)
        mask = np.ones(len(table), dtype=bool)
        mask[train_idx] = False
        eval_idx = np.flatnonzero(mask)
        shot_config = replace(model.config, n_residual=0)
        fresh = init_residual_model(model.base_bank, len(table.class_names), shot_config)
        fresh, _ = train_residual(
            fresh, features, table.labels, train_idx=train_idx, val_idx=eval_idx
        )
        _, predicted = predict(fresh, EmbeddingMatrix(features.data[eval_idx]))
        acc = accuracy(predicted, table.labels[eval_idx])
        print(f"{args.shots}-shot: trained on {len(train_idx)} samples, accuracy {acc:.4f}")
        report = _model_report(fresh, acc, config, variant=f"few-shot-{args.shots}")
    else:
        _, val_idx = stratified_split(
            table.labels, model.config.val_fraction, model.config.seed
        )
        _, predicted = predict(model, EmbeddingMatrix(features.data[val_idx]))
        acc = accuracy(predicted, table.labels[val_idx])
        print(f"validation accuracy {acc:.4f}")
        report = _model_report(model, acc, config, variant="eval")
    emit_report(report, out / "report.txt")
    print(f"cue {report.cue:.4f} -> {out / 'report.txt'}")
    return 0


def cmd_synth(args) -> int:
    config = _config_from_args(args)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = generate_synthetic_task(
        args.n_samples,
        args.dim,
        args.n_candidates,
        args.n_base,
        args.n_planted,
        args.n_classes,
        config.training.seed,
    )
    data_io.save_embedding_matrix(task.features, out / "features.emb")
    data_io.save_label_table(task.labels, out / "labels.csv")
    data_io.save_token_list(task.labels.class_names, out / "classes.txt")
    save_bank(
        task.candidate_bank,
        out / "candidates.manifest",
        out / "candidate_tokens.txt",
        out / "candidate_embeddings.emb",
    )
    base_tokens = [task.candidate_bank.tokens[i] for i in task.base_token_indices]
    rows = task.candidate_bank.embeddings.data[list(task.base_token_indices)]
    save_bank(
        build_bank(base_tokens, EmbeddingMatrix(rows)),
        out / "bank.manifest",
        out / "bank_tokens.txt",
        out / "bank_embeddings.emb",
    )
    data_io.save_token_list(
        [task.candidate_bank.tokens[i] for i in task.planted_missing] or ["(none)"],
        out / "planted_tokens.txt",
    )
    run_config = RunConfig(
        features=out / "features.emb",
        labels=out / "labels.csv",
        classes=out / "classes.txt",
        bank=out / "bank.manifest",
        candidates=out / "candidates.manifest",
        output_dir=out / "run",
        training=replace(config.training, n_residual=args.n_planted),
    )
    save_config_file(run_config, out / "run.cfg")
    print(f"synthetic task with {args.n_samples} samples -> {out}")
    print(f"ready-to-train config -> {out / 'run.cfg'}")
    return 0


def _selfcheck_gradients(inject_error: bool) -> float:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(5):
        n, d, k = int(rng.integers(4, 12)), int(rng.integers(2, 8)), int(rng.integers(2, 5))
        x = rng.standard_normal((n, d))
        labels = rng.integers(0, k, n)
        reg = RegularizerSpec(lam=1e-3, l1_ratio=0.5)
        w = rng.standard_normal((k, d))
        w += np.sign(w) * 0.05
        b = rng.standard_normal(k)

        def loss_fn(params):
            clf = LinearClassifier(params["w"], params["b"])
            loss = cross_entropy(forward(clf, x), labels) + elastic_net(clf, reg)
            gw, gb, _ = gradients(clf, x, labels, reg)
            if inject_error:
                gw = gw * 1.05
            return loss, {"w": gw, "b": gb}

        worst = max(worst, finite_difference_check(loss_fn, {"w": w, "b": b}, h=1e-6))
    return worst


def cmd_selfcheck(args) -> int:
    failures = []

    err = _selfcheck_gradients(args.inject_gradient_error)
    status = "pass" if err <= 1e-5 else "FAIL"
    print(f"[{status}] gradient suite: max relative error {err:.3e} (limit 1e-5)")
    if err > 1e-5:
        failures.append("gradients")

    fixtures = [
        ((0.8044, 175, 9), 5.1073),
        ((0.8489, 100, 27), 3.1441),
        ((0.8803, 247, 7), 5.0914),
    ]
    for (acc, n, letters), expected in fixtures:
        got = cue(acc, n, letters)
        ok = abs(got - expected) <= 5e-5
        print(f"[{'pass' if ok else 'FAIL'}] cue({acc}, {n}, {letters}) = {got:.4f} (expect {expected})")
        if not ok:
            failures.append("cue")

    task = generate_synthetic_task(200, 16, 20, 5, 0, 3, seed=1)
    from .concept_discovery import _subset_bank

    bank = _subset_bank(
        task.candidate_bank,
        set(task.candidate_bank.tokens[i] for i in task.base_token_indices),
    )
    from .residual_trainer import TrainingConfig

    cfg = TrainingConfig(epochs=20, seed=1, n_residual=0)
    psi_c, _, _ = train_pcbm(task.features, task.labels.labels, bank, cfg)
    model, _ = train_residual(
        init_residual_model(bank, 3, cfg), task.features, task.labels.labels
    )
    identical = np.array_equal(model.psi_c.weights, psi_c.weights) and np.array_equal(
        model.psi_c.bias, psi_c.bias
    )
    print(f"[{'pass' if identical else 'FAIL'}] zero-residual training reduces to the plain bottleneck")
    if not identical:
        failures.append("reduction")

    if failures:
        print(f"selfcheck failed: {', '.join(failures)}")
        return 1
    print("selfcheck passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rescbm",
        description="Concept-bottleneck training and concept discovery on precomputed embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("assemble-bank", help="intersect token lists with a candidate bank")
    p.add_argument("--general", type=Path, required=True)
    p.add_argument("--associated", type=Path)
    p.add_argument("--candidates", type=Path, required=True, help="candidate bank manifest")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_assemble_bank)

    p = sub.add_parser("train", help="train the base classifier and residual vectors")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("discover", help="convert residual vectors into named concepts")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally few-shot")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--shots", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic verification task")
    p.add_argument("--n-samples", type=int, default=400)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--n-candidates", type=int, default=40)
    p.add_argument("--n-base", type=int, default=7)
    p.add_argument("--n-planted", type=int, default=3)
    p.add_argument("--n-classes", type=int, default=4)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selfcheck", help="run built-in correctness checks")
    p.add_argument("--inject-gradient-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, data_io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the contract maps the rest to 2
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
