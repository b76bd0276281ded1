# main.py

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

import config
from analysis.codebook_learning import codebook_step, init_from_index, to_index
from analysis.diagnostics import divergence_report, empirical_frequency, grad_bias_mc, timing_profile
from analysis.toy_trainer import FULL, ToyTask, gen_task, sample_size_sweep, train
from sampling.core import (
    ConfigurationError,
    DimensionError,
    DomainError,
    EmbeddingMatrix,
    MidxError,
    NumericalError,
    logits,
    softmax,
)
from sampling.quantization import QuantizerKind, build_index, distortion
from sampling.sampled_softmax import ESTIMATORS, IMPORTANCE, SAMPLED
from sampling.samplers import SamplerKind, SamplerSpec, draw, make_sampler, prepare, proposal_distribution
from utils.file_handler import (
    load_embeddings,
    load_index,
    read_labels,
    save_embeddings,
    save_index,
    write_csv,
    write_json,
    write_labels,
    write_records_csv,
    write_train_report,
)
from utils.session import RunSession, configure_logging, parse_with_config, session_from_args

logger = logging.getLogger(__name__)

SAMPLER_CHOICES = [kind.value for kind in SamplerKind]
QUANTIZER_CHOICES = [kind.value for kind in QuantizerKind]


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def non_negative_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return value


def frequency_draws(text: str) -> int:
    value = int(text)
    if value < config.MIN_FREQUENCY_DRAWS:
        raise argparse.ArgumentTypeError(f"need at least {config.MIN_FREQUENCY_DRAWS} draws, got {text}")
    return value


def bias_trials(text: str) -> int:
    value = int(text)
    if value != 0 and value < config.MIN_BIAS_TRIALS:
        raise argparse.ArgumentTypeError(f"expected 0 or at least {config.MIN_BIAS_TRIALS} trials, got {text}")
    return value


def _check_counts(args: argparse.Namespace) -> None:
    # Values from --config bypass the argparse type checks.
    frequency = getattr(args, "frequency", None)
    if frequency is not None and frequency < config.MIN_FREQUENCY_DRAWS:
        raise ConfigurationError(f"--frequency needs at least {config.MIN_FREQUENCY_DRAWS} draws, got {frequency}")
    trials = getattr(args, "bias_trials", 0)
    if trials and trials < config.MIN_BIAS_TRIALS:
        raise ConfigurationError(f"--bias-trials must be 0 or at least {config.MIN_BIAS_TRIALS}, got {trials}")


def _emit_summary(summary: dict) -> None:
    write_json(sys.stdout, summary)


def _load_queries(args: argparse.Namespace, emb: EmbeddingMatrix) -> np.ndarray:
    if not args.queries:
        raise ConfigurationError(f"{args.command} needs --queries")
    queries = load_embeddings(args.queries).data
    if queries.shape[1] != emb.dim:
        raise DimensionError(f"Queries have dimension {queries.shape[1]}, catalog has {emb.dim}")
    return queries


def _sampler_spec(args: argparse.Namespace, emb: EmbeddingMatrix) -> SamplerSpec:
    kind = SamplerKind(args.sampler)
    if kind.is_midx:
        if not args.index:
            raise ConfigurationError(f"--sampler {kind.value} needs --index")
        return make_sampler(kind, emb.n_classes, index=load_index(args.index, emb))
    frequencies = None
    if kind == SamplerKind.UNIGRAM:
        if not args.labels:
            raise ConfigurationError("--sampler unigram needs --labels for class frequencies")
        labels = read_labels(args.labels)
        if labels.size and (labels.min() < 0 or labels.max() >= emb.n_classes):
            raise DimensionError("Label outside the catalog")
        frequencies = np.bincount(labels, minlength=emb.n_classes)
    return make_sampler(kind, emb.n_classes, frequencies=frequencies)


def cmd_gen(args: argparse.Namespace, session: RunSession) -> int:
    """Writes a clustered catalog, its queries and their labels."""
    try:
        task = gen_task(args.classes, args.dim, args.num_queries, args.clusters, args.noise, session.seed)
    except DomainError as e:
        raise ConfigurationError(str(e)) from e
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigurationError(f"Cannot create output directory {out}: {e}") from e
    paths = {"catalog": out / "catalog.emb", "queries": out / "queries.emb", "labels": out / "labels.csv"}
    save_embeddings(paths["catalog"], task.catalog)
    save_embeddings(paths["queries"], task.queries)
    write_labels(paths["labels"], task.labels)
    _emit_summary({name: str(path) for name, path in paths.items()})
    return config.EXIT_OK


def cmd_build(args: argparse.Namespace, session: RunSession) -> int:
    emb = load_embeddings(args.emb)
    index = build_index(emb, args.k, QuantizerKind(args.kind), args.iters, session.rng())
    save_index(args.out, index)
    _emit_summary(
        {
            "n": index.n_classes,
            "d": index.dim,
            "k": index.k,
            "kind": index.kind.value,
            "distortion": distortion(index),
            "nonempty_cells": index.nonempty_cells,
        }
    )
    return config.EXIT_OK


def _query(args: argparse.Namespace, emb: EmbeddingMatrix, required: bool) -> Optional[np.ndarray]:
    if not args.queries and not required:
        return None
    queries = _load_queries(args, emb)
    if not 0 <= args.query_id < queries.shape[0]:
        raise DimensionError(f"--query-id {args.query_id} outside 0..{queries.shape[0] - 1}")
    return queries[args.query_id]


def cmd_sample(args: argparse.Namespace, session: RunSession) -> int:
    """
    Draws classes for one query.

    Without ``--frequency`` it prints ``index,prob`` per draw. With it, it
    prints the sampling-frequency table sorted by descending empirical
    frequency.
    """
    _check_counts(args)
    emb = load_embeddings(args.emb)
    spec = _sampler_spec(args, emb)
    z = _query(args, emb, required=spec.kind.is_midx or args.frequency is not None)
    rng = session.rng()

    if args.frequency is None:
        batch = draw(prepare(spec, z), args.m, rng)
        write_csv(sys.stdout, ("index", "prob"), zip(batch.indices.tolist(), batch.probs.tolist()))
        return config.EXIT_OK

    empirical = empirical_frequency(spec, z, args.frequency, rng)
    proposal = proposal_distribution(prepare(spec, z))
    target = softmax(logits(emb, z))
    order = np.argsort(-empirical, kind="stable")
    cumulative = np.cumsum(empirical[order])
    rows = (
        (int(i), float(empirical[i]), float(proposal[i]), float(target[i]), float(c))
        for i, c in zip(order, cumulative)
    )
    write_csv(sys.stdout, ("class_id", "empirical", "proposal", "softmax", "cumulative"), rows)
    return config.EXIT_OK


def cmd_eval(args: argparse.Namespace, session: RunSession) -> int:
    """Prints a divergence report per query, with optional Monte-Carlo gradient bias."""
    _check_counts(args)
    emb = load_embeddings(args.emb)
    spec = _sampler_spec(args, emb)
    queries = _load_queries(args, emb)
    if args.max_queries is not None:
        queries = queries[: args.max_queries]
    labels = read_labels(args.labels) if args.labels else None
    streams = session.streams(queries.shape[0])

    records = []
    for j, z in enumerate(queries):
        o = logits(emb, z)
        record = {"query_id": j, **asdict(divergence_report(spec, prepare(spec, z), o, args.m))}
        if args.bias_trials:
            positive = int(labels[j]) if labels is not None and j < labels.shape[0] else int(np.argmax(o))
            estimate = grad_bias_mc(
                spec,
                z,
                emb,
                positive,
                args.m,
                args.bias_trials,
                rng=streams[j],
                estimator=args.estimator,
                threads=session.threads,
            )
            record.update(
                measured_bias=estimate.measured_bias,
                bias_std_error=estimate.std_error,
                d2_bias_bound=estimate.bound,
                bias_within_bound=estimate.within_bound,
            )
        records.append(record)

    if args.format == "csv":
        write_records_csv(sys.stdout, records)
    else:
        for record in records:
            write_json(sys.stdout, record)
    return config.EXIT_OK


def cmd_bench(args: argparse.Namespace, session: RunSession) -> int:
    rows = timing_profile(
        [SamplerKind(s) for s in args.samplers],
        args.sizes,
        args.k,
        args.dim,
        args.m,
        repeats=args.repeats,
        seed=session.seed,
        quantizer=QuantizerKind(args.quantizer),
    )
    write_records_csv(sys.stdout, rows)
    return config.EXIT_OK


def cmd_train(args: argparse.Namespace, session: RunSession) -> int:
    """Trains the catalog of a generated task and prints the TrainReport CSV."""
    emb = load_embeddings(args.emb)
    queries = _load_queries(args, emb)
    task = ToyTask(queries=queries, catalog=emb, labels=read_labels(args.labels), seed=session.seed)
    report = train(
        task,
        args.sampler,
        m=args.m,
        epochs=args.epochs,
        lr=args.lr,
        rebuild_every=args.rebuild_every,
        seed=session.seed,
        k=args.k,
        quantizer=QuantizerKind(args.quantizer),
        estimator=args.estimator,
    )
    if args.out:
        with open(args.out, "w", newline="") as f:
            write_train_report(f, report)
    else:
        write_train_report(sys.stdout, report)
    if report.aborted:
        logger.error("Training aborted after %d epochs", len(report.losses) - 1)
        return config.EXIT_NUMERICAL
    return config.EXIT_OK


def cmd_sweep(args: argparse.Namespace, session: RunSession) -> int:
    """Trains the task for every sampler and sample size and prints one CSV row per run."""
    emb = load_embeddings(args.emb)
    queries = _load_queries(args, emb)
    task = ToyTask(queries=queries, catalog=emb, labels=read_labels(args.labels), seed=session.seed)
    points = sample_size_sweep(
        task,
        args.samplers,
        m_values=args.m_values,
        seeds=range(session.seed, session.seed + args.seeds),
        epochs=args.epochs,
        lr=args.lr,
        k=args.k,
        quantizer=QuantizerKind(args.quantizer),
        estimator=args.estimator,
    )
    if args.out:
        with open(args.out, "w", newline="") as f:
            write_records_csv(f, points)
    else:
        write_records_csv(sys.stdout, points)
    aborted = sum(p.aborted for p in points)
    if aborted:
        logger.error("%d of %d sweep runs aborted", aborted, len(points))
        return config.EXIT_NUMERICAL
    return config.EXIT_OK


def cmd_learn(args: argparse.Namespace, session: RunSession) -> int:
    """Refines the codebooks of an index by gradient descent and writes the re-assigned index."""
    emb = load_embeddings(args.emb)
    queries = _load_queries(args, emb)
    rng = session.rng()
    if args.index:
        start = load_index(args.index, emb)
    else:
        start = build_index(emb, args.k, QuantizerKind(args.kind), seed=rng)
    state, trajectory = codebook_step(
        init_from_index(start), emb, queries, args.lr, args.steps, args.lam, args.batch, rng
    )
    learned = to_index(state, emb)
    save_index(args.out, learned)
    _emit_summary(
        {
            "steps": args.steps,
            "initial_loss": trajectory[0].total(args.lam),
            "final_loss": trajectory[-1].total(args.lam),
            "initial_kl": trajectory[0].kl,
            "final_kl": trajectory[-1].kl,
            "distortion": distortion(learned),
            "nonempty_cells": learned.nonempty_cells,
        }
    )
    return config.EXIT_OK


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Seed for every random draw")
    common.add_argument("--threads", type=int, default=1, help="Monte-Carlo worker streams")
    common.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    common.add_argument("-v", "--verbose", action="count", default=0)
    return common


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--emb", required=True, help="Catalog embedding file (MIDXEMB1)")
    p.add_argument("--sampler", choices=SAMPLER_CHOICES, default=SamplerKind.MIDX_FAST.value)
    p.add_argument("--index", help="Index file (MIDXIDX1) for MIDX samplers")
    p.add_argument("--labels", help="Label CSV; class frequencies for the unigram sampler")
    p.add_argument("--queries", help="Query embedding file (MIDXEMB1)")
    p.add_argument("--m", type=positive_int, default=config.DEFAULT_NUM_SAMPLES, help="Draws per query")


def build_parser() -> Tuple[argparse.ArgumentParser, List[argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="midx", description="Adaptive sampled softmax with inverted multi-index samplers"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()
    subs = []

    p = commands.add_parser("gen", parents=[common], help="Generate a clustered toy task")
    p.add_argument("--classes", type=positive_int, default=config.TOY_CLASSES)
    p.add_argument("--dim", type=positive_int, default=config.TOY_DIM)
    p.add_argument("--num-queries", type=positive_int, default=config.TOY_QUERIES)
    p.add_argument("--clusters", type=positive_int, default=config.TOY_CLUSTERS)
    p.add_argument("--noise", type=non_negative_float, default=config.TOY_NOISE)
    p.add_argument("--out", default=".", help="Output directory")
    p.set_defaults(handler=cmd_gen)
    subs.append(p)

    p = commands.add_parser("build", parents=[common], help="Build an inverted multi-index")
    p.add_argument("--emb", required=True)
    p.add_argument("--k", type=positive_int, default=config.DEFAULT_CODEWORDS)
    p.add_argument("--kind", choices=QUANTIZER_CHOICES, default=config.DEFAULT_QUANTIZER)
    p.add_argument("--iters", type=positive_int, default=config.KMEANS_ITERS)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build)
    subs.append(p)

    p = commands.add_parser("sample", parents=[common], help="Draw classes for a query")
    _add_sampler_flags(p)
    p.add_argument("--query-id", type=int, default=0)
    p.add_argument("--frequency", type=frequency_draws, help="Emit the frequency table from this many draws")
    p.set_defaults(handler=cmd_sample)
    subs.append(p)

    p = commands.add_parser("eval", parents=[common], help="Divergence reports per query")
    _add_sampler_flags(p)
    p.add_argument("--max-queries", type=positive_int)
    p.add_argument("--bias-trials", type=bias_trials, default=0, help="Monte-Carlo trials for gradient bias")
    p.add_argument("--estimator", choices=ESTIMATORS, default=IMPORTANCE)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(handler=cmd_eval)
    subs.append(p)

    p = commands.add_parser("bench", parents=[common], help="Prepare and draw timing table")
    p.add_argument("--samplers", nargs="+", choices=SAMPLER_CHOICES, default=SAMPLER_CHOICES)
    p.add_argument("--sizes", nargs="+", type=positive_int, default=[1_000, 10_000])
    p.add_argument("--dim", type=positive_int, default=config.TOY_DIM)
    p.add_argument("--k", type=positive_int, default=config.DEFAULT_CODEWORDS)
    p.add_argument("--m", type=positive_int, default=config.DEFAULT_NUM_SAMPLES)
    p.add_argument("--repeats", type=positive_int, default=config.TIMING_REPEATS)
    p.add_argument("--quantizer", choices=QUANTIZER_CHOICES, default=config.DEFAULT_QUANTIZER)
    p.set_defaults(handler=cmd_bench)
    subs.append(p)

    p = commands.add_parser("train", parents=[common], help="Train the toy task catalog")
    p.add_argument("--emb", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--sampler", choices=SAMPLER_CHOICES + [FULL], default=SamplerKind.MIDX_FAST.value)
    p.add_argument("--m", type=positive_int, default=config.DEFAULT_NUM_SAMPLES)
    p.add_argument("--epochs", type=int, default=config.TOY_EPOCHS)
    p.add_argument("--lr", type=non_negative_float, default=config.TOY_LEARNING_RATE)
    p.add_argument("--rebuild-every", type=positive_int, default=1)
    p.add_argument("--k", type=positive_int, default=config.TOY_CODEWORDS)
    p.add_argument("--quantizer", choices=QUANTIZER_CHOICES, default=config.DEFAULT_QUANTIZER)
    p.add_argument("--estimator", choices=ESTIMATORS, default=SAMPLED)
    p.add_argument("--out", help="CSV path; stdout when omitted")
    p.set_defaults(handler=cmd_train)
    subs.append(p)

    p = commands.add_parser("sweep", parents=[common], help="Final toy-task loss across sample sizes")
    p.add_argument("--emb", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--samplers", nargs="+", choices=SAMPLER_CHOICES, default=SAMPLER_CHOICES)
    p.add_argument("--m-values", nargs="+", type=positive_int, default=list(config.SWEEP_SAMPLE_SIZES))
    p.add_argument("--seeds", type=positive_int, default=1, help="Runs per cell, seeded from --seed upward")
    p.add_argument("--epochs", type=int, default=config.TOY_EPOCHS)
    p.add_argument("--lr", type=non_negative_float, default=config.TOY_LEARNING_RATE)
    p.add_argument("--k", type=positive_int, default=config.TOY_CODEWORDS)
    p.add_argument("--quantizer", choices=QUANTIZER_CHOICES, default=config.DEFAULT_QUANTIZER)
    p.add_argument("--estimator", choices=ESTIMATORS, default=SAMPLED)
    p.add_argument("--out", help="CSV path; stdout when omitted")
    p.set_defaults(handler=cmd_sweep)
    subs.append(p)

    p = commands.add_parser("learn", parents=[common], help="Learn codebooks by gradient descent")
    p.add_argument("--emb", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--index", help="Starting index; built with K-means when omitted")
    p.add_argument("--k", type=positive_int, default=config.DEFAULT_CODEWORDS)
    p.add_argument("--kind", choices=QUANTIZER_CHOICES, default=config.DEFAULT_QUANTIZER)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=non_negative_float, default=0.01)
    p.add_argument("--lam", type=non_negative_float, default=config.RECON_WEIGHT)
    p.add_argument("--batch", type=positive_int, default=config.KL_QUERY_BATCH)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_learn)
    subs.append(p)

    return parser, subs


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs one CLI command and returns its exit code."""
    parser, subs = build_parser()
    try:
        args = parse_with_config(parser, subs, argv)
        configure_logging(args.verbose)
        session = session_from_args(args)
        return args.handler(args, session)
    except NumericalError as e:
        logger.error("Numerical failure: %s", e)
        return config.EXIT_NUMERICAL
    except ConfigurationError as e:
        logger.error("%s", e)
        return config.EXIT_USAGE
    except MidxError as e:
        logger.error("%s", e)
        return config.EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
