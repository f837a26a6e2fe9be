"""Command-line interface: ``veinsynth generate | evaluate | verify``.

Exit codes: 0 success, 1 configuration error, 2 generation-failure bound
exceeded, 3 integrity failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .metrics import MetricError
from .pipeline import (
    VARIANTS,
    ConfigError,
    EvalConfig,
    GenerationError,
    IntegrityError,
    evaluate_dataset,
    load_config,
    verify_dataset,
)

EXIT_OK, EXIT_CONFIG, EXIT_GENERATION, EXIT_INTEGRITY = 0, 1, 2, 3

logger = logging.getLogger("veinsynth")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit value")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="veinsynth", description="Synthetic finger-vein dataset generator.")
    ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a dataset")
    g.add_argument("--config", help="YAML config file; command-line values override it")
    g.add_argument("--seed", type=_u64, help="master seed (unsigned 64-bit)")
    g.add_argument("--ids", type=int, help="number of identities")
    g.add_argument("--first-id", type=int, help="index of the first identity")
    g.add_argument("--samples", type=int, help="samples per identity (default 100)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--workers", type=int, help="worker processes")
    g.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    g.add_argument("--no-resume", action="store_true", help="regenerate identities that are already complete")

    e = sub.add_parser("evaluate", help="compute the identity metrics of a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--r", type=float, default=0.2, help="distance threshold")
    e.add_argument("--report", help="write the report here (printed otherwise)")
    e.add_argument("--samples", type=int, help="seeded subsample per identity (default all)")
    e.add_argument("--diversity-samples", type=int, help="cap on the diversity subsets per identity")
    e.add_argument("--seed", type=_u64, default=0, help="subsampling seed")
    e.add_argument("--impostor-cap", type=int, default=1_000_000)
    e.add_argument("--workers", type=int, default=1)

    v = sub.add_parser("verify", help="re-hash every file listed in the manifest")
    v.add_argument("--dataset", required=True)
    return ap


def _generate(args) -> int:
    from .pipeline import generate_dataset

    cfg = load_config(
        args.config,
        master_seed=args.seed,
        identities=args.ids,
        first_identity=args.first_id,
        samples_per_identity=args.samples,
        out=args.out,
        workers=args.workers,
        variants=args.variants,
    )
    logger.info("generating %d identities into %s (config %s)", cfg.identities, cfg.out, cfg.config_hash())
    report = generate_dataset(cfg, resume=not args.no_resume)
    print(
        f"identities generated {report.generated}, resumed {report.resumed}, failed {len(report.failed_identities)}; "
        f"samples {report.samples} in {report.seconds:.1f} s ({report.samples_per_second:.1f} samples/s); "
        f"margin failures {report.margin_failures}"
    )
    return EXIT_OK


def _evaluate(args) -> int:
    ecfg = EvalConfig(
        r=args.r,
        seed=args.seed,
        samples_per_identity=args.samples,
        diversity_samples=args.diversity_samples,
        impostor_cap=args.impostor_cap,
        workers=args.workers,
    )
    report = evaluate_dataset(args.dataset, ecfg, args.report)
    if args.report is None:
        print(report.to_text())
    else:
        s = report.summary()
        print(f"U_class {s['U_class']:.4f}  C_intra {s['C_intra']:.4f}  score gap {s['score_gap']:.4f}  -> {args.report}")
    return EXIT_OK


def _verify(args) -> int:
    m = verify_dataset(args.dataset)
    print(f"ok: {sum(1 for _ in m.files())} files, {m.header.get('samples')} samples")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = {"generate": _generate, "evaluate": _evaluate, "verify": _verify}
    try:
        return handlers[args.command](args)
    except (ConfigError, MetricError) as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except GenerationError as e:
        logger.error("%s", e)
        return EXIT_GENERATION
    except IntegrityError as e:
        logger.error("%s", e)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
