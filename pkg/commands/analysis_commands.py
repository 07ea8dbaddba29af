"""
Analysis Commands - Representation metrics and the analytic oracle check
"""

from commands import add_common_arguments
from services.experiment_service import METRICS, analyze, oracle_check


def analyze_metric(args, config):
    """
    Compute one metric of a trained model and write it as CSV.
    Command for the analysis module: analyze --metric
    """
    return analyze(args.metric, args.checkpoint, args.data, args.seed, args.out,
                   config=config if args.config else None)


def run_oracle_check(args, config):
    """Verify score identities and guided sampling in a linear-Gaussian world."""
    return oracle_check(config, args.seed, args.out, chains=args.chains)


def register(subparsers):
    parser = subparsers.add_parser("analyze", help="compute a representation metric")
    add_common_arguments(parser)
    parser.add_argument("--metric", choices=METRICS, required=True)
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True, help="test dataset (SMD1)")
    parser.set_defaults(handler=analyze_metric)

    parser = subparsers.add_parser("oracle-check", help="exact checks in a linear-Gaussian world")
    add_common_arguments(parser)
    parser.add_argument("--chains", type=int, default=10000)
    parser.set_defaults(handler=run_oracle_check)
