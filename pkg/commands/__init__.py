"""
Commands Package - Initialize all subcommand groups
"""


def add_common_arguments(parser, out_required: bool = True):
    """Flags every subcommand takes."""
    parser.add_argument("--config", help="RunConfig file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=0, help="seed of the run's random stream")
    parser.add_argument("--out", required=out_required, help="output path")


def register_commands(subparsers):
    """Register all subcommand groups with the argument parser."""
    from .data_commands import register as register_data
    from .model_commands import register as register_model
    from .analysis_commands import register as register_analysis

    register_data(subparsers)
    register_model(subparsers)
    register_analysis(subparsers)
