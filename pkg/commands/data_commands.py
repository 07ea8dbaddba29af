"""
Data Commands - Dataset generation
"""

from commands import add_common_arguments
from services.experiment_service import generate_data


def gen_data(args, config):
    """
    Generate a disks dataset file.
    Command for the data module: gen-data
    """
    return generate_data(config, args.seed, args.out, split=args.split)


def register(subparsers):
    parser = subparsers.add_parser("gen-data", help="generate a disks dataset (SMD1)")
    add_common_arguments(parser)
    parser.add_argument("--split", choices=("train", "test"), default="train")
    parser.set_defaults(handler=gen_data)
