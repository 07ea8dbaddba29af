"""
Model Commands - Training, sampling, encoding and latent traversal
"""

from commands import add_common_arguments
from services.experiment_service import (
    encode_images, kl_threshold_search, sample_images, train_model, traverse_latents,
)
from services.guidance import COEFFICIENT_RULES


def train(args, config):
    """
    Train a model on a dataset and write a checkpoint.
    Command for the guidance module: train
    """
    return train_model(config, args.seed, args.data, args.out, init_path=args.init, progress=args.progress)


def sample(args, config):
    """
    Draw samples, optionally guided by an image (.pgm) or a latent file.
    Command for the guidance module: sample
    """
    return sample_images(args.checkpoint, args.seed, args.out, n=args.n, condition=args.condition,
                         mask=args.mask, coefficient_rule=args.coefficient_rule, progress=args.progress)


def encode(args, config):
    return encode_images(args.checkpoint, args.data, args.out)


def traverse(args, config):
    return traverse_latents(args.checkpoint, args.seed, args.data, args.out, start=args.start, end=args.end,
                            steps=args.steps, coefficient_rule=args.coefficient_rule)


def kl_search(args, config):
    return kl_threshold_search(config, args.seed, args.data, args.out, low=args.low, high=args.high,
                               steps=args.steps, gain_floor=args.gain_floor)


def register(subparsers):
    parser = subparsers.add_parser("train", help="train denoiser and encoder")
    add_common_arguments(parser)
    parser.add_argument("--data", required=True, help="training dataset (SMD1)")
    parser.add_argument("--init", help="checkpoint to start from (required in frozen-denoiser mode)")
    parser.add_argument("--progress", action="store_true")
    parser.set_defaults(handler=train)

    parser = subparsers.add_parser("sample", help="generate an image grid")
    add_common_arguments(parser)
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--condition", help="guidance image (.pgm) or latent file")
    parser.add_argument("--mask", default="all", help="'all' or comma-separated latent axes")
    parser.add_argument("--n", type=int, default=16)
    parser.add_argument("--coefficient-rule", choices=COEFFICIENT_RULES, default="derived")
    parser.add_argument("--progress", action="store_true")
    parser.set_defaults(handler=sample)

    parser = subparsers.add_parser("encode", help="write posterior means and variances as CSV")
    add_common_arguments(parser)
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True)
    parser.set_defaults(handler=encode)

    parser = subparsers.add_parser("traverse", help="samples along a latent line between two images")
    add_common_arguments(parser)
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--start", type=int, default=0, help="index of the first image")
    parser.add_argument("--end", type=int, default=1, help="index of the last image")
    parser.add_argument("--steps", type=int, default=8)
    parser.add_argument("--coefficient-rule", choices=COEFFICIENT_RULES, default="derived")
    parser.set_defaults(handler=traverse)

    parser = subparsers.add_parser("kl-search", help="bisect the KL weight against a reconstruction-gain floor")
    add_common_arguments(parser)
    parser.add_argument("--data", required=True)
    parser.add_argument("--low", type=float, default=1e-8)
    parser.add_argument("--high", type=float, default=1e-2)
    parser.add_argument("--steps", type=int, default=4)
    parser.add_argument("--gain-floor", type=float, default=0.3)
    parser.set_defaults(handler=kl_search)
