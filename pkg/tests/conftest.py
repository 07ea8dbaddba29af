import sys
from pathlib import Path
import pytest

# Add project root (parent of /tests) to Python path
ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from config import parse_config  # noqa: E402
from services.rng import RngStream  # noqa: E402

TINY_CONFIG = """
[model]
image_size = 8
latent_dim = 2
encoder_base_channels = 2
encoder_multipliers = 1, 2
denoiser_base_channels = 2
denoiser_multipliers = 1, 2

[schedule]
levels = 10
beta_min = 0.001
beta_max = 0.2

[training]
batch_size = 4
epochs = 2
kl_anneal_epochs = 2

[data]
train_size = 8
test_size = 4
radius = 2.5

[analysis]
variance_draws = 2
variance_buckets = 4
reference_level = 5
probes = 2
sequence_count = 2
sequence_length = 4
samples = 3
"""


@pytest.fixture
def tiny_config():
    """
    A RunConfig small enough to train and sample in well under a second:
    8x8 images, 2 latents, 10 noise levels, 2-channel networks.
    """
    return parse_config(TINY_CONFIG)


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def tiny_bundle(tiny_config):
    """An untrained ModelBundle built from tiny_config."""
    from services.diffusion import schedule_from_config
    from services.guidance import ModelBundle
    from services.networks import init_models

    denoiser, encoder = init_models(tiny_config, RngStream(7))
    return ModelBundle(denoiser, encoder, schedule_from_config(tiny_config.schedule), tiny_config)


@pytest.fixture
def tiny_images(tiny_config):
    """Eight rendered 8x8 disks [8, 1, 8, 8] and their factors."""
    from services.disks import DiskConfig, generate_dataset

    return generate_dataset(8, RngStream(99), DiskConfig.from_config(tiny_config))
