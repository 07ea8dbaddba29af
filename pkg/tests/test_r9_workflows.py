'''
title: R9 - Experiment workflows

These tests cover services.experiment_service end to end on the tiny config:
- every workflow returns (success, message, outputs) and writes its artifacts
- invalid inputs come back as failure messages, never as exceptions
- each representation metric produces a CSV report
- the oracle check verifies the score identities exactly
'''

import csv

import numpy as np
import pytest

from config import with_overrides
from services.experiment_service import (
    analyze, encode_images, generate_data, kl_threshold_search, oracle_check, sample_images, train_model,
    traverse_latents,
)
from storage import load_dataset, read_pgm, write_image_grid


# ---------- helpers ----------
def _rows(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


@pytest.fixture
def trained(tiny_config, tmp_path):
    """Train and test datasets plus a checkpoint trained on the tiny config."""
    train_path, test_path = str(tmp_path / "train.smd"), str(tmp_path / "test.smd")
    assert generate_data(tiny_config, 0, train_path)[0]
    assert generate_data(tiny_config, 0, test_path, split="test")[0]
    checkpoint = str(tmp_path / "model.sami")
    success, message, _ = train_model(tiny_config, 0, train_path, checkpoint)
    assert success, message
    return {"train": train_path, "test": test_path, "checkpoint": checkpoint, "dir": tmp_path}


# ---------- data ----------
def test_generate_data_splits_use_own_streams(tiny_config, tmp_path):
    success, message, outputs = generate_data(tiny_config, 5, str(tmp_path / "a.smd"))
    assert success is True
    assert "8 train images" in message
    images, factors = load_dataset(outputs["dataset"])
    assert images.shape == (8, 1, 8, 8)
    test_images, _ = load_dataset(generate_data(tiny_config, 5, str(tmp_path / "b.smd"), split="test")[2]["dataset"])
    assert test_images.shape == (4, 1, 8, 8)
    assert not np.allclose(test_images, images[:4])


def test_generate_data_rejects_unknown_split(tiny_config, tmp_path):
    success, message, outputs = generate_data(tiny_config, 0, str(tmp_path / "a.smd"), split="validation")
    assert success is False
    assert message == "Split must be 'train' or 'test'."
    assert outputs == {}


# ---------- training ----------
def test_train_writes_checkpoint_and_log(trained):
    log_rows = _rows(trained["dir"] / "model.train.csv")
    assert len(log_rows) == 4
    assert list(log_rows[0].keys()) == ["step", "t", "loss", "recon", "kl", "norm_eps", "norm_guidance"]


def test_train_failures_are_messages(tiny_config, tmp_path):
    success, message, _ = train_model(tiny_config, 0, str(tmp_path / "missing.smd"), str(tmp_path / "m.sami"))
    assert success is False and "does not exist" in message

    data = str(tmp_path / "train.smd")
    generate_data(tiny_config, 0, data)
    frozen = with_overrides(tiny_config, "training", mode="frozen-denoiser")
    success, message, _ = train_model(frozen, 0, data, str(tmp_path / "m.sami"))
    assert success is False and "--init" in message

    wider = with_overrides(tiny_config, "model", image_size=16)
    success, message, _ = train_model(wider, 0, data, str(tmp_path / "m.sami"))
    assert success is False and "8px" in message


def test_zero_epochs_is_a_failure_message(tiny_config, tmp_path):
    """A config that skips validation and asks for no epochs fails cleanly and writes nothing."""
    data = str(tmp_path / "train.smd")
    generate_data(tiny_config, 0, data)
    idle = with_overrides(tiny_config, "training", epochs=0)
    success, message, outputs = train_model(idle, 0, data, str(tmp_path / "m.sami"))
    assert success is False
    assert "no steps" in message
    assert outputs == {}
    assert not (tmp_path / "m.sami").exists()


def test_frozen_denoiser_training_from_checkpoint(tiny_config, trained):
    frozen = with_overrides(tiny_config, "training", mode="frozen-denoiser")
    out = str(trained["dir"] / "encoder_only.sami")
    success, message, outputs = train_model(frozen, 1, trained["train"], out, init_path=trained["checkpoint"])
    assert success, message
    assert outputs["checkpoint"] == out


def test_divergence_reported_as_failure(tiny_config, tmp_path, mocker):
    from services.guidance import RunRecord, TrainingDivergedError

    data = str(tmp_path / "train.smd")
    generate_data(tiny_config, 0, data)
    mocker.patch("services.experiment_service.guidance.train",
                 side_effect=TrainingDivergedError("non-finite loss at step 3", RunRecord(step=3, t=1.0)))
    success, message, outputs = train_model(tiny_config, 0, data, str(tmp_path / "m.sami"))
    assert success is False
    assert "non-finite loss at step 3" in message
    assert outputs == {}


def test_kl_search_bisects_on_log_scale(tiny_config, tmp_path, mocker):
    """Gains 0.9, 0.9, 0.1: the low bound passes, 1e-5 passes, 10^-3.5 fails, so 1e-5 is kept."""
    data = str(tmp_path / "train.smd")
    generate_data(tiny_config, 0, data)
    mocker.patch("services.experiment_service.analysis.reconstruction_gain", side_effect=[0.9, 0.9, 0.1])
    out = str(tmp_path / "kl.csv")
    success, message, _ = kl_threshold_search(tiny_config, 0, data, out, low=1e-8, high=1e-2, steps=2, samples=2)
    assert success, message
    assert "1.000e-05" in message
    weights = [float(r["kl_weight"]) for r in _rows(out)]
    assert weights == pytest.approx([1e-8, 1e-5, 10 ** -3.5])


def test_kl_search_reports_when_nothing_clears_the_floor(tiny_config, tmp_path, mocker):
    data = str(tmp_path / "train.smd")
    generate_data(tiny_config, 0, data)
    mocker.patch("services.experiment_service.analysis.reconstruction_gain", return_value=0.0)
    success, message, outputs = kl_threshold_search(tiny_config, 0, data, str(tmp_path / "kl.csv"), samples=2)
    assert success is False
    assert "below the gain floor" in message
    assert len(_rows(outputs["report"])) == 1
    assert kl_threshold_search(tiny_config, 0, data, str(tmp_path / "kl.csv"), low=1.0, high=0.5)[0] is False


# ---------- sampling and encoding ----------
def test_unconditional_sample_grid(trained):
    out = str(trained["dir"] / "samples.pgm")
    success, _, outputs = sample_images(trained["checkpoint"], 0, out, n=4)
    assert success
    assert read_pgm(out).shape == (2 * 8 + 2, 2 * 8 + 2)
    assert "log" not in outputs


def test_sample_conditioned_on_image_and_latent(trained):
    images, _ = load_dataset(trained["test"])
    condition = str(trained["dir"] / "cond.pgm")
    write_image_grid(images[0], 1, 1, condition)
    out = str(trained["dir"] / "guided.pgm")
    success, message, outputs = sample_images(trained["checkpoint"], 0, out, n=2, condition=condition)
    assert success, message
    assert len(_rows(outputs["log"])) == 9

    latent = trained["dir"] / "z.txt"
    latent.write_text("0.1, -0.2")
    success, message, _ = sample_images(trained["checkpoint"], 0, out, n=2, condition=str(latent), mask="1",
                                        coefficient_rule="algorithm")
    assert success, message


def test_sample_failures(trained):
    latent = trained["dir"] / "z.txt"
    latent.write_text("0.1, -0.2")
    out = str(trained["dir"] / "s.pgm")
    assert sample_images(trained["checkpoint"], 0, out, n=0)[1] == "Sample count must be positive."
    success, message, _ = sample_images(trained["checkpoint"], 0, out, n=2, condition=str(latent), mask="5")
    assert success is False and "outside" in message
    success, message, _ = sample_images(trained["checkpoint"], 0, out, coefficient_rule="median")
    assert success is False
    success, message, _ = sample_images(str(trained["dir"] / "nope.sami"), 0, out)
    assert success is False


def test_encode_writes_means_variances_and_factors(trained):
    out = str(trained["dir"] / "latents.csv")
    success, _, _ = encode_images(trained["checkpoint"], trained["test"], out)
    assert success
    rows = _rows(out)
    assert len(rows) == 4
    assert list(rows[0].keys()) == ["c_x", "c_y", "i_bg", "mean0", "mean1", "var0", "var1"]
    assert all(float(r["var0"]) > 0 for r in rows)


def test_traverse_grid_and_index_check(trained):
    out = str(trained["dir"] / "traverse.pgm")
    success, _, _ = traverse_latents(trained["checkpoint"], 0, trained["test"], out, start=0, end=3, steps=3)
    assert success
    assert read_pgm(out).shape == (8, 3 * 8 + 2 * 2)
    success, message, _ = traverse_latents(trained["checkpoint"], 0, trained["test"], out, end=4)
    assert success is False and "[0, 4)" in message


# ---------- analysis ----------
@pytest.mark.parametrize("metric,rows", [
    ("variability", 1),
    ("variance-profile", 4),
    ("straightness", 1),
    ("pr", 3),
    ("score-profile", 9),
    ("smoothness", 1),
    ("alignment", 4),
])
def test_each_metric_writes_a_report(trained, metric, rows):
    out = str(trained["dir"] / f"{metric}.csv")
    success, message, outputs = analyze(metric, trained["checkpoint"], trained["test"], 0, out)
    assert success, message
    assert len(_rows(outputs["report"])) == rows


def test_coherence_needs_a_larger_test_set(trained):
    success, message, _ = analyze("coherence", trained["checkpoint"], trained["test"], 0,
                                  str(trained["dir"] / "c.csv"))
    assert success is False
    assert "at least 50 images" in message


def test_unknown_metric(trained):
    success, message, _ = analyze("fid", trained["checkpoint"], trained["test"], 0, str(trained["dir"] / "x.csv"))
    assert success is False and message.startswith("Unknown metric 'fid'")


def test_analysis_section_override(tiny_config, trained):
    """A config passed to analyze replaces the checkpoint's analysis settings."""
    config = with_overrides(tiny_config, "analysis", variance_buckets=3)
    out = str(trained["dir"] / "profile.csv")
    success, _, _ = analyze("variance-profile", trained["checkpoint"], trained["test"], 0, out, config=config)
    assert success
    assert [int(r["t"]) for r in _rows(out)] == [0, 4, 9]


# ---------- oracle ----------
def test_oracle_identities_hold_exactly(tiny_config, tmp_path):
    out = str(tmp_path / "oracle.csv")
    oracle_check(tiny_config, 0, out, chains=200)
    rows = {r["check"]: r for r in _rows(out)}
    assert set(rows) == {"miyasawa", "bayes", "sample_mean", "sample_cov"}
    assert rows["miyasawa"]["passed"] == "True"
    assert rows["bayes"]["passed"] == "True"


@pytest.mark.slow
def test_oracle_check_passes_with_default_schedule(tmp_path):
    from config import RunConfig

    success, message, outputs = oracle_check(RunConfig(), 0, str(tmp_path / "oracle.csv"), chains=20000)
    assert success, message
    assert outputs == {"report": str(tmp_path / "oracle.csv")}
