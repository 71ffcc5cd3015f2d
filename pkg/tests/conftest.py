import dataclasses
import time

import numpy as np
import pytest
import torch

from localdiff.cli import train_pipeline
from localdiff.checkpoint import checkpoint_hash, load_checkpoint
from localdiff.config import RunConfig
from localdiff.datasets import SceneDataset
from localdiff.evaluation import evaluate_run, two_object_scenario
from localdiff.guidance import GuidanceConfig
from localdiff.model import Denoiser, ModelConfig
from localdiff.sampler import (NoiseSchedule, TrainHyperparams, sample,
                               train_control_branch, train_denoiser)

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def trained_small():
    """A briefly trained model: enough for nontrivial attention and a
    live control branch, cheap enough for unit tests."""
    model = Denoiser(ModelConfig(), dtype=torch.float32)
    schedule = NoiseSchedule.linear(200)
    ds = SceneDataset(0, 512)
    hp = TrainHyperparams(steps=300, batch_size=8, lr=2e-3, dataset_size=512)
    train_denoiser(model, schedule, hp, ds)
    hp2 = dataclasses.replace(hp, steps=150)
    train_control_branch(model, schedule, hp2, ds, ds.condition)
    return model


class Reference:
    """The reference checkpoint: the config-default training run."""

    def __init__(self, tmp_dir):
        self.config = RunConfig()
        t0 = time.perf_counter()
        self.model, self.ckpt_path = train_pipeline(self.config, tmp_dir)
        self.train_seconds = time.perf_counter() - t0
        self.ckpt_hash = checkpoint_hash(self.ckpt_path)
        self.train_schedule = NoiseSchedule.linear(
            self.config.schedule.train_steps,
            self.config.schedule.beta_start,
            self.config.schedule.beta_end)
        self.schedule = self.train_schedule.strided(
            self.config.schedule.inference_steps)
        losses = {}
        with open(tmp_dir / "loss_curve.csv") as f:
            next(f)
            for line in f:
                phase, step, loss = line.strip().split(",")
                losses.setdefault(phase, []).append(float(loss))
        self.losses = losses

    def model_as(self, dtype):
        model, _, _ = load_checkpoint(self.ckpt_path, dtype=dtype)
        return model


@pytest.fixture(scope="session")
def reference(tmp_path_factory):
    return Reference(tmp_path_factory.mktemp("reference"))


@pytest.fixture(scope="session")
def scenario0():
    return two_object_scenario(0)


@pytest.fixture(scope="session")
def reference_runs(reference, scenario0):
    """100-seed full_method and naive runs shared across acceptance checks."""
    cond = torch.from_numpy(
        scenario0.condition.edges.astype(np.float32))
    prompt = reference.model.embed_prompt(scenario0.prompt_tokens)
    cfg = GuidanceConfig()
    out = {}
    for mode in ("full_method", "naive"):
        runs = []
        for seed in range(100):
            result = sample(reference.model, reference.schedule, prompt,
                            cond, scenario0.mask, cfg, mode=mode, seed=seed,
                            checkpoint_hash=reference.ckpt_hash)
            runs.append((result, evaluate_run(result, scenario0)))
        out[mode] = runs
    return out
