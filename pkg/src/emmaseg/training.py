"""Patch-based training loop for a single ensemble member."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures.checkpoint import save_checkpoint
from .architectures.network import NetworkInstance, forward, init_network
from .architectures.spec import build_spec
from .autodiff import Tape, backward, make_optimizer, optimizer_step
from .config import RunConfig
from .errors import NonFiniteError
from .phantom import phantom_generate
from .preprocessing.case import VolumeCase, brain_mask
from .preprocessing.normalization import (
    NormalizationSpec,
    bias_correct,
    nyul_apply,
    nyul_train,
    zscore_normalize,
)
from .preprocessing.sampling import PatchSampler, augment, stack_batches
from .volume_io import read_case

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    instance: NetworkInstance
    losses: list[float] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)


def load_training_cases(cfg: RunConfig) -> list[VolumeCase]:
    data = cfg.data
    if "cases" in data:
        return [read_case(cfg.path(p)) for p in data["cases"]]
    ph = data["phantoms"]
    return phantom_generate(ph["seed"], ph["count"], tuple(ph.get("extents", (64, 64, 64))),
                            ph.get("bias_field", False))


def normalize_cases(cases: list[VolumeCase], spec: NormalizationSpec
                    ) -> tuple[list[VolumeCase], NormalizationSpec]:
    """Apply ``spec`` to every case; v3 first learns its landmarks from these cases."""
    if spec.version == "v1_zscore":
        return [zscore_normalize(c, brain_mask(c)) for c in cases], spec
    corrected = [bias_correct(c, spec) for c in cases]
    if spec.version == "v3_bfc_pwl_zscore":
        if spec.landmarks is None:
            spec = NormalizationSpec(spec.version, spec.bias_correction, spec.degree,
                                     nyul_train(corrected))
        corrected = [nyul_apply(c, spec.landmarks, brain_mask(c)) for c in corrected]
    return [zscore_normalize(c, brain_mask(c)) for c in corrected], spec


def train_network(cfg: RunConfig, cases: list[VolumeCase] | None = None,
                  checkpoint_path: Path | None = None, save: bool = True) -> TrainResult:
    """Normalise, then sample -> forward -> loss -> backward -> update for the configured iterations.

    Every random draw comes from streams spawned off ``cfg.seed``.  A
    non-finite loss aborts the run before any update; checkpoints already
    written are left untouched.
    """
    cases = load_training_cases(cfg) if cases is None else cases
    cases, norm = normalize_cases(cases, cfg.normalization)
    init_ss, sample_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    dtype = np.float64 if cfg.precision == 64 else np.float32
    spec = build_spec(cfg.architecture, 4, cfg.width_scale)
    instance = init_network(spec, np.random.default_rng(init_ss), dtype)
    algorithm, hyper = cfg.optimizer
    loss_spec = cfg.loss
    instance.meta = {
        "seed": cfg.seed,
        "normalization": norm.to_json(),
        "loss": {"kind": loss_spec.kind, "class_weights": loss_spec.class_weights,
                 "foreground_only": loss_spec.foreground_only},
        "optimizer": {"algorithm": algorithm, "hyperparameters": hyper},
        "precision": cfg.precision,
        "iterations": cfg.iterations,
    }
    opt = make_optimizer(algorithm, **hyper)
    samp = cfg.sampling
    sampler = PatchSampler(spec, samp["strategy"], samp["patch_output"], samp["include_background"])
    rng = np.random.default_rng(sample_ss)
    drop_rng = np.random.default_rng(drop_ss)
    ckpt = checkpoint_path or cfg.checkpoint_path
    log_file = cfg.log_path.open("w") if cfg.log_path else None
    last_saved = None
    result = TrainResult(instance)
    try:
        for it in range(1, cfg.iterations + 1):
            batch = stack_batches([
                augment(sampler.sample(cases[int(rng.integers(len(cases)))], rng), samp["augment"], rng)
                for _ in range(cfg.batch_size)])
            with Tape() as tape:
                probs = forward(instance, batch.inputs, training=True, rng=drop_rng)
                loss = loss_spec(probs, batch.target)
            value = float(loss.data)
            if not math.isfinite(value):
                where = f"last good checkpoint {last_saved}" if last_saved else "no checkpoint written"
                raise NonFiniteError(f"loss became {value} at iteration {it}; {where}")
            optimizer_step(opt, instance.params, backward(tape, loss, instance.params))
            result.losses.append(value)
            if it == 1 or it % cfg.log_every == 0 or it == cfg.iterations:
                entry = {"iteration": it, "loss": value}
                result.log.append(entry)
                logger.info("iteration %d loss %.6f", it, value)
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                    log_file.flush()
            if save and (it % cfg.checkpoint_every == 0 or it == cfg.iterations):
                save_checkpoint(instance, ckpt)
                last_saved = ckpt
    finally:
        if log_file:
            log_file.close()
    return result
