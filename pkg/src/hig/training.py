"""Two-phase training: the unconditional base from scratch, then the frozen
base with the trainable control branch, graph network and gains.

Every step is a pure function of (seed, phase, step), so runs with identical
configs produce bit-identical metrics CSVs. Metrics rows carry the loss, the
learning rate, and the feature-RMS probe at every injection point; a
non-finite loss halts with a diagnostic dump of the probe magnitudes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import save_weights
from .denoiser import (
    DenoiserModel,
    DivergenceError,
    ModelConfig,
    NoiseConfig,
    denoising_loss,
)
from .graph import HeteroImageGraph, disjoint_union, mask_dropout
from .tensor import DiffArray

PHASES = ("base", "control")


@dataclass(frozen=True)
class TrainConfig:
    alpha_ref: float = 0.002      # learning-rate max
    t_ref: float = 10_000.0       # learning-rate decay reference step
    batch_size: int = 8
    steps: int = 3000
    seed: int = 0
    mask_dropout_p: float = 0.5   # applied to mask nodes in the control phase
    renorm_weights: bool = False  # post-step forced renormalization of raw weights
    log_every: int = 1

    def __post_init__(self):
        if min(self.alpha_ref, self.t_ref, self.batch_size, self.steps) <= 0:
            raise ValueError("training config values must be positive")


def lr_schedule(step: float, alpha_ref: float, t_ref: float) -> float:
    return alpha_ref / float(np.sqrt(max(step / t_ref, 1.0)))


class Adam:
    """Adam over a named parameter dict, updated in sorted-name order."""

    def __init__(self, params: dict[str, DiffArray], beta1=0.9, beta2=0.99,
                 eps=1e-8):
        self.params = dict(sorted(params.items()))
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v.values) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.values) for k, v in self.params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + self.eps)
            p.values = p.values - lr * update.astype(p.values.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainResult:
    losses: list[float]
    checkpoint_path: str | None
    metrics_path: str | None
    halted: bool = False


def _batch_graphs(graphs, idx, p_drop, rng) -> HeteroImageGraph:
    picked = [graphs[i] for i in idx]
    if p_drop > 0:
        picked = [mask_dropout(g, p_drop, rng) for g in picked]
    return disjoint_union(picked)


def train(
    model: DenoiserModel,
    images: np.ndarray,
    graphs: list[HeteroImageGraph] | None,
    train_cfg: TrainConfig,
    noise_cfg: NoiseConfig,
    phase: str,
    out_dir=None,
    stop_fn=None,
) -> TrainResult:
    """Run one training phase; returns losses and artifact paths.

    `images` is (N, C, H, W) already encoded to the training scale. The
    control phase requires pre-built graphs aligned with the images and a
    model whose base weights came from a base-phase checkpoint. `stop_fn`
    (losses -> bool) can end the run early.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    if len(images) == 0:
        raise ValueError("dataset is empty")
    if phase == "control" and graphs is None:
        raise ValueError("control phase needs graphs")

    if phase == "base":
        model.set_trainable(base=True, control=False)
    else:
        # materialize the lazily built graph network before collecting params
        model.control.ensure_gnn(graphs[0].schema)
        model.set_trainable(base=False, control=True)

    trainable = {k: v for k, v in model.named_parameters().items() if v.requires_grad}
    opt = Adam(trainable)
    normalized = (
        model.base.normalized_weights()
        if phase == "base"
        else model.control.normalized_weights()
    )

    phase_id = PHASES.index(phase)
    n = len(images)
    rows = []
    losses = []
    halted = False
    n_probes = model.base.num_stages

    for step in range(train_cfg.steps):
        rng = np.random.default_rng(
            np.random.SeedSequence([train_cfg.seed, phase_id, step])
        )
        idx = rng.integers(0, n, size=train_cfg.batch_size)
        x0 = images[idx]
        graph = None
        if phase == "control":
            graph = _batch_graphs(
                graphs, idx, train_cfg.mask_dropout_p, rng
            )

        probes: list[float] = []
        opt.zero_grad()
        try:
            loss = denoising_loss(
                model, x0, graph, rng, noise_cfg, probes=probes
            )
        except DivergenceError as err:
            _dump_divergence(out_dir, step, probes, err)
            halted = True
            raise
        loss.backward(np.ones((), dtype=model.dtype))
        lr = lr_schedule(step, train_cfg.alpha_ref, train_cfg.t_ref)
        opt.step(lr)
        if train_cfg.renorm_weights:
            for w in normalized:
                w.renormalize_()

        losses.append(float(loss.values))
        if step % train_cfg.log_every == 0:
            row = [str(step), repr(float(loss.values)), repr(lr)]
            row += [repr(p) for p in probes[:n_probes]]
            rows.append(",".join(row))
        if stop_fn is not None and stop_fn(losses):
            break

    metrics_path = checkpoint_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, f"metrics_{phase}.csv")
        header = "step,loss,lr," + ",".join(
            f"probe_rms_{i}" for i in range(n_probes)
        )
        with open(metrics_path, "w") as f:
            f.write(header + "\n")
            f.write("\n".join(rows) + "\n")
        checkpoint_path = os.path.join(out_dir, f"model_{phase}.hgw")
        save_weights(checkpoint_path, model.state_tensors())

    return TrainResult(losses, checkpoint_path, metrics_path, halted)


def _dump_divergence(out_dir, step, probes, err):
    msg = (
        f"training diverged at step {step}: {err}\n"
        f"probe RMS at failure: {probes}\n"
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "divergence.txt"), "w") as f:
            f.write(msg)


def moving_average(xs, window: int) -> float:
    xs = list(xs)[:window]
    return float(np.mean(xs)) if xs else float("nan")


def loss_reduction_reached(losses, window: int = 50, target: float = 0.4) -> bool:
    """True once the smoothed loss has dropped `target` below the moving
    average of the first `window` steps."""
    if len(losses) < 2 * window:
        return False
    start = moving_average(losses, window)
    recent = float(np.mean(losses[-window:]))
    return recent <= (1.0 - target) * start
