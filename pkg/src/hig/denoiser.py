"""Small magnitude-preserving conditional denoiser in pixel space.

A two-level U-Net of MP conv blocks with the standard denoiser
preconditioning wrapped around it, plus a ControlNet-style branch: a
trainable copy of the encoder that carries the graph network and feeds each
base encoder stage through a zero-gained 1x1 projection and an MP-sum.

The injection mix runs in unconditional mode too (with an exact zero control
array), so at zero gain the conditional forward is bit-identical to the
unconditional one for any graph; the zeroed branch still rescales features by
(1-t)/sqrt((1-t)^2+t^2), which is trained into the base model from scratch.

Activations are laid out (B, H, W, C) internally; public tensors are
channel-first (B, C, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .gnn import GnnConfig, HIGnnParams, hignn_nodes_forward
from .graph import IMAGE, HeteroImageGraph
from .ops import (
    WEIGHT_EPS,
    NormalizedWeight,
    forced_weight_norm,
    make_gain,
    mp_silu,
    mp_sum,
    pixel_norm,
)
from .tensor import DiffArray, asdiff


class DivergenceError(RuntimeError):
    """Raised when a loss or activation turns non-finite."""


# ----------------------------------------------------------------------------
# Configuration.


@dataclass(frozen=True)
class NoiseConfig:
    p_mean: float = -0.4
    p_std: float = 1.0
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.p_std <= 0:
            raise ValueError("p_std must be positive")


@dataclass(frozen=True)
class ModelConfig:
    img_channels: int = 3
    img_resolution: int = 16
    model_channels: int = 64
    num_levels: int = 2
    num_blocks: int = 2
    noise_channels: int = 32
    emb_channels: int = 64
    caption_dim: int = 32
    embed_dim: int = 32           # conditioning-node / edge-attribute width
    gnn_blocks: int = 4
    gnn_t_sum: float = 0.3
    gnn_t_cat: float = 0.5
    gnn_variant: str = "mp"
    res_balance: float = 0.3
    concat_balance: float = 0.5
    inject_balance: float = 0.3   # control-feature mix at each encoder stage
    inject_mode: str = "mp"       # "mp" (MP-sum) or "add" (plain addition ablation)
    caption_balance: float = 0.5
    sigma_data: float = 0.5
    weight_eps: float = WEIGHT_EPS

    def gnn_config(self) -> GnnConfig:
        return GnnConfig(
            channels=self.model_channels,
            embed_dim=self.embed_dim,
            blocks=self.gnn_blocks,
            t_sum=self.gnn_t_sum,
            t_cat=self.gnn_t_cat,
            weight_eps=self.weight_eps,
            variant=self.gnn_variant,
        )


# ----------------------------------------------------------------------------
# Layers.


class MPLinear:
    """Fully-connected layer with forced weight normalization, no bias."""

    def __init__(self, out_dim, in_dim, rng, eps=WEIGHT_EPS, dtype=np.float64):
        self.weight = NormalizedWeight.create((out_dim, in_dim), rng, eps, dtype)

    def __call__(self, x) -> DiffArray:
        return asdiff(x) @ T.transpose(self.weight.effective())

    def parameters(self):
        return {"w": self.weight.raw}

    def normalized_weights(self):
        return [self.weight]


class MPConv3x3:
    """3x3 same-size convolution; kernels are per-output-channel normalized."""

    def __init__(self, out_ch, in_ch, rng, eps=WEIGHT_EPS, dtype=np.float64):
        self.weight = NormalizedWeight.create((out_ch, in_ch, 3, 3), rng, eps, dtype)

    def __call__(self, x, gain=None) -> DiffArray:
        w = self.weight.effective()
        w = T.transpose(w, (2, 3, 1, 0))  # (kh, kw, Cin, Cout)
        out = T.conv2d(asdiff(x), w, pad=1)
        if gain is not None:
            out = out * gain
        return out

    def parameters(self):
        return {"w": self.weight.raw}

    def normalized_weights(self):
        return [self.weight]


class NoiseEmbedding:
    """Fourier features of the noise label through a normalized MLP, with an
    optional global caption embedding mixed in by MP-sum."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float64):
        self.freqs = 2.0 * np.pi * rng.standard_normal(cfg.noise_channels)
        self.phases = 2.0 * np.pi * rng.random(cfg.noise_channels)
        self.lin_noise = MPLinear(cfg.emb_channels, cfg.noise_channels, rng,
                                  cfg.weight_eps, dtype)
        self.lin_out = MPLinear(cfg.emb_channels, cfg.emb_channels, rng,
                                cfg.weight_eps, dtype)
        self.lin_caption = MPLinear(cfg.emb_channels, cfg.caption_dim, rng,
                                    cfg.weight_eps, dtype)
        self.caption_balance = cfg.caption_balance
        self.caption_dim = cfg.caption_dim
        self.dtype = dtype

    def __call__(self, c_noise: np.ndarray, caption=None) -> DiffArray:
        y = np.cos(np.outer(c_noise, self.freqs) + self.phases) * np.sqrt(2.0)
        emb = self.lin_noise(DiffArray(y.astype(self.dtype)))
        if caption is not None:
            cap = asdiff(caption) * float(np.sqrt(self.caption_dim))
            emb = mp_sum(emb, self.lin_caption(cap), self.caption_balance)
        return mp_silu(self.lin_out(emb))

    def parameters(self):
        return {
            "noise.w": self.lin_noise.weight.raw,
            "out.w": self.lin_out.weight.raw,
            "caption.w": self.lin_caption.weight.raw,
        }

    def buffers(self) -> dict[str, np.ndarray]:
        return {"freqs": self.freqs, "phases": self.phases}

    def load_buffers(self, buffers: dict[str, np.ndarray]):
        self.freqs = buffers["freqs"].copy()
        self.phases = buffers["phases"].copy()

    def normalized_weights(self):
        return (self.lin_noise.normalized_weights()
                + self.lin_out.normalized_weights()
                + self.lin_caption.normalized_weights())


class Block:
    """Encoder/decoder residual block with embedding gain modulation."""

    def __init__(self, in_ch, out_ch, emb_ch, rng, flavor="enc", resample="keep",
                 res_balance=0.3, eps=WEIGHT_EPS, dtype=np.float64):
        self.flavor = flavor
        self.resample = resample
        self.res_balance = res_balance
        self.in_ch = in_ch
        self.out_ch = out_ch
        # encoder blocks project the main path first, so the residual conv
        # always sees out_ch there; decoder blocks see the raw input width
        self.conv_res0 = MPConv3x3(out_ch, out_ch if flavor == "enc" else in_ch,
                                   rng, eps, dtype)
        self.emb_linear = MPLinear(out_ch, emb_ch, rng, eps, dtype)
        self.emb_gain = make_gain(dtype)
        self.conv_res1 = MPConv3x3(out_ch, out_ch, rng, eps, dtype)
        self.conv_skip = (
            MPLinear(out_ch, in_ch, rng, eps, dtype) if in_ch != out_ch else None
        )

    def __call__(self, x, emb) -> DiffArray:
        if self.resample == "down":
            x = T.avg_pool2(x)
        elif self.resample == "up":
            x = T.upsample2(x)
        if self.flavor == "enc":
            if self.conv_skip is not None:
                x = self.conv_skip(x)
            x = pixel_norm(x, eps=1e-4, axis=-1)

        y = self.conv_res0(mp_silu(x))
        c = self.emb_linear(emb) * self.emb_gain + 1.0
        y = mp_silu(y * T.reshape(c, (c.shape[0], 1, 1, c.shape[1])))
        y = self.conv_res1(y)

        if self.flavor == "dec" and self.conv_skip is not None:
            x = self.conv_skip(x)
        return mp_sum(x, y, self.res_balance)

    def parameters(self):
        out = {
            "res0.w": self.conv_res0.weight.raw,
            "res1.w": self.conv_res1.weight.raw,
            "emb.w": self.emb_linear.weight.raw,
            "emb_gain": self.emb_gain,
        }
        if self.conv_skip is not None:
            out["skip.w"] = self.conv_skip.weight.raw
        return out

    def normalized_weights(self):
        ws = [self.conv_res0.weight, self.conv_res1.weight, self.emb_linear.weight]
        if self.conv_skip is not None:
            ws.append(self.conv_skip.weight)
        return ws


# ----------------------------------------------------------------------------
# Base denoiser.


class BaseDenoiser:
    """Encoder/decoder of MP conv blocks with injection points after every
    encoder stage. In unconditional mode the injected branch is an exact zero
    array, so the (1-t) rescaling at each stage is part of the base model."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        c, emb_ch = cfg.model_channels, cfg.emb_channels
        eps = cfg.weight_eps
        self.embedding = NoiseEmbedding(cfg, rng, dtype)

        self.enc: list[tuple[str, object]] = []
        self.enc.append(("conv_in", MPConv3x3(c, cfg.img_channels + 1, rng, eps, dtype)))
        for level in range(cfg.num_levels):
            if level > 0:
                self.enc.append((f"down{level}", Block(
                    c, c, emb_ch, rng, "enc", "down", cfg.res_balance, eps, dtype)))
            for b in range(cfg.num_blocks):
                self.enc.append((f"enc{level}_{b}", Block(
                    c, c, emb_ch, rng, "enc", "keep", cfg.res_balance, eps, dtype)))

        self.dec: list[tuple[str, object, bool]] = []  # (name, block, takes_skip)
        for level in reversed(range(cfg.num_levels)):
            if level == cfg.num_levels - 1:
                self.dec.append((f"in0", Block(
                    c, c, emb_ch, rng, "dec", "keep", cfg.res_balance, eps, dtype), False))
                self.dec.append((f"in1", Block(
                    c, c, emb_ch, rng, "dec", "keep", cfg.res_balance, eps, dtype), False))
            else:
                self.dec.append((f"up{level}", Block(
                    c, c, emb_ch, rng, "dec", "up", cfg.res_balance, eps, dtype), False))
            for b in range(cfg.num_blocks + 1):
                self.dec.append((f"dec{level}_{b}", Block(
                    2 * c, c, emb_ch, rng, "dec", "keep", cfg.res_balance, eps, dtype), True))

        self.out_conv = MPConv3x3(cfg.img_channels, c, rng, eps, dtype)
        self.out_gain = make_gain(dtype)

    @property
    def num_stages(self) -> int:
        return len(self.enc)

    def forward(self, x_bhwc, emb, control=None, probes=None) -> DiffArray:
        """Raw network output (B,H,W,img_channels). `control` is a list of
        per-stage conditioning arrays (or None for unconditional); `probes`
        collects the RMS of each post-injection encoder feature."""
        x = asdiff(x_bhwc)
        ones = DiffArray(np.ones(x.shape[:-1] + (1,), dtype=x.dtype))
        x = T.concat([x, ones], axis=-1)

        skips = []
        for i, (name, stage) in enumerate(self.enc):
            x = stage(x) if name == "conv_in" else stage(x, emb)
            u = control[i] if control is not None else None
            if u is None:
                u = DiffArray(np.zeros(x.shape, dtype=x.dtype))
            if self.cfg.inject_mode == "mp":
                x = mp_sum(x, u, self.cfg.inject_balance)
            else:
                x = x + u
            if probes is not None:
                probes.append(float(np.sqrt(np.mean(x.values**2))))
            skips.append(x)

        for name, block, takes_skip in self.dec:
            if takes_skip:
                x = _mp_cat_channels(x, skips.pop(), self.cfg.concat_balance)
            x = block(x, emb)
        return self.out_conv(x, gain=self.out_gain)

    def named_parameters(self) -> dict[str, DiffArray]:
        out = {}
        for k, v in self.embedding.parameters().items():
            out[f"emb.{k}"] = v
        for name, stage in self.enc:
            params = stage.parameters()
            for k, v in params.items():
                out[f"enc.{name}.{k}"] = v
        for name, block, _ in self.dec:
            for k, v in block.parameters().items():
                out[f"dec.{name}.{k}"] = v
        out["out_conv.w"] = self.out_conv.weight.raw
        out["out_gain"] = self.out_gain
        return out

    def normalized_weights(self) -> list[NormalizedWeight]:
        ws = list(self.embedding.normalized_weights())
        for _, stage in self.enc:
            ws.extend(stage.normalized_weights())
        for _, block, _ in self.dec:
            ws.extend(block.normalized_weights())
        ws.append(self.out_conv.weight)
        return ws


def _mp_cat_channels(a, b, t):
    from .ops import mp_cat

    return mp_cat(a, b, t, axis=-1)


# ----------------------------------------------------------------------------
# Control branch.


class ControlBranch:
    """Trainable copy of the encoder (plus its own embedding) carrying the
    graph network after the initial convolution, with one zero-gained 1x1
    projection per encoder stage."""

    def __init__(self, base: BaseDenoiser, rng: np.random.Generator):
        cfg = base.cfg
        self.cfg = cfg
        self.dtype = base.dtype
        # trainable copies, initialized from the frozen base weights
        self.embedding = NoiseEmbedding(cfg, rng, base.dtype)
        self._copy_params(base.embedding.parameters(), self.embedding.parameters())
        self.enc = []
        for name, stage in base.enc:
            clone = (
                MPConv3x3(cfg.model_channels, cfg.img_channels + 1, rng,
                          cfg.weight_eps, base.dtype)
                if name == "conv_in"
                else Block(stage.in_ch, stage.out_ch, cfg.emb_channels, rng,
                           "enc", stage.resample, cfg.res_balance,
                           cfg.weight_eps, base.dtype)
            )
            self._copy_params(stage.parameters(), clone.parameters())
            self.enc.append((name, clone))

        # the graph network materializes on the first graph (its weight
        # shapes depend on the schema); reserve a dedicated stream for it
        self.gnn: HIGnnParams | None = None
        self._gnn_rng = np.random.default_rng(
            np.random.SeedSequence(int(rng.integers(1 << 62)))
        )

        self.projs = [
            MPLinear(cfg.model_channels, cfg.model_channels, rng,
                     cfg.weight_eps, base.dtype)
            for _ in base.enc
        ]
        self.gains = [make_gain(base.dtype) for _ in base.enc]

    @staticmethod
    def _copy_params(src: dict, dst: dict):
        for k, v in src.items():
            dst[k].values = v.values.copy()

    def ensure_gnn(self, schema):
        if self.gnn is None:
            self.gnn = HIGnnParams(
                schema, self.cfg.gnn_config(), self._gnn_rng,
                image_channels=self.cfg.model_channels, dtype=self.dtype,
            )
        elif self.gnn.schema != schema:
            raise ValueError("graph schema differs from the control branch's")
        return self.gnn

    def forward(self, x_bhwc, graph: HeteroImageGraph, c_noise, caption=None):
        """Per-stage conditioning arrays for the base encoder."""
        gnn = self.ensure_gnn(graph.schema)
        emb = self.embedding(c_noise, caption)
        x = asdiff(x_bhwc)
        ones = DiffArray(np.ones(x.shape[:-1] + (1,), dtype=x.dtype))
        x = T.concat([x, ones], axis=-1)

        controls = []
        b, h, w, _ = x_bhwc.shape
        for i, (name, stage) in enumerate(self.enc):
            x = stage(x) if name == "conv_in" else stage(x, emb)
            if name == "conv_in":
                # switch image features into the graph, run the blocks, switch back
                nodes = T.reshape(x, (b * h * w, x.shape[-1]))
                nodes = nodes @ T.transpose(gnn.in_proj.effective())
                nodes = hignn_nodes_forward(graph, nodes, gnn)
                nodes = nodes @ T.transpose(gnn.out_proj.effective())
                x = T.reshape(nodes, (b, h, w, x.shape[-1]))
            u = self.projs[i](x) * self.gains[i]
            controls.append(u)
        return controls

    def named_parameters(self) -> dict[str, DiffArray]:
        out = {}
        for k, v in self.embedding.parameters().items():
            out[f"emb.{k}"] = v
        for name, stage in self.enc:
            for k, v in stage.parameters().items():
                out[f"enc.{name}.{k}"] = v
        if self.gnn is not None:
            for k, v in self.gnn.named_parameters().items():
                out[f"gnn.{k}"] = v
        for i, proj in enumerate(self.projs):
            out[f"proj{i}.w"] = proj.weight.raw
            out[f"gain{i}"] = self.gains[i]
        return out

    def normalized_weights(self) -> list[NormalizedWeight]:
        ws = list(self.embedding.normalized_weights())
        for _, stage in self.enc:
            ws.extend(stage.normalized_weights())
        ws.extend(p.weight for p in self.projs)
        if self.gnn is not None:
            ws.append(self.gnn.in_proj)
            ws.append(self.gnn.out_proj)
            for blk in self.gnn.blocks:
                ws.extend(blk.w1.values())
                ws.extend(blk.w2.values())
        return ws


# ----------------------------------------------------------------------------
# Preconditioning and the denoiser interface.


def precondition(sigma, sigma_data: float):
    """(c_skip, c_out, c_in, c_noise) for noise level sigma (scalar or (B,))."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    s2 = sigma**2 + sigma_data**2
    c_skip = sigma_data**2 / s2
    c_out = sigma * sigma_data / np.sqrt(s2)
    c_in = 1.0 / np.sqrt(s2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


class DenoiserModel:
    """Frozen-able base denoiser plus the optional control branch."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64,
                 with_control: bool = True):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))
        self.cfg = cfg
        self.dtype = dtype
        self.base = BaseDenoiser(cfg, rng, dtype)
        self.control = ControlBranch(self.base, rng) if with_control else None

    def denoise(self, x_noisy, sigma, graph: HeteroImageGraph | None = None,
                caption_emb=None, probes=None) -> DiffArray:
        """D(x; sigma, c): preconditioned forward. With a graph, the control
        branch computes per-stage features; without one the injected branch
        is exactly zero."""
        x = asdiff(x_noisy)
        if x.ndim != 4:
            raise ValueError("expected (B, C, H, W) input")
        b = x.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (b,))
        c_skip, c_out, c_in, c_noise = precondition(sigma, self.cfg.sigma_data)

        x_in = x * DiffArray(c_in.reshape(-1, 1, 1, 1).astype(x.dtype))
        bhwc = T.transpose(x_in, (0, 2, 3, 1))

        control = None
        if graph is not None:
            if self.control is None:
                raise ValueError("model has no control branch")
            h, w = graph.grid
            if (h, w) != x.shape[2:] or graph.num_nodes(IMAGE) != b * h * w:
                raise ValueError("graph grid does not match image dims")
            cap = caption_emb
            if cap is None and graph.caption_emb is not None:
                cap = np.broadcast_to(
                    np.atleast_2d(graph.caption_emb), (b, self.cfg.caption_dim)
                ).astype(x.dtype)
            control = self.control.forward(bhwc, graph, c_noise, cap)

        emb = self.base.embedding(c_noise, None)
        f_out = self.base.forward(bhwc, emb, control, probes)
        f_out = T.transpose(f_out, (0, 3, 1, 2))
        return x * DiffArray(c_skip.reshape(-1, 1, 1, 1).astype(x.dtype)) + (
            f_out * DiffArray(c_out.reshape(-1, 1, 1, 1).astype(x.dtype))
        )

    # -- parameter plumbing ---------------------------------------------------

    def named_parameters(self) -> dict[str, DiffArray]:
        out = {f"base.{k}": v for k, v in self.base.named_parameters().items()}
        if self.control is not None:
            out.update(
                {f"control.{k}": v for k, v in self.control.named_parameters().items()}
            )
        return out

    def set_trainable(self, base: bool = True, control: bool = True):
        for k, v in self.named_parameters().items():
            v.requires_grad = base if k.startswith("base.") else control
            if not v.requires_grad:
                v.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {k: v.values.astype(np.float64) for k, v in self.named_parameters().items()}
        for k, v in self.base.embedding.buffers().items():
            out[f"buf.base.emb.{k}"] = v
        if self.control is not None:
            for k, v in self.control.embedding.buffers().items():
                out[f"buf.control.emb.{k}"] = v
        cfg = self.cfg
        meta = {
            "img_channels": cfg.img_channels, "img_resolution": cfg.img_resolution,
            "model_channels": cfg.model_channels, "num_levels": cfg.num_levels,
            "num_blocks": cfg.num_blocks, "noise_channels": cfg.noise_channels,
            "emb_channels": cfg.emb_channels, "caption_dim": cfg.caption_dim,
            "embed_dim": cfg.embed_dim, "gnn_blocks": cfg.gnn_blocks,
            "gnn_t_sum": cfg.gnn_t_sum, "gnn_t_cat": cfg.gnn_t_cat,
            "res_balance": cfg.res_balance, "concat_balance": cfg.concat_balance,
            "inject_balance": cfg.inject_balance, "caption_balance": cfg.caption_balance,
            "sigma_data": cfg.sigma_data, "weight_eps": cfg.weight_eps,
            "gnn_variant": float(GNN_VARIANT_CODES[cfg.gnn_variant]),
            "inject_mode": float(INJECT_MODE_CODES[cfg.inject_mode]),
            "has_control": float(self.control is not None),
        }
        for k, v in meta.items():
            out[f"meta.{k}"] = np.asarray(float(v))
        return out

    def load_state(self, tensors: dict[str, np.ndarray], schema=None):
        """Load parameter values; the control branch's graph network needs the
        schema it was trained with to materialize before loading."""
        if self.control is not None and schema is not None:
            self.control.ensure_gnn(schema)
        params = self.named_parameters()
        for k, v in params.items():
            if k not in tensors:
                raise ValueError(f"checkpoint is missing tensor {k}")
            if tensors[k].shape != v.values.shape:
                raise ValueError(f"shape mismatch for {k}")
            v.values = tensors[k].astype(self.dtype)
        self.base.embedding.load_buffers(
            {
                "freqs": tensors["buf.base.emb.freqs"],
                "phases": tensors["buf.base.emb.phases"],
            }
        )
        if self.control is not None and "buf.control.emb.freqs" in tensors:
            self.control.embedding.load_buffers(
                {
                    "freqs": tensors["buf.control.emb.freqs"],
                    "phases": tensors["buf.control.emb.phases"],
                }
            )


GNN_VARIANT_CODES = {"mp": 0, "naive": 1, "pixnorm": 2}
GNN_VARIANT_NAMES = {v: k for k, v in GNN_VARIANT_CODES.items()}
INJECT_MODE_CODES = {"mp": 0, "add": 1}
INJECT_MODE_NAMES = {v: k for k, v in INJECT_MODE_CODES.items()}


def config_from_state(tensors: dict[str, np.ndarray]) -> ModelConfig:
    def get(name, cast=float):
        return cast(float(tensors[f"meta.{name}"]))

    return ModelConfig(
        img_channels=get("img_channels", int),
        img_resolution=get("img_resolution", int),
        model_channels=get("model_channels", int),
        num_levels=get("num_levels", int),
        num_blocks=get("num_blocks", int),
        noise_channels=get("noise_channels", int),
        emb_channels=get("emb_channels", int),
        caption_dim=get("caption_dim", int),
        embed_dim=get("embed_dim", int),
        gnn_blocks=get("gnn_blocks", int),
        gnn_t_sum=get("gnn_t_sum"),
        gnn_t_cat=get("gnn_t_cat"),
        gnn_variant=GNN_VARIANT_NAMES[get("gnn_variant", int)],
        res_balance=get("res_balance"),
        concat_balance=get("concat_balance"),
        inject_balance=get("inject_balance"),
        inject_mode=INJECT_MODE_NAMES[get("inject_mode", int)],
        caption_balance=get("caption_balance"),
        sigma_data=get("sigma_data"),
        weight_eps=get("weight_eps"),
    )


# ----------------------------------------------------------------------------
# Noise sampling and the training objective.


def sample_sigma(rng: np.random.Generator, cfg: NoiseConfig, size=None) -> np.ndarray:
    """Log-normal noise level: sigma = exp(p_mean + p_std * z)."""
    z = rng.standard_normal(size)
    return np.exp(cfg.p_mean + cfg.p_std * z)


def loss_weight(sigma, sigma_data: float):
    """lambda(sigma) that equalizes the effective loss weight across sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def denoising_loss(
    model: DenoiserModel,
    x0: np.ndarray,
    graph: HeteroImageGraph | None,
    rng: np.random.Generator | None,
    noise_cfg: NoiseConfig,
    caption_emb=None,
    sigma=None,
    noise=None,
    probes=None,
) -> DiffArray:
    """Weighted L2 denoising objective, averaged per dimension and batch.

    sigma and noise are drawn from `rng` unless passed explicitly (tests pin
    them for finite-difference checks).
    """
    x0 = np.asarray(x0)
    b = x0.shape[0]
    if sigma is None:
        sigma = sample_sigma(rng, noise_cfg, size=b)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (b,))
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    x_noisy = x0 + sigma.reshape(-1, 1, 1, 1) * noise

    d = model.denoise(x_noisy.astype(model.dtype), sigma, graph, caption_emb,
                      probes=probes)
    lam = loss_weight(sigma, noise_cfg.sigma_data)
    err = d - DiffArray(x0.astype(model.dtype))
    per_example = T.mean(err * err, axis=(1, 2, 3))
    loss = T.mean(per_example * DiffArray(lam.astype(model.dtype)))
    if not np.isfinite(loss.values):
        raise DivergenceError(
            f"non-finite loss at sigma={np.array2string(sigma, precision=4)}"
        )
    return loss
