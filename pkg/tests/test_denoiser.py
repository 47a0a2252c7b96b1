"""Preconditioning identities, zero-gain no-op, the training objective, the
two-phase loop, probes, and checkpoints."""

import numpy as np
import pytest

from hig.checkpoint import load_weights
from hig.denoiser import (
    DenoiserModel,
    DivergenceError,
    ModelConfig,
    NoiseConfig,
    config_from_state,
    denoising_loss,
    loss_weight,
    precondition,
    sample_sigma,
)
from hig.graph import (
    GraphConfig,
    LabelEmbedder,
    SceneAnnotation,
    SceneObject,
    build_hig,
    disjoint_union,
)
from hig.training import (
    Adam,
    TrainConfig,
    loss_reduction_reached,
    lr_schedule,
    train,
)

from conftest import rel_err

TINY = ModelConfig(
    img_channels=3,
    img_resolution=8,
    model_channels=8,
    num_levels=2,
    num_blocks=1,
    noise_channels=8,
    emb_channels=8,
    gnn_blocks=2,
)
NOISE = NoiseConfig()
EMB = LabelEmbedder(32, 0)


def tiny_graph(batch=1, h=8, w=8, caption=None, seed=0):
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(batch):
        x0 = int(rng.integers(0, w - 2))
        y0 = int(rng.integers(0, h - 2))
        objects = [SceneObject("cow", (x0, y0, x0 + 2, y0 + 2), ["red"])]
        mask = np.zeros((h, w), dtype=np.int64)
        mask[y0 : y0 + 2, x0 : x0 + 2] = 1
        ann = SceneAnnotation(w, h, objects, mask=mask, caption=caption)
        graphs.append(build_hig(ann, EMB, GraphConfig()))
    return disjoint_union(graphs) if batch > 1 else graphs[0]


# ----------------------------------------------------------------------------
# preconditioning


def test_cskip_half_at_sigma_data():
    c_skip, _, _, _ = precondition(0.5, 0.5)
    assert c_skip == pytest.approx(0.5, abs=1e-12)


def test_sigma_to_zero_limits():
    c_skip, c_out, _, _ = precondition(1e-8, 0.5)
    assert c_skip == pytest.approx(1.0, abs=1e-6)
    assert c_out == pytest.approx(0.0, abs=1e-6)


def test_cin_identity_random_sigma(rng):
    sigma = np.exp(rng.standard_normal(50))
    _, _, c_in, _ = precondition(sigma, 0.5)
    assert np.allclose(c_in**2 * (sigma**2 + 0.25), 1.0, atol=1e-12)


def test_precondition_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        precondition(0.0, 0.5)
    with pytest.raises(ValueError):
        precondition(-1.0, 0.5)


# ----------------------------------------------------------------------------
# sigma sampling


class _ZeroRng:
    def standard_normal(self, size=None):
        return np.zeros(size) if size is not None else 0.0


def test_sigma_at_z_zero():
    # frozen: exp(-0.4)
    s = sample_sigma(_ZeroRng(), NOISE)
    assert s == pytest.approx(0.6703200460356393, abs=1e-12)


def test_sigma_median_and_positivity():
    rng = np.random.default_rng(123)
    s = sample_sigma(rng, NOISE, size=100_000)
    assert np.all(s > 0)
    assert abs(np.median(s) - 0.6703200460356393) / 0.6703 < 0.02


# ----------------------------------------------------------------------------
# the denoiser and zero-gain contract


def test_zero_gain_no_op_bit_exact(rng):
    # out_gain is opened so the comparison exercises the whole network;
    # the control gains stay at their zero initialization
    model = DenoiserModel(TINY, seed=1)
    model.base.out_gain.values = np.asarray(1.0)
    for trial in range(5):
        x = rng.standard_normal((1, 3, 8, 8))
        sigma = float(np.exp(rng.standard_normal()))
        g = tiny_graph(seed=trial)
        uncond = model.denoise(x, sigma).values
        cond = model.denoise(x, sigma, graph=g).values
        assert np.array_equal(uncond, cond)


def test_empty_graph_equals_unconditional_at_init(rng):
    model = DenoiserModel(TINY, seed=2)
    model.base.out_gain.values = np.asarray(1.0)
    g = build_hig(SceneAnnotation(8, 8, []), EMB, GraphConfig())
    x = rng.standard_normal((1, 3, 8, 8))
    assert np.array_equal(
        model.denoise(x, 1.0).values, model.denoise(x, 1.0, graph=g).values
    )


def test_caption_gated_by_zero_gains(rng):
    model = DenoiserModel(TINY, seed=3)
    model.base.out_gain.values = np.asarray(1.0)
    g = tiny_graph(caption="a red cow")
    x = rng.standard_normal((1, 3, 8, 8))
    assert np.array_equal(
        model.denoise(x, 1.0).values, model.denoise(x, 1.0, graph=g).values
    )


def test_output_finite_across_sigmas(rng):
    model = DenoiserModel(TINY, seed=4)
    x = rng.standard_normal((2, 3, 8, 8))
    for sigma in (1e-3, 1.0, 80.0):
        out = model.denoise(x, sigma).values
        assert np.all(np.isfinite(out))


def test_graph_grid_mismatch(rng):
    model = DenoiserModel(TINY, seed=5)
    g = tiny_graph(h=4, w=4)
    with pytest.raises(ValueError, match="grid"):
        model.denoise(rng.standard_normal((1, 3, 8, 8)), 1.0, graph=g)


def test_conditional_differs_once_gains_move(rng):
    model = DenoiserModel(TINY, seed=6)
    model.base.out_gain.values = np.asarray(1.0)
    g = tiny_graph()
    for gain in model.control.gains:
        gain.values = np.asarray(0.5)
    x = rng.standard_normal((1, 3, 8, 8))
    assert not np.allclose(
        model.denoise(x, 1.0).values, model.denoise(x, 1.0, graph=g).values
    )


# ----------------------------------------------------------------------------
# loss


def test_loss_weight_at_sigma_data():
    assert loss_weight(0.5, 0.5) == pytest.approx(8.0, abs=1e-12)


def test_loss_nonnegative_and_finite(rng):
    model = DenoiserModel(TINY, seed=7)
    x0 = rng.standard_normal((2, 3, 8, 8)) * 0.5
    loss = denoising_loss(model, x0, None, np.random.default_rng(0), NOISE)
    assert np.isfinite(loss.values) and loss.values >= 0.0


def test_loss_zero_for_perfect_denoiser(rng):
    # if D returns x0 exactly the loss vanishes: drive sigma -> 0 so that
    # c_skip -> 1 and the network path is damped by c_out -> 0
    model = DenoiserModel(TINY, seed=8)
    x0 = rng.standard_normal((1, 3, 8, 8)) * 0.5
    loss = denoising_loss(
        model, x0, None, None, NOISE,
        sigma=np.full(1, 1e-8), noise=np.zeros_like(x0),
    )
    assert float(loss.values) == pytest.approx(0.0, abs=1e-9)


def test_divergence_carries_sigma(rng):
    model = DenoiserModel(TINY, seed=9)
    model.base.out_gain.values = np.asarray(np.nan)
    x0 = rng.standard_normal((1, 3, 8, 8))
    with pytest.raises(DivergenceError, match="sigma"):
        denoising_loss(model, x0, None, np.random.default_rng(0), NOISE)


# ----------------------------------------------------------------------------
# probes and the injection ablation


def test_probe_rms_in_band_at_init(rng):
    model = DenoiserModel(TINY, seed=10)
    g = tiny_graph(batch=2)
    probes = []
    x = rng.standard_normal((2, 3, 8, 8))
    model.denoise(x, 1.0, graph=g, probes=probes)
    assert len(probes) == model.base.num_stages
    assert all(0.5 < p < 2.0 for p in probes)


def test_naive_injection_explodes_against_mp(rng):
    # ablation echo: plain addition plus the non-MP graph network, with the
    # gains opened to 1, must push at least one probe 10x above the MP value
    x = rng.standard_normal((2, 3, 8, 8))
    g = tiny_graph(batch=2)

    def probes_for(cfg):
        model = DenoiserModel(cfg, seed=11)
        for gain in model.control.gains:
            gain.values = np.asarray(1.0)
        probes = []
        model.denoise(x, 1.0, graph=g, probes=probes)
        return np.array(probes)

    p_mp = probes_for(TINY)
    from dataclasses import replace

    p_naive = probes_for(replace(TINY, inject_mode="add", gnn_variant="naive"))
    assert np.any(p_naive >= 10.0 * p_mp)


# ----------------------------------------------------------------------------
# training


def test_lr_schedule_values():
    assert lr_schedule(0, 0.01, 100) == pytest.approx(0.01)
    assert lr_schedule(400, 0.01, 100) == pytest.approx(0.005)


def test_adam_moves_toward_minimum():
    from hig.tensor import DiffArray

    p = DiffArray(np.array([4.0]), requires_grad=True)
    opt = Adam({"p": p})
    for _ in range(200):
        opt.zero_grad()
        loss = (p * p).sum()
        loss.backward()
        opt.step(0.1)
    assert abs(p.values[0]) < 0.1


def small_dataset(n=12, seed=0):
    rng = np.random.default_rng(seed)
    images = []
    graphs = []
    for i in range(n):
        g = tiny_graph(seed=100 + i)
        x = rng.standard_normal((3, 8, 8)) * 0.5
        images.append(x)
        graphs.append(g)
    return np.stack(images), graphs


def test_training_runs_and_is_reproducible(tmp_path):
    images, graphs = small_dataset()
    cfg = TrainConfig(alpha_ref=0.005, batch_size=4, steps=6, seed=3)

    def run(out):
        model = DenoiserModel(TINY, seed=12)
        res = train(model, images, None, cfg, NOISE, "base", out_dir=str(out))
        return res

    r1 = run(tmp_path / "a")
    r2 = run(tmp_path / "b")
    assert r1.losses == r2.losses
    csv1 = open(r1.metrics_path, "rb").read()
    csv2 = open(r2.metrics_path, "rb").read()
    assert csv1 == csv2
    header = csv1.decode().splitlines()[0]
    assert header.startswith("step,loss,lr,probe_rms_0")


def test_control_phase_freezes_base(tmp_path):
    images, graphs = small_dataset()
    model = DenoiserModel(TINY, seed=13)
    model.base.out_gain.values = np.asarray(1.0)  # as after base training
    base_before = {
        k: v.values.copy()
        for k, v in model.named_parameters().items()
        if k.startswith("base.")
    }
    cfg = TrainConfig(alpha_ref=0.005, batch_size=4, steps=4, seed=5)
    train(model, images, graphs, cfg, NOISE, "control", out_dir=str(tmp_path))
    for k, v in model.named_parameters().items():
        if k.startswith("base."):
            assert np.array_equal(v.values, base_before[k]), k


def test_control_phase_moves_control_params(tmp_path):
    images, graphs = small_dataset()
    model = DenoiserModel(TINY, seed=14)
    model.base.out_gain.values = np.asarray(1.0)  # as after base training
    cfg = TrainConfig(alpha_ref=0.01, batch_size=4, steps=4, seed=6)
    train(model, images, graphs, cfg, NOISE, "control")
    gains = [float(g.values) for g in model.control.gains]
    assert any(abs(g) > 0 for g in gains)


def test_control_phase_requires_graphs():
    images, _ = small_dataset(4)
    model = DenoiserModel(TINY, seed=15)
    with pytest.raises(ValueError, match="graphs"):
        train(model, images, None, TrainConfig(steps=1), NOISE, "control")


def test_checkpoint_roundtrip(tmp_path):
    images, graphs = small_dataset(6)
    model = DenoiserModel(TINY, seed=16)
    model.base.out_gain.values = np.asarray(1.0)
    cfg = TrainConfig(alpha_ref=0.005, batch_size=2, steps=3, seed=7)
    res = train(model, images, graphs, cfg, NOISE, "control", out_dir=str(tmp_path))

    tensors = load_weights(res.checkpoint_path)
    cfg2 = config_from_state(tensors)
    model2 = DenoiserModel(cfg2, seed=999)
    model2.load_state(tensors, schema=graphs[0].schema)

    x = np.random.default_rng(4).standard_normal((1, 3, 8, 8))
    g = tiny_graph(seed=55)
    assert np.array_equal(
        model.denoise(x, 0.7, graph=g).values,
        model2.denoise(x, 0.7, graph=g).values,
    )


def test_loss_reduction_detector():
    losses = [1.0] * 50 + [0.5] * 50
    assert loss_reduction_reached(losses, window=50, target=0.4)
    assert not loss_reduction_reached([1.0] * 100, window=50, target=0.4)


# ----------------------------------------------------------------------------
# end-to-end gradient checks (criterion: rel err < 1e-3 on an 8x8 model)


def _fd_check_params(model, x0, graph, names, rng, tol=1e-3, h=1e-5):
    sigma = np.array([0.8, 1.2][: x0.shape[0]])
    noise = rng.standard_normal(x0.shape)

    def eval_loss():
        return float(
            denoising_loss(model, x0, graph, None, NOISE, sigma=sigma,
                           noise=noise).values
        )

    params = model.named_parameters()
    loss = denoising_loss(model, x0, graph, None, NOISE, sigma=sigma, noise=noise)
    for p in params.values():
        p.grad = None
    loss.backward(np.ones(()))

    for name in names:
        p = params[name]
        flat = p.values.reshape(-1)
        k = int(rng.integers(flat.size))
        orig = flat[k]
        flat[k] = orig + h
        fp = eval_loss()
        flat[k] = orig - h
        fm = eval_loss()
        flat[k] = orig
        numeric = (fp - fm) / (2 * h)
        analytic = p.grad.reshape(-1)[k] if p.grad is not None else 0.0
        assert rel_err(analytic, numeric) < tol, (
            f"{name}: analytic {analytic} vs fd {numeric}"
        )


def test_end_to_end_gradients_base_phase(rng):
    model = DenoiserModel(TINY, seed=17)
    model.set_trainable(base=True, control=False)
    x0 = rng.standard_normal((2, 3, 8, 8)) * 0.5
    names = [
        "base.enc.conv_in.w",
        "base.enc.enc0_0.res0.w",
        "base.enc.enc0_0.emb_gain",
        "base.dec.dec0_1.skip.w",
        "base.emb.noise.w",
        "base.out_conv.w",
        "base.out_gain",
    ]
    _fd_check_params(model, x0, None, names, rng)


def test_end_to_end_gradients_control_phase(rng):
    model = DenoiserModel(TINY, seed=18)
    g = tiny_graph(batch=2, caption="a cow")
    model.control.ensure_gnn(g.schema)
    model.set_trainable(base=False, control=True)
    # open the gains so gradients flow through the projections and gnn
    for gain in model.control.gains:
        gain.values = np.asarray(0.3)
    x0 = rng.standard_normal((2, 3, 8, 8)) * 0.5
    names = [
        "control.gain0",
        "control.gain3",
        "control.proj0.w",
        "control.gnn.in_proj",
        "control.gnn.block0.path0.w1",
        "control.gnn.block1.path3.w2",
        "control.enc.conv_in.w",
        "control.emb.caption.w",
    ]
    _fd_check_params(model, x0, g, names, rng)
