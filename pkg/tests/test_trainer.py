import numpy as np
import pytest

from halo import hadamard as had
from halo.halo_linear import HaloLinear, HaloScheme
from halo.quantize import NumericFormat
from halo.trainer import (
    AdamWConfig,
    DataConfig,
    DivergenceError,
    ModelConfig,
    ToyModel,
    ablation_csv,
    default_variants,
    distributivity_probe,
    grad_rel_error,
    make_dataset,
    numerical_grad,
    placement_ablation,
    rmsnorm_backward,
    rmsnorm_forward,
    sensitivity_report,
    train,
)
from halo.trainer.analysis import ablation_cell
from halo.trainer.model import LOSSES, silu, silu_grad

OUTLIER_MODEL = dict(gain_outliers=2, gain_outlier_scale=20.0, hidden_outliers=2, hidden_outlier_scale=10.0)


def toy(seed=0, scheme="halo0", **kw):
    mc = ModelConfig(seed=seed, **{**OUTLIER_MODEL, **kw})
    ds = make_dataset(mc, DataConfig(seed=seed))
    return ToyModel(mc, scheme, ds.pretrained), ds


# --- RMSNorm


def test_rmsnorm_examples():
    assert np.allclose(rmsnorm_forward([[3.0, 4.0]]), [[0.6, 0.8]])
    u = np.array([[0.6, 0.8]])
    assert np.allclose(rmsnorm_forward(u), u)
    assert np.allclose(rmsnorm_forward(7.5 * u), u)
    dx, _ = rmsnorm_backward([[3.0, 4.0]], [[1.0, 0.0]])
    assert np.allclose(dx, [[0.128, -0.096]])
    x = np.random.default_rng(0).standard_normal((1, 16))
    assert np.allclose(rmsnorm_backward(x, x)[0], 0.0, atol=1e-15)


def test_rmsnorm_zero_row_errors():
    with pytest.raises(ValueError):
        rmsnorm_forward(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        rmsnorm_backward(np.zeros((1, 4)), np.ones((1, 4)))


@pytest.mark.parametrize("seed", range(20))
def test_rmsnorm_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x, e, gain = rng.standard_normal((3, 12)), rng.standard_normal((3, 12)), rng.standard_normal(12)
    f = lambda: float(np.sum(rmsnorm_forward(x, gain) * e))
    dx, dg = rmsnorm_backward(x, e, gain)
    assert grad_rel_error(dx, numerical_grad(f, x)) < 1e-6
    assert grad_rel_error(dg, numerical_grad(f, gain)) < 1e-6


def test_distributivity_probe():
    gaps = [distributivity_probe(s) for s in range(100)]
    assert max(g["forward_gap"] for g in gaps) < 1e-6
    assert max(g["backward_gap"] for g in gaps) > 1e-3
    assert max(g["equivariant_gap"] for g in gaps) < 1e-12
    ident = distributivity_probe(0, Q=np.eye(64))
    assert ident["forward_gap"] == 0.0 and ident["backward_gap"] == 0.0


def test_silu_grad():
    x = np.linspace(-40, 40, 101)
    num = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6
    assert np.allclose(silu_grad(x), num, atol=1e-7)


# --- layer gradients against finite differences


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("level", ["halo0", "halo1", "halo2"])
def test_halo_layer_finite_differences(seed, level):
    rng = np.random.default_rng(seed)
    W, X, E = rng.standard_normal((8, 16)), rng.standard_normal((5, 16)), rng.standard_normal((5, 8))
    layer = HaloLinear(W, HaloScheme.preset(level, "identity"))

    def f():
        y, _ = layer.forward(X)
        return float(np.sum(y * E))

    _, ctx = layer.forward(X)
    g = layer.backward(ctx, E)
    assert grad_rel_error(g.e_x, numerical_grad(f, X)) < 1e-5
    assert grad_rel_error(g.g, numerical_grad(f, layer.W)) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_lora_finite_differences(seed):
    rng = np.random.default_rng(seed)
    W, U, V = rng.standard_normal((8, 16)), rng.standard_normal((2, 16)), rng.standard_normal((8, 2))
    X, E = rng.standard_normal((5, 16)), rng.standard_normal((5, 8))
    layer = HaloLinear(W, HaloScheme.parse("halo-peft", "identity"), U, V)

    def f():
        y, _ = layer.forward(X)
        return float(np.sum(y * E))

    _, ctx = layer.forward(X)
    g = layer.backward(ctx, E)
    assert grad_rel_error(g.g_u, numerical_grad(f, layer.U)) < 1e-5
    assert grad_rel_error(g.g_v, numerical_grad(f, layer.V)) < 1e-5
    assert grad_rel_error(g.e_x, numerical_grad(f, X)) < 1e-5


def test_model_backward_finite_differences():
    mc = ModelConfig(d_model=8, d_hidden=16, d_out=4, seed=3)
    model = ToyModel(mc, HaloScheme.preset("halo2", "identity"))
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((6, 8)), rng.standard_normal((6, 4))

    def f():
        out, _ = model.forward(x)
        return LOSSES["mse"](out, y)[0]

    out, cache = model.forward(x)
    grads = model.backward(cache, LOSSES["mse"](out, y)[1])
    for name, p in model.params.items():
        assert grad_rel_error(grads[name], numerical_grad(f, p)) < 1e-5, name
    assert grad_rel_error(grads["input"], numerical_grad(f, x)) < 1e-5


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits, labels = rng.standard_normal((5, 7)), rng.integers(0, 7, 5)
    f = lambda: LOSSES["ce"](logits, labels)[0]
    assert grad_rel_error(LOSSES["ce"](logits, labels)[1], numerical_grad(f, logits)) < 1e-6


# --- optimizer and loop


def test_warmup_schedule():
    cfg = AdamWConfig(lr=1e-3, warmup_steps=20)
    assert cfg.lr_at(1) == pytest.approx(5e-5)
    assert cfg.lr_at(20) == cfg.lr_at(200) == 1e-3


def test_zero_lr_leaves_parameters_unchanged():
    model, ds = toy(scheme="halo2")
    before = {k: v.copy() for k, v in model.params.items()}
    res = train(model, ds, AdamWConfig(lr=0.0), steps=5)
    assert all(np.array_equal(before[k], res.params[k]) for k in before)


def test_training_is_deterministic():
    a = train(*toy(scheme="halo2"), steps=15)
    b = train(*toy(scheme="halo2"), steps=15)
    assert a.losses == b.losses and a.grad_norms == b.grad_norms
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_training_reduces_loss():
    res = train(*toy(scheme="halo2"), steps=60)
    assert res.losses[-1] < res.losses[0]


def test_identity_levels_agree_end_to_end():
    traces = [train(*toy(scheme=HaloScheme.preset(l, "identity")), steps=20).losses
              for l in ("halo0", "halo1", "halo2")]
    for t in traces[1:]:
        assert np.allclose(t, traces[0], rtol=1e-4, atol=0)


def test_counters_per_step():
    res = train(*toy(scheme="halo2"), steps=3)
    # 4 linears x 3 steps, X and W once per step, E twice under level 2
    assert res.counters == {"X": 12, "W": 12, "E": 24}


def test_divergence_is_reported():
    with pytest.raises(DivergenceError) as err:
        train(*toy(scheme="halo0"), AdamWConfig(lr=1e3, warmup_steps=0), steps=200)
    assert "diverged at step" in str(err.value)


def test_glyph_dataset_trains():
    mc = ModelConfig(d_out=16, seed=0)
    ds = make_dataset(mc, DataConfig(name="glyphs", seed=0))
    res = train(ToyModel(mc, "halo1"), ds, AdamWConfig(lr=3e-3), steps=60)
    assert res.losses[-1] < res.losses[0]
    with pytest.raises(ValueError):
        make_dataset(ModelConfig(d_model=32), DataConfig(name="glyphs"))


def test_peft_trains_only_adapters():
    model, ds = toy(scheme="halo-peft", lora_rank=2)
    frozen = {k: v.copy() for k, v in model.params.items() if not k.endswith((".U", ".V"))}
    res = train(model, ds, steps=5)
    assert all(np.array_equal(frozen[k], res.params[k]) for k in frozen)
    assert not np.array_equal(res.params["blocks.0.lin1.V"], 0)


# --- analysis drivers


def test_sensitivity_identity_is_exact():
    model, ds = toy()
    rep = sensitivity_report(model, ds.batch(0), default_variants("identity"))
    assert all(c == pytest.approx(1.0, abs=1e-9) for _, _, c, _ in rep.rows)
    assert len(rep.rows) == 3 * 4
    assert rep.to_csv("fwd").splitlines()[0] == "layer,cosine,param_count"


def test_gradient_fidelity_improves_with_level():
    # a hard token per batch gives the errors the token-row outliers the left rotation targets
    med = {}
    for level in ("halo0", "halo1", "halo2"):
        vals = []
        for seed in range(50):
            mc = ModelConfig(seed=seed, **OUTLIER_MODEL)
            ds = make_dataset(mc, DataConfig(seed=seed, hard_tokens=1, hard_scale=30.0))
            rep = sensitivity_report(ToyModel(mc, "halo0", ds.pretrained), ds.batch(0),
                                     {level: HaloScheme.preset(level)})
            vals.append(rep.averages[level])
        med[level] = float(np.median(vals))
    assert med["halo0"] < med["halo1"] <= med["halo2"]


def test_single_linear_on_grid_is_exact():
    # W = I and X, E_Y on the INT8 grid: nothing to round, gradients are exact
    layer = HaloLinear(np.eye(32), "halo0")
    _, ctx = layer.forward(np.eye(32))
    g = layer.backward(ctx, np.eye(32))
    assert np.array_equal(g.g, np.eye(32)) and np.array_equal(g.e_x, np.eye(32))


def test_ablation_row_counts():
    model, ds = toy()
    batch = ds.batch(0)
    rows = placement_ablation(model, batch, "F")
    assert len(rows) == 8
    assert ablation_csv(rows).splitlines()[0] == "placement,loss,cosine"
    assert ablation_cell(rows, "F", "M").cosine > ablation_cell(rows, "F", "").cosine
    with pytest.raises(ValueError):
        placement_ablation(model, batch, "Q")


def test_full_grid_identity_cancels():
    model, ds = toy(d_model=16, d_hidden=32, d_out=4)
    rows = placement_ablation(model, ds.batch(0), None, fmt="identity")
    assert len(rows) == 512
    assert all(abs(r.cosine - 1.0) < 1e-9 for r in rows)
    assert np.allclose([r.loss for r in rows], rows[0].loss, rtol=1e-9)
