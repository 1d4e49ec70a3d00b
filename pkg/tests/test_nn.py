import math

import numpy as np
import pytest
import torch

from freqact import nn as fnn
from freqact.errors import RangeError, ShapeError
from freqact.policy import FreqPolicyNet, plan_loss, sample_plan

from .conftest import jitter_params, toy_cfg

D = torch.float64


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=gen(seed), dtype=D)


# -- layer forward contracts ---------------------------------------------------------


def test_linear_identity_is_passthrough():
    x = randn(3, 5)
    np.testing.assert_array_equal(fnn.linear(x, torch.eye(5, dtype=D), torch.zeros(5, dtype=D)), x)


def test_layernorm_of_constant_is_zero():
    out = fnn.layernorm(torch.full((2, 7), 3.25, dtype=D))
    assert torch.all(out == 0)


def test_single_token_attention_is_value_projection():
    width, heads = 8, 2
    attn = fnn.Attention(width, heads, gen())
    x = randn(4, 1, width)
    v_w = attn.qkv.weight[2 * width:]
    v_b = attn.qkv.bias[2 * width:]
    expected = fnn.linear(fnn.linear(x, v_w, v_b), attn.proj.weight, attn.proj.bias)
    torch.testing.assert_close(attn(x), expected, rtol=0, atol=1e-14)


def test_masked_keys_have_no_influence():
    blk = fnn.Block(8, 2, gen())
    x = randn(1, 5, 8)
    mask = torch.tensor([[False, False, True, False, True]])
    y = x.clone()
    y[0, 2] += 10.0
    y[0, 4] -= 3.0
    a, b = blk(x, mask), blk(y, mask)
    keep = ~mask[0]
    torch.testing.assert_close(a[0, keep], b[0, keep], rtol=0, atol=1e-12)


@pytest.mark.parametrize("call", [
    lambda: fnn.linear(randn(2, 3), randn(4, 5)),
    lambda: fnn.layernorm(randn(2, 3), torch.ones(4, dtype=D)),
    lambda: fnn.attention(randn(2, 3, 6), randn(18, 6), None, randn(6, 6), None, n_heads=4),
    lambda: fnn.attention(randn(3, 6), randn(18, 6), None, randn(6, 6), None, n_heads=2),
    lambda: fnn.mlp(randn(2, 3), randn(4, 5), None, randn(5, 4), None),
])
def test_shape_errors_name_the_operator(call):
    with pytest.raises(ShapeError) as info:
        call()
    assert info.value.op in str(info.value)
    assert "(" in str(info.value)


def test_initialisation_follows_conventions():
    lin = fnn.Linear(64, 64, gen(3))
    ln = fnn.LayerNorm(64)
    assert torch.all(lin.bias == 0)
    assert lin.weight.abs().max() <= 0.04
    assert 0.01 < lin.weight.std() < 0.03
    assert torch.all(ln.weight == 1) and torch.all(ln.bias == 0)


# -- backward ------------------------------------------------------------------------


def test_backward_linear_form():
    w = randn(6).requires_grad_()
    x = randn(6, seed=1)
    fnn.backward((w * x).sum())
    torch.testing.assert_close(w.grad, x, rtol=0, atol=0)


def test_backward_half_square_norm():
    w = randn(4, 3).requires_grad_()
    fnn.backward((w**2).sum() / 2)
    torch.testing.assert_close(w.grad, w.detach(), rtol=0, atol=0)


def test_backward_rejects_non_scalar():
    w = randn(3).requires_grad_()
    with pytest.raises(ShapeError, match="backward"):
        fnn.backward(w * 2)


def test_backward_twice_doubles_exactly():
    m = fnn.MLP(5, 7, 3, gen())
    x = randn(4, 5, seed=2)
    params = dict(m.named_parameters())
    loss = (m(x) ** 2).sum()
    loss.backward(retain_graph=True)
    first = {n: p.grad.clone() for n, p in params.items()}
    fnn.backward(loss)
    for n, p in params.items():
        assert torch.equal(p.grad, 2 * first[n])
    fnn.zero_grad(params)
    assert all(p.grad is None for p in params.values())


def test_forward_and_gradients_are_bit_deterministic():
    def run():
        model = jitter_params(FreqPolicyNet(toy_cfg(), seed=11))
        plan = sample_plan(model.cfg, np.ones((3, 2, 6)) * 0.3,
                           np.random.default_rng(5).uniform(-1, 1, (3, 8, 2)), np.random.default_rng(9))
        loss = plan_loss(model, plan)
        loss.backward()
        return loss.item(), {n: p.grad.clone() for n, p in model.named_params().items()}

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    assert all(torch.equal(g1[n], g2[n]) for n in g1)


# -- grad_check ----------------------------------------------------------------------


def test_grad_check_linear_regression_at_1e6():
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.normal(size=(20, 4)))
    y = torch.tensor(rng.normal(size=20))
    params = {"w": torch.tensor(rng.normal(size=4), requires_grad=True),
              "b": torch.tensor([0.3], dtype=D, requires_grad=True)}
    report = fnn.grad_check(lambda: ((x @ params["w"] + params["b"] - y) ** 2).mean(), params, 1e-6)
    assert report.passed, str(report)
    assert report.n_checked == 5


def test_grad_check_two_layer_mlp():
    m = fnn.MLP(6, 10, 3, gen(4))
    x = randn(5, 6, seed=5)
    params = dict(m.named_parameters())
    report = fnn.grad_check(lambda: (m(x) ** 2).sum(), params, 1e-4)
    assert report.passed, str(report)
    assert report.n_checked == sum(p.numel() for p in params.values())


LAYERS = {
    "linear": lambda: (fnn.Linear(6, 6, gen(1)), lambda m, x: m(x)),
    "layernorm": lambda: (fnn.LayerNorm(6), lambda m, x: m(x) * torch.arange(6, dtype=D)),
    "attention": lambda: (fnn.Attention(6, 2, gen(2)),
                          lambda m, x: m(x, torch.tensor([[False, True, False, False]] * 2))),
    "mlp": lambda: (fnn.MLP(6, 12, 6, gen(3)), lambda m, x: m(x)),
    "block": lambda: (fnn.Block(6, 3, gen(4)), lambda m, x: m(x)),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_grad_check_every_layer(name):
    module, apply = LAYERS[name]()
    jitter_params(module, std=0.2)
    x = randn(2, 4, 6, seed=8)
    target = randn(2, 4, 6, seed=9)
    params = dict(module.named_parameters())
    report = fnn.grad_check(lambda: ((apply(module, x) - target) ** 2).sum(), params, 1e-4, n_samples=400)
    assert report.passed, str(report)


def test_grad_check_composite_training_loss():
    model = jitter_params(FreqPolicyNet(toy_cfg(), seed=3))
    rng = np.random.default_rng(2)
    plan = sample_plan(model.cfg, rng.uniform(-1, 1, (3, 2, 6)), rng.uniform(-1, 1, (3, 8, 2)), rng)
    report = fnn.grad_check(lambda: plan_loss(model, plan), model.named_params(), 1e-4, n_samples=256)
    assert report.passed, str(report)
    assert report.n_checked == 256


def test_grad_check_flags_corrupted_gradient():
    m = fnn.MLP(4, 6, 2, gen(6))
    x = randn(3, 4, seed=1)
    params = dict(m.named_parameters())
    fn = lambda: (m(x) ** 2).sum()  # noqa: E731
    good = dict(zip(params, torch.autograd.grad(fn(), list(params.values()))))
    bad = dict(good)
    bad["fc2.weight"] = good["fc2.weight"].clone()
    bad["fc2.weight"][1, 3] += 0.5
    report = fnn.grad_check(fn, params, 1e-4, grads=bad)
    assert not report.passed
    assert report.worst_param == "fc2.weight" and report.worst_index == (1, 3)
    assert "fc2.weight" in str(report)
    assert [f[0] for f in report.failures] == ["fc2.weight"]


def test_grad_check_detects_nondeterminism():
    w = torch.ones(3, dtype=D, requires_grad=True)
    state = {"n": 0}

    def noisy():
        state["n"] += 1
        return (w * state["n"]).sum()

    with pytest.raises(fnn.GradCheckError, match="deterministic"):
        fnn.grad_check(noisy, {"w": w}, 1e-4)


def test_grad_check_restores_parameters():
    m = fnn.Linear(3, 2, gen())
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    fnn.grad_check(lambda: m(randn(2, 3)).sum(), dict(m.named_parameters()), 1e-4)
    for n, p in m.named_parameters():
        assert torch.equal(p.detach(), before[n])


# -- optimizer -----------------------------------------------------------------------


def _scalar_problem(w0=1.0):
    w = torch.tensor([w0], dtype=D, requires_grad=True)
    return {"w": w}


def test_adamw_decreases_quadratic():
    params = _scalar_problem()
    state = {}
    fnn.backward((params["w"] ** 2).sum() / 2)
    fnn.adamw_step(params, {"w": params["w"].grad}, 0.1, (0.95, 0.999), 1e-6, 1, state)
    assert abs(params["w"].item()) < 1.0


def test_adamw_matches_hand_trace():
    # two steps on f(w) = w^2 / 2 from w = 1, lr = 0.1, betas (0.95, 0.999), eps 1e-8:
    #   g1 = 1;   m = 0.05, v = 0.001;  m_hat = v_hat = 1  -> w1 = 1 - 0.1 / (1 + 1e-8)
    #   g2 = w1;  m = 0.95 * 0.05 + 0.05 * w1, v = 0.999 * 0.001 + 0.001 * w1^2
    #             w2 = w1 - 0.1 * (m / 0.0975) / (sqrt(v / 0.001999) + 1e-8)
    w1 = 1 - 0.1 / (1 + 1e-8)
    m = 0.95 * 0.05 + 0.05 * w1
    v = 0.999 * 0.001 + 0.001 * w1 * w1
    w2 = w1 - 0.1 * (m / (1 - 0.95**2)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert w2 == pytest.approx(0.8002703667917733, abs=1e-15)

    params = _scalar_problem()
    opt = fnn.AdamW(params, lr=0.1, weight_decay=0.0, total_steps=10**9)
    trace = []
    for _ in range(2):
        fnn.zero_grad(params)
        fnn.backward((params["w"] ** 2).sum() / 2)
        opt.step(lr=0.1)
        trace.append(params["w"].item())
    assert trace[0] == pytest.approx(w1, abs=1e-15)
    assert trace[1] == pytest.approx(w2, abs=1e-15)


def test_weight_decay_is_decoupled():
    params = _scalar_problem(2.0)
    state = {}
    fnn.adamw_step(params, {"w": torch.zeros(1, dtype=D)}, 0.1, (0.9, 0.999), 0.5, 1, state)
    # zero gradient: only the decay term moves the weight
    assert params["w"].item() == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


def test_cosine_schedule_endpoints():
    assert fnn.cosine_lr(0, 100, 1e-4) == 1e-4
    assert fnn.cosine_lr(100, 100, 1e-4) <= 1e-6
    assert fnn.cosine_lr(50, 100, 1e-4) == pytest.approx(5e-5)
    assert fnn.cosine_lr(0, 100, 1e-3, warmup=10) == pytest.approx(1e-4)
    lrs = [fnn.cosine_lr(s, 100, 1.0) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_optimizer_reaches_near_zero_lr_at_budget_end():
    params = _scalar_problem()
    opt = fnn.AdamW(params, lr=1e-4, total_steps=30)
    for _ in range(30):
        fnn.zero_grad(params)
        fnn.backward((params["w"] ** 2).sum())
        last = opt.step()
    assert opt.current_lr() <= 1e-2 * 1e-4
    assert last <= 0.01 * 1e-4 + 1e-6


def test_learning_rate_errors():
    with pytest.raises(RangeError):
        fnn.AdamW(_scalar_problem(), lr=0.0)
    with pytest.raises(RangeError):
        fnn.cosine_lr(0, 10, -1.0)
    with pytest.raises(RangeError):
        fnn.adamw_step(_scalar_problem(), {}, -0.1, (0.9, 0.99), 0.0, 1, {})


def test_zero_lr_leaves_params_bit_unchanged_but_tracks_moments():
    params = _scalar_problem(0.75)
    state = {}
    fnn.adamw_step(params, {"w": torch.tensor([2.0], dtype=D)}, 0.0, (0.9, 0.99), 0.1, 1, state)
    assert params["w"].item() == 0.75
    m, v = state["w"]
    assert m.item() == pytest.approx(0.2) and v.item() == pytest.approx(0.04)
