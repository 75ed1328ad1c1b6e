import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from icpolypseg.blocks import RFE, PFR, CPFR, rfe_forward, pfr_forward, cpfr_forward, holistic_kernel
from icpolypseg.config import RFEConfig
from icpolypseg.errors import ContractViolation, NonFiniteError


def _identity_(conv: torch.nn.Conv2d) -> None:
    with torch.no_grad():
        conv.weight.zero_()
        for c in range(conv.out_channels):
            conv.weight[c, c, 0, 0] = 1.0
        conv.bias.zero_()


def _zero_biases(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()


def conv_matrix(weight: np.ndarray, bias, h: int, w: int):
    """Dense (Cout*H*W, Cin*H*W) matrix of a stride-1 'same' zero-padded conv."""
    cout, cin, kh, kw = weight.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    m = np.zeros((cout * h * w, cin * h * w))
    for o in range(cout):
        for y in range(h):
            for x in range(w):
                row = (o * h + y) * w + x
                for c in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            yy, xx = y + i - ph, x + j - pw
                            if 0 <= yy < h and 0 <= xx < w:
                                m[row, (c * h + yy) * w + xx] += weight[o, c, i, j]
    b = np.zeros(cout * h * w) if bias is None else np.repeat(bias, h * w)
    return m, b


def _apply_unit(unit, v: np.ndarray, h: int, w: int) -> np.ndarray:
    conv = unit.conv
    bias = None if conv.bias is None else conv.bias.detach().numpy()
    m, b = conv_matrix(conv.weight.detach().numpy(), bias, h, w)
    return m @ v + b


# ---------------------------
# RFE
# ---------------------------

def test_rfe_shape():
    block = RFE(RFEConfig(in_channels=320, out_channels=32))
    out = rfe_forward(block, torch.randn(2, 320, 11, 11))
    assert out.shape == (2, 32, 11, 11)


def test_rfe_zero_input_zero_bias_gives_zero():
    block = RFE(RFEConfig(in_channels=5, out_channels=4, use_norm_act=False))
    _zero_biases(block)
    out = block(torch.zeros(1, 5, 7, 7))
    assert torch.count_nonzero(out) == 0


def test_rfe_matches_dense_matrix_oracle(double_precision):
    torch.manual_seed(0)
    h = w = 9
    block = RFE(RFEConfig(in_channels=8, out_channels=4, use_norm_act=False))
    x = torch.randn(1, 8, h, w)
    got = block(x).detach().numpy().reshape(-1)

    v = x.numpy().reshape(-1)
    branch_outs = []
    for branch in block.branches:
        y = v
        for unit in branch:
            y = _apply_unit(unit, y, h, w)
        branch_outs.append(y)
    expected = _apply_unit(block.reduce, np.concatenate(branch_outs), h, w)
    assert np.max(np.abs(got - expected)) < 1e-10


def test_rfe_rejects_channel_mismatch_and_nan():
    block = RFE(RFEConfig(in_channels=4, out_channels=4))
    with pytest.raises(ContractViolation):
        block(torch.randn(1, 3, 5, 5))
    x = torch.randn(1, 4, 5, 5)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError):
        block(x)


def test_rfe_config_rejects_even_kernels():
    with pytest.raises(ContractViolation):
        RFE(RFEConfig(in_channels=4, branch_kernels=[1, 4]))
    with pytest.raises(ContractViolation):
        RFE(RFEConfig(in_channels=4, branch_kernels=[3, 5]))


# ---------------------------
# PFR
# ---------------------------

def test_pfr_identity_weights_ones():
    block = PFR(2)
    for conv in (block.q_proj, block.k_proj, block.v_proj):
        _identity_(conv)
    out = pfr_forward(block, torch.ones(1, 2, 2, 2))
    assert torch.equal(out, torch.full((1, 2, 2, 2), 8.0))


def test_pfr_inv_chw_divides_kernel():
    block = PFR(2, scale_mode="inv_chw")
    for conv in (block.q_proj, block.k_proj, block.v_proj):
        _identity_(conv)
    out = block(torch.ones(1, 2, 2, 2))
    assert torch.equal(out, torch.ones(1, 2, 2, 2))


def test_pfr_zero_and_shape():
    block = PFR(32)
    _zero_biases(block)
    assert torch.count_nonzero(block(torch.zeros(2, 32, 11, 11))) == 0
    assert block(torch.randn(2, 32, 11, 11)).shape == (2, 32, 11, 11)


@given(
    n=st.integers(1, 3), c=st.integers(1, 4), h=st.integers(1, 6), w=st.integers(1, 6),
    seed=st.integers(0, 2 ** 16),
)
@settings(max_examples=100, deadline=None)
def test_pfr_batch_matmul_equals_scalar_dot(n, c, h, w, seed):
    torch.manual_seed(seed)
    block = PFR(c).double()
    x = torch.randn(n, c, h, w, dtype=torch.float64)
    got = block(x)
    q, k, v = block.q_proj(x), block.k_proj(x), block.v_proj(x)
    scalar = (q * k).sum(dim=(1, 2, 3)).reshape(n, 1, 1, 1)
    expected = scalar * v
    assert torch.allclose(got, expected, rtol=1e-6, atol=1e-12)


@given(alpha=st.floats(-3.0, 3.0, allow_nan=False), seed=st.integers(0, 1000))
@settings(deadline=None)
def test_pfr_cubic_homogeneity(alpha, seed):
    torch.manual_seed(seed)
    block = PFR(3).double()
    _zero_biases(block)
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert torch.allclose(block(alpha * x), alpha ** 3 * block(x), rtol=1e-9, atol=1e-12)


def test_pfr_batch_permutation():
    torch.manual_seed(1)
    block = PFR(3)
    x = torch.randn(4, 3, 5, 5)
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(block(x[perm]), block(x)[perm], rtol=1e-6, atol=1e-6)


def test_holistic_kernel_reports_bad_batch_element(double_precision):
    q = torch.ones(2, 1, 2, 2)
    k = torch.ones(2, 1, 2, 2)
    q[1] = 1e200
    k[1] = 1e200
    with pytest.raises(NonFiniteError) as err:
        holistic_kernel(q, k)
    assert err.value.batch_index == 1


def test_pfr_spatial_init_keeps_kernel_order_one():
    torch.manual_seed(0)
    x = torch.relu(torch.randn(4, 32, 22, 22))
    sized = PFR(32, spatial=22 * 22)
    f_h = holistic_kernel(sized.q_proj(x), sized.k_proj(x))
    assert f_h.abs().max() < 10.0
    assert torch.count_nonzero(sized.q_proj.bias) == 0 and torch.count_nonzero(sized.k_proj.bias) == 0
    # inv_chw keeps the torch default projections
    assert torch.count_nonzero(PFR(32, scale_mode="inv_chw", spatial=22 * 22).q_proj.bias) > 0


def test_pfr_rejects_bad_scale_mode():
    with pytest.raises(ContractViolation):
        PFR(4, scale_mode="softmax")


# ---------------------------
# CPFR
# ---------------------------

def test_cpfr_identity_weights_ones():
    block = CPFR(1)
    for conv in (block.q_proj, block.k_proj, block.v_proj):
        _identity_(conv)
    with torch.no_grad():
        block.out_proj.weight.copy_(torch.ones(1, 2, 1, 1))
        block.out_proj.bias.zero_()
    out = cpfr_forward(block, torch.ones(1, 1, 1, 2), torch.ones(1, 1, 1, 2))
    assert torch.equal(out, torch.full((1, 1, 1, 2), 8.0))


def test_cpfr_zero_and_shape():
    block = CPFR(32)
    _zero_biases(block)
    z = torch.zeros(2, 32, 22, 22)
    assert torch.count_nonzero(block(z, z)) == 0
    assert block(torch.randn(2, 32, 22, 22), torch.randn(2, 32, 22, 22)).shape == (2, 32, 22, 22)


def test_cpfr_shape_mismatch_names_both():
    block = CPFR(4)
    with pytest.raises(ContractViolation) as err:
        block(torch.randn(1, 4, 8, 8), torch.randn(1, 4, 4, 4))
    assert "(1, 4, 8, 8)" in str(err.value) and "(1, 4, 4, 4)" in str(err.value)


# ---------------------------
# Gradients
# ---------------------------

def _gradcheck(module: torch.nn.Module, *inputs: torch.Tensor) -> bool:
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach().clone().requires_grad_(True) for _, p in module.named_parameters()]
    k = len(inputs)

    def fn(*args):
        out = torch.func.functional_call(module, dict(zip(names, args[k:])), tuple(args[:k]))
        return out.sum()

    return torch.autograd.gradcheck(fn, (*inputs, *params), eps=1e-5, atol=1e-6, rtol=1e-4)


def test_rfe_gradcheck(double_precision):
    torch.manual_seed(2)
    block = RFE(RFEConfig(in_channels=3, out_channels=2, use_norm_act=False))
    x = torch.randn(1, 3, 5, 5, requires_grad=True)
    assert _gradcheck(block, x)


def test_pfr_gradcheck(double_precision):
    torch.manual_seed(3)
    block = PFR(3)
    x = torch.randn(1, 3, 5, 5, requires_grad=True)
    assert _gradcheck(block, x)


def test_cpfr_gradcheck(double_precision):
    torch.manual_seed(4)
    block = CPFR(3)
    low = torch.randn(1, 3, 5, 5, requires_grad=True)
    high = torch.randn(1, 3, 5, 5, requires_grad=True)
    assert _gradcheck(block, low, high)


def test_blocks_deterministic_from_seed():
    def build():
        torch.manual_seed(9)
        return RFE(RFEConfig(in_channels=4, out_channels=4)), PFR(4)

    (r1, p1), (r2, p2) = build(), build()
    x = torch.randn(1, 4, 6, 6)
    r1.eval(), r2.eval()
    assert torch.equal(p1(r1(x)), p2(r2(x)))
