import numpy as np
import pytest

from asca import tensor as T
from helpers import block_cases, model_case, op_cases

TOL = 1e-4
OPS = op_cases()
BLOCKS = block_cases()


def check(fn, inputs, max_coords):
    with T.precision(np.float64):
        return T.gradcheck(fn, inputs, max_coords=max_coords, rng=np.random.default_rng(0))


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient(name):
    assert check(*OPS[name], max_coords=None) <= TOL


@pytest.mark.parametrize("name", sorted(BLOCKS))
def test_block_gradient(name):
    assert check(*BLOCKS[name], max_coords=60) <= TOL


@pytest.mark.parametrize("arch", ["C-C-C-T", "C-C-T-T", "C-C-C-C", "C-T-T-T"])
def test_micro_model_gradient(arch):
    fn, inputs = model_case(arch)
    assert check(fn, inputs, max_coords=30) <= TOL


def test_bce_gradient_tight():
    fn, inputs = OPS["bce_with_logits"]
    assert check(fn, inputs, max_coords=None) <= 1e-6


def test_structural_zero_gradients_are_exact():
    # k bias shifts every logit of a softmax row equally
    fn, inputs = BLOCKS["relative_window_attention_w2"]
    k_bias = next(p for p in inputs if p.name and p.name.endswith("attn.k.bias"))
    k_bias.grad = None
    with T.precision(np.float64), T.Tape() as tape:
        loss = fn()
    T.backward(loss, tape, [k_bias])
    assert np.abs(k_bias.grad).max() < 1e-14
