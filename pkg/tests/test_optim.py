import math

import numpy as np
import pytest

from taps.errors import ConfigurationError, ContractError, NonFiniteError
from taps.gradcheck import finite_diff_grad
from taps.optim import (OptimizerState, TrainConfig, cosine_lr, load_config, parse_config_text, sgd_step,
                        taps_loss)
from taps.tensor import Tensor


def param(v):
    return Tensor(np.asarray(v, dtype=np.float32), requires_grad=True, name="p")


def test_defaults():
    cfg = TrainConfig()
    assert cfg.weight_decay == 0.0 and cfg.tau == 0.1 and cfg.cosine and cfg.init_score == 1.0


@pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(momentum=1.0), dict(lam=-1), dict(tau=0),
                                 dict(epochs=0), dict(weight_decay=-0.1)])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        TrainConfig(**bad)


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlambda = 0.25\nlr = 0.02\nepochs=3\ncosine = false\n")
    cfg = load_config(path, epochs=7)
    assert cfg.lam == 0.25 and cfg.learning_rate == 0.02 and cfg.epochs == 7 and cfg.cosine is False
    with pytest.raises(ConfigurationError):
        parse_config_text("unknown = 1")
    with pytest.raises(ConfigurationError):
        parse_config_text("epochs = many")


def test_loss_without_penalty_is_task_loss():
    task = Tensor(np.float32(2.0), requires_grad=True)
    assert taps_loss(task, [param(1.0)], 0.0, 1) is task


def test_loss_arithmetic():
    scores = [param(1.0) for _ in range(4)]
    out = taps_loss(Tensor(np.float32(2.0)), scores, 0.5, 4)
    assert out.item() == 2.5


def test_loss_needs_layers():
    with pytest.raises(ConfigurationError):
        taps_loss(Tensor(np.float32(1.0)), [], 0.5, 0)


def test_penalty_gradient_against_oracle():
    rng = np.random.default_rng(0)
    values = rng.choice([-1, 1], 5) * rng.uniform(0.2, 2.0, 5)
    scores = [param(v) for v in values]
    taps_loss(Tensor(np.float32(0.0)), scores, 0.7, 5).backward()
    engine = np.array([float(s.grad) for s in scores])
    oracle = finite_diff_grad(lambda v: 0.7 / 5 * np.abs(v).sum(), values)
    np.testing.assert_allclose(engine, oracle, rtol=1e-5)
    np.testing.assert_allclose(engine, 0.7 / 5 * np.sign(values), rtol=1e-6)


def test_sgd_single_step():
    p = param(1.0)
    p.grad = np.float32(2.0) * np.ones((), np.float32)
    sgd_step([p], OptimizerState(), lr=0.1, momentum=0.0)
    assert math.isclose(float(p.data), 0.8, rel_tol=1e-6)


def test_sgd_zero_gradient_never_moves():
    p, state = param([1.0, -2.0]), OptimizerState()
    for _ in range(10):
        p.grad = np.zeros(2, np.float32)
        sgd_step([p], state, lr=0.5, momentum=0.9)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_momentum_two_steps():
    # hand recurrence: v1 = 2, p1 = 0.8; v2 = 0.9 * 2 - 1 = 0.8, p2 = 0.72
    p, state = param(1.0), OptimizerState()
    for g in (2.0, -1.0):
        p.grad = np.asarray(g, np.float32)
        sgd_step([p], state, lr=0.1, momentum=0.9)
    assert math.isclose(float(p.data), 0.72, rel_tol=1e-6)


def test_sgd_rejects_nonfinite_and_names_param():
    a, b = param(1.0), param(1.0)
    a.grad, b.grad = np.asarray(1.0, np.float32), np.asarray(np.nan, np.float32)
    b.name = "layer3.delta"
    with pytest.raises(NonFiniteError, match="layer3.delta"):
        sgd_step([a, b], OptimizerState(), lr=0.1, momentum=0.0)
    assert float(a.data) == 1.0


def test_sgd_refuses_frozen_tensor():
    t = Tensor(np.float32(1.0))
    t.grad = np.asarray(1.0, np.float32)
    with pytest.raises(ContractError):
        sgd_step([t], OptimizerState(), lr=0.1, momentum=0.0)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 0.1) == 0.1
    assert cosine_lr(100, 100, 0.1) == 0.0
    assert math.isclose(cosine_lr(50, 100, 0.1), 0.05, rel_tol=1e-12)
    assert math.isclose(cosine_lr(25, 100, 1.0), 0.5 * (1 + math.cos(math.pi / 4)), rel_tol=1e-12)
    with pytest.raises(ContractError):
        cosine_lr(101, 100, 0.1)
