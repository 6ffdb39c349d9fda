import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from samcl.harness import build_stream, evaluate, train_online
from samcl.robustness import (
    AttackConfig,
    pgd_attack,
    read_curve_csv,
    robustness_curve,
    spurious_configs,
    spurious_experiment,
    write_curve_csv,
)

from conftest import tiny


class Linear1Pixel(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = w

    def forward(self, x):
        z = self.w * x[:, 0, 0, 0]
        return torch.stack([z, torch.zeros_like(z)], dim=1)


class TinyConv(nn.Module):
    def __init__(self, k=4):
        super().__init__()
        torch.manual_seed(0)
        self.conv = nn.Conv2d(3, 8, 3, padding=1)
        self.fc = nn.Linear(8, k)

    def forward(self, x):
        return self.fc(torch.relu(self.conv(x)).mean(dim=(2, 3)))


def test_attack_config_defaults():
    cfg = AttackConfig(8 / 255)
    assert cfg.steps == 10 and cfg.random_start
    assert cfg.step_size == pytest.approx(2.5 * 8 / 255 / 10)
    with pytest.raises(ValueError):
        AttackConfig(-0.1)
    with pytest.raises(ValueError):
        AttackConfig(0.1, steps=0)


def test_zero_budget_returns_input():
    x = torch.rand(3, 3, 8, 8)
    out = pgd_attack(TinyConv(), x, torch.tensor([0, 1, 2]), AttackConfig(0.0))
    assert torch.equal(out, x)


@pytest.mark.parametrize("w", [2.0, -3.0])
def test_one_step_linear_toy_moves_by_signed_budget(w):
    x = torch.full((1, 1, 1, 1), 0.5)
    eps = 0.1
    # label 1: the loss grows with w * x, so the gradient sign equals sign(w)
    out = pgd_attack(Linear1Pixel(w), x, torch.tensor([1]), AttackConfig(eps, 1, eps, random_start=False))
    assert float(out - x) == pytest.approx(eps * np.sign(w), abs=1e-7)


@settings(max_examples=15, deadline=None)
@given(eps=st.floats(0.001, 0.3), steps=st.integers(1, 6), rs=st.booleans(), seed=st.integers(0, 100))
def test_projection_holds_after_every_step(eps, steps, rs, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(4, 3, 8, 8, generator=g)
    x[0] = 0.0
    x[1] = 1.0
    seen = []

    def check(step, xa):
        assert float((xa - x).abs().max()) <= eps + 1e-6
        assert float(xa.min()) >= 0.0 and float(xa.max()) <= 1.0
        seen.append(step)

    pgd_attack(TinyConv(), x, torch.tensor([0, 1, 2, 3]), AttackConfig(eps, steps, random_start=rs), g, check)
    assert seen == list(range(steps))


def test_attack_is_deterministic_without_random_start():
    x, y = torch.rand(4, 3, 8, 8), torch.tensor([0, 1, 2, 3])
    cfg = AttackConfig(0.05, 5, random_start=False)
    assert torch.equal(pgd_attack(TinyConv(), x, y, cfg), pgd_attack(TinyConv(), x, y, cfg))


def test_non_differentiable_model_is_rejected():
    class Detached(nn.Module):
        def forward(self, x):
            return x.detach().mean(dim=(2, 3))[:, :2]

    with pytest.raises(RuntimeError, match="differentiabl"):
        pgd_attack(Detached(), torch.rand(2, 3, 4, 4), torch.tensor([0, 1]), AttackConfig(0.1))


@pytest.fixture(scope="module")
def trained():
    cfg = tiny(**{"benchmark.samples_per_class": 20})
    stream = build_stream(cfg, 0)
    return train_online(cfg, stream, 0).model, stream


def test_curve_zero_point_is_clean_accuracy(trained):
    model, stream = trained
    ((eps, seed, acc),) = robustness_curve(model, stream, [0.0])
    assert eps == 0.0 and acc == evaluate(model, stream, "class-il").average


def test_curve_non_increasing(trained):
    model, stream = trained
    accs = [a for _, _, a in robustness_curve(model, stream, [0, 2 / 255, 4 / 255, 8 / 255])]
    for a, b in zip(accs, accs[1:]):
        assert b <= a + 0.01
    with pytest.raises(ValueError):
        robustness_curve(model, stream, [0.1, 0.0])


def test_constant_prediction_model_at_chance(trained):
    _, stream = trained

    class Chance(nn.Module):
        def __init__(self, k):
            super().__init__()
            self.bias = torch.zeros(k)
            self.bias[3] = 1.0

        def forward(self, x):
            return 1e-4 * x.mean(dim=(1, 2, 3)).unsqueeze(1) + self.bias

    k = max(stream.classes) + 1
    for _, _, acc in robustness_curve(Chance(k), stream, [0, 4 / 255, 8 / 255]):
        assert acc == pytest.approx(1 / k, abs=0.05)


def test_curve_csv(tmp_path):
    rows = [(0.0, 0, 0.5), (2 / 255, 0, 0.25)]
    write_curve_csv(tmp_path / "c.csv", rows)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "epsilon,seed,accuracy"
    assert read_curve_csv(tmp_path / "c.csv") == rows


def test_spurious_arms_share_test_sets():
    arms = spurious_configs(tiny())
    clean, sf = build_stream(arms["clean"], 0), build_stream(arms["spurious"], 0)
    for a, b in zip(clean.tasks, sf.tasks):
        for x, y in zip(a.test, b.test):
            assert np.array_equal(x.image, y.image)
        for x, y in zip(a.train, b.train):
            np.testing.assert_allclose(y.image, np.minimum(x.image + 5 * (x.label + 1) / 255, 1.0), atol=1e-6)


def test_spurious_experiment_rows():
    rows = spurious_experiment(tiny(**{"learner.kind": "erace", "learner.buffer": 20}), 0)
    assert list(rows) == ["clean", "spurious", "spurious+sam"]
    assert rows["spurious+sam"].variant == "sam" and rows["clean"].variant == "none"
    assert all(r.task_index == 4 for r in rows.values())
