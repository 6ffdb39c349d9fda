import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from torch import nn

from samcl.errors import ConfigError
from samcl.learners import (
    BufferItem,
    MemoryBuffer,
    derpp_loss,
    diagonal_fisher,
    end_task_hook,
    erace_loss,
    erace_stream_mask,
    lwf_loss,
    make_learner,
    oewc_penalty,
    reservoir_insert,
)
from samcl.modulation import ModulatedBackbone


def item(i):
    return BufferItem(np.full((3, 2, 2), i, np.float32), i % 5, np.array([i, -i], np.float32))


def test_buffer_small_and_zero_capacity():
    b = MemoryBuffer(5)
    for i in range(3):
        reservoir_insert(b, item(i))
    assert [e.label for e in b.entries] == [0, 1, 2]
    z = MemoryBuffer(0)
    for i in range(50):
        z.insert(item(i))
    assert len(z) == 0 and z.seen_count == 50
    with pytest.raises(ConfigError):
        MemoryBuffer(-1)


@settings(max_examples=30, deadline=None)
@given(cap=st.integers(0, 20), n=st.integers(0, 200), seed=st.integers(0, 1000))
def test_buffer_never_exceeds_capacity(cap, n, seed):
    b = MemoryBuffer(cap, seed)
    for i in range(n):
        b.insert(i)
        assert len(b) <= cap
    assert len(b) == min(cap, n) and b.seen_count == n


def test_reservoir_inclusion_uniform_over_positions():
    trials, cap, n = 3000, 10, 100
    counts = np.zeros(n)
    for s in range(trials):
        b = MemoryBuffer(cap, s)
        for i in range(n):
            b.insert(i)
        counts[b.entries] += 1
    freq = counts / trials
    # binomial std at p=0.1 over 3000 trials is ~0.0055
    assert np.all(np.abs(freq - cap / n) < 0.03)


def test_buffer_sample_with_replacement():
    b = MemoryBuffer(2, 0)
    b.insert("a")
    b.insert("b")
    draw = b.sample(50)
    assert len(draw) == 50 and set(draw) == {"a", "b"}
    assert MemoryBuffer(3).sample(4) == []


def test_buffer_save_load(tmp_path):
    b = MemoryBuffer(4)
    for i in range(4):
        b.insert(item(i))
    b.save(tmp_path / "buf.tsv")
    raw = (tmp_path / "buf.tsv.logits").read_bytes()
    assert np.frombuffer(raw[:8], "<u4").tolist() == [2, 4]
    back = MemoryBuffer.load(tmp_path / "buf.tsv")
    for e, f in zip(b.entries, back.entries):
        assert np.array_equal(e.image, f.image) and e.label == f.label and np.array_equal(e.logits, f.logits)


def test_derpp_degenerate_and_mse_zero():
    g = torch.Generator().manual_seed(0)
    logits, y = torch.randn(4, 3, generator=g), torch.tensor([0, 1, 2, 0])
    la, lb = torch.randn(4, 3, generator=g), torch.randn(4, 3, generator=g)
    ce = F.cross_entropy(logits, y)
    assert torch.allclose(derpp_loss(logits, y, la, la + 1, lb, y, 0.0, 0.0), ce)
    assert torch.allclose(derpp_loss(logits, y, la, la.clone(), None, None, 0.5, 0.0), ce)
    with pytest.raises(ValueError, match="stored logits"):
        derpp_loss(logits, y, la, None, None, None, 0.5, 0.0)


def test_derpp_hand_value():
    s = torch.tensor([[2.0, 0.0]])
    a, stored = torch.tensor([[1.0, 1.0]]), torch.tensor([[0.0, 3.0]])
    b, yb = torch.tensor([[0.0, 1.0]]), torch.tensor([0])
    ce_s = math.log(1 + math.exp(-2.0))
    mse = (1.0 + 4.0) / 2
    ce_b = math.log(1 + math.exp(1.0))
    v = derpp_loss(s, torch.tensor([0]), a, stored, b, yb, 0.5, 0.5)
    assert float(v) == pytest.approx(ce_s + 0.5 * mse + 0.5 * ce_b, abs=1e-6)


def test_erace_mask_and_first_task():
    m = erace_stream_mask(8, [4, 5, 5], set(range(6)), first_task=False)
    assert m.nonzero().flatten().tolist() == [0, 1, 2, 3]
    assert not erace_stream_mask(8, [0], {0, 1}, first_task=True).any()
    logits, y = torch.randn(3, 8), torch.tensor([0, 1, 1])
    assert torch.allclose(erace_loss(logits, y, None, None, {0, 1}, True), F.cross_entropy(logits, y))
    with pytest.raises(ValueError):
        erace_loss(logits, y, None, None, set())


def test_erace_masked_and_replay_terms():
    logits, y = torch.randn(2, 6), torch.tensor([4, 5])
    rl, ry = torch.randn(3, 6), torch.tensor([0, 2, 5])
    masked = logits.clone()
    masked[:, :4] = torch.finfo(masked.dtype).min
    want = F.cross_entropy(masked, y) + F.cross_entropy(rl, ry)
    assert torch.allclose(erace_loss(logits, y, rl, ry, set(range(6))), want)


def test_lwf_hand_value_and_degenerations():
    new, old = torch.tensor([[1.0, 0.0, 5.0]]), torch.tensor([[0.0, 1.0, -2.0]])
    y = torch.tensor([2])
    T = 2.0
    pn = [math.exp(0.5) / (math.exp(0.5) + 1), 1 / (math.exp(0.5) + 1)]
    po = [1 / (1 + math.exp(0.5)), math.exp(0.5) / (1 + math.exp(0.5))]
    kl = sum(o * math.log(o / n) for o, n in zip(po, pn))
    ce = -math.log(math.exp(5) / (math.exp(1) + 1 + math.exp(5)))
    assert float(lwf_loss(new, y, old, {0, 1}, T, 1.0)) == pytest.approx(ce + kl, abs=1e-6)
    assert float(lwf_loss(new, y, old, {0, 1}, T, 0.0)) == pytest.approx(ce, abs=1e-6)
    assert float(lwf_loss(new, y, new, {0, 1}, T, 1.0)) == pytest.approx(ce, abs=1e-6)


def test_oewc_penalty_hand_and_degenerate():
    th = {"w": torch.tensor([1.0, -2.0])}
    zero = {"w": torch.zeros(2)}
    ones = {"w": torch.ones(2)}
    assert float(oewc_penalty(th, zero, ones, 1.0)) == pytest.approx(2.5)
    assert float(oewc_penalty(th, th, ones, 1.0)) == 0.0
    assert float(oewc_penalty(th, zero, ones, 0.0)) == 0.0
    with pytest.raises(ValueError, match="shape"):
        oewc_penalty(th, {"w": torch.zeros(3)}, ones, 1.0)


def test_fisher_on_linear_softmax_toy():
    # logistic model: d/dw log p(y|x) = (y - sigmoid(w x)) x, so F = E[(y - p)^2 x^2]
    torch.manual_seed(0)
    lin = nn.Linear(1, 2, bias=False)
    with torch.no_grad():
        lin.weight.copy_(torch.tensor([[0.3], [-0.2]]))
    xs = torch.randn(400, 1)
    ys = (torch.rand(400) < 0.5).long()
    fisher = diagonal_fisher(lin, xs, ys, {"weight": lin.weight})["weight"]
    p = torch.softmax(lin(xs), 1).detach()
    onehot = F.one_hot(ys, 2).float()
    want = (((onehot - p) * xs) ** 2).mean(0).unsqueeze(1)
    assert torch.allclose(fisher, want, rtol=0.05)
    assert torch.all(fisher >= 0)


def _toy_model():
    torch.manual_seed(0)
    return ModulatedBackbone(4, (16, 16), "none")


def test_end_task_hooks():
    model = _toy_model()
    ft = make_learner("finetune", 4)
    ft.classification_loss(model, torch.randn(2, 4), torch.tensor([0, 1]))
    end_task_hook(ft, model)
    assert ft.past_classes == {0, 1}
    lwf = make_learner("lwf", 4)
    end_task_hook(lwf, model)
    for a, b in zip(model.state_dict().values(), lwf.snapshot.state_dict().values()):
        assert torch.equal(a, b)
    ew = make_learner("oewc", 4, strength=1.0, decay=0.5)
    x, y = torch.rand(6, 3, 16, 16), torch.tensor([0, 1, 2, 3, 0, 1])
    end_task_hook(ew, model, x, y)
    f1 = {k: v.clone() for k, v in ew.fisher.items()}
    end_task_hook(ew, model, x, y)
    for k in f1:
        assert torch.allclose(ew.fisher[k], 1.5 * f1[k])
        assert torch.equal(ew.anchor[k], dict(model.named_parameters())[k].detach())


def test_seen_classes_grow():
    model = _toy_model()
    er = make_learner("erace", 4, buffer_size=10)
    er.classification_loss(model, torch.randn(2, 4), torch.tensor([0, 1]))
    assert er.seen_classes == {0, 1}
    er.end_task(model)
    er.classification_loss(model, torch.randn(2, 4, requires_grad=True), torch.tensor([2, 3]))
    assert er.seen_classes == {0, 1, 2, 3}


def test_make_learner_unknown():
    with pytest.raises(ConfigError):
        make_learner("gem", 4)
