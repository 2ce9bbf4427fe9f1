import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from phed.losses import (
    AnnealSchedule,
    LossFlags,
    attribute_cls_loss,
    bow_loss,
    combine,
    kl_diag_gaussian,
    latent_dissimilarity_loss,
    reconstruction_loss,
    stage_loss,
    stage_loss_terms,
    zc_smoothness_loss,
)
from phed.numerics import GaussianParams, RngState, finite_difference_check

from conftest import tiny_model


def g(mean, var):
    return GaussianParams(torch.tensor([float(m) for m in mean]), torch.tensor([math.log(v) for v in var]))


class Fixed(nn.Module):
    """Head returning fixed logits, ignoring its input."""

    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float64)

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


def test_kl_examples():
    assert kl_diag_gaussian(g([0.3, -1], [2, 0.5]), g([0.3, -1], [2, 0.5])).item() == 0.0
    assert abs(kl_diag_gaussian(g([0], [1]), g([1], [1])).item() - 0.5) < 1e-15
    with pytest.raises(ValueError):
        kl_diag_gaussian(g([0], [1]), g([0, 0], [1, 1]))


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.lists(st.floats(-4, 4), min_size=4, max_size=4),
)
def test_kl_nonnegative(means, logvars):
    q = GaussianParams(torch.tensor(means[:2]), torch.tensor(logvars[:2]))
    p = GaussianParams(torch.tensor(means[2:]), torch.tensor(logvars[2:]))
    assert kl_diag_gaussian(q, p).item() >= -1e-12


def test_reconstruction_examples():
    target = torch.tensor([[1, 4, 2]])
    mask = torch.ones(1, 3)
    onehot = torch.full((1, 3, 50), -1e9)
    onehot[0, torch.arange(3), target[0]] = 0.0
    assert reconstruction_loss(torch.log_softmax(onehot, -1), target, mask).item() == 0.0
    uniform = torch.log_softmax(torch.zeros(1, 3, 50), -1)
    assert abs(reconstruction_loss(uniform, target, mask).item() - math.log(50)) < 1e-12
    assert abs(math.log(50) - 3.912) < 5e-4
    lp = torch.log_softmax(torch.randn(1, 5, 50), -1)
    t5 = torch.tensor([[1, 4, 2, 3, 3]])
    short = reconstruction_loss(lp[:, :3], t5[:, :3], torch.ones(1, 3))
    padded = reconstruction_loss(lp, t5, torch.tensor([[1.0, 1, 1, 0, 0]]))
    assert short.item() == pytest.approx(padded.item(), abs=1e-15)
    with pytest.raises(ValueError):
        reconstruction_loss(lp, t5, torch.zeros(1, 5))


def test_latent_dissimilarity_examples():
    v = torch.tensor([[1.0, 2.0]])
    assert latent_dissimilarity_loss(v, v).item() == pytest.approx(1.0, abs=1e-15)
    assert latent_dissimilarity_loss(torch.tensor([[1.0, 0]]), torch.tensor([[0, 1.0]])).item() == 0.0
    assert latent_dissimilarity_loss(torch.tensor([[3.0, 0]]), torch.tensor([[0, 4.0]])).item() == 1.0


def test_zc_smoothness_examples():
    a = g([0.0], [1.0])
    assert zc_smoothness_loss(a, a).item() == 0.0
    assert zc_smoothness_loss(g([0], [1]), g([2], [1])).item() == pytest.approx(4.0, abs=1e-14)
    assert zc_smoothness_loss(g([0], [1]), g([0], [4])).item() == pytest.approx(1.0, abs=1e-14)


def test_zc_smoothness_gradient_only_to_current():
    prev_mu = torch.tensor([0.5], requires_grad=True)
    curr_mu = torch.tensor([1.5], requires_grad=True)
    z = torch.zeros(1)
    zc_smoothness_loss(GaussianParams(prev_mu, z), GaussianParams(curr_mu, z)).sum().backward()
    assert prev_mu.grad is None and curr_mu.grad.item() == pytest.approx(2.0)


def test_bow_examples():
    h = torch.zeros(1, 2, 3)
    hm = torch.ones(1, 2, dtype=torch.bool)
    z = torch.zeros(1, 2)
    target = torch.tensor([[7, 7, 7]])
    tm = torch.ones(1, 3, dtype=torch.long)
    peaked = torch.full((50,), -1e9)
    peaked[7] = 0.0
    assert bow_loss(h, hm, z, target, tm, Fixed(peaked)).item() == 0.0
    target = torch.tensor([[5, 9, 11, 5]])
    tm = torch.ones(1, 4, dtype=torch.long)
    assert bow_loss(h, hm, z, target, tm, Fixed(torch.zeros(50))).item() == pytest.approx(math.log(50), abs=1e-12)
    head = Fixed(torch.randn(50))
    a = bow_loss(h, hm, z, target, tm, head)
    b = bow_loss(h, hm, z, target.flip(1), tm, head)
    assert a.item() == b.item()
    with pytest.raises(ValueError):
        bow_loss(h, hm, z, target, torch.zeros_like(tm), head)


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(6))))
def test_bow_permutation_invariant(perm):
    head = nn.Linear(5, 20)
    torch.manual_seed(0)
    h, z = torch.randn(1, 3, 3), torch.randn(1, 2)
    target = torch.tensor([[4, 8, 8, 1, 19, 0]])
    tm = torch.ones(1, 6, dtype=torch.long)
    hm = torch.ones(1, 3, dtype=torch.bool)
    a = bow_loss(h, hm, z, target, tm, head)
    b = bow_loss(h, hm, z, target[:, perm], tm, head)
    assert torch.allclose(a, b, atol=1e-14)


def test_cls_examples():
    z = torch.zeros(1, 4)
    assert attribute_cls_loss(z, Fixed([-1e9, 0.0, -1e9]), torch.tensor([1])).item() == 0.0
    assert attribute_cls_loss(z, Fixed([0.0, 0, 0]), torch.tensor([2])).item() == pytest.approx(math.log(3), abs=1e-15)
    assert abs(math.log(3) - 1.0986) < 1e-4
    low = attribute_cls_loss(z, Fixed([0.0, 1.0, 0]), torch.tensor([1])).item()
    high = attribute_cls_loss(z, Fixed([0.0, 2.0, 0]), torch.tensor([1])).item()
    assert high < low
    with pytest.raises(ValueError):
        attribute_cls_loss(z, Fixed([0.0, 0, 0]), torch.tensor([3]))


def test_anneal_schedule():
    s = AnnealSchedule(10)
    assert s(0) == 0.0 and s(5) == 0.5 and s(10) == 1.0 and s(100) == 1.0
    assert all(s(t) <= s(t + 1) for t in range(20))
    with pytest.raises(ValueError):
        AnnealSchedule(0)


def test_stage_loss_bookkeeping(model, batch):
    rec = model.forward_train(batch, 2, RngState(0))
    total, br = stage_loss(rec, model, AnnealSchedule(4), 0)
    parts = stage_loss_terms(rec, model)
    assert br.lam == 0.0
    assert br.total == float(combine(parts, 0.0).detach()) == float(total.detach())
    no_kl = sum(float(parts[k].detach()) for k in ("L_M", "L_z", "L_bow", "L_cls", "L_zc_fid"))
    rebuilt = parts["L_M"] + parts["L_z"] + parts["L_bow"] + parts["L_cls"] + parts["L_zc_fid"]
    assert abs(br.total - no_kl) < 1e-12 and br.total == float((0.0 * (parts["L_KL_c"] + parts["L_KL"]) + rebuilt).detach())
    _, at1 = stage_loss(rec, model, AnnealSchedule(4), 4)
    assert at1.total == pytest.approx(br.total + at1.L_KL_c + at1.L_KL, abs=1e-12)


def test_stage1_total_hand_assembled(model, batch):
    """The stage-1 objective rebuilt from the component functions."""
    rec = model.forward_train(batch, 1, RngState(2))
    post, prior = rec.posterior[0], rec.prior
    st1 = model.stage(1)
    lam = 0.25
    expect = (
        lam * (kl_diag_gaussian(post.common, prior.common).mean() + kl_diag_gaussian(post.specific, prior.specific).mean())
        + reconstruction_loss(rec.log_probs, batch.y_out, batch.out_mask)
        + latent_dissimilarity_loss(post.z_c, post.z_i).mean()
        + bow_loss(rec.hs[1], batch.x_mask, post.z_c, batch.y, batch.y_mask, st1.bow_head).mean()
        + attribute_cls_loss(post.z_i, st1.classifier, batch.labels[:, 0]).mean()
    )
    _, br = stage_loss(rec, model, AnnealSchedule(4), 1)
    assert br.L_zc_fid == 0.0
    assert br.total == pytest.approx(float(expect.detach()), abs=1e-12)


def test_ablation_flags_zero_terms(model, batch):
    rec = model.forward_train(batch, 2, RngState(0))
    parts = stage_loss_terms(rec, model, LossFlags(drop_cls=True, drop_zdissim=True, drop_zc_losses=True))
    assert float(parts["L_cls"]) == float(parts["L_z"]) == float(parts["L_bow"]) == float(parts["L_zc_fid"]) == 0.0


def test_stage_loss_gradient(vocab, batch):
    m = tiny_model(len(vocab))
    params = [(n, p) for n, p in m.named_parameters() if n.startswith("stages.0.")]

    def f():
        rec = m.forward_train(batch, 1, RngState(5))
        return stage_loss(rec, m, AnnealSchedule(2), 1)[0]

    rep = finite_difference_check(f, params, max_entries=6, rng=RngState(0))
    assert rep.max_rel_error < 1e-4
