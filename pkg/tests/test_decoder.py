import numpy as np
import pytest

from molmgm import autodiff as ad
from molmgm.autodiff import Value
from molmgm.config import Config
from molmgm.decoder import (
    Decoder,
    MaskError,
    SRDState,
    StructureDependentDecoder,
    VectorHead,
    distill_loss,
    denoise_loss,
    impute_masked_coords,
    mgm_loss,
    remask,
    srd,
)
from molmgm.encoder2d import Encoder2D
from molmgm.model import MaskedAutoencoder
from molmgm.molgraph import MaskPlan, MolGraph, generate_synthetic
from molmgm.train import random_rotation, sample_mask

from conftest import TINY


def plan(n, masked):
    return MaskPlan(n, tuple(masked), np.zeros((n, 3)))


def _state(rng, n=5, d=8, masked=(1, 3)):
    p = plan(n, masked)
    nu = n - len(masked)
    h, vec = Value(rng.normal(size=(nu, d))), Value(rng.normal(size=(nu, d, 3)))
    return srd(h, vec, p, Value(rng.normal(size=(n, d))), Value(rng.normal(size=d)))


def test_remask_two_atoms():
    h, m = Value(np.array([[1.0, 2.0]])), Value(np.array([7.0, 8.0]))
    out = remask(h, plan(2, [1]), m)
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [7.0, 8.0]])


def test_remask_rows():
    rng = np.random.default_rng(0)
    h, m = Value(rng.normal(size=(3, 4))), Value(rng.normal(size=4))
    out = remask(h, plan(6, [0, 2, 5]), m).data
    assert np.array_equal(out[[1, 3, 4]], h.data)
    assert all(np.array_equal(out[i], m.data) for i in (0, 2, 5))
    with pytest.raises(MaskError):
        remask(h, plan(6, [0, 2]), m)


def test_remask_gradient_reaches_only_unmasked_rows():
    rng = np.random.default_rng(1)
    h = Value(rng.normal(size=(3, 4)), requires_grad=True)
    m = Value(rng.normal(size=4), requires_grad=True)
    out = remask(h, plan(5, [1, 4]), m)
    ad.backward(ad.vsum(out[[1, 4]] * out[[1, 4]]))
    assert h.grad is None or not h.grad.any()
    assert m.grad.any()


def test_srd_tokens_and_width_check():
    rng = np.random.default_rng(2)
    h, vec = Value(rng.normal(size=(3, 4))), Value(rng.normal(size=(3, 4, 3)))
    m, pe = Value(rng.normal(size=4)), Value(rng.normal(size=(5, 4)))
    p = plan(5, [0, 2])
    s = srd(h, vec, p, pe, m)
    np.testing.assert_array_equal(s.tokens.data[[0, 2]], m.data + pe.data[[0, 2]])
    np.testing.assert_array_equal(s.tokens.data[[1, 3, 4]], h.data + pe.data[[1, 3, 4]])
    assert not s.vec_in.data[[0, 2]].any()
    np.testing.assert_array_equal(s.vec_in.data[[1, 3, 4]], vec.data)
    zero = srd(h, vec, p, Value(np.zeros((5, 4))), m)
    np.testing.assert_array_equal(zero.tokens.data, remask(h, p, m).data)
    with pytest.raises(TypeError):
        srd(h, vec, p, Value(np.zeros((5, 3))), m)


def test_srd_position_term_detached():
    rng = np.random.default_rng(3)
    pe = Value(rng.normal(size=(4, 4)), requires_grad=True)
    s = srd(Value(rng.normal(size=(2, 4)), requires_grad=True), Value(np.zeros((2, 4, 3))), plan(4, [1, 2]),
            pe, Value(rng.normal(size=4)))
    ad.backward(ad.vsum(s.tokens * s.tokens))
    assert pe.grad is None or not pe.grad.any()


def test_symmetric_path_atoms_get_equal_tokens():
    enc = Encoder2D(8, 8, 2, 2, rng=np.random.default_rng(0))
    g = MolGraph(np.eye(3), np.array([0, 1, 0]), ((0, 1, 1), (1, 2, 1)))
    pe = enc(g.atom_types, g.bonds)
    s = srd(Value(np.ones((1, 8))), Value(np.zeros((1, 8, 3))), plan(3, [0, 2]), pe, Value(np.zeros(8)))
    np.testing.assert_allclose(s.tokens.data[0], s.tokens.data[2], rtol=1e-14)
    assert not np.allclose(s.tokens.data[0], s.tokens.data[1])


def test_decoder_gates_and_permutation():
    rng = np.random.default_rng(4)
    dec = Decoder(8, 2, 2, rng)
    s = _state(rng)
    rep, vec = dec(s)
    assert not vec.data[[1, 3]].any()
    perm = rng.permutation(5)
    inv = np.argsort(perm)
    ps = SRDState(Value(s.tokens.data[inv]), Value(s.vec_in.data[inv]), s.mask)
    rep2, vec2 = dec(ps)
    assert np.array_equal(rep2.data[perm], rep.data)
    assert np.array_equal(vec2.data[perm], vec.data)


def test_structure_dependent_decoder():
    rng = np.random.default_rng(5)
    dec = StructureDependentDecoder(8, 2, 2, 4, 5.0, rng)
    g = generate_synthetic(1, 1, (5, 5))[0]
    s = _state(rng)
    coords = impute_masked_coords(g.coords, s.mask)
    np.testing.assert_allclose(coords[1], g.coords[[0, 2, 4]].mean(axis=0))
    rep, _ = dec(s, g, coords)
    i, j, o = g.bonds[0]
    other = MolGraph(g.coords, g.atom_types, ((i, j, 1 + o % 3),) + g.bonds[1:])
    assert not np.array_equal(dec(s, other, coords)[0].data, rep.data)
    flat = StructureDependentDecoder(8, 2, 0, 4, 5.0, rng)
    rep0, vec0 = flat(s, g, coords)
    assert rep0 is s.tokens and vec0 is s.vec_in


def test_pos_head_zero_path_and_gradient():
    rng = np.random.default_rng(6)
    head = VectorHead(8, rng)
    head.mlp.outer.weight.data[:] = 0.0
    assert head.mlp.outer.bias is None
    out = head(Value(rng.normal(size=(4, 8))), Value(np.zeros((4, 8, 3))))
    assert not out.data.any()
    head = VectorHead(8, rng)
    vec = Value(rng.normal(size=(4, 8, 3)))

    def f_rep(r):
        y = head(r, vec)
        return ad.vsum(y * y)

    assert ad.finite_diff_check(f_rep, Value(rng.normal(size=(4, 8))), h=1e-5) < 1e-4
    rep = Value(rng.normal(size=(4, 8)))
    assert ad.finite_diff_check(lambda v: ad.vsum(head(rep, v) * head(rep, v)), vec, h=1e-5) < 1e-4


def test_mgm_loss_examples():
    x = np.arange(12.0).reshape(4, 3)
    p = plan(4, [1, 2])
    assert mgm_loss(Value(x), x, p).item() == 0.0
    one = x.copy()
    one[1] += [1.0, 0.0, 0.0]
    assert mgm_loss(Value(one), x, p).item() == 1.0
    two = one.copy()
    two[2] += [0.0, 2.0, 0.0]
    assert mgm_loss(Value(two), x, p).item() == 5.0
    # order of the masked set does not matter
    assert mgm_loss(Value(two), x, MaskPlan(4, (2, 1), np.zeros((4, 3)))).item() == 5.0
    with pytest.raises(MaskError):
        mgm_loss(Value(np.zeros((0, 3))), np.zeros((0, 3)))


def test_distill_loss_examples():
    rng = np.random.default_rng(7)
    h = rng.normal(size=(6, 4))
    p = plan(6, [0, 5])
    loss, cos = distill_loss(Value(h * 2.5), Value(h), p)
    np.testing.assert_allclose(loss.item(), -4.0, rtol=1e-14)
    assert cos == pytest.approx(1.0)
    a = np.tile([1.0, 0.0, 0.0, 0.0], (6, 1))
    b = np.tile([0.0, 1.0, 0.0, 0.0], (6, 1))
    assert distill_loss(Value(a), Value(b), p)[0].item() == 0.0
    h_v = Value(h, requires_grad=True)
    ad.backward(distill_loss(Value(rng.normal(size=(6, 4)), requires_grad=True), h_v, p)[0])
    assert h_v.grad is None or not h_v.grad.any()


def test_pretrain_objective_composition():
    rng = np.random.default_rng(8)
    x, h = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    p = plan(5, [2])
    total = (mgm_loss(Value(x), x, p) + denoise_loss(Value(np.zeros((4, 3))), np.zeros((4, 3))) * 0.1
             + distill_loss(Value(h), Value(h), p)[0])
    np.testing.assert_allclose(total.item(), -4.0, rtol=1e-14)


def _model(**kw):
    return MaskedAutoencoder(Config(**TINY).replace(**kw), np.random.default_rng(0))


def _grads(model, term, g, p):
    model.zero_grad()
    ad.backward(getattr(model.losses(g, p, random_rotation(np.random.default_rng(1))), term))
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in model.parameters().items()}


def test_gradient_isolation_exact_zeros():
    g = generate_synthetic(4, 1, (6, 6))[0]
    p = sample_mask(6, 0.3, 5)
    model = _model()
    mgm = _grads(model, "mgm", g, p)
    assert all(not v.any() for k, v in mgm.items() if k.startswith("pe."))
    assert any(v.any() for k, v in mgm.items() if k.startswith("encoder."))
    dist = _grads(model, "distill", g, p)
    assert all(not v.any() for k, v in dist.items() if not k.startswith("pe."))
    assert any(v.any() for k, v in dist.items() if k.startswith("pe."))


def test_denoise_weight_zero_is_mgm_plus_distill():
    g = generate_synthetic(4, 1, (6, 6))[0]
    p = sample_mask(6, 0.3, 5)
    t = _model(denoise_weight=0.0).losses(g, p)
    assert t.total.item() == t.mgm.item() + t.distill.item()


def test_full_loss_gradient_five_atoms():
    g = generate_synthetic(2, 1, (5, 5))[0]
    p = sample_mask(5, 0.3, 9, 0.04)
    model = _model()
    rot = random_rotation(np.random.default_rng(3))
    pinned: dict = {}
    model.losses(g, p, rot, None, pinned)
    err = ad.finite_diff_check_params(lambda: model.losses(g, p, rot, None, pinned).total, model.parameters(),
                                      h=1e-4, n_coords=60, rng=np.random.default_rng(0))
    assert err < 1e-4


def test_batch_matches_single():
    gs = generate_synthetic(5, 4, (4, 9))
    plans = [sample_mask(g.n_atoms, 0.3, k) for k, g in enumerate(gs)]
    model = _model(decoder_kind="dependent")
    batch = model.batch_losses(gs, plans)
    for k, (g, p) in enumerate(zip(gs, plans)):
        one = model.losses(g, p)
        np.testing.assert_allclose(batch.total.data[k], one.total.item(), rtol=1e-12)
