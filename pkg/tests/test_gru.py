import math

import numpy as np
import pytest

from bflm.errors import ContractViolation, NumericFault
from bflm.gru import GruNet, gru_step, pack_programs
from bflm.nn import ParamStore, log_softmax


def _zeros(d, H):
    p = {}
    for g in "rzx":
        p[f"W_{g}"] = np.zeros((H, d))
        p[f"U_{g}"] = np.zeros((H, H))
    return p


def test_zero_params_halve_state():
    h = np.array([0.4, -1.2, 3.0])
    s = gru_step(_zeros(2, 3), np.array([1.0, 2.0]), h)
    assert np.allclose(s.z, 0.5) and np.allclose(s.h_tilde, 0.0)
    assert np.allclose(s.h, 0.5 * h, rtol=0, atol=1e-15)


def test_scalar_hand_case():
    p = _zeros(1, 1)
    p["W_x"] = np.array([[1.0]])
    s = gru_step(p, np.array([1.0]), np.array([0.0]))
    assert s.r[0] == 0.5 and s.z[0] == 0.5
    assert s.h_tilde[0] == pytest.approx(math.tanh(1.0), abs=1e-12)
    assert s.h[0] == pytest.approx(0.380797, abs=1e-6)


def test_saturated_update_gate():
    rng = np.random.default_rng(0)
    p = {k: rng.normal(size=v.shape) for k, v in _zeros(3, 4).items()}
    p["b_z"] = np.full(4, 50.0)
    s = gru_step(p, rng.normal(size=3), rng.normal(size=4))
    assert np.max(np.abs(s.h - s.h_tilde)) < 1e-6


def test_shape_and_fault_errors():
    with pytest.raises(ContractViolation, match="gate r"):
        gru_step(_zeros(2, 3), np.ones(3), np.ones(3))
    p = _zeros(1, 1)
    p["W_x"] = np.array([[np.nan]])
    with pytest.raises(NumericFault, match="h~"):
        gru_step(p, np.ones(1), np.zeros(1))


def _net(n_slots=1, augment=False, heads=("fw",)):
    store = ParamStore()
    net = GruNet(store, "t.", 9, 4, 5, n_slots=n_slots, augment=augment, heads=heads,
                 rng=np.random.default_rng(1), init_scale=0.5)
    return store, net


def test_batched_step_matches_single_vector_step():
    store, net = _net()
    h = np.random.default_rng(2).normal(size=(3, 5))
    tokens = [4, 0, 7]
    hn, logits = net.step(tokens, h)
    cell = {k[2:]: v for k, v in store.items() if k[2:4] in ("W_", "U_", "b_")}
    for b, tok in enumerate(tokens):
        s = gru_step(cell, store["t.emb"][tok], h[b])
        assert np.allclose(hn[b], s.h, rtol=0, atol=1e-14)
        W, bias = store["t.out_fw.W"], store["t.out_fw.b"]
        assert np.allclose(logits["fw"][b], W @ s.h + bias, rtol=0, atol=1e-14)


def test_run_matches_stepwise_and_carries_inactive_rows():
    store, net = _net(n_slots=2, augment=True, heads=("fw", "bw"))
    rows = [
        [((2, 2), -1, [5, -1], [1.0, 0.0]), ((5, 3), 4, [6, 1], [1.0, 1.0])],
        [((2, 2), 3, [1, -1], [1.0, 0.0])],
    ]
    prog = pack_programs(rows, 2, 2, True)
    logp, _ = net.run(prog)
    assert np.isnan(logp[0, 0, 1]) and np.isnan(logp[1, 1, 0])
    for b, steps in enumerate(rows):
        h = net.zero_state()
        for t, (inp, aug, tgt, _) in enumerate(steps):
            h, logits = net.step([inp], h, [aug])
            for k, head in enumerate(("fw", "bw")):
                if tgt[k] >= 0:
                    expect = log_softmax(logits[head][0])[tgt[k]]
                    assert logp[t, b, k] == pytest.approx(expect, abs=1e-13)


def test_augmentation_block_is_zero_when_absent():
    store, net = _net(augment=True)
    X = net.embed(np.array([[3], [3]]), np.array([-1, 6]))
    assert np.array_equal(X[0, 4:], np.zeros(4))
    assert np.array_equal(X[1, 4:], store["t.emb"][6])
    assert np.array_equal(X[0, :4], X[1, :4])
