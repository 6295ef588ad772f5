import math

import numpy as np
import pytest

from _toys import ALL, BF, make_model, random_sentences, zero_outputs
from bflm.corpus import BOS_ID, EOS_ID, SplitSentence
from bflm.errors import ContractViolation
from bflm.models import END, PAD, SPLIT, WORD, ModelConfig, logsumexp, syn_schedule
from bflm.nn import log_softmax, softmax


def test_config_defaults():
    assert ModelConfig("syn_bf", vocab=5).hidden == 200
    assert ModelConfig("asyn_bf", vocab=5).hidden == 100
    assert ModelConfig("seq", vocab=5).embedding == 50
    with pytest.raises(ContractViolation):
        ModelConfig("bogus", vocab=5)


@pytest.mark.parametrize("variant", ALL)
def test_uniform_outputs(variant):
    m = make_model(variant, vocab=10)
    zero_outputs(m)
    sent = SplitSentence([3, 4, 5, 6], 2)
    total, terms = m.joint_logprob(sent)
    assert all(x.logprob == pytest.approx(-math.log(10), abs=1e-12) for x in terms)
    if variant in ("seq", "info_init", "info_all"):
        assert total == pytest.approx(-5 * math.log(10), abs=1e-12)


@pytest.mark.parametrize("variant", ALL)
def test_batch_padding_does_not_leak(variant):
    m = make_model(variant, init_scale=0.5)
    sents = random_sentences(np.random.default_rng(0), 12, [1, 6, 3, 5])
    batched = m.score(sents)
    for sent, terms in zip(sents, batched):
        alone = m.score([sent])[0]
        assert [x.logprob for x in alone] == pytest.approx([x.logprob for x in terms],
                                                           abs=1e-13)


@pytest.mark.parametrize("variant", ALL)
def test_replay_is_bit_identical(variant):
    m = make_model(variant, init_scale=0.5)
    sents = random_sentences(np.random.default_rng(1), 12, [4, 2])
    assert m.score(sents) == m.score(sents)


@pytest.mark.parametrize("variant", ALL)
def test_loss_matches_terms(variant):
    m = make_model(variant, init_scale=0.5)
    sents = random_sentences(np.random.default_rng(2), 12, [4, 2, 5])
    loss = m.loss_and_grad(sents)
    expect = np.mean([-np.mean([x.logprob for x in terms]) for terms in m.score(sents)])
    assert loss == pytest.approx(expect, abs=1e-12)
    assert float(m.loss(sents)) == pytest.approx(loss, abs=1e-13)


@pytest.mark.parametrize("variant", ALL)
def test_term_inventory(variant):
    m = make_model(variant)
    sent = SplitSentence([3, 4, 5, 6, 7], 2)
    terms = m.score([sent])[0]
    words = sorted(x.token for x in terms if x.kind in (WORD, SPLIT))
    assert words == [3, 4, 5, 6, 7]
    n_split = sum(x.kind == SPLIT for x in terms)
    assert n_split == (1 if variant in BF else 0)
    if variant in BF:
        owner = "bw" if variant == "asyn_bf" else "fw"
        assert {(x.chain, x.t) for x in terms if x.kind == SPLIT} == {(owner, 0)}
        assert sum(x.kind == END for x in terms) == 2
    else:
        assert [x.t for x in terms] == list(range(6))


def test_seq_step_uniform_and_prefix_replay():
    m = make_model("seq", init_scale=0.5)
    p, h = m.step(BOS_ID)
    p, h = m.step(4, h)
    p2, _ = m.step(5, h)
    _, h_again = m.step(BOS_ID)
    _, h_again = m.step(4, h_again)
    assert np.array_equal(h, h_again)
    terms = m.score([SplitSentence([4, 5], 1)])[0]
    assert terms[1].logprob == pytest.approx(math.log(p[5]), abs=1e-13)
    assert terms[2].logprob == pytest.approx(math.log(p2[EOS_ID]), abs=1e-13)
    zero_outputs(m)
    assert np.allclose(m.step(BOS_ID)[0], 1 / 12)


def test_syn_step_heads():
    m = make_model("syn_bf", vocab=7, init_scale=0.5)
    pb, pf, h = m.step(BOS_ID, BOS_ID)
    assert abs(pb.sum() - 1) < 1e-9 and abs(pf.sum() - 1) < 1e-9
    zero_outputs(m)
    pb, pf, _ = m.step(3, 4, h)
    assert pb[5] * pf[6] == pytest.approx(1 / 49, abs=1e-15)


def test_syn_schedule_m7_s3():
    sched = syn_schedule(7, 3)
    words = [t for t, (b, f) in enumerate(sched, 1) if WORD in (b, f)]
    assert len(words) == max(3, 5) - 1 == 4
    assert [b for b, _ in sched] == [WORD, WORD, END, PAD, PAD]
    assert [f for _, f in sched] == [WORD, WORD, WORD, WORD, END]


def test_syn_hand_expansion_two_words():
    m = make_model("syn_bf", vocab=6, init_scale=0.7, seed=3)
    a, b = 3, 4
    net = m.net

    def lsm(h, tokens):
        h, logits = net.step([tokens], h)
        return h, log_softmax(logits["fw"][0]), log_softmax(logits["bw"][0])

    # split at s=1: p(a) * [p_bw(eos) p_fw(b)] * [p_bw(pad eos) p_fw(eos)]
    h, fw0, _ = lsm(net.zero_state(), (BOS_ID, BOS_ID))
    h, fw1, bw1 = lsm(h, (a, a))
    h, fw2, bw2 = lsm(h, (b, EOS_ID))
    expect = fw0[a] + bw1[EOS_ID] + fw1[b] + bw2[EOS_ID] + fw2[EOS_ID]
    total, terms = m.joint_logprob(SplitSentence([a, b], 1))
    assert total == pytest.approx(expect, abs=1e-13)
    assert [x.kind for x in terms] == [SPLIT, END, WORD, PAD, END]
    # split at s=2: p(b) * [p_bw(a) p_fw(eos)] * [p_bw(eos) p_fw(pad eos)]
    h, fw0, _ = lsm(net.zero_state(), (BOS_ID, BOS_ID))
    h, fw1, bw1 = lsm(h, (b, b))
    h, fw2, bw2 = lsm(h, (EOS_ID, a))
    expect = fw0[b] + bw1[a] + fw1[EOS_ID] + bw2[EOS_ID] + fw2[EOS_ID]
    assert m.joint_logprob(SplitSentence([a, b], 2))[0] == pytest.approx(expect, abs=1e-13)


def test_asyn_split_at_start():
    m = make_model("asyn_bf", init_scale=0.5)
    sent = SplitSentence([5, 6, 7], 1)
    terms = m.score([sent])[0]
    bw = [x for x in terms if x.chain == "bw"]
    assert [(x.kind, x.token) for x in bw] == [(SPLIT, 5), (END, EOS_ID)]
    d = m.run(5, [], [6, 7])
    assert len(d["bw"]) == 1
    fw = [x.logprob for x in terms if x.chain == "fw"]
    assert fw == pytest.approx([math.log(d["fw"][0][6]), math.log(d["fw"][1][7]),
                                math.log(d["fw"][2][EOS_ID])], abs=1e-13)


def test_asyn_phase2_ignores_phase1_params():
    m = make_model("asyn_bf", init_scale=0.5)
    sent = SplitSentence([5, 6, 7, 8], 3)
    before = [x for x in m.score([sent])[0] if x.chain == "fw"]
    for k, v in m.store.items():
        if k.startswith("bw."):
            v += 0.3
    after = m.score([sent])[0]
    assert [x for x in after if x.chain == "fw"] == before
    assert [x for x in after if x.chain == "bw"] != before


def test_asyn_reads_prefix_in_order():
    m = make_model("asyn_bf", init_scale=0.5)
    d = m.run(6, [4, 5], [7])
    terms = m.score([SplitSentence([5, 4, 6, 7], 3)])[0]
    fw = [x.logprob for x in terms if x.chain == "fw"]
    assert fw == pytest.approx([math.log(d["fw"][0][7]), math.log(d["fw"][1][EOS_ID])],
                               abs=1e-13)


def test_info_augmentation_rules():
    m = make_model("info_init")
    progs, _ = m._programs([SplitSentence([4, 5, 6], 2)])
    aug = progs["seq"].aug[:, 0]
    assert aug[0] == 5 and np.all(aug[1:] == -1)
    m = make_model("info_all")
    progs, _ = m._programs([SplitSentence([4, 5, 6], 2)])
    assert np.all(progs["seq"].aug[:, 0] == 5)


def test_info_all_with_zero_wanted_embedding_is_seq():
    info = make_model("info_all", init_scale=0.5, seed=4)
    seq = make_model("seq", init_scale=0.5, seed=9)
    d = 6
    info.store["seq.emb"][7] = 0.0
    for k, v in seq.store.items():
        src = info.store[k]
        v[...] = src[:, :d] if k.split(".")[-1].startswith("W_") else src
    sent = SplitSentence([4, 7, 5], 2)
    a = [x.logprob for x in info.score([sent])[0]]
    b = [x.logprob for x in seq.score([sent])[0]]
    assert a == pytest.approx(b, abs=1e-14)


def test_sep_chains_independent():
    m = make_model("sep_bf", init_scale=0.5)
    d1 = m.run(4, [5, 6, 7], [8, 9])
    d2 = m.run(4, [7, 5, 6], [8, 9])
    assert all(np.array_equal(x, y) for x, y in zip(d1["fw"], d2["fw"]))
    assert np.array_equal(d1["split"], d2["split"])


def test_sep_symmetry_on_palindrome():
    m = make_model("sep_bf", init_scale=0.5)
    for k, v in m.store.items():
        if k.startswith("bw."):
            v[...] = m.store["fw." + k[3:]]
    terms = m.score([SplitSentence([3, 4, 5, 4, 3], 3)])[0]
    bw = [x.logprob for x in terms if x.chain == "bw"]
    fw = [x.logprob for x in terms if x.chain == "fw" and x.kind != SPLIT]
    assert bw == fw


@pytest.mark.parametrize("variant", BF)
def test_oracle_drops_exactly_the_split_term(variant):
    m = make_model(variant, init_scale=0.5)
    sent = SplitSentence([3, 4, 5], 2)
    full, terms = m.joint_logprob(sent)
    oracle, oterms = m.joint_logprob(sent, oracle=True)
    split = [x.logprob for x in terms if x.kind == SPLIT]
    assert len(oterms) == len(terms) - 1
    assert oracle - full == pytest.approx(-split[0], abs=1e-12)
    assert oracle >= full


@pytest.mark.parametrize("variant", ALL)
def test_marginal(variant):
    m = make_model(variant, vocab=6, init_scale=0.8, seed=2)
    assert m.marginal_logprob([4]) == pytest.approx(
        m.joint_logprob(SplitSentence([4], 1))[0], abs=1e-12)
    toks = [3, 5, 4, 3]
    per = m.per_split_logprob(toks)
    marg = m.marginal_logprob(toks)
    if variant == "seq":
        assert marg == pytest.approx(per[0], abs=1e-12)
        return
    if variant in BF:
        direct = math.log(sum(math.exp(x) for x in per))
        assert marg == pytest.approx(direct, abs=1e-10)
        assert marg >= max(per)
    uni = m.marginal_logprob(toks, prior="uniform")
    oracle = [m.joint_logprob(SplitSentence(toks, s), oracle=True)[0] for s in range(1, 5)]
    assert uni == pytest.approx(math.log(sum(math.exp(x) / 4 for x in oracle)), abs=1e-10)


def test_marginal_cap_and_single_word():
    m = make_model("syn_bf", vocab=6)
    with pytest.raises(ContractViolation, match="cap"):
        m.marginal_logprob([3] * 5, cap=4)
    assert m.marginal_logprob([4]) == pytest.approx(
        m.joint_logprob(SplitSentence([4], 1))[0], abs=1e-13)


def test_logsumexp():
    assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2))
    assert logsumexp([-np.inf, -np.inf]) == -np.inf
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2))


@pytest.mark.parametrize("variant", ALL)
def test_distributions_sum_to_one(variant):
    m = make_model(variant, init_scale=2.0)
    sent = SplitSentence([3, 4, 5, 6], 3)
    progs, _ = m._programs([sent])
    for name, net in m.nets.items():
        prog = progs[name]
        h = net.zero_state()
        for t in range(prog.inputs.shape[0]):
            aug = None if prog.aug is None else prog.aug[t]
            h, logits = net.step(prog.inputs[t], h, aug)
            for z in logits.values():
                assert abs(softmax(z[0]).sum() - 1) < 1e-9


def test_rejects_bad_tokens():
    m = make_model("seq", vocab=6)
    with pytest.raises(ContractViolation):
        m.score([SplitSentence([9], 1)])
    with pytest.raises(ContractViolation):
        m.score([[3, 4]])
