import numpy as np
import pytest

from taskdet import distill as ds
from taskdet import geometry as geo
from taskdet import losses as ls
from taskdet import model as md
from taskdet.autodiff import Tape, backward, finite_difference_check
from taskdet.descriptions import (build_vocabulary, noun_description,
                                  pronoun_description)
from taskdet.model import ModelConfig, PredictionSet, BlockOutputs


# -- memory bank ----------------------------------------------------------------

def test_bank_append_path():
    bank = ds.MemoryBank(n_tasks=2, n_mem=4, k=2, d=3)
    assert bank.queue_len(0) == 0
    bank.update(0, [1.0, 2.0, 3.0])
    assert bank.queue_len(0) == 1
    assert bank.queue_len(1) == 0
    np.testing.assert_array_equal(bank.queue(0), [[1.0, 2.0, 3.0]])
    assert bank.counts[0] == 1


def test_bank_duplicate_replacement_keeps_multiset():
    bank = ds.MemoryBank(n_tasks=1, n_mem=3, k=1, d=2)
    vecs = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 7.0]], dtype=np.float32)
    for v in vecs:
        bank.update(0, v)
    bank.update(0, vecs[1])  # exact duplicate: closest entry is itself
    assert bank.queue_len(0) == 3
    got = sorted(bank.queue(0).tolist())
    assert got == sorted(vecs.tolist())


def test_bank_policy_divergence_on_crafted_stream():
    # oldest (0) is far from the incoming vector; closest is the middle one
    stream = [np.array([0.0]), np.array([10.0]), np.array([10.1])]
    rc = ds.MemoryBank(1, n_mem=2, k=1, d=1,
                       policy=ds.POLICY_REPLACE_CLOSEST)
    ff = ds.MemoryBank(1, n_mem=2, k=1, d=1, policy=ds.POLICY_FIFO)
    for v in stream:
        rc.update(0, v)
        ff.update(0, v)
    assert rc.queue(0).ravel().tolist() == [0.0, pytest.approx(10.1)]
    assert ff.queue(0).ravel().tolist() == [10.0, pytest.approx(10.1)]


def test_bank_capacity_invariant_random_stream():
    rng = np.random.default_rng(40)
    for policy in (ds.POLICY_REPLACE_CLOSEST, ds.POLICY_FIFO):
        bank = ds.MemoryBank(2, n_mem=16, k=3, d=4, policy=policy)
        for i in range(1000):
            t = int(rng.integers(0, 2))
            bank.update(t, rng.normal(size=4))
            assert bank.queue_len(t) <= 16
        assert bank.queue_len(0) == 16 and bank.queue_len(1) == 16
        assert bank.counts.sum() == 1000


def test_bank_errors():
    bank = ds.MemoryBank(2, n_mem=4, k=2, d=3)
    with pytest.raises(ValueError):
        bank.update(2, np.zeros(3))
    with pytest.raises(ValueError):
        bank.update(-1, np.zeros(3))
    with pytest.raises(ValueError):
        bank.update(0, np.zeros(5))
    with pytest.raises(ValueError):
        ds.MemoryBank(1, 4, 2, 3, policy="lru")


def test_bank_prototype_cache_and_invalidation():
    rng = np.random.default_rng(41)
    bank = ds.MemoryBank(1, n_mem=8, k=2, d=3)
    with pytest.raises(ValueError):
        bank.prototypes(0, seed=0)  # not enough features yet
    for _ in range(4):
        bank.update(0, rng.normal(size=3))
    first = bank.prototypes(0, seed=7)
    assert bank.prototypes(0, seed=7) is first  # cached
    bank.update(0, rng.normal(size=3))
    second = bank.prototypes(0, seed=7)
    assert second is not first


def test_bank_state_roundtrip():
    rng = np.random.default_rng(42)
    bank = ds.MemoryBank(2, n_mem=4, k=2, d=3, policy=ds.POLICY_FIFO)
    for _ in range(6):
        bank.update(int(rng.integers(2)), rng.normal(size=3))
    clone = ds.MemoryBank.from_state(bank.state())
    assert clone.policy == bank.policy
    np.testing.assert_array_equal(clone.queue(0), bank.queue(0))
    np.testing.assert_array_equal(clone.queue(1), bank.queue(1))
    np.testing.assert_array_equal(clone.counts, bank.counts)
    v = rng.normal(size=3)
    bank.update(0, v)
    clone.update(0, v)
    np.testing.assert_array_equal(clone.queue(0), bank.queue(0))


# -- k-means ---------------------------------------------------------------------

def test_kmeans_k_distinct_points_zero_inertia():
    pts = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
    res = ds.kmeans(pts, k=3, seed=1)
    assert res.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(res.centers.tolist()) == sorted(pts.tolist())


def test_kmeans_two_blobs_recovers_means():
    rng = np.random.default_rng(43)
    a = rng.normal(0.0, 0.01, (20, 3)) + np.array([0.0, 0.0, 0.0])
    b = rng.normal(0.0, 0.01, (30, 3)) + np.array([10.0, 0.0, 0.0])
    res = ds.kmeans(np.vstack([a, b]), k=2, seed=2)
    means = sorted([a.mean(axis=0).tolist(), b.mean(axis=0).tolist()])
    got = sorted(res.centers.tolist())
    np.testing.assert_allclose(got, means, atol=1e-6)


def test_kmeans_inertia_monotone_and_centers_are_means():
    rng = np.random.default_rng(44)
    for trial in range(100):
        n = int(rng.integers(8, 30))
        k = int(rng.integers(1, 5))
        pts = rng.normal(size=(n, 3))
        res = ds.kmeans(pts, k=k, seed=trial)
        trace = np.asarray(res.trace)
        assert np.all(np.diff(trace) <= 1e-9), trace
        assert res.inertia <= trace[-1] + 1e-9
        for j in range(k):
            mask = res.labels == j
            if mask.any():
                np.testing.assert_allclose(res.centers[j],
                                           pts[mask].mean(axis=0), atol=1e-6)


def test_kmeans_errors():
    with pytest.raises(ValueError):
        ds.kmeans(np.zeros((2, 3)), k=3, seed=0)
    with pytest.raises(ValueError):
        ds.kmeans(np.zeros((4, 3)), k=0, seed=0)
    with pytest.raises(ValueError):
        ds.kmeans(np.zeros(5), k=1, seed=0)


# -- prototype selection -----------------------------------------------------------

def test_select_prototype_basics():
    protos = np.array([[1.0, 0.0], [0.0, 2.0]])
    idx, p = ds.select_prototype(protos[:1], [9.0, 9.0])
    assert idx == 0 and p.tolist() == [1.0, 0.0]
    idx, p = ds.select_prototype(protos, [0.0, 2.0])
    assert idx == 1
    # exact tie: both prototypes identical -> lowest index
    idx, _ = ds.select_prototype(np.array([[1.0, 0.0], [1.0, 0.0]]),
                                 [3.0, 3.0])
    assert idx == 0


def test_select_prototype_matches_brute_force():
    rng = np.random.default_rng(45)
    protos = rng.normal(size=(5, 8))
    for _ in range(1000):
        q = rng.normal(size=8)
        idx, _ = ds.select_prototype(protos, q)
        assert idx == int(np.argmin(((protos - q) ** 2).sum(axis=1)))


# -- cluster loss ------------------------------------------------------------------

def test_cluster_loss_values():
    tape = Tape(np.float64)
    x = tape.constant([1.0, 2.0, 3.0])
    assert ds.cluster_loss(x, [1.0, 2.0, 3.0]).item() == 0.0
    assert ds.cluster_loss(x, [2.0, 2.0, 3.0]).item() == pytest.approx(1.0)


def test_cluster_loss_gradient_is_unit_direction():
    rng = np.random.default_rng(46)
    for _ in range(10):
        x = rng.normal(size=6)
        c = x + rng.normal(size=6) * 0.5 + 0.1
        rep = finite_difference_check(
            lambda p: ds.cluster_loss(p["x"], c), {"x": x})
        assert rep.passed, rep
        tape = Tape(np.float64)
        leaf = tape.tensor(x, requires_grad=True)
        backward(ds.cluster_loss(leaf, c))
        unit = (x - c) / np.linalg.norm(x - c)
        np.testing.assert_allclose(leaf.grad, unit, atol=1e-12)


# -- binary probabilities and KL ------------------------------------------------------

def test_binary_probs_uniform_row():
    pos, neg = ds.binary_probs(np.zeros(16))
    assert pos == pytest.approx(15.0 / 16.0, abs=1e-12)
    assert neg == pytest.approx(1.0 / 16.0, abs=1e-12)
    row = np.zeros(16)
    row[-1] = 30.0
    assert ds.binary_probs(row)[1] > 1.0 - 1e-9


def test_binary_prob_rows_tensor_path_agrees():
    rng = np.random.default_rng(47)
    logits = rng.normal(0, 4, (6, 12))
    pos, neg = ds.binary_prob_rows(Tape(np.float64).constant(logits))
    for i in range(6):
        p, n = ds.binary_probs(logits[i])
        assert pos.data[i] == pytest.approx(p, rel=1e-12)
        assert neg.data[i] == pytest.approx(n, rel=1e-12)


def test_kl_binary_hand_value_and_properties():
    assert ds.kl_binary((0.9, 0.1), (0.5, 0.5)) == pytest.approx(0.36806,
                                                                 abs=1e-5)
    assert ds.kl_binary((0.3, 0.7), (0.3, 0.7)) == 0.0
    rng = np.random.default_rng(48)
    for _ in range(10_000):
        a = rng.uniform(1e-9, 1.0)
        b = rng.uniform(1e-9, 1.0)
        assert ds.kl_binary((a, 1 - a), (b, 1 - b)) >= -1e-15


# -- teacher/student matching ---------------------------------------------------------

def _fake_pred(boxes, logits):
    tape = Tape(np.float64)
    n = len(boxes)
    block = BlockOutputs(tape.constant(boxes), tape.constant(np.zeros((n, 2, 2))),
                         tape.constant(logits),
                         tape.constant(np.eye(n)))
    return PredictionSet(blocks=[block],
                         preference=md.preference_scores(np.asarray(logits)),
                         query_features=tape.constant(np.zeros((n, 2))),
                         text_features=tape.constant(np.zeros((1, 2))),
                         align_tok=tape.constant(np.zeros((1, 2))),
                         special_positions=(0,), desc=None)


def test_ts_match_identity_for_equal_sets():
    rng = np.random.default_rng(49)
    boxes = rng.uniform(0.2, 0.8, (5, 4))
    logits = rng.normal(size=(5, 8))
    a = ds.ts_match(_fake_pred(boxes, logits), _fake_pred(boxes, logits))
    assert a.sigma.tolist() == list(range(5))
    assert a.cost == pytest.approx(0.0, abs=1e-9)


def test_ts_match_crossed_boxes_swap():
    t = _fake_pred(np.array([[0.3, 0.5, 0.2, 0.2], [0.7, 0.5, 0.2, 0.2]]),
                   np.zeros((2, 8)))
    s = _fake_pred(np.array([[0.7, 0.5, 0.2, 0.2], [0.3, 0.5, 0.2, 0.2]]),
                   np.zeros((2, 8)))
    assert ds.ts_match(t, s).sigma.tolist() == [1, 0]


def test_ts_match_matches_exhaustive_search():
    import itertools
    rng = np.random.default_rng(50)
    w = ds.DistillWeights()
    for _ in range(200):
        n = int(rng.integers(2, 7))
        tb = rng.uniform(0.2, 0.8, (n, 4))
        sb = rng.uniform(0.2, 0.8, (n, 4))
        tl = rng.normal(0, 2, (n, 10))
        sl = rng.normal(0, 2, (n, 10))
        a = ds.ts_match(_fake_pred(tb, tl), _fake_pred(sb, sl))
        # independent cost reconstruction
        C = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                l1 = np.abs(tb[i] - sb[j]).sum()
                giou = geo.giou_loss(tb[i], sb[j])
                kl = ds.kl_binary(md.binary_probs(tl[i]),
                                  md.binary_probs(sl[j]))
                C[i, j] = w.ts_l1 * l1 + w.ts_giou * giou + w.ts_kl * kl
        best = min(itertools.permutations(range(n)),
                   key=lambda p: C[np.arange(n), p].sum())
        assert C[np.arange(n), a.sigma].sum() == pytest.approx(
            C[np.arange(n), list(best)].sum(), rel=1e-9)


def test_ts_match_shape_mismatch():
    with pytest.raises(ValueError):
        ds.ts_match(_fake_pred(np.full((2, 4), 0.5), np.zeros((2, 8))),
                    _fake_pred(np.full((3, 4), 0.5), np.zeros((3, 8))))


# -- soft binary target loss ------------------------------------------------------------

def test_sbtl_zero_when_equal():
    rng = np.random.default_rng(51)
    logits = rng.normal(0, 3, (5, 8))
    out = ds.soft_binary_target_loss(logits,
                                     Tape(np.float64).constant(logits),
                                     np.arange(5))
    assert out.item() == pytest.approx(0.0, abs=1e-12)


def test_sbtl_invariant_under_common_relabeling():
    rng = np.random.default_rng(52)
    tl = rng.normal(0, 2, (6, 8))
    sl = rng.normal(0, 2, (6, 8))
    sigma = ds.ts_match(_fake_pred(rng.uniform(.2, .8, (6, 4)), tl),
                        _fake_pred(rng.uniform(.2, .8, (6, 4)), sl)).sigma
    base = ds.soft_binary_target_loss(tl, Tape(np.float64).constant(sl),
                                      sigma).item()
    perm = rng.permutation(6)
    inv = np.argsort(perm)
    # relabel both query sets by the same permutation
    relabeled = ds.soft_binary_target_loss(
        tl[perm], Tape(np.float64).constant(sl[perm]),
        inv[sigma[perm]]).item()
    assert relabeled == pytest.approx(base, rel=1e-12)


def test_sbtl_gradient_student_logits():
    rng = np.random.default_rng(53)
    for _ in range(10):
        tl = rng.normal(0, 2, (4, 8))
        sl = rng.normal(0, 2, (4, 8))
        sigma = rng.permutation(4)
        rep = finite_difference_check(
            lambda p: ds.soft_binary_target_loss(tl, p["s"], sigma),
            {"s": sl})
        assert rep.passed, rep


def test_sbtl_saturated_rows_stay_finite():
    tl = np.zeros((2, 8))
    tl[:, -1] = 80.0              # teacher p_pos underflows to 0.0
    sl = np.zeros((2, 8))
    sl[:, -1] = -80.0             # student p_neg underflows
    tape = Tape(np.float64)
    leaf = tape.tensor(sl, requires_grad=True)
    out = ds.soft_binary_target_loss(tl, leaf, np.arange(2))
    assert np.isfinite(out.item())
    backward(out)
    assert np.isfinite(leaf.grad).all()


# -- distill_losses ----------------------------------------------------------------------

CFG = ModelConfig(d=16, n_heads=4, n_tr=2, n_pred=4, n_max=12, n_l_max=8,
                  grid=(4, 4), feature_dim=6, vocab_size=16, contrast_dim=8,
                  ffn_dim=32)
VOCAB = build_vocabulary(["grip"], ["hammer", "cup"])


def _sample(seed=0, empty=False):
    rng = np.random.default_rng(seed)
    feats = rng.normal(0, 1, (4, 4, 6))
    cats = [] if empty else ["hammer"]
    noun = noun_description(0, ["grip"], cats, VOCAB)
    pron = pronoun_description(0, ["grip"], "something", VOCAB)
    if empty:
        gt = ls.ground_truth_from_objects(np.zeros((0, 4)),
                                          np.zeros((0, 4, 4)), noun, CFG.n_max)
    else:
        boxes = np.array([[0.3, 0.4, 0.25, 0.2]])
        masks = np.zeros((1, 4, 4))
        masks[0, 1:3, 0:2] = 1.0
        gt = ls.ground_truth_from_objects(boxes, masks, noun, CFG.n_max)
    return feats, noun, pron, gt


def _bank(prefill=0, seed=9, k=2):
    bank = ds.MemoryBank(n_tasks=2, n_mem=8, k=k, d=CFG.d)
    rng = np.random.default_rng(seed)
    for _ in range(prefill):
        bank.update(0, rng.normal(size=CFG.d))
    return bank


def test_distill_flags_off_matches_plain_losses():
    feats, noun, pron, gt = _sample()
    tp = md.init_params(CFG, seed=1)
    sp = md.init_params(CFG, seed=2)
    out = ds.distill_losses(feats, noun, pron, gt, tp, sp, CFG, _bank(),
                            ls.LossWeights(), ds.DistillWeights(),
                            ds.DistillFlags(False, False, False), seed=0)
    assert out.student_total is out.student.total
    assert out.student_mode == md.MODE_PLAIN
    assert out.cluster_value == 0.0 and out.binary_value == 0.0

    plain_t = ls.loss_total(gt, md.forward(feats, noun, tp, CFG),
                            ls.LossWeights())
    plain_s = ls.loss_total(gt, md.forward(feats, pron, sp, CFG),
                            ls.LossWeights())
    assert out.teacher_total.item() == plain_t.total.item()
    assert out.student.total.item() == plain_s.total.item()


def test_distill_bank_update_gating():
    feats, noun, pron, gt = _sample()
    tp, sp = md.init_params(CFG, 1), md.init_params(CFG, 2)
    bank = _bank()
    out = ds.distill_losses(feats, noun, pron, gt, tp, sp, CFG, bank,
                            ls.LossWeights(), ds.DistillWeights(),
                            ds.DistillFlags(), seed=0)
    assert bank.queue_len(0) == 1
    expect = out.teacher_pred.special_feature().data.astype(np.float32)
    np.testing.assert_array_equal(bank.queue(0)[0], expect)

    feats_e, noun_e, pron_e, gt_e = _sample(empty=True)
    ds.distill_losses(feats_e, noun_e, pron_e, gt_e, tp, sp, CFG, bank,
                      ls.LossWeights(), ds.DistillWeights(),
                      ds.DistillFlags(), seed=0)
    assert bank.queue_len(0) == 1  # empty scenes never touch the bank

    bank2 = _bank()
    ds.distill_losses(feats, noun, pron, gt, tp, sp, CFG, bank2,
                      ls.LossWeights(), ds.DistillWeights(),
                      ds.DistillFlags(), seed=0, update_bank=False)
    assert bank2.queue_len(0) == 0


def test_distill_prototype_path_engages_when_ready():
    feats, noun, pron, gt = _sample()
    tp, sp = md.init_params(CFG, 1), md.init_params(CFG, 2)
    dw = ds.DistillWeights(cluster=1.0, binary=1.0)
    out = ds.distill_losses(feats, noun, pron, gt, tp, sp, CFG,
                            _bank(prefill=3), ls.LossWeights(), dw,
                            ds.DistillFlags(), seed=0)
    assert out.student_mode == md.MODE_REPLACE_PROTOTYPE
    assert out.student_pred.prototype_index >= 0
    assert out.cluster_value > 0.0
    assert out.binary_value >= 0.0
    expected = (out.student.total.item() + dw.cluster * out.cluster_value
                + dw.binary * out.binary_value)
    assert out.student_total.item() == pytest.approx(expected, rel=1e-5)


def test_distill_cluster_loss_without_replacement():
    feats, noun, pron, gt = _sample()
    tp, sp = md.init_params(CFG, 1), md.init_params(CFG, 2)
    out = ds.distill_losses(feats, noun, pron, gt, tp, sp, CFG,
                            _bank(prefill=3), ls.LossWeights(),
                            ds.DistillWeights(cluster=1.0, binary=1.0),
                            ds.DistillFlags(replace=False), seed=0)
    assert out.student_mode == md.MODE_PLAIN
    assert out.student_pred.prototype_index == -1
    assert out.cluster_value > 0.0


def test_distill_teacher_isolated_from_student_backward():
    feats, noun, pron, gt = _sample()
    t_tape, s_tape = Tape(np.float32), Tape(np.float32)
    t_leaves = md.wrap_params(t_tape, md.init_params(CFG, 1))
    s_leaves = md.wrap_params(s_tape, md.init_params(CFG, 2))
    out = ds.distill_losses(feats, noun, pron, gt, t_leaves, s_leaves, CFG,
                            _bank(prefill=3), ls.LossWeights(),
                            ds.DistillWeights(cluster=1.0, binary=1.0),
                            ds.DistillFlags(), seed=0)
    backward(out.student_total)
    assert all(v.grad is None for v in t_leaves.values())
    s_grads = [v for v in s_leaves.values() if v.grad is not None]
    assert s_grads, "student must receive gradient"
    backward(out.teacher_total)
    assert any(v.grad is not None and np.abs(v.grad).sum() > 0
               for v in t_leaves.values())


def test_distill_task_mismatch_error():
    feats, noun, pron, gt = _sample()
    bad_pron = pronoun_description(1, ["grip"], "something", VOCAB)
    with pytest.raises(ValueError):
        ds.distill_losses(feats, noun, bad_pron, gt,
                          md.init_params(CFG, 1), md.init_params(CFG, 2),
                          CFG, _bank(), ls.LossWeights(),
                          ds.DistillWeights(), ds.DistillFlags(), seed=0)


def test_forward_prototype_choice_matches_selector():
    feats, _, pron, _ = _sample()
    sp = md.init_params(CFG, 2)
    plain = md.forward(feats, pron, sp, CFG)
    pron_feat = plain.text_features.data[pron.special_positions[0]]
    protos = np.random.default_rng(60).normal(size=(3, CFG.d)).astype(np.float32)
    swapped = md.forward(feats, pron, sp, CFG,
                         mode=md.MODE_REPLACE_PROTOTYPE, prototypes=protos)
    assert swapped.prototype_index == ds.select_prototype(protos, pron_feat)[0]


# -- inference ----------------------------------------------------------------------------

def test_inference_requires_pronoun_description():
    feats, noun, pron, _ = _sample()
    with pytest.raises(ValueError):
        ds.inference(feats, noun, md.init_params(CFG, 2), CFG, _bank())


def test_inference_unready_bank_warns_and_runs_plain():
    feats, _, pron, _ = _sample()
    sp = md.init_params(CFG, 2)
    with pytest.warns(UserWarning):
        pred = ds.inference(feats, pron, sp, CFG, _bank(prefill=1))
    assert pred.mode == md.MODE_PLAIN
    plain = md.forward(feats, pron, sp, CFG, trainable=False)
    np.testing.assert_array_equal(pred.preference, plain.preference)


def test_inference_deterministic_and_bank_sensitive():
    feats, _, pron, _ = _sample()
    sp = md.init_params(CFG, 2)
    bank = _bank(prefill=4, seed=9)
    a = ds.inference(feats, pron, sp, CFG, bank, seed=3)
    b = ds.inference(feats, pron, sp, CFG, bank, seed=3)
    assert a.mode == md.MODE_REPLACE_PROTOTYPE
    np.testing.assert_array_equal(a.preference, b.preference)
    np.testing.assert_array_equal(a.boxes.data, b.boxes.data)

    other = _bank(prefill=4, seed=77)
    c = ds.inference(feats, pron, sp, CFG, other, seed=3)
    assert not np.array_equal(a.preference, c.preference)
