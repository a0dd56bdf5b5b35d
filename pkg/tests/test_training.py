from dataclasses import replace

import numpy as np
import pytest

from cdnnsched import neural as nn
from cdnnsched import training as tr
from cdnnsched.channel import CsiNoiseSpec, sample_batch
from cdnnsched.checkpoint import CheckpointError, load_policies, save_policies
from cdnnsched.rates import always_on, exhaustive_best, naive_decision, sum_rate

SMALL = tr.TrainConfig(n_train=2000, batch_size=500, steps=200, pretrain_steps=100, hidden_layers=(16, 16), seed=3)


def perfect_sets(k, n_train=2000, n_eval=4000):
    noise = CsiNoiseSpec.perfect(k)
    return sample_batch(n_train, k, None, noise, seed=10), sample_batch(n_eval, k, None, noise, seed=11)


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(n_train=10, batch_size=20)
    with pytest.raises(ValueError):
        tr.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(pretrain_labels_from="oracle")
    assert tr.TrainConfig().architecture(3).layer_sizes == (9, 30, 30, 30, 1)


def test_pretrain_zero_steps_returns_init():
    train, _ = perfect_sets(2, 500)
    cfg = replace(SMALL, pretrain_steps=0)
    arch = cfg.architecture(2)
    a = tr.pretrain_naive(1, arch, train, cfg)
    b = tr.pretrain_naive(1, arch, train, cfg)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)


def test_pretrain_single_point_fit():
    strong = np.array([[[1.0, 10.0], [10.0, 1.0]]])
    est = np.repeat(strong[:, None], 2, axis=1)
    from cdnnsched.channel import ChannelBatch

    data = ChannelBatch(strong, est)
    cfg = replace(SMALL, n_train=1, batch_size=1, pretrain_steps=300, dropout_rate=0.0)
    std = tr.Standardizer(np.zeros(4), np.ones(4))
    for j, label in ((0, 0.0), (1, 1.0)):
        params = tr.pretrain_naive(j, cfg.architecture(2), data, cfg, standardizer=std)
        y, _ = nn.forward(params, std(strong.reshape(1, 4)))
        assert (y[0, 0] >= 0.5) == bool(label)


def test_pretrain_agrees_with_naive_labels():
    noise = CsiNoiseSpec.perfect(2)
    train = sample_batch(5000, 2, None, noise, seed=1)
    held = sample_batch(5000, 2, None, noise, seed=2)
    cfg = tr.TrainConfig(n_train=5000, batch_size=5000)
    for j in range(2):
        std = tr.fit_standardizer(train, j)
        params = tr.pretrain_naive(j, cfg.architecture(2), train, cfg, standardizer=std)
        pol = tr.Policy(params, cfg.architecture(2), std)
        agree = np.mean(pol.decide(held.estimates[:, j]) == naive_decision(held.estimates[:, j], j))
        assert agree >= 0.90


def test_pretrain_truth_labels_switch():
    noise = CsiNoiseSpec((np.ones((2, 2)), np.zeros((2, 2))))
    train = sample_batch(1000, 2, None, noise, seed=1)
    a = tr.pretrain_naive(0, SMALL.architecture(2), train, SMALL)
    b = tr.pretrain_naive(0, SMALL.architecture(2), train, replace(SMALL, pretrain_labels_from="truth"))
    assert not np.array_equal(a.weights[0], b.weights[0])


def test_joint_single_user_always_transmits():
    train, ev = perfect_sets(1)
    pols = tr.train_joint(tr.init_policy_set(train, SMALL), train, SMALL)
    frac = pols.policies[0].outputs(ev.estimates[:, 0])[:, 0]
    assert frac.min() > 0.9
    rep = tr.evaluate_policy(tr.policy_source(pols), ev)
    np.testing.assert_array_equal(rep.transmit_fraction, [1.0])
    local = tr.train_locally_robust(0, train, SMALL)
    assert local.decide(ev.estimates[:, 0]).min() == 1.0


def test_joint_perfect_csi_near_exhaustive():
    train, ev = perfect_sets(2, n_train=5000)
    cfg = replace(SMALL, n_train=5000, steps=300)
    history = []
    pols = tr.train_joint(tr.init_policy_set(train, cfg), train, cfg, history=history)
    cdnn = tr.evaluate_policy(tr.policy_source(pols), ev).expected_sum_rate
    best = tr.evaluate_policy(tr.perfect_csi_source(), ev).expected_sum_rate
    assert cdnn >= 0.95 * best
    assert len(history) == cfg.steps


def test_training_curve_improves_from_scratch():
    noise = CsiNoiseSpec((np.full((2, 2), 0.5), np.zeros((2, 2))))
    train = sample_batch(2000, 2, None, noise, seed=4)
    cfg = replace(SMALL, steps=600, pretrain_steps=0)
    history = []
    tr.train_joint(tr.init_policy_set(train, cfg), train, cfg, history=history)
    windows = np.array(history).reshape(-1, 100).mean(axis=1)
    assert windows[-1] >= windows[0]


def test_decentralization_outputs_ignore_other_estimates():
    noise = CsiNoiseSpec((np.full((3, 3), 0.4), np.zeros((3, 3)), np.full((3, 3), 0.9)))
    train = sample_batch(1000, 3, None, noise, seed=5)
    cfg = replace(SMALL, steps=20, pretrain_steps=10)
    pols = tr.train_joint(tr.init_policy_set(train, cfg), train, cfg)
    base = pols.decisions(train)
    rng = np.random.default_rng(0)
    for j in range(3):
        shuffled = train.estimates.copy()
        for other in range(3):
            if other != j:
                shuffled[:, other] = shuffled[rng.permutation(len(train)), other]
        from cdnnsched.channel import ChannelBatch

        perm = ChannelBatch(train.gains, shuffled)
        assert pols.decisions(perm)[:, j].tobytes() == base[:, j].tobytes()
        out = pols.policies[j].outputs(perm.estimates[:, j])
        assert out.tobytes() == pols.policies[j].outputs(train.estimates[:, j]).tobytes()


def test_gradient_routing_matches_finite_differences():
    noise = CsiNoiseSpec((np.full((2, 2), 0.5), np.zeros((2, 2))))
    data = sample_batch(10, 2, None, noise, seed=6)
    cfg = replace(SMALL, dtype="float64", hidden_layers=(5, 4), pretrain_steps=0, n_train=10, batch_size=10)
    pols = tr.init_policy_set(data, cfg)
    # nonzero biases keep pre-activations off the ReLU kink at exactly 0
    rng = np.random.default_rng(0)
    pols = replace(pols, policies=tuple(
        replace(p, params=p.params.map(lambda a: a + 0.1 * rng.standard_normal(a.shape))) for p in pols.policies))
    _, grads = tr.joint_objective_and_grads(pols, data, cfg, train=False)
    for j in range(2):
        def objective(params, j=j):
            swapped = list(pols.policies)
            swapped[j] = replace(swapped[j], params=params)
            obj, _ = tr.joint_objective_and_grads(replace(pols, policies=tuple(swapped)), data, cfg)
            return obj

        fd = nn.finite_diff_grad(objective, pols.policies[j].params)
        a = np.concatenate([x.ravel() for x in grads[j].arrays()])
        b = np.concatenate([x.ravel() for x in fd.arrays()])
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-3


def test_locally_robust_perfect_csi_matches_exhaustive():
    train, ev = perfect_sets(2, n_train=5000)
    cfg = replace(SMALL, n_train=5000, steps=300, pretrain_steps=500)
    local = tr.train_locally_robust(1, train, cfg)
    assert local.arch.n_outputs == 2 and local.output_index == 1
    full = tr.local_full_decisions(local, ev.estimates[:, 1])
    best = sum_rate(ev.gains, exhaustive_best(ev.gains)).mean()
    assert sum_rate(ev.gains, full).mean() >= 0.95 * best
    # deployment reads output 1 only
    np.testing.assert_array_equal(local.decide(ev.estimates[:, 1]), full[:, 1])


def test_evaluate_policy_baselines():
    _, ev = perfect_sets(2, n_eval=3000)
    rep = tr.evaluate_policy(tr.constant_source(always_on(2)), ev)
    np.testing.assert_array_equal(rep.transmit_fraction, [1.0, 1.0])
    rep = tr.evaluate_policy(tr.constant_source([1.0, 0.0]), ev)
    np.testing.assert_array_equal(rep.transmit_fraction, [1.0, 0.0])
    assert rep.n_eval == 3000 and rep.confidence_halfwidth > 0
    best = tr.evaluate_policy(tr.perfect_csi_source(), ev)
    for src in (tr.naive_source(), tr.constant_source([0.0, 1.0]), tr.constant_source(always_on(2))):
        assert best.expected_sum_rate >= tr.evaluate_policy(src, ev).expected_sum_rate
    with pytest.raises(ValueError):
        tr.evaluate_policy(tr.perfect_csi_source(), ev[:0])


def test_checkpoint_roundtrip_gives_identical_report(tmp_path):
    train, ev = perfect_sets(2, 1000, 2000)
    cfg = replace(SMALL, n_train=1000, steps=20, pretrain_steps=10)
    pols = tr.train_joint(tr.init_policy_set(train, cfg), train, cfg)
    path = save_policies(pols, tmp_path / "c.npz", seed=cfg.seed)
    loaded, meta = load_policies(path)
    assert meta["seed"] == cfg.seed and meta["kind"] == "cdnn"
    a = tr.evaluate_policy(tr.policy_source(pols), ev)
    b = tr.evaluate_policy(tr.policy_source(loaded), ev)
    assert (a.expected_sum_rate, a.confidence_halfwidth) == (b.expected_sum_rate, b.confidence_halfwidth)
    np.testing.assert_array_equal(a.transmit_fraction, b.transmit_fraction)

    local = tr.train_locally_robust_set(train, cfg)
    loaded, meta = load_policies(save_policies(local, tmp_path / "lr.npz", seed=1))
    assert meta["kind"] == "locally_robust"
    assert [p.output_index for p in loaded.policies] == [0, 1]


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, a=np.zeros(2))
    with pytest.raises(CheckpointError):
        load_policies(path)


def test_divergence_is_reported_with_step():
    train, _ = perfect_sets(2, 500)
    cfg = replace(SMALL, n_train=500, steps=5, pretrain_steps=0)
    pols = tr.init_policy_set(train, cfg)
    bad = replace(pols, policies=(replace(pols.policies[0], params=pols.policies[0].params.map(lambda a: a * np.nan)),
                                  pols.policies[1]))
    with pytest.raises(nn.TrainingDiverged) as info:
        tr.train_joint(bad, train, cfg)
    assert info.value.step == 0
