import numpy as np
import pytest

from fewspike.errors import InsufficientSamples, NoFinalDense
from fewspike.events import bin_events
from fewspike.fewshot import (
    CrossValReport,
    build_episodes,
    classify,
    cross_validate,
    reset_output_layer,
    run_fewshot,
    synthetic_dataset,
)
from fewspike.network import (
    NetworkSpec,
    build_network,
    checkpoint_bytes,
    make_dense,
    make_pool,
    run_network,
)
from fewspike.neuron import NeuronParams
from fewspike.plasticity import SoelConfig


def tiny_net(seed=0, n_out=2):
    params = NeuronParams(u_threshold=512)
    net = build_network((2, 16, 16), ["4a", "8"], n_out, params)
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if layer.weights is not None:
            layer.weights = rng.integers(-15, 16, size=layer.weights.shape) * 2
    return net


def tiny_dataset(per_class=6, seed=0):
    return synthetic_dataset([0, 1, 2, 3], per_class, seed, duration_ms=64,
                             width=16, height=16)


def tiny_soel_cfg():
    return SoelConfig(t_interval=16, target_y_active=4, target_y_inactive=0,
                      eta=0.25, impulse=16.0)


class TestBuildEpisodes:
    def test_even_index_split_and_counts(self):
        episodes = build_episodes(tiny_dataset(), 2, 2, shots=1, folds=3, seed=1)
        assert len(episodes) == 3
        for ep in episodes:
            assert ep.pretrain_classes == (0, 2)
            assert ep.novel_classes == (1, 3)
            train_uids = {s.uid for s in ep.train_samples}
            test_uids = {s.uid for s in ep.test_samples}
            assert not train_uids & test_uids
            assert len(ep.train_samples) == 2  # K per novel class

    def test_eleven_class_six_five_split(self):
        dataset = synthetic_dataset(list(range(11)), 6, 0, duration_ms=16,
                                    width=16, height=16)
        episodes = build_episodes(dataset, 6, 5, shots=1, folds=5, seed=0)
        assert len(episodes) == 5
        assert episodes[0].pretrain_classes == (0, 2, 4, 6, 8, 10)
        assert episodes[0].novel_classes == (1, 3, 5, 7, 9)
        test_sets = [frozenset(s.uid for s in ep.test_samples) for ep in episodes]
        for i in range(5):
            for j in range(i + 1, 5):
                assert not test_sets[i] & test_sets[j]

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamples):
            build_episodes(tiny_dataset(per_class=3), 2, 2, shots=5, folds=3)

    def test_deterministic_in_seed(self):
        a = build_episodes(tiny_dataset(), 2, 2, shots=2, folds=3, seed=7)
        b = build_episodes(tiny_dataset(), 2, 2, shots=2, folds=3, seed=7)
        for ea, eb in zip(a, b):
            assert [s.uid for s in ea.train_samples] == [s.uid for s in eb.train_samples]
            assert [s.uid for s in ea.test_samples] == [s.uid for s in eb.test_samples]


class TestResetOutputLayer:
    def test_zero_output_after_reset(self):
        net = tiny_net()
        reset = reset_output_layer(net, 3)
        sample = tiny_dataset().by_class[0][0].load()
        rec = run_network(reset, bin_events(sample))
        assert rec.output_counts.tolist() == [0, 0, 0]
        assert reset.layers[-1].plastic
        assert reset.layers[-1].params.bias == 0

    def test_feature_layers_byte_identical(self):
        net = tiny_net()
        before = checkpoint_bytes(NetworkSpec(net.input_shape, net.layers[:-1] +
                                              [net.layers[-1]]))
        reset = reset_output_layer(net, 3)
        for old, new in zip(net.layers[:-1], reset.layers[:-1]):
            assert np.array_equal(old.weights, new.weights) if old.weights is not None \
                else new.weights is None
        assert checkpoint_bytes(net) == before  # original untouched

    def test_requested_width_honored(self):
        assert reset_output_layer(tiny_net(), 10).n_outputs == 10

    def test_no_final_dense(self):
        params = NeuronParams()
        bad = NetworkSpec((2, 8, 8), [make_pool((2, 8, 8), 2),
                                      make_dense((2, 4, 4), 2, params)])
        bad.layers.append(make_pool((2, 2, 2), 1))  # bypass validation
        with pytest.raises(NoFinalDense):
            reset_output_layer(bad, 3)


class TestClassify:
    def test_argmax(self):
        assert classify(np.array([3, 9, 1])) == (1, False)

    def test_all_zero_ties_to_class_zero(self):
        assert classify(np.array([0, 0, 0])) == (0, True)

    def test_scale_invariance(self):
        counts = np.array([2, 7, 5])
        assert classify(counts)[0] == classify(counts * 13)[0]


class TestRunFewshot:
    def test_k0_accuracy_is_tie_baseline(self):
        net = tiny_net()
        episodes = build_episodes(tiny_dataset(), 2, 2, shots=0, folds=2, seed=3)
        report = run_fewshot(net, episodes[0], tiny_soel_cfg(), seed=3)
        # zero weights, all-tie argmax: accuracy = share of class index 0
        labels = [ep.class_id for ep in episodes[0].test_samples]
        expected = labels.count(episodes[0].novel_classes[0]) / len(labels)
        assert report.test_accuracy == pytest.approx(expected)
        assert expected == pytest.approx(1 / 2)
        assert report.tie_count == len(labels)

    def test_features_frozen_through_run(self):
        net = tiny_net()
        hashes_before = [None if l.weights is None else l.weights.copy()
                         for l in net.layers[:-1]]
        episodes = build_episodes(tiny_dataset(), 2, 2, shots=1, folds=2, seed=0)
        run_fewshot(net, episodes[0], tiny_soel_cfg(), seed=0)
        for w0, layer in zip(hashes_before, net.layers[:-1]):
            if w0 is not None:
                assert np.array_equal(w0, layer.weights)

    def test_update_counts_and_logs_present(self):
        net = tiny_net()
        episodes = build_episodes(tiny_dataset(), 2, 2, shots=2, folds=2, seed=1)
        report = run_fewshot(net, episodes[0], tiny_soel_cfg(), seed=1)
        assert report.baseline_update_count == 4 * 64 * 2  # shots * steps * n_out
        assert 0 <= report.soel_update_count <= report.baseline_update_count
        assert report.window_log
        assert report.windows_triggered >= 0
        assert 0.0 <= report.train_accuracy <= 1.0
        assert 0.0 <= report.test_accuracy <= 1.0
        assert report.confusion.sum() == len(episodes[0].test_samples)

    def test_deterministic(self):
        net = tiny_net()
        episodes = build_episodes(tiny_dataset(), 2, 2, shots=1, folds=2, seed=4)
        a = run_fewshot(net, episodes[0], tiny_soel_cfg(), seed=4)
        b = run_fewshot(net, episodes[0], tiny_soel_cfg(), seed=4)
        assert a.test_accuracy == b.test_accuracy
        assert a.soel_update_count == b.soel_update_count
        assert np.array_equal(a.confusion, b.confusion)


class TestCrossValidate:
    def test_mean_and_sample_std(self):
        reports = cross_validate(tiny_net(),
                                 build_episodes(tiny_dataset(), 2, 2, 1, folds=2,
                                                seed=5),
                                 tiny_soel_cfg(), seed=5)
        accs = [r.test_accuracy for r in reports.reports]
        assert reports.mean_test == pytest.approx(np.mean(accs))
        assert reports.std_test == pytest.approx(np.std(accs, ddof=1))
        assert len(reports.reports) == 2

    def test_two_fold_formula(self):
        # direct formula check: accuracies 0.6 and 0.8 -> mean 0.7, std ~0.1414
        from fewspike.fewshot import EvalReport, aggregate_reports
        reports = [EvalReport(1, f, train_accuracy=a, test_accuracy=a,
                              confusion=np.zeros((2, 2)))
                   for f, a in enumerate([0.6, 0.8])]
        agg = aggregate_reports(reports)
        assert agg.mean_test == pytest.approx(0.7)
        assert agg.std_test == pytest.approx(0.14142135623730953)

    def test_identical_folds_zero_std(self):
        from fewspike.fewshot import EvalReport, aggregate_reports
        reports = [EvalReport(1, f, train_accuracy=0.5, test_accuracy=0.5,
                              confusion=np.zeros((2, 2))) for f in range(3)]
        assert aggregate_reports(reports).std_test == 0.0

    def test_needs_two_episodes(self):
        with pytest.raises(ValueError):
            cross_validate(tiny_net(), build_episodes(tiny_dataset(), 2, 2, 1,
                                                      folds=2, seed=0)[:1],
                           tiny_soel_cfg())
