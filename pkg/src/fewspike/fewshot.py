"""Few-shot transfer experiments: episodes, output-layer reset, evaluation.

An episode fixes a pretrain/novel class split, K training shots per novel
class, and a held-out test set for one cross-validation fold. Running an
episode resets the network's output layer to a zero-initialized plastic
dense layer over the frozen features, presents the shots once each in a
seeded round-robin order with online plasticity enabled, then freezes and
evaluates. A per-timestep dense-update baseline consumes byte-identical
feature presentations so update counts are comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import InsufficientSamples, NoFinalDense
from .events import EventStream, bin_events, downscale, load_event_file
from .network import LayerKind, NetworkSpec, make_dense, run_features
from .plasticity import (
    PlasticNeuronState,
    SoelConfig,
    sgd_baseline_present,
    soel_present,
)
from .rng import substream, substream_seed
from .synth import synth_gesture


@dataclass(frozen=True)
class Sample:
    class_id: int
    uid: str
    loader: Callable[[], EventStream]

    def load(self) -> EventStream:
        return self.loader()


@dataclass
class GestureDataset:
    """Ordered class list plus samples per class.

    The class order matters: even positions are the default pretrain split.
    """

    classes: list[int]
    by_class: dict[int, list[Sample]]


def synthetic_dataset(classes: list[int], per_class: int, seed: int,
                      duration_ms: int = 300, width: int = 128,
                      height: int = 128,
                      downscale_to: int | None = None) -> GestureDataset:
    """Lazily generated synthetic dataset, deterministic in seed.

    With downscale_to set, streams are generated at (width, height) and then
    center-crop downscaled, which keeps small-retina streams as event-dense
    as the full-size ones.
    """
    by_class: dict[int, list[Sample]] = {}
    for c in classes:
        samples = []
        for i in range(per_class):
            sample_seed = substream_seed(seed, "sample", c, i)

            def load(c=c, s=sample_seed):
                stream = synth_gesture(c, s, duration_ms, width, height)
                if downscale_to is not None:
                    stream = downscale(stream, downscale_to)
                return stream

            samples.append(Sample(c, f"synth:c{c}:s{sample_seed}", load))
        by_class[c] = samples
    return GestureDataset(list(classes), by_class)


def manifest_dataset(manifest_path, data_dir) -> GestureDataset:
    """Dataset backed by a gen-data manifest (class,seed,path,duration_us).

    The BIN format does not store duration, so the manifest's recorded value
    (which includes trailing silence) is restored after loading.
    """
    import csv
    from pathlib import Path

    def load_with_duration(path, duration_us):
        stream = load_event_file(path)
        stream.duration = max(stream.duration, duration_us)
        return stream

    data_dir = Path(data_dir)
    by_class: dict[int, list[Sample]] = {}
    with open(manifest_path, newline="") as fh:
        for row in csv.DictReader(fh):
            c = int(row["class"])
            path = data_dir / row["path"]
            dur = int(row["duration_us"])
            by_class.setdefault(c, []).append(
                Sample(c, str(row["path"]),
                       lambda p=path, d=dur: load_with_duration(p, d)))
    return GestureDataset(sorted(by_class), by_class)


@dataclass(frozen=True)
class Episode:
    pretrain_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]
    shots: int
    train_samples: tuple[Sample, ...]  # round-robin presentation order
    test_samples: tuple[Sample, ...]
    fold: int


def build_episodes(dataset: GestureDataset, n_pretrain: int, n_novel: int,
                   shots: int, folds: int = 5, seed: int = 0) -> list[Episode]:
    """Deterministic cross-validation episodes.

    Classes at even positions of the dataset's class list form the pretrain
    split. Each novel class's samples are permuted once per seed and cut
    into `folds` chunks; fold f tests on chunk f and draws its shots from
    the remaining chunks.
    """
    classes = dataset.classes
    if len(classes) < n_pretrain + n_novel:
        raise InsufficientSamples(
            f"need {n_pretrain + n_novel} classes, have {len(classes)}")
    pretrain = tuple(classes[0::2][:n_pretrain])
    novel = tuple(c for c in classes if c not in pretrain)[:n_novel]
    if len(novel) < n_novel:
        raise InsufficientSamples("not enough classes outside the pretrain split")

    perms: dict[int, list[Sample]] = {}
    for c in novel:
        samples = dataset.by_class[c]
        need = shots + 1  # at least one held-out test item per fold
        if len(samples) < max(need, folds):
            raise InsufficientSamples(
                f"class {c} has {len(samples)} samples, needs >= {max(need, folds)}")
        order = substream(seed, "folds", c).permutation(len(samples))
        perms[c] = [samples[i] for i in order]

    episodes = []
    for fold in range(folds):
        train_by_class: dict[int, list[Sample]] = {}
        test: list[Sample] = []
        for c in novel:
            samples = perms[c]
            chunks = [list(a) for a in np.array_split(np.arange(len(samples)), folds)]
            test_idx = chunks[fold]
            pool_idx = [i for f, ch in enumerate(chunks) if f != fold for i in ch]
            if len(pool_idx) < shots:
                raise InsufficientSamples(
                    f"class {c}: {len(pool_idx)} pool samples < {shots} shots")
            train_by_class[c] = [samples[i] for i in pool_idx[:shots]]
            test.extend(samples[i] for i in test_idx)
        train: list[Sample] = []
        for r in range(shots):
            order = substream(seed, "shot-order", fold, r).permutation(len(novel))
            train.extend(train_by_class[novel[i]][r] for i in order)
        episodes.append(Episode(pretrain, novel, shots, tuple(train), tuple(test), fold))
    return episodes


def reset_output_layer(net: NetworkSpec, n_classes: int) -> NetworkSpec:
    """Replace the final dense layer with a zero-weight plastic one."""
    if net.layers[-1].kind is not LayerKind.DENSE:
        raise NoFinalDense("network does not end in a dense layer")
    old = net.layers[-1]
    params = replace(old.params, bias=0)
    new_last = make_dense(old.in_shape, n_classes, params, plastic=True)
    return NetworkSpec(net.input_shape, [l.copy() for l in net.layers[:-1]] + [new_last])


def classify(output_counts: np.ndarray) -> tuple[int, bool]:
    """Argmax of spike counts; ties go to the lowest index and are flagged."""
    counts = np.asarray(output_counts)
    if counts.size < 1:
        raise ValueError("need at least one output")
    best = int(np.argmax(counts))
    tie = int(np.sum(counts == counts[best])) > 1
    return best, tie


@dataclass
class EvalReport:
    shots: int
    fold: int
    train_accuracy: float
    test_accuracy: float
    confusion: np.ndarray = field(repr=False)  # rows true, cols predicted
    soel_update_count: int = 0
    baseline_update_count: int = 0
    windows_triggered: int = 0
    tie_count: int = 0
    seed: int = 0
    window_log: list = field(default_factory=list, repr=False)


def run_fewshot(net: NetworkSpec, episode: Episode, soel_cfg: SoelConfig,
                seed: int = 0, dt_us: int = 1000) -> EvalReport:
    """Reset the output layer, learn the episode's shots online, evaluate.

    Shots are presented once each, sequentially; the adaptive threshold
    carries across shots while membrane state and spike counts restart per
    presentation. Train accuracy re-runs the shots with plasticity off.
    """
    n_novel = len(episode.novel_classes)
    label_of = {c: i for i, c in enumerate(episode.novel_classes)}
    plastic_net = reset_output_layer(net, n_novel)
    layer = plastic_net.layers[-1]

    def features(sample: Sample) -> np.ndarray:
        return run_features(plastic_net, bin_events(sample.load(), dt_us))

    train_feats = [(features(s), label_of[s.class_id]) for s in episode.train_samples]

    rng = substream(seed, "soel", episode.fold)
    pstate: PlasticNeuronState | None = None
    soel_updates = 0
    windows_triggered = 0
    window_log = []
    for feats, label in train_feats:
        res = soel_present(layer, feats, label, soel_cfg, rng, pstate, learning=True)
        layer.weights = res.weights
        pstate = res.state
        soel_updates += res.update_events
        windows_triggered += len({r.step for r in res.log if r.triggered})
        window_log.extend(res.log)

    rng_base = substream(seed, "baseline", episode.fold)
    base_layer = make_dense(layer.in_shape, n_novel, layer.params)
    baseline_updates = 0
    for feats, label in train_feats:
        base_w, events = sgd_baseline_present(base_layer, feats, label,
                                              soel_cfg, rng_base)
        base_layer.weights = base_w
        baseline_updates += events

    def infer_counts(feats: np.ndarray) -> np.ndarray:
        res = soel_present(layer, feats, 0, soel_cfg, rng, learning=False)
        return res.output_spikes.sum(axis=0)

    ties = 0
    train_correct = 0
    for feats, label in train_feats:
        pred, tie = classify(infer_counts(feats))
        ties += int(tie)
        train_correct += int(pred == label)

    confusion = np.zeros((n_novel, n_novel), dtype=np.int64)
    test_correct = 0
    for sample in episode.test_samples:
        label = label_of[sample.class_id]
        pred, tie = classify(infer_counts(features(sample)))
        ties += int(tie)
        confusion[label, pred] += 1
        test_correct += int(pred == label)

    n_train = max(1, len(train_feats))
    n_test = max(1, len(episode.test_samples))
    return EvalReport(
        shots=episode.shots,
        fold=episode.fold,
        train_accuracy=train_correct / n_train if train_feats else 0.0,
        test_accuracy=test_correct / n_test,
        confusion=confusion,
        soel_update_count=soel_updates,
        baseline_update_count=baseline_updates,
        windows_triggered=windows_triggered,
        tie_count=ties,
        seed=seed,
        window_log=window_log,
    )


@dataclass
class CrossValReport:
    reports: list[EvalReport]
    mean_train: float
    std_train: float
    mean_test: float
    std_test: float


def aggregate_reports(reports: list[EvalReport]) -> CrossValReport:
    """Mean and sample standard deviation over per-fold reports."""
    if len(reports) < 2:
        raise ValueError("aggregation needs at least 2 reports")
    train = np.array([r.train_accuracy for r in reports])
    test = np.array([r.test_accuracy for r in reports])
    return CrossValReport(reports,
                          float(train.mean()), float(train.std(ddof=1)),
                          float(test.mean()), float(test.std(ddof=1)))


def cross_validate(net: NetworkSpec, episodes: list[Episode],
                   soel_cfg: SoelConfig, seed: int = 0,
                   dt_us: int = 1000) -> CrossValReport:
    """Run all fold episodes and aggregate mean and sample std accuracies."""
    if len(episodes) < 2:
        raise ValueError("cross-validation needs at least 2 episodes")
    return aggregate_reports([run_fewshot(net, ep, soel_cfg, seed=seed, dt_us=dt_us)
                              for ep in sorted(episodes, key=lambda e: e.fold)])
