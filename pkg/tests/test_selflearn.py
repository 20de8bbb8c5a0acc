from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from onda.autodiff import Tensor
from onda.model import ArchSpec, LayerSpec, build, embed
from onda.selflearn import (CalibrationError, EnrollmentSet, LabeledDataset, Prototype, PseudoLabeledSet,
                            Thresholds, TrainConfig, TrainingError, TripletSamplingError,
                            calibrate_thresholds, compute_prototype, distances, finetune,
                            nearest_rank_percentile, partition, pretrain, pseudo_label, sample_triplets,
                            thresholds_from_distances, triplet_loss)

from oracles import partition_rule, randomize, tiny_spec


def identity_model(dim=2):
    """Head-only model whose embedding of a (dim, 1, 1) input is the input itself."""
    spec = ArchSpec("DSCNNMini", (LayerSpec("head", dim, prunable=False),), dim, (dim, 1, 1))
    m = build(spec, 0)
    m.params.values[:] = np.concatenate([np.eye(dim).ravel(), np.zeros(dim)])
    return m


def points(*xy):
    return np.array(xy, dtype=float).reshape(len(xy), -1, 1, 1)


# ---------------------------------------------------------------- triplet loss

def test_triplet_loss_examples():
    assert triplet_loss(np.array([1.0, 0]), np.array([1.0, 0]), np.array([1.0, 0]), 0.5) == 0.5
    assert triplet_loss(np.zeros(2), np.zeros(2), np.array([2.0, 0]), 1.0) == 0.0
    a, p, n = np.array([1.0, 0]), np.array([0.0, 1]), np.array([-1.0, 0])
    assert triplet_loss(a, p, n, 0.2) == 0.0
    assert abs(triplet_loss(a, p, n, 2.5) - 0.5) <= 1e-12


def test_triplet_loss_tensor_route_agrees():
    a, p, n = (np.random.default_rng(0).standard_normal((4, 3)) for _ in range(3))
    t = triplet_loss(Tensor(a), Tensor(p), Tensor(n), 0.7).data
    assert np.allclose(t, triplet_loss(a, p, n, 0.7), atol=1e-15)


@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.floats(0.01, 3))
def test_triplet_loss_hinge_property(v, alpha):
    a, p, n = np.array(v[:3]), np.array(v[3:6]), np.array(v[6:])
    loss = triplet_loss(a, p, n, alpha)
    assert loss >= 0
    active = ((a - p) ** 2).sum() + alpha > ((a - n) ** 2).sum()
    assert (loss > 0) == active or abs(((a - p) ** 2).sum() + alpha - ((a - n) ** 2).sum()) < 1e-9


def test_triplet_loss_rejects_bad_margin():
    with pytest.raises(ValueError):
        triplet_loss(np.zeros(2), np.zeros(2), np.zeros(2), 0.0)


# ---------------------------------------------------------------- sampling

def labeled(counts, shape=(1, 2, 2), seed=0):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([[k + 1] * c for k, c in enumerate(counts)])
    return LabeledDataset(rng.standard_normal((len(labels),) + shape), labels, np.zeros(len(labels)))


def test_forced_triplet_composition():
    ds = labeled([2, 1])
    idx = sample_triplets(ds, 20, 0)
    assert all(ds.labels[i] == 1 and ds.labels[j] == 1 and ds.labels[k] == 2 for i, j, k in idx)
    assert all(i != j for i, j, _ in idx)


def test_sampling_is_deterministic():
    ds = labeled([5, 5, 5])
    assert np.array_equal(sample_triplets(ds, 50, 3), sample_triplets(ds, 50, 3))


def test_class_pair_frequencies_are_uniform():
    ds = labeled([8] * 5)
    idx = sample_triplets(ds, 1000, 12345)
    pairs = [(ds.labels[i], ds.labels[k]) for i, _, k in idx]
    keys = [(a, b) for a in range(1, 6) for b in range(1, 6) if a != b]
    observed = [pairs.count(k) for k in keys]
    assert sum(observed) == 1000
    assert chisquare(observed).pvalue > 0.01


def test_sampling_errors_name_deficient_class():
    with pytest.raises(TripletSamplingError, match="no other class"):
        sample_triplets(labeled([4]), 4, 0)
    dft = PseudoLabeledSet(np.zeros((3, 1, 2, 2)), np.array([1, 0, 0]), np.zeros(3))
    with pytest.raises(TripletSamplingError, match="positive"):
        sample_triplets(dft, 4, 0)


# ---------------------------------------------------------------- training

def two_blob_data(n, rng, shape=(1, 4, 4)):
    a = np.zeros(shape)
    a[:, :2] = 1.5
    b = np.zeros(shape)
    b[:, 2:] = 1.5
    x = np.concatenate([a + 0.3 * rng.standard_normal((n,) + shape), b + 0.3 * rng.standard_normal((n,) + shape)])
    return LabeledDataset(x, np.repeat([1, 2], n), np.zeros(2 * n))


def test_zero_epochs_leave_model_unchanged():
    m = build(tiny_spec(), 0)
    ds = two_blob_data(5, np.random.default_rng(0))
    out, log = pretrain(m, ds, TrainConfig(epochs=0))
    assert np.array_equal(out.params.values, m.params.values) and log.steps == 0


def test_pretraining_separates_two_classes():
    rng = np.random.default_rng(0)
    m = build(tiny_spec(), 0)
    train, held = two_blob_data(20, rng), two_blob_data(20, rng)
    out, _ = pretrain(m, train, TrainConfig(epochs=20, batch_size=8, lr=0.02))
    z = embed(out, held.features)
    d = np.sqrt(((z[:, None] - z[None]) ** 2).sum(-1))
    same = held.labels[:, None] == held.labels[None]
    off = ~np.eye(len(z), dtype=bool)
    assert d[same & off].mean() < d[~same].mean()


def test_pretraining_is_deterministic_and_counts_steps():
    ds = two_blob_data(10, np.random.default_rng(1))
    cfg = TrainConfig(epochs=2, batch_size=4, lr=0.02, seed=5)
    a, la = pretrain(build(tiny_spec(), 0), ds, cfg)
    b, _ = pretrain(build(tiny_spec(), 0), ds, cfg)
    assert np.array_equal(a.params.values, b.params.values)
    # ceil(20 / (3 * 4)) = 2 steps per epoch
    assert la.steps == 4 and la.samples == 4 * 12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    ds = two_blob_data(10, np.random.default_rng(1))
    with pytest.raises(TrainingError, match="epoch"):
        pretrain(build(tiny_spec(), 0), ds, TrainConfig(epochs=5, batch_size=4, lr=1e200))


def test_pretrain_rejects_singleton_class():
    with pytest.raises(TripletSamplingError):
        pretrain(build(tiny_spec(), 0), labeled([3, 1], shape=(1, 4, 4)), TrainConfig(epochs=1))


# ---------------------------------------------------------------- prototypes

def test_prototype_of_one_embedding_is_that_embedding():
    m = identity_model()
    assert np.array_equal(compute_prototype(m, EnrollmentSet(points((0.3, -2.0)))).vector, [0.3, -2.0])


def test_prototype_is_arithmetic_mean():
    p = compute_prototype(identity_model(), EnrollmentSet(points((1, 0), (0, 1))))
    assert np.array_equal(p.vector, [0.5, 0.5])


def test_prototype_matches_individual_recomputation():
    rng = np.random.default_rng(4)
    m = randomize(build(tiny_spec(), 4), rng)
    x = rng.standard_normal((5, 1, 4, 4))
    p = compute_prototype(m, EnrollmentSet(x))
    ref = np.mean([embed(m, xi) for xi in x], axis=0)
    assert np.max(np.abs(p.vector - ref)) <= 1e-12


def test_prototype_translation_consistency():
    rng = np.random.default_rng(5)
    m = randomize(build(tiny_spec(), 5), rng)
    x = rng.standard_normal((4, 1, 4, 4))
    p0 = compute_prototype(m, EnrollmentSet(x)).vector
    shift = rng.standard_normal(4)
    e = m.params.layout["L3.bias"]
    m.params.values[e.offset:e.offset + e.size] += shift
    p1 = compute_prototype(m, EnrollmentSet(x)).vector
    assert np.allclose(p1, p0 + shift, atol=1e-12)


# ---------------------------------------------------------------- calibration and pseudo-labels

def test_threshold_examples():
    th = thresholds_from_distances(np.zeros(4), np.full(20, 10.0))
    assert (th.gamma_plus, th.gamma_minus) == (0.0, 10.0)
    assert nearest_rank_percentile(np.arange(100, 0, -1), 5) == 5
    th = thresholds_from_distances([0.7], np.arange(1, 101), k_plus=1.0)
    assert th.gamma_plus == 0.7 and th.gamma_minus == 5


def test_overlapping_distances_raise_and_never_swap():
    with pytest.raises(CalibrationError) as e:
        thresholds_from_distances([3.0, 5.0], [1.0, 2.0, 3.0])
    assert e.value.gamma_plus > e.value.gamma_minus


def test_calibrate_thresholds_through_model():
    m = identity_model()
    enroll = EnrollmentSet(points((0, 0), (0, 0)))
    proto = compute_prototype(m, enroll)
    negs = points(*[(10, 0)] * 5)
    th = calibrate_thresholds(m, proto, enroll, negs)
    assert (th.gamma_plus, th.gamma_minus) == (0.0, 10.0)


def test_pseudo_label_rule_example():
    m = identity_model()
    th = Thresholds(1.0, 2.0)
    ds = pseudo_label(m, Prototype(np.zeros(2)), th, points((0.5, 0), (3.0, 0), (1.5, 0)))
    assert list(ds.labels) == [1, 0] and list(ds.source_index) == [0, 1] and ds.discarded_count == 1
    assert ds.check(th)


def test_items_matching_enrollment_are_all_positive():
    m = identity_model()
    enroll = EnrollmentSet(points((1.0, 1.0)))
    ds = pseudo_label(m, compute_prototype(m, enroll), Thresholds(0.1, 1.0), points(*[(1.0, 1.0)] * 6))
    assert list(ds.labels) == [1] * 6


def test_empty_stream_gives_empty_set():
    ds = pseudo_label(identity_model(), Prototype(np.zeros(2)), Thresholds(1, 2), np.zeros((0, 2, 1, 1)))
    assert len(ds) == 0 and ds.discarded_count == 0


@given(st.integers(0, 2 ** 32 - 1))
def test_partition_matches_rule_and_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    m = identity_model(3)
    stream = rng.standard_normal((200, 3, 1, 1)) * rng.uniform(0.5, 3)
    proto = Prototype(rng.standard_normal(3))
    gp = rng.uniform(0, 2)
    th = Thresholds(gp, gp + rng.uniform(0.01, 2))
    d = distances(m, proto, stream)
    assert list(partition(d, th)) == partition_rule(d, th.gamma_plus, th.gamma_minus)
    ds = pseudo_label(m, proto, th, stream)
    assert ds.check(th) and len(ds) + ds.discarded_count == 200
    perm = rng.permutation(200)
    assert np.array_equal(partition(d[perm], th), partition(d, th)[perm])


def test_thresholds_invariant():
    with pytest.raises(CalibrationError):
        Thresholds(2.0, 2.0)


# ---------------------------------------------------------------- fine-tuning

@pytest.mark.slow
def test_finetune_pulls_positives_towards_prototype(e2e):
    """Cleanly labelled streams, pretrained models at pipeline scale, three seeds.

    Per seed, the mean over subjects of the positives' distance to the
    recomputed prototype must drop after fine-tuning.
    """
    from onda.config import pipeline_config
    from onda.pipeline import stage_pretrain
    pre, subjects = e2e.data
    base = {k: v for k, v in e2e.config.items() if k != "grid"}
    for seed in range(3):
        cfg = pipeline_config({**base, "seed": seed})
        m, _ = stage_pretrain(cfg, pre, e2e.cache)
        before, after = [], []
        for b in subjects[:3]:
            clean = PseudoLabeledSet(b.adaptation_stream, b.stream_truth, np.zeros(len(b.stream_truth)))
            out, _ = finetune(m, clean, replace(cfg.finetune, seed=seed))
            pos = b.test.positives
            before.append(distances(m, compute_prototype(m, b.enrollment), pos).mean())
            after.append(distances(out, compute_prototype(out, b.enrollment), pos).mean())
        assert np.mean(after) < np.mean(before), (seed, before, after)


def test_finetune_determinism_and_no_op():
    rng = np.random.default_rng(0)
    m = build(tiny_spec(), 0)
    dft = PseudoLabeledSet(rng.standard_normal((9, 1, 4, 4)), np.array([1] * 4 + [0] * 5), np.zeros(9))
    same, _ = finetune(m, dft, TrainConfig(epochs=0))
    assert np.array_equal(same.params.values, m.params.values)
    cfg = TrainConfig(epochs=2, batch_size=2, lr=0.01)
    a, _ = finetune(m, dft, cfg)
    b, _ = finetune(m, dft, cfg)
    assert np.array_equal(a.params.values, b.params.values)


def test_finetune_insufficient_data():
    dft = PseudoLabeledSet(np.zeros((3, 1, 4, 4)), np.array([1, 0, 0]), np.zeros(3))
    with pytest.raises(TripletSamplingError):
        finetune(build(tiny_spec(), 0), dft, TrainConfig(epochs=1))
