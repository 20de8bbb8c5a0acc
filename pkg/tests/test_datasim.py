import struct

import numpy as np
import pytest

from onda.datasim import (DatasetError, SynthConfig, class_templates, dataset_digest, generate, load_dataset,
                          read_header, save_dataset)

SMALL = dict(n_pretrain_classes=4, samples_per_class=6, n_pretrain_speakers=3, n_subjects=2, stream_length=20,
             test_positives=5, test_negatives=8, feature_shape=(1, 12, 10))


@pytest.fixture(scope="module")
def default_data():
    return generate(SynthConfig())


def test_zero_noise_class_samples_identical():
    pre, _ = generate(SynthConfig(**SMALL, noise_scale=0.0, speaker_shift=0.0, time_jitter=0))
    for k in np.unique(pre.labels):
        x = pre.features[pre.labels == k]
        assert np.array_equal(x, np.broadcast_to(x[0], x.shape))


def test_same_seed_bit_identical():
    a, b = generate(SynthConfig(**SMALL, seed=3)), generate(SynthConfig(**SMALL, seed=3))
    assert dataset_digest(*a) == dataset_digest(*b)
    assert dataset_digest(*a) != dataset_digest(*generate(SynthConfig(**SMALL, seed=4)))


def test_nearest_template_classifier_is_accurate(default_data):
    pre, _ = default_data
    t = class_templates(SynthConfig()).reshape(10, -1)
    x = pre.features.reshape(len(pre.features), -1).astype(float)
    d = ((x[:, None, :] - t[None]) ** 2).sum(-1)
    acc = float((d.argmin(1) + 1 == pre.labels).mean())
    assert 0.9 < acc


def test_subject_keywords_are_unseen(default_data):
    pre, subjects = default_data
    templates = class_templates(SynthConfig())
    for s in subjects:
        assert not any(np.allclose(s.template, t) for t in templates)
    assert len({s.template.tobytes() for s in subjects}) == len(subjects)


def test_subject_bundle_composition(default_data):
    cfg = SynthConfig()
    _, subjects = default_data
    for s in subjects:
        assert len(s.enrollment.positives) == cfg.enrollment_size
        assert len(s.adaptation_stream) == len(s.stream_truth) == cfg.stream_length
        assert s.stream_truth.sum() == round(cfg.stream_length * cfg.stream_positive_rate)
        assert len(s.test.positives) == cfg.test_positives and len(s.test.negatives) == cfg.test_negatives
        # adaptation and test samples are distinct draws
        stream = {x.tobytes() for x in s.adaptation_stream}
        assert not stream & {x.tobytes() for x in np.concatenate([s.test.positives, s.test.negatives])}


def test_calibration_negatives_are_true_negatives(default_data):
    _, subjects = default_data
    s = subjects[0]
    negs = s.calibration_negatives(7)
    truth = {x.tobytes(): t for x, t in zip(s.adaptation_stream, s.stream_truth)}
    assert len(negs) == 7 and all(truth[x.tobytes()] == 0 for x in negs)


def test_invalid_config():
    with pytest.raises(DatasetError, match="positives"):
        generate(SynthConfig(**{**SMALL, "stream_length": 4}))
    with pytest.raises(DatasetError):
        generate(SynthConfig(**{**SMALL, "n_pretrain_classes": 1}))


def test_round_trip_bit_exact(tmp_path):
    cfg = SynthConfig(**SMALL)
    pre, subjects = generate(cfg)
    p = save_dataset(tmp_path / "d.onda", pre, subjects, cfg)
    pre2, sub2 = load_dataset(p)
    assert dataset_digest(pre, subjects) == dataset_digest(pre2, sub2)
    assert read_header(p)["seed"] == cfg.seed
    assert np.array_equal(sub2[1].stream_truth, subjects[1].stream_truth)


def test_header_offsets_recount(tmp_path):
    cfg = SynthConfig(**SMALL)
    pre, subjects = generate(cfg)
    p = save_dataset(tmp_path / "d.onda", pre, subjects, cfg)
    raw = p.read_bytes()
    assert raw[:8] == b"ONDADATA"
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = read_header(p)
    off = 0
    for e in header["arrays"]:
        assert e["offset"] == off and e["nbytes"] == 4 * int(np.prod(e["shape"]))
        off += e["nbytes"]
    assert len(raw) == 16 + hlen + off == 16 + hlen + header["payload_bytes"]
    first = header["arrays"][0]
    data = np.frombuffer(raw, "<f4", int(np.prod(first["shape"])), 16 + hlen)
    assert np.array_equal(data.reshape(first["shape"]), pre.features)


@pytest.mark.parametrize("damage", ["truncate", "magic", "header"])
def test_corrupt_dataset_raises(tmp_path, damage):
    cfg = SynthConfig(**SMALL)
    p = save_dataset(tmp_path / "d.onda", *generate(cfg), cfg)
    raw = bytearray(p.read_bytes())
    if damage == "truncate":
        raw = raw[:-3]
    elif damage == "magic":
        raw[:8] = b"NOTADATA"
    else:
        raw[20:24] = b"\xff\xfe\xfd\xfc"
    p.write_bytes(bytes(raw))
    with pytest.raises(DatasetError):
        load_dataset(p)
