"""Deterministic synthetic keyword data and its portable file format.

Each keyword class is a smooth random template over a (freq, time) map. A
speaker applies a gain and an additive spectral offset; each sample adds a
small circular time shift and white noise. Subjects enroll a keyword whose
template is drawn fresh, so it never occurs in the pretraining classes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .evaluation import EvalSet
from .model import CheckpointError, read_framed
from .selflearn import EnrollmentSet, LabeledDataset


class DatasetError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_pretrain_classes: int = 10
    samples_per_class: int = 50
    n_pretrain_speakers: int = 20
    n_subjects: int = 5
    enrollment_size: int = 4
    stream_length: int = 300
    stream_positive_rate: float = 0.2
    test_positives: int = 100
    test_negatives: int = 400
    n_distractor_classes: int = 10
    class_separation: float = 1.0
    speaker_shift: float = 0.6
    noise_scale: float = 0.45
    time_jitter: int = 3
    feature_shape: tuple[int, int, int] = (1, 40, 49)
    seconds_per_negative: float = 3.0
    seed: int = 0

    def __post_init__(self):
        self.feature_shape = tuple(int(s) for s in self.feature_shape)

    def violations(self) -> list[str]:
        out = []
        if self.n_pretrain_classes < 2:
            out.append("n_pretrain_classes must be >= 2")
        if self.samples_per_class < 2:
            out.append("samples_per_class must be >= 2")
        if self.enrollment_size < 1:
            out.append("enrollment_size must be >= 1")
        if self.n_subjects < 1 or self.n_pretrain_speakers < 1:
            out.append("n_subjects and n_pretrain_speakers must be >= 1")
        if round(self.stream_length * self.stream_positive_rate) < 2:
            out.append("adaptation stream must contain >= 2 positives")
        if self.stream_length - round(self.stream_length * self.stream_positive_rate) < 1:
            out.append("adaptation stream must contain >= 1 negative")
        if self.test_positives < 1 or self.test_negatives < 1:
            out.append("test sets need >= 1 positive and >= 1 negative")
        if min(self.noise_scale, self.speaker_shift, self.class_separation) < 0 or self.time_jitter < 0:
            out.append("scales must be non-negative")
        if len(self.feature_shape) != 3 or min(self.feature_shape) < 1:
            out.append("feature_shape must be three positive extents")
        if self.seconds_per_negative <= 0:
            out.append("seconds_per_negative must be positive")
        return out

    def validate(self) -> "SynthConfig":
        v = self.violations()
        if v:
            raise DatasetError("invalid SynthConfig: " + "; ".join(v))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_shape"] = list(self.feature_shape)
        return d


@dataclass
class SubjectBundle:
    enrollment: EnrollmentSet
    adaptation_stream: np.ndarray
    stream_truth: np.ndarray          # 1 keyword, 0 other; hidden from the pipeline
    test: EvalSet
    subject_id: int = 0
    template: np.ndarray | None = field(default=None, repr=False)

    def calibration_negatives(self, n: int) -> np.ndarray:
        """Known-negative stream items used only to place gamma_minus."""
        return self.adaptation_stream[np.flatnonzero(self.stream_truth == 0)[:n]]


# ---------------------------------------------------------------- generation

def _smooth(rng, shape, sigma) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return f / (np.sqrt(np.mean(f ** 2)) + 1e-12)


def _templates(rng, n, shape, scale) -> np.ndarray:
    c, h, w = shape
    return np.stack([scale * _smooth(rng, shape, (0, 2.5, 3.0)) for _ in range(n)])


class _Speaker:
    def __init__(self, rng, shape, shift):
        c, h, w = shape
        self.gain = 1.0 + shift * 0.3 * rng.standard_normal()
        spectral = gaussian_filter(rng.standard_normal(h), sigma=4.0, mode="wrap")
        spectral /= np.sqrt(np.mean(spectral ** 2)) + 1e-12
        self.offset = shift * spectral.reshape(1, h, 1) * np.ones(shape)
        self.fshift = int(round(shift * 2 * rng.standard_normal()))

    def render(self, rng, template, cfg: SynthConfig) -> np.ndarray:
        x = np.roll(template, self.fshift, axis=1) * self.gain + self.offset
        if cfg.time_jitter:
            x = np.roll(x, int(rng.integers(-cfg.time_jitter, cfg.time_jitter + 1)), axis=2)
        if cfg.noise_scale:
            x = x + cfg.noise_scale * rng.standard_normal(x.shape)
        return x.astype(np.float32)


def _sub_rng(seed: int, *tokens) -> np.random.Generator:
    key = [seed] + [int.from_bytes(hashlib.sha256(str(t).encode()).digest()[:4], "little") for t in tokens]
    return np.random.default_rng(key)


def generate(cfg: SynthConfig) -> tuple[LabeledDataset, list[SubjectBundle]]:
    cfg.validate()
    shape = cfg.feature_shape
    rng = _sub_rng(cfg.seed, "templates")
    pre_t = _templates(rng, cfg.n_pretrain_classes, shape, cfg.class_separation)
    distract_t = _templates(rng, cfg.n_distractor_classes, shape, cfg.class_separation)
    kw_t = _templates(rng, cfg.n_subjects, shape, cfg.class_separation)

    rng = _sub_rng(cfg.seed, "pretrain")
    speakers = [_Speaker(rng, shape, cfg.speaker_shift) for _ in range(cfg.n_pretrain_speakers)]
    feats, labels, spk = [], [], []
    for k in range(cfg.n_pretrain_classes):
        for _ in range(cfg.samples_per_class):
            s = int(rng.integers(len(speakers)))
            feats.append(speakers[s].render(rng, pre_t[k], cfg))
            labels.append(k + 1)
            spk.append(s)
    pre = LabeledDataset(np.stack(feats), np.array(labels), np.array(spk))

    negative_pool = np.concatenate([pre_t, distract_t]) if cfg.n_distractor_classes else pre_t
    bundles = []
    for i in range(cfg.n_subjects):
        r = _sub_rng(cfg.seed, "subject", i)
        who = _Speaker(r, shape, cfg.speaker_shift)
        render_pos = lambda n: np.stack([who.render(r, kw_t[i], cfg) for _ in range(n)]) if n else \
            np.zeros((0,) + shape, np.float32)
        render_neg = lambda n: np.stack([who.render(r, negative_pool[r.integers(len(negative_pool))], cfg)
                                         for _ in range(n)]) if n else np.zeros((0,) + shape, np.float32)
        enroll = render_pos(cfg.enrollment_size)
        n_pos = int(round(cfg.stream_length * cfg.stream_positive_rate))
        truth = np.zeros(cfg.stream_length, dtype=np.int64)
        truth[r.permutation(cfg.stream_length)[:n_pos]] = 1
        stream = np.empty((cfg.stream_length,) + shape, np.float32)
        stream[truth == 1] = render_pos(n_pos)
        stream[truth == 0] = render_neg(cfg.stream_length - n_pos)
        test = EvalSet(render_pos(cfg.test_positives), render_neg(cfg.test_negatives), cfg.seconds_per_negative)
        bundles.append(SubjectBundle(EnrollmentSet(enroll), stream, truth, test, i, kw_t[i]))
    return pre, bundles


def class_templates(cfg: SynthConfig) -> np.ndarray:
    """Pretraining class templates (class k+1 at index k), for oracle checks."""
    rng = _sub_rng(cfg.seed, "templates")
    return _templates(rng, cfg.n_pretrain_classes, cfg.feature_shape, cfg.class_separation)


# ---------------------------------------------------------------- file format

DATA_MAGIC = b"ONDADATA"
DATA_VERSION = 1


def _arrays(pre: LabeledDataset, subjects: list[SubjectBundle]) -> list[tuple[str, np.ndarray]]:
    out = [("pretrain.features", pre.features), ("pretrain.labels", pre.labels),
           ("pretrain.speakers", pre.speakers)]
    for i, s in enumerate(subjects):
        out += [(f"subject{i}.enrollment", s.enrollment.positives),
                (f"subject{i}.stream", s.adaptation_stream),
                (f"subject{i}.stream_truth", s.stream_truth),
                (f"subject{i}.test_positives", s.test.positives),
                (f"subject{i}.test_negatives", s.test.negatives)]
    return out


def save_dataset(path, pre: LabeledDataset, subjects: list[SubjectBundle],
                 cfg: SynthConfig | None = None) -> Path:
    """magic, uint64 header length, JSON header, little-endian float32 payload."""
    path = Path(path)
    entries, blobs, off = [], [], 0
    for name, a in _arrays(pre, subjects):
        b = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(a)), "offset": off, "nbytes": len(b)})
        blobs.append(b)
        off += len(b)
    header = {"format": "onda-dataset", "version": DATA_VERSION,
              "seed": cfg.seed if cfg else None, "config": cfg.to_dict() if cfg else None,
              "n_subjects": len(subjects),
              "seconds_per_negative": [s.test.seconds_per_negative for s in subjects],
              "arrays": entries, "payload_bytes": off}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATA_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs))
    return path


def read_header(path) -> dict:
    try:
        header, _ = read_framed(Path(path).read_bytes(), DATA_MAGIC, "dataset")
    except CheckpointError as e:
        raise DatasetError(str(e)) from None
    return header


def load_dataset(path) -> tuple[LabeledDataset, list[SubjectBundle]]:
    try:
        header, payload = read_framed(Path(path).read_bytes(), DATA_MAGIC, "dataset")
    except CheckpointError as e:
        raise DatasetError(str(e)) from None
    if header.get("version") != DATA_VERSION:
        raise DatasetError(f"unsupported dataset version {header.get('version')}")
    if len(payload) != header.get("payload_bytes"):
        raise DatasetError(f"payload is {len(payload)} bytes, header declares {header.get('payload_bytes')}")
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * n or e["offset"] + e["nbytes"] > len(payload):
            raise DatasetError(f"array {e['name']} does not fit the payload")
        arrays[e["name"]] = np.frombuffer(payload, "<f4", n, e["offset"]).astype(np.float32).reshape(e["shape"])
    try:
        pre = LabeledDataset(arrays["pretrain.features"], arrays["pretrain.labels"].astype(np.int64),
                             arrays["pretrain.speakers"].astype(np.int64))
        subjects = []
        for i in range(header["n_subjects"]):
            g = lambda k: arrays[f"subject{i}.{k}"]
            test = EvalSet(g("test_positives"), g("test_negatives"), header["seconds_per_negative"][i])
            subjects.append(SubjectBundle(EnrollmentSet(g("enrollment")), g("stream"),
                                          g("stream_truth").astype(np.int64), test, i))
    except KeyError as e:
        raise DatasetError(f"dataset is missing array {e}") from None
    return pre, subjects


def dataset_digest(pre: LabeledDataset, subjects: list[SubjectBundle]) -> str:
    h = hashlib.sha256()
    for name, a in _arrays(pre, subjects):
        h.update(name.encode())
        h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return h.hexdigest()[:16]
