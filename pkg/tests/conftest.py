import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance criteria register one line each here; printed in the terminal summary
CRITERIA: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA, key=lambda k: int(k.split()[0].rstrip("abc"))):
            terminalreporter.write_line(f"{key}: {CRITERIA[key]}")


import pytest  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def e2e():
    """Default synthetic data plus the end-to-end config; pretrained models are cached across tests."""
    from types import SimpleNamespace

    from onda.config import read_yaml
    from onda.datasim import SynthConfig, generate
    return SimpleNamespace(config=read_yaml(ROOT / "configs" / "e2e.yaml"), data=generate(SynthConfig()),
                           cache={}, reports=None, seconds=None)


# A small, easy setup for structural and determinism checks that run in seconds.
TINY_SYNTH = {"n_pretrain_classes": 4, "samples_per_class": 12, "n_pretrain_speakers": 4, "n_subjects": 2,
              "stream_length": 60, "test_positives": 10, "test_negatives": 30, "feature_shape": [1, 16, 12],
              "noise_scale": 0.2, "speaker_shift": 0.3, "stream_positive_rate": 0.4, "class_separation": 1.5}
TINY_PIPELINE = {"arch": "ResNetMini", "embedding_dim": 8, "pretrain": {"epochs": 8}, "finetune": {"epochs": 1},
                 "offline_finetune": {"epochs": 1}, "pruning": {"n_probes": 2, "scoring_triplets": 8},
                 "calibration": {"n_negatives": 10}}


def tiny_data():
    from onda.config import synth_config
    from onda.datasim import generate
    return generate(synth_config(TINY_SYNTH))
