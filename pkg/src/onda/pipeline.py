"""End-to-end adaptation pipelines.

Stage vocabulary: B1 pretrain, P offline prune + fine-tune, B2 prototype /
calibration / pseudo-labelling, O1 data-aware prune before fine-tuning,
B3 fine-tune on pseudo-labels, O2 magnitude prune after fine-tuning
(followed by a second B3).
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ConfigError, PipelineConfig
from .datasim import SubjectBundle
from .evaluation import accuracy_at_far, sweep_operating_points, training_macs
from .model import EmbeddingModel, build, forward, mac_count, param_count, preset
from .pruning import (ChannelScoreTable, PruningPlan, apply_plan, array_digest, build_plan,
                      estimate_channel_traces, hap_scores_from_traces, score_l1)
from .selflearn import (CalibrationError, LabeledDataset, TrainConfig, TrainLog, _train,
                        batch_triplet_loss, calibrate_thresholds, compute_prototype, finetune,
                        pretrain, pseudo_label, sample_triplets, triplet_batch)

STAGE_ORDER = {
    "Baseline": ["B1", "B2", "B3"],
    "OfflinePruneOnly": ["B1", "P", "B2", "B3"],
    "OnDA1": ["B1", "B2", "O1", "B3"],
    "OnDA2": ["B1", "B2", "B3", "O2", "B3"],
}
ONLINE_FINETUNES = {"Baseline": 1, "OfflinePruneOnly": 1, "OnDA1": 1, "OnDA2": 2}


class StageError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        self.stage = stage
        super().__init__(f"stage {stage}: {err}")


def expected_stages(cfg: PipelineConfig) -> list[str]:
    order = list(STAGE_ORDER[cfg.variant])
    if cfg.offline_ratio > 0 and "P" not in order:
        order.insert(1, "P")
    return order


@dataclass
class PipelineReport:
    payload: dict
    timings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.payload, indent=1, sort_keys=True, default=_jsonable)

    @property
    def run_id(self) -> str:
        return self.payload["run_id"]


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _stage(name: str, model: EmbeddingModel, *, log: TrainLog | None = None,
           plan: PruningPlan | None = None, source: str | None = None, digest: str | None = None,
           **extra) -> dict:
    rec = {"stage": name, "params": param_count(model), "macs": mac_count(model),
           "data_source": source, "data_digest": digest}
    if log is not None:
        rec.update(steps=log.steps, samples=log.samples, losses=[float(x) for x in log.losses],
                   training_macs=training_macs(mac_count(model), log.samples))
    if plan is not None:
        rec["plan"] = plan.to_dict()
        rec["achieved_ratio"] = plan.achieved_ratio
    rec.update(extra)
    return rec


def _train_cfg(tc: TrainConfig, seed: int) -> TrainConfig:
    return replace(tc, seed=seed)


def _tag(s: str) -> int:
    return int.from_bytes(hashlib.sha256(s.encode()).digest()[:4], "little")


def _seed(seed: int, tag: str) -> int:
    return int(np.random.SeedSequence([seed, _tag(tag)]).generate_state(1)[0])


def _hap_plan(model: EmbeddingModel, features: np.ndarray, ds, cfg: PipelineConfig, ratio: float,
              tag: str) -> tuple[PruningPlan, str]:
    """HAP scores on a triplet batch drawn from ds (BN frozen), then a greedy plan."""
    n, alpha = cfg.pruning.scoring_triplets, cfg.finetune.alpha
    idx = sample_triplets(ds, n, _seed(cfg.seed, tag + ":batch"))
    x = triplet_batch(features, idx).astype(model.params.values.dtype)
    digest = array_digest(x)

    def closure(theta, batch):
        return batch_triplet_loss(forward(model, theta, batch), n, alpha)

    traces = estimate_channel_traces(model, closure, x, cfg.pruning.n_probes,
                                     _seed(cfg.seed, tag + ":probes"), chunk=cfg.pruning.probe_chunk)
    scores = ChannelScoreTable(hap_scores_from_traces(model, traces), "HAP", digest)
    return build_plan(scores, model, ratio), digest


# ---------------------------------------------------------------- shared stages

def _data_key(pre: LabeledDataset) -> str:
    return array_digest(pre.features, pre.labels)


def _dtype(cfg: PipelineConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def stage_pretrain(cfg: PipelineConfig, pre: LabeledDataset, cache: dict | None = None):
    key = ("B1", cfg.arch, cfg.embedding_dim, cfg.dtype, repr(cfg.pretrain), cfg.seed, _data_key(pre))
    if cache is not None and key in cache:
        return cache[key]
    spec = preset(cfg.arch, embedding_dim=cfg.embedding_dim, input_shape=tuple(pre.features.shape[1:]))
    model = build(spec, cfg.seed, dtype=_dtype(cfg))
    try:
        model, log = pretrain(model, pre, _train_cfg(cfg.pretrain, cfg.seed))
    except Exception as e:
        raise StageError("B1", e) from e
    out = (model, _stage("B1", model, log=log, source="D_pre"))
    if cache is not None:
        cache[key] = out
    return out


def run_offline_prune(cfg: PipelineConfig, pre: LabeledDataset, model: EmbeddingModel,
                      cache: dict | None = None):
    """P: HAP scores on a D_pre batch, prune to offline_ratio, fine-tune on D_pre."""
    if not cfg.offline_ratio > 0:
        raise ConfigError("offline pruning requires offline_ratio > 0")
    key = ("P", cfg.offline_ratio, repr(cfg.pruning), repr(cfg.offline_finetune), model.digest(), _data_key(pre))
    if cache is not None and key in cache:
        return cache[key]
    try:
        plan, digest = _hap_plan(model, pre.features, pre, cfg, cfg.offline_ratio, "P")
        pruned = apply_plan(model, plan)
        tuned, log = _train(pruned, pre.features, pre, _train_cfg(cfg.offline_finetune, cfg.seed), "P-finetune")
    except Exception as e:
        raise StageError("P", e) from e
    out = (tuned, _stage("P", tuned, log=log, plan=plan, source="D_pre", digest=digest))
    if cache is not None:
        cache[key] = out
    return out


def _evaluate(model: EmbeddingModel, bundle: SubjectBundle, target: float) -> dict:
    proto = compute_prototype(model, bundle.enrollment)
    op = accuracy_at_far(sweep_operating_points(model, proto, bundle.test), target)
    return {"accuracy": op.tpr, "far_h": op.far_h, "threshold": op.threshold, "feasible": op.feasible}


def _b2(model: EmbeddingModel, bundle: SubjectBundle, cfg: PipelineConfig):
    proto = compute_prototype(model, bundle.enrollment)
    negs = bundle.calibration_negatives(cfg.calibration.n_negatives)
    k_plus = cfg.calibration.k_plus
    while True:
        try:
            th = calibrate_thresholds(model, proto, bundle.enrollment, negs, k_plus,
                                      cfg.calibration.neg_percentile)
            break
        except CalibrationError:
            if k_plus <= 0:
                raise
            k_plus = 0.0 if k_plus <= 0.25 else k_plus / 2
    dft = pseudo_label(model, proto, th, bundle.adaptation_stream)
    truth = bundle.stream_truth[dft.source_index]
    pos = dft.labels == 1
    precision = float(truth[pos].mean()) if pos.any() else None
    rec = _stage("B2", model, source="enrollment+stream", digest=dft.digest(),
                 gamma_plus=th.gamma_plus, gamma_minus=th.gamma_minus, k_plus_used=k_plus,
                 n_positive=dft.n_positive, n_negative=dft.n_negative, discarded=dft.discarded_count,
                 pseudo_positive_precision=precision)
    return dft, rec


def _subject_run(cfg: PipelineConfig, start: EmbeddingModel, bundle: SubjectBundle) -> dict:
    sid = bundle.subject_id
    stages = []
    model = start.copy()
    before = _evaluate(model, bundle, cfg.target_far_h)
    try:
        dft, rec = _b2(model, bundle, cfg)
    except Exception as e:
        raise StageError("B2", e) from e
    stages.append(rec)
    ft = _train_cfg(cfg.finetune, cfg.seed)

    def b3(m, tag):
        try:
            m, log = finetune(m, dft, ft, tag=f"{tag}:{sid}")
        except Exception as e:
            raise StageError("B3", e) from e
        stages.append(_stage("B3", m, log=log, source="D_ft", digest=dft.digest()))
        return m

    if cfg.variant == "OnDA1":
        if dft.n_positive < 2 or dft.n_negative < 1:
            raise StageError("O1", ValueError(
                f"D_ft too small for scoring: {dft.n_positive} positives, {dft.n_negative} negatives"))
        try:
            plan, digest = _hap_plan(model, dft.features, dft, cfg, cfg.online_ratio, f"O1:{sid}")
            model = apply_plan(model, plan)
        except Exception as e:
            raise StageError("O1", e) from e
        stages.append(_stage("O1", model, plan=plan, source="D_ft", digest=digest))
        model = b3(model, "B3")
    elif cfg.variant == "OnDA2":
        model = b3(model, "B3")
        try:
            plan = build_plan(score_l1(model), model, cfg.online_ratio)
            model = apply_plan(model, plan)
        except Exception as e:
            raise StageError("O2", e) from e
        stages.append(_stage("O2", model, plan=plan, source="weights", digest=""))
        model = b3(model, "B3-repeat")
    else:
        model = b3(model, "B3")
    after = _evaluate(model, bundle, cfg.target_far_h)
    online = [s for s in stages if s["stage"] == "B3"]
    return {"subject": sid, "stages": stages, "accuracy_before": before["accuracy"],
            **after, "params": param_count(model), "macs": mac_count(model),
            "online_training_macs": sum(s["training_macs"] for s in online),
            "online_training_steps": sum(s["steps"] for s in online)}


def run_pipeline(cfg: PipelineConfig, data, cache: dict | None = None) -> PipelineReport:
    """Run one configured variant over every subject."""
    cfg.validate()
    pre, subjects = data
    if cfg.subjects is not None:
        subjects = [subjects[i] for i in cfg.subjects]
    t0 = time.perf_counter()
    timings = {}
    model, b1 = stage_pretrain(cfg, pre, cache)
    timings["B1"] = time.perf_counter() - t0
    shared = [b1]
    if cfg.offline_ratio > 0:
        t = time.perf_counter()
        model, p = run_offline_prune(cfg, pre, model, cache)
        shared.append(p)
        timings["P"] = time.perf_counter() - t
    per_subject = []
    for b in subjects:
        t = time.perf_counter()
        per_subject.append(_subject_run(cfg, model, b))
        timings[f"subject{b.subject_id}"] = time.perf_counter() - t
    mean = lambda k: float(np.mean([r[k] for r in per_subject])) if per_subject else None
    accs = [r["accuracy"] for r in per_subject]
    payload = {
        "run_id": cfg.run_id(), "config": cfg.to_dict(), "seed": cfg.seed, "variant": cfg.variant,
        "stage_order": [s["stage"] for s in shared] + ([s["stage"] for s in per_subject[0]["stages"]]
                                                       if per_subject else []),
        "shared_stages": shared, "subjects": per_subject,
        "pretrained_params": b1["params"], "pretrained_macs": b1["macs"],
        "final_params": mean("params"), "final_macs": mean("macs"),
        "accuracy": mean("accuracy"), "accuracy_before": mean("accuracy_before"),
        "accuracy_min": float(min(accs)) if accs else None, "accuracy_max": float(max(accs)) if accs else None,
        "online_training_macs": mean("online_training_macs"),
        "online_training_steps": mean("online_training_steps"),
        "target_far_h": cfg.target_far_h, "error": None,
    }
    timings["total"] = time.perf_counter() - t0
    return PipelineReport(payload, timings)


def _require(cfg: PipelineConfig, variant: str):
    if cfg.variant != variant:
        raise ConfigError(f"expected variant {variant}, got {cfg.variant}")


def run_baseline(cfg: PipelineConfig, data, cache=None) -> PipelineReport:
    _require(cfg, "Baseline")
    return run_pipeline(cfg, data, cache)


def run_onda1(cfg: PipelineConfig, data, cache=None) -> PipelineReport:
    _require(cfg, "OnDA1")
    return run_pipeline(cfg, data, cache)


def run_onda2(cfg: PipelineConfig, data, cache=None) -> PipelineReport:
    _require(cfg, "OnDA2")
    return run_pipeline(cfg, data, cache)


def _error_report(cfg: PipelineConfig, err: Exception) -> PipelineReport:
    return PipelineReport({"run_id": cfg.run_id(), "config": cfg.to_dict(), "seed": cfg.seed,
                           "variant": cfg.variant, "error": f"{type(err).__name__}: {err}"})


_WORKER: dict = {}


def _init_worker(data):
    _WORKER.clear()
    _WORKER.update(data=data, cache={})


def _grid_worker(cfg: PipelineConfig) -> PipelineReport:
    try:
        return run_pipeline(cfg, _WORKER["data"], _WORKER["cache"])
    except Exception as e:
        return _error_report(cfg, e)


def run_grid(cfgs: list[PipelineConfig], data, workers: int = 1, progress=None,
             cache: dict | None = None) -> list[PipelineReport]:
    """One report per config, in input order; per-run failures become error reports.

    Results do not depend on worker count or order: every run derives its
    RNG streams from its own config, and caches are keyed by content.
    """
    for c in cfgs:
        c.validate()
    if workers > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(data,)) as ex:
            out = []
            for i, r in enumerate(ex.map(_grid_worker, cfgs)):
                if progress:
                    progress(i, len(cfgs), cfgs[i])
                out.append(r)
            return out
    cache = {} if cache is None else cache
    out = []
    for i, c in enumerate(cfgs):
        if progress:
            progress(i, len(cfgs), c)
        try:
            out.append(run_pipeline(c, data, cache))
        except Exception as e:
            out.append(_error_report(c, e))
    return out
