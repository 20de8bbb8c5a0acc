"""Structured output-channel pruning.

Channels are scored (L1 magnitude or Hessian-aware), ranked globally, and the
lowest-ranked ones are removed until a target fraction of parameters is gone.
Layers tied by a residual junction (shared ``group_id``) or by a depthwise
layer that consumes them are pruned together, as one unit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import ParamVector, Tensor, hvp_many
from .model import PRODUCERS, ArchSpec, EmbeddingModel, layout_for, param_count

CRITERIA = ("L1", "HAP")
WEIGHT_ROLES = ("weight", "bias")


class PruningError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ChannelId:
    layer_index: int
    channel_index: int
    group_id: str | None = field(default=None, compare=False)


@dataclass(frozen=True)
class PruneUnit:
    """Layers whose output channels are removed together."""
    name: str
    members: tuple[int, ...]
    channels: int
    prunable: bool


def prune_units(spec: ArchSpec) -> list[PruneUnit]:
    """Union channel-coupled producer layers: shared group_id, depthwise -> its producer."""
    prods = spec.producers()
    parent = {i: i for i in prods}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    first_of_group: dict[str, int] = {}
    prev = None
    for i in prods:
        l = spec.blocks[i]
        if l.group_id is not None:
            union(i, first_of_group.setdefault(l.group_id, i))
        if l.kind == "depthwise" and prev is not None:
            union(i, prev)
        prev = i
    units: dict[int, list[int]] = {}
    for i in prods:
        units.setdefault(find(i), []).append(i)
    out = []
    for root, members in sorted(units.items()):
        layers = [spec.blocks[i] for i in members]
        gid = next((l.group_id for l in layers if l.group_id is not None), None)
        prunable = all(l.prunable and l.kind != "head" for l in layers)
        out.append(PruneUnit(gid or f"L{root}", tuple(members), layers[0].out_channels, prunable))
    return out


def channel_ids(spec: ArchSpec) -> list[ChannelId]:
    """Every prunable (layer, channel) of the model."""
    out = []
    for u in prune_units(spec):
        if u.prunable:
            out += [ChannelId(i, c, u.name) for i in u.members for c in range(u.channels)]
    return sorted(out)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class ChannelScoreTable:
    scores: dict[ChannelId, float]
    criterion: str
    data_digest: str = ""

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise PruningError(f"unknown criterion {self.criterion!r}")
        bad = [k for k, v in self.scores.items() if not (np.isfinite(v) and v >= 0)]
        if bad:
            raise PruningError(f"scores must be finite and non-negative; offending channels {bad[:5]}")

    def digest(self) -> str:
        return _digest([[k.layer_index, k.channel_index, repr(float(v))]
                        for k, v in sorted(self.scores.items())])

    def covers(self, spec: ArchSpec) -> bool:
        return set(self.scores) == set(channel_ids(spec))


# ---------------------------------------------------------------- scores

def _slice_indices(model: EmbeddingModel, cid: ChannelId) -> np.ndarray:
    return model.params.layout.channel_indices(cid.layer_index, cid.channel_index, WEIGHT_ROLES)


def score_l1(model: EmbeddingModel) -> ChannelScoreTable:
    """Sum of |w| over the kernel slice (weights and bias) producing each channel."""
    theta = model.params.values
    scores = {cid: float(np.abs(theta[_slice_indices(model, cid)]).sum())
              for cid in channel_ids(model.spec)}
    return ChannelScoreTable(scores, "L1", "")


def estimate_channel_traces(model: EmbeddingModel, loss_closure: Callable[[Tensor, object], Tensor],
                            batch, n_probes: int, rng_seed: int, clamp: bool = True,
                            chunk: int = 8) -> dict[ChannelId, float]:
    """Hutchinson estimate of the Hessian block trace of every channel slice.

    For a Rademacher probe v, sum_{i in c} v_i (Hv)_i is unbiased for Tr(H_c).
    """
    if n_probes < 1:
        raise PruningError("n_probes must be >= 1")
    if batch is None or (hasattr(batch, "__len__") and len(batch) == 0):
        raise PruningError("scoring batch is empty")
    ids = channel_ids(model.spec)
    slices = [_slice_indices(model, cid) for cid in ids]
    rng = np.random.default_rng(rng_seed)
    n = len(model.params)
    dtype = model.params.values.dtype
    acc = np.zeros(len(ids))
    fn = lambda theta: loss_closure(theta, batch)
    done = 0
    while done < n_probes:
        k = min(chunk, n_probes - done)
        probes = [rng.choice(np.array([-1.0, 1.0], dtype=dtype), size=n) for _ in range(k)]
        for v, hv in zip(probes, hvp_many(fn, model.params, probes)):
            prod = v * hv.values
            if not np.all(np.isfinite(prod)):
                raise FloatingPointError("non-finite Hessian-vector product during trace estimation")
            acc += [prod[idx].sum() for idx in slices]
        done += k
    est = acc / n_probes
    if clamp:
        est = np.maximum(est, 0.0)
    return {cid: float(t) for cid, t in zip(ids, est)}


def hap_scores_from_traces(model: EmbeddingModel, traces: dict[ChannelId, float]) -> dict[ChannelId, float]:
    theta = model.params.values
    out = {}
    for cid, tr in traces.items():
        w = theta[_slice_indices(model, cid)]
        out[cid] = float(max(tr, 0.0) / len(w) * float(np.dot(w, w)))
    return out


def score_hap(model: EmbeddingModel, loss_closure, batch, n_probes: int, rng_seed: int,
              data_digest: str | None = None) -> ChannelScoreTable:
    """(Tr(H_c) / n_c) * ||W_c||^2 with Hutchinson traces on the scoring batch."""
    traces = estimate_channel_traces(model, loss_closure, batch, n_probes, rng_seed)
    if data_digest is None:
        data_digest = array_digest(np.asarray(batch))
    return ChannelScoreTable(hap_scores_from_traces(model, traces), "HAP", data_digest)


# ---------------------------------------------------------------- plans

@dataclass
class PruningPlan:
    removals: frozenset
    target_ratio: float
    achieved_ratio: float
    criterion: str
    scores_digest: str
    data_digest: str
    model_digest: str

    def to_dict(self) -> dict:
        return {"criterion": self.criterion, "target_ratio": self.target_ratio,
                "achieved_ratio": self.achieved_ratio, "scores_digest": self.scores_digest,
                "data_digest": self.data_digest, "model_digest": self.model_digest,
                "removals": [[c.layer_index, c.channel_index, c.group_id] for c in sorted(self.removals)]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        return cls(frozenset(ChannelId(int(a), int(b), g) for a, b, g in d["removals"]),
                   float(d["target_ratio"]), float(d["achieved_ratio"]), d["criterion"],
                   d["scores_digest"], d["data_digest"], d["model_digest"])

    @classmethod
    def empty(cls, model: EmbeddingModel) -> "PruningPlan":
        return cls(frozenset(), 0.0, 0.0, "none", "", "", model.digest())


def _kept(spec: ArchSpec, removals) -> dict[int, np.ndarray]:
    drop: dict[int, set] = {}
    for c in removals:
        drop.setdefault(c.layer_index, set()).add(c.channel_index)
    return {i: np.array([c for c in range(spec.blocks[i].out_channels) if c not in drop.get(i, ())], dtype=int)
            for i in spec.producers()}


def build_plan(scores: ChannelScoreTable, model: EmbeddingModel, target_ratio: float) -> PruningPlan:
    """Greedy global removal in ascending score order until the removed fraction reaches target."""
    if not 0 < target_ratio < 1:
        raise PruningError(f"target ratio must lie in (0, 1), got {target_ratio}")
    spec = model.spec
    if not scores.covers(spec):
        raise PruningError("score table does not cover the model's prunable channels")
    units = [u for u in prune_units(spec) if u.prunable]
    cands = []
    for u in units:
        for c in range(u.channels):
            s = sum(scores.scores[ChannelId(i, c, u.name)] for i in u.members)
            cands.append((s, u.members[0], c, u))
    cands.sort(key=lambda t: (t[0], t[1], t[2]))
    total = param_count(spec)
    width = spec.channels()
    removals: list[ChannelId] = []
    removed_frac = 0.0
    for _, _, c, u in cands:
        if width[u.members[0]] <= 1:
            continue
        for i in u.members:
            width[i] -= 1
        removals += [ChannelId(i, c, u.name) for i in u.members]
        removed_frac = 1 - param_count(spec.with_channels(width)) / total
        if removed_frac >= target_ratio:
            break
    else:
        raise PruningError(f"target ratio {target_ratio} unreachable; max achievable is {removed_frac:.6f}")
    return PruningPlan(frozenset(removals), float(target_ratio), float(removed_frac), scores.criterion,
                       scores.digest(), scores.data_digest, model.digest())


def pruned_spec(spec: ArchSpec, removals) -> ArchSpec:
    kept = _kept(spec, removals)
    return spec.with_channels({i: len(k) for i, k in kept.items()})


def achieved_ratio(plan: PruningPlan, model: EmbeddingModel) -> float:
    before = param_count(model.spec)
    after = param_count(pruned_spec(model.spec, plan.removals))
    return 1 - after / before


def _check_plan(plan: PruningPlan, model: EmbeddingModel) -> None:
    if plan.model_digest != model.digest():
        raise PruningError(f"plan was built for model {plan.model_digest}, got {model.digest()}")
    valid = set(channel_ids(model.spec))
    stray = [c for c in plan.removals if c not in valid]
    if stray:
        raise PruningError(f"plan removes channels that are not prunable: {sorted(stray)[:5]}")
    for u in prune_units(model.spec):
        sets = [{c.channel_index for c in plan.removals if c.layer_index == i} for i in u.members]
        if any(s != sets[0] for s in sets):
            raise PruningError(f"unit {u.name} is not removed atomically")
        if len(sets[0]) >= u.channels:
            raise PruningError(f"unit {u.name} would lose every channel")


def channel_masks(model: EmbeddingModel, plan: PruningPlan) -> dict[int, np.ndarray]:
    """0/1 output masks realising the plan on the unpruned network."""
    masks = {}
    for c in plan.removals:
        m = masks.setdefault(c.layer_index, np.ones(model.spec.blocks[c.layer_index].out_channels))
        m[c.channel_index] = 0.0
    return masks


def apply_plan(model: EmbeddingModel, plan: PruningPlan) -> EmbeddingModel:
    """Dense sub-network without the removed channels and their downstream input slices."""
    _check_plan(plan, model)
    spec = model.spec
    kept = _kept(spec, plan.removals)
    new_spec = pruned_spec(spec, plan.removals).validate()
    new_layout = layout_for(new_spec)
    old = model.params.unflatten()
    prev_kept = None
    arrays = {}
    for i, l in enumerate(spec.blocks):
        if l.kind not in PRODUCERS:
            continue
        out_k = kept[i]
        for e in model.params.layout.layer_entries(i):
            a = old[e.name]
            if l.kind == "head":
                a = a[:, prev_kept] if e.role == "weight" else a
            else:
                a = a[out_k]
                if e.role == "weight" and l.kind != "depthwise" and prev_kept is not None:
                    a = a[:, prev_kept]
            arrays[e.name] = a
        prev_kept = out_k
    params = ParamVector.flatten(arrays, new_layout)
    params.values = params.values.astype(model.params.values.dtype)
    stats = {i: (m[kept[i]].copy(), v[kept[i]].copy()) for i, (m, v) in model.bn_stats.items()}
    return EmbeddingModel(new_spec, params, stats, model.seed)
