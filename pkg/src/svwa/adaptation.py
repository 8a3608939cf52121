"""Test-time adaptation: TENT and sampling-variation weight averaging (SVWA).

SVWA adapts ``V`` copies of the BN affine parameters, one per sampling
variation of the test batch, each by entropy minimization, and writes their
elementwise mean back into the model.  The frozen backbone is shared by all
branches; only the small ``gamma``/``beta`` sets are duplicated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .corruptions import AugmentationSpec, apply_augmentation
from .data import Batch
from .geometry import PointCloud, cloud_seeds, generate_variations, mix_seed, patchify_batch
from .model import ModelState, forward_logits, norm_grads
from .numerics import EVAL, TRAIN, AdamWState, ParamSet

log = logging.getLogger(__name__)

PARALLEL = "parallel"
SEQUENTIAL = "sequential"
METHODS = ("source-only", "tent", "svwa")
VARIATION_SOURCES = ("sampling", "jitter", "rotation", "flip", "scale", "jitter+sampling")

_AUGMENTATION_OF = {
    "jitter": "jitter",
    "jitter+sampling": "jitter",
    "rotation": "rotation-z",
    "flip": "horizontal-flip",
    "scale": "uniform-scale",
}


@dataclass
class AdaptConfig:
    nv: int = 6
    iterations: int = 1
    mode: str = PARALLEL
    lr: float = 1e-3
    batch_size: int = 128
    base_seed: int = 0
    prediction_seed: int = 0
    variation_source: str = "sampling"
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    # start every batch's branches from the pretrained gamma/beta instead of the running average
    reset_to_pretrained: bool = False

    def __post_init__(self):
        if self.nv < 1 or self.iterations < 1:
            raise ValueError("nv and iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.mode not in (PARALLEL, SEQUENTIAL):
            raise ValueError(f"mode must be {PARALLEL!r} or {SEQUENTIAL!r}")
        if self.variation_source not in VARIATION_SOURCES:
            raise ValueError(f"variation_source must be one of {VARIATION_SOURCES}")

    def optimizer(self, params: ParamSet) -> AdamWState:
        return AdamWState.for_params(
            params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay
        )


@dataclass
class AdaptBranch:
    index: int
    norm_params: ParamSet
    optimizer: AdamWState


def make_branches(state: ModelState, cfg: AdaptConfig) -> list[AdaptBranch]:
    """``cfg.nv`` branches; in sequential mode they share one optimizer."""
    params = state.get_norm_params()
    shared = cfg.optimizer(params) if cfg.mode == SEQUENTIAL else None
    return [
        AdaptBranch(v, nx.copy_params(params), shared or cfg.optimizer(params))
        for v in range(cfg.nv)
    ]


@dataclass
class TentStep:
    entropy_before: float
    entropy_after: float | None
    entropies: list[float]


def tent_adapt(
    state: ModelState,
    points: np.ndarray,
    opt: AdamWState,
    iterations: int = 1,
    norm_params: ParamSet | None = None,
    track_after: bool = True,
) -> tuple[ParamSet, TentStep]:
    """Entropy minimization over BN affine parameters with batch statistics.

    Works on ``norm_params`` (a copy of the model's if omitted) and returns
    the updated set; the model itself is not modified.
    """
    params = state.get_norm_params() if norm_params is None else norm_params
    entropies = []
    for _ in range(iterations):
        value, grads = norm_grads(state, points, norm_mode=TRAIN, norm_params=params)
        entropies.append(value)
        nx.adamw_step(params, grads, opt)
    after = None
    if track_after:
        logits, _ = forward_logits(state, points, TRAIN, params)
        after = nx.softmax_entropy(logits)[0]
    return params, TentStep(entropies[0], after, entropies)


def weight_average(param_sets: Sequence[ParamSet]) -> ParamSet:
    """Elementwise arithmetic mean of structurally identical parameter sets.

    Values are sorted per coordinate and accumulated as offsets from the
    smallest, so the result does not depend on the order of ``param_sets``
    and averaging identical sets returns them bitwise.
    """
    if not param_sets:
        raise ValueError("nothing to average")
    first = param_sets[0]
    for other in param_sets[1:]:
        nx.check_aligned(first, other, "averaged parameter sets")
    k = len(param_sets)
    out = {}
    for name in first:
        stack = np.sort(np.stack([np.asarray(p[name], dtype=np.float64) for p in param_sets]), axis=0)
        low = stack[0]
        out[name] = (low + (stack - low).sum(axis=0) / k).astype(first[name].dtype)
    return out


# --------------------------------------------------------------------------
# views of a batch
# --------------------------------------------------------------------------


def canonical_points(clouds: Sequence[PointCloud], m: int, prediction_seed: int, batch_index: int) -> np.ndarray:
    """The single FPS sampling every method predicts on."""
    seeds = cloud_seeds(mix_seed(prediction_seed, batch_index), len(clouds))
    return np.stack([p.centers for p in patchify_batch(clouds, m, 1, seeds)])


def variation_views(
    clouds: Sequence[PointCloud],
    cfg: AdaptConfig,
    m: int,
    batch_index: int,
) -> list[np.ndarray]:
    """The ``cfg.nv`` (B, M, 3) inputs the SVWA branches adapt on."""
    base = mix_seed(cfg.base_seed, batch_index)
    source = cfg.variation_source
    if source == "sampling":
        vs = generate_variations(clouds, cfg.nv, m, 1, base)
        return [vs.centers(v) for v in range(cfg.nv)]
    views = []
    for v in range(cfg.nv):
        aug = apply_augmentation(clouds, AugmentationSpec(_AUGMENTATION_OF[source], mix_seed(base, v)))
        if source == "jitter+sampling":
            seeds = cloud_seeds(mix_seed(base, cfg.nv + v), len(clouds))
            views.append(np.stack([p.centers for p in patchify_batch(aug, m, 1, seeds)]))
        else:
            views.append(canonical_points(aug, m, cfg.prediction_seed, batch_index))
    return views


# --------------------------------------------------------------------------
# SVWA
# --------------------------------------------------------------------------


@dataclass
class BatchRecord:
    entropy_before: float
    entropy_after: float
    predictions: np.ndarray
    accuracy: float | None
    branch_entropies: list[float] = field(default_factory=list)


def _accuracy(predictions: np.ndarray, clouds: Sequence[PointCloud]) -> float | None:
    labels = [c.label for c in clouds]
    if any(label is None for label in labels):
        return None
    return float(np.mean(predictions == np.asarray(labels)))


def svwa_adapt(
    state: ModelState,
    clouds: Sequence[PointCloud],
    cfg: AdaptConfig,
    branches: list[AdaptBranch],
    batch_index: int = 0,
    views: Sequence[np.ndarray] | None = None,
    start_params: ParamSet | None = None,
) -> tuple[np.ndarray, list[AdaptBranch], BatchRecord]:
    """Adapt one batch with SVWA and predict with the averaged parameters.

    ``views`` overrides the generated variations (one (B, M, 3) array per
    branch).  ``start_params`` replaces the model's current gamma/beta as the
    starting point of the branches.  The model's gamma/beta are overwritten
    with the branch average.
    """
    if len(branches) != cfg.nv:
        raise ValueError(f"expected {cfg.nv} branches, got {len(branches)}")
    m = state.config.fps_points
    if views is None:
        views = variation_views(clouds, cfg, m, batch_index)
    canon = canonical_points(clouds, m, cfg.prediction_seed, batch_index)

    start = state.get_norm_params() if start_params is None else nx.copy_params(start_params)
    logits, _ = forward_logits(state, canon, TRAIN, start)
    entropy_before = nx.softmax_entropy(logits)[0]

    branch_entropies = []
    carried = start
    for branch, view in zip(branches, views):
        # parallel: every branch restarts from the same point; sequential: chain
        init = start if cfg.mode == PARALLEL else carried
        branch.norm_params, step = tent_adapt(
            state, view, branch.optimizer, cfg.iterations, nx.copy_params(init), track_after=False
        )
        carried = branch.norm_params
        branch_entropies.append(step.entropy_before)

    state.set_norm_params(weight_average([b.norm_params for b in branches]))
    logits, _ = forward_logits(state, canon, TRAIN)
    entropy_after = nx.softmax_entropy(logits)[0]
    predictions = logits.argmax(axis=1)
    record = BatchRecord(entropy_before, entropy_after, predictions,
                         _accuracy(predictions, clouds), branch_entropies)
    return predictions, branches, record


# --------------------------------------------------------------------------
# streams
# --------------------------------------------------------------------------


@dataclass
class AdaptReport:
    method: str
    records: list[BatchRecord] = field(default_factory=list)
    adaptable_fraction: float = 0.0
    branches: int = 0

    @property
    def overhead_fraction(self) -> float:
        return self.branches * self.adaptable_fraction

    @property
    def num_samples(self) -> int:
        return sum(len(r.predictions) for r in self.records)

    @property
    def accuracy(self) -> float | None:
        if not self.records or any(r.accuracy is None for r in self.records):
            return None
        correct = sum(r.accuracy * len(r.predictions) for r in self.records)
        return correct / self.num_samples

    @property
    def entropy_before(self) -> float:
        return float(np.mean([r.entropy_before for r in self.records])) if self.records else float("nan")

    @property
    def entropy_after(self) -> float:
        return float(np.mean([r.entropy_after for r in self.records])) if self.records else float("nan")


def _clouds_of(batch) -> list[PointCloud]:
    return batch.clouds if isinstance(batch, Batch) else list(batch)


def run_stream(
    state: ModelState,
    stream: Iterable,
    cfg: AdaptConfig,
    method: str,
) -> AdaptReport:
    """Evaluate ``method`` online over a stream of batches.

    ``source-only`` predicts with running statistics and never updates the
    model; ``tent`` and ``svwa`` adapt continually, carrying gamma/beta and
    optimizer state from batch to batch.  Batches of fewer than 2 clouds are
    skipped for every method so all methods score the same samples.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    m = state.config.fps_points
    pretrained = state.get_norm_params()
    n_branches = {"source-only": 0, "tent": 1, "svwa": cfg.nv}[method]
    report = AdaptReport(method, adaptable_fraction=state.adaptable_fraction(), branches=n_branches)
    branches = make_branches(state, cfg) if method == "svwa" else None
    tent_opt = cfg.optimizer(pretrained) if method == "tent" else None

    for batch_index, batch in enumerate(stream):
        clouds = _clouds_of(batch)
        if len(clouds) < 2:
            log.warning("skipping batch %d with %d cloud(s)", batch_index, len(clouds))
            continue
        if method == "svwa":
            start = pretrained if cfg.reset_to_pretrained else None
            _, branches, record = svwa_adapt(state, clouds, cfg, branches, batch_index, start_params=start)
        else:
            canon = canonical_points(clouds, m, cfg.prediction_seed, batch_index)
            if method == "source-only":
                logits, _ = forward_logits(state, canon, EVAL)
                before = after = nx.softmax_entropy(logits)[0]
                branch_entropies = []
            else:
                start = nx.copy_params(pretrained) if cfg.reset_to_pretrained else None
                params, step = tent_adapt(state, canon, tent_opt, cfg.iterations, start, track_after=False)
                state.set_norm_params(params)
                logits, _ = forward_logits(state, canon, TRAIN)
                before, after = step.entropy_before, nx.softmax_entropy(logits)[0]
                branch_entropies = [step.entropy_before]
            predictions = logits.argmax(axis=1)
            record = BatchRecord(before, after, predictions, _accuracy(predictions, clouds), branch_entropies)
        report.records.append(record)
    return report
