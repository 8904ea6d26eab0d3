"""Contrastive objectives built on audio-to-pixel cosine similarity.

An audio embedding probes every spatial cell of a visual feature map,
giving a similarity map over the image. Two soft thresholds split that map
into confident-source, confident-background, and uncertain cells; the loss
then pulls the confident-source similarity above two kinds of negatives:
the same image's background cells (hard) and other clips' images (easy).

Everything is composed from the differentiable op set in `tensor`, so
gradients flow through the soft masks as well as the similarities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, apply

# Soft-count denominators never drop below this.
COUNT_GUARD = 1e-8

MODES = ("selfsup", "oracle")


@dataclass(frozen=True)
class LossConfig:
    """Thresholds, temperature, and term toggles for both objectives.

    `normalize_easy` averages the easy-negative term over the other clips
    instead of summing it; off by default so the objective scales with
    batch size the way the summed form does.
    """

    eps_pos: float = 0.65
    eps_neg: float = 0.4
    temperature: float = 0.03
    include_hard_negatives: bool = True
    include_easy_negatives: bool = True
    normalize_easy: bool = False
    mode: str = "selfsup"

    def validate(self) -> None:
        problems = []
        if not self.temperature > 0:
            problems.append(f"temperature must be > 0, got {self.temperature}")
        for name, value in (("eps_pos", self.eps_pos), ("eps_neg", self.eps_neg)):
            if not -1.0 < value < 1.0:
                problems.append(f"{name} must lie in (-1, 1), got {value}")
        if self.eps_pos < self.eps_neg:
            problems.append(
                f"eps_pos ({self.eps_pos}) must be >= eps_neg ({self.eps_neg})"
            )
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.include_hard_negatives or self.include_easy_negatives):
            problems.append("at least one negative term must be enabled")
        if problems:
            raise ValueError("invalid loss config: " + "; ".join(problems))


@dataclass
class TriMap:
    """Soft three-way split of a similarity map.

    above_pos and above_neg are soft indicators that a cell's similarity
    exceeds the positive / negative threshold; above_pos <= above_neg holds
    elementwise because the thresholds are ordered. The uncertain band
    (strictly between the thresholds) is detached, for visualization only.
    """

    above_pos: Tensor
    above_neg: Tensor
    uncertain: np.ndarray
    eps_pos: float
    eps_neg: float
    temperature: float


@dataclass
class LossBatch:
    """k paired samples: audio embeddings [c] and visual maps [c,h,w].

    masks carries per-sample binary ground truth [h,w] and must be present
    exactly when the oracle objective is used.
    """

    audio: Sequence[Tensor]
    visual: Sequence[Tensor]
    masks: Optional[Sequence[np.ndarray]] = None


@dataclass
class LossOutput:
    loss: Tensor  # scalar, on tape
    positives: np.ndarray  # [k] detached positive-region means
    negatives: np.ndarray  # [k] detached combined negative terms
    per_sample: np.ndarray  # [k] detached per-sample losses
    maps: List[Tensor]  # self-similarity maps, one [h,w] per sample
    trimaps: Optional[List[TriMap]] = None  # selfsup mode only


def _const(value, shape, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def _cosine_from_unit(unit_audio: Tensor, unit_visual: Tensor) -> Tensor:
    c, h, w = unit_visual.data.shape
    row = apply("reshape", unit_audio, shape=(1, c))
    cols = apply("reshape", unit_visual, shape=(c, h * w))
    return apply("reshape", apply("matmul", row, cols), shape=(h, w))


def correspondence_map(audio_vec: Tensor, visual_map: Tensor) -> Tensor:
    """Cosine similarity between one audio embedding and every visual cell.

    Returns an [h,w] map with entries in [-1, 1]; differentiable with
    respect to both inputs.
    """
    if audio_vec.data.ndim != 1:
        raise ShapeError(
            f"correspondence_map: audio must be rank 1, got {audio_vec.data.shape}"
        )
    if visual_map.data.ndim != 3:
        raise ShapeError(
            f"correspondence_map: visual must be rank 3, got {visual_map.data.shape}"
        )
    if audio_vec.data.shape[0] != visual_map.data.shape[0]:
        raise ShapeError(
            "correspondence_map: channel mismatch "
            f"{audio_vec.data.shape[0]} vs {visual_map.data.shape[0]}"
        )
    unit_a = apply("normalize", audio_vec, axis=0)
    unit_v = apply("normalize", visual_map, axis=0)
    return _cosine_from_unit(unit_a, unit_v)


def soft_threshold(sim: Tensor, threshold: float, temperature: float) -> Tensor:
    """Smoothed step: sigmoid((sim - threshold) / temperature)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    shifted = apply(
        "sub", sim, _const(threshold, sim.data.shape, sim.data.dtype)
    )
    return apply("sigmoid", apply("scalar_mul", shifted, value=1.0 / temperature))


def trimap(sim: Tensor, cfg: LossConfig) -> TriMap:
    cfg.validate()
    return TriMap(
        above_pos=soft_threshold(sim, cfg.eps_pos, cfg.temperature),
        above_neg=soft_threshold(sim, cfg.eps_neg, cfg.temperature),
        uncertain=(sim.data > cfg.eps_neg) & (sim.data < cfg.eps_pos),
        eps_pos=cfg.eps_pos,
        eps_neg=cfg.eps_neg,
        temperature=cfg.temperature,
    )


def _guarded_sum(x: Tensor) -> Tensor:
    # max(sum(x), COUNT_GUARD) composed from the op set
    total = apply("sum", x)
    guard = _const(COUNT_GUARD, (), x.data.dtype)
    return apply("add", apply("relu", apply("sub", total, guard)), guard)


def _weighted_mean(weights: Tensor, values: Tensor) -> Tensor:
    return apply("div", apply("inner", weights, values), _guarded_sum(weights))


def _softplus(d: Tensor) -> Tensor:
    # log(1 + exp(d)) as relu(d) + log(1 + exp(-|d|)): safe at large |d|
    pos = apply("relu", d)
    mag = apply("add", pos, apply("relu", apply("scalar_mul", d, value=-1.0)))
    decayed = apply("exp", apply("scalar_mul", mag, value=-1.0))
    one = _const(1.0, (), d.data.dtype)
    return apply("add", pos, apply("log", apply("add", one, decayed)))


def _check_batch(batch: LossBatch, want_masks: bool) -> tuple:
    k = len(batch.audio)
    if k < 1:
        raise ValueError("batch is empty")
    if len(batch.visual) != k:
        raise ShapeError(
            f"batch has {k} audio embeddings but {len(batch.visual)} visual maps"
        )
    shape = batch.visual[0].data.shape
    if len(shape) != 3:
        raise ShapeError(f"visual maps must be rank 3, got {shape}")
    c, h, w = shape
    for i in range(k):
        if batch.visual[i].data.shape != shape:
            raise ShapeError(
                f"visual map {i} has shape {batch.visual[i].data.shape}, "
                f"expected {shape}"
            )
        if batch.audio[i].data.shape != (c,):
            raise ShapeError(
                f"audio embedding {i} has shape {batch.audio[i].data.shape}, "
                f"expected ({c},)"
            )
    if want_masks:
        if batch.masks is None or len(batch.masks) != k:
            raise ValueError("oracle objective needs one binary mask per sample")
        for i, m in enumerate(batch.masks):
            m = np.asarray(m)
            if m.shape != (h, w):
                raise ShapeError(
                    f"mask {i} has shape {m.shape}, expected {(h, w)}"
                )
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"mask {i} is not binary")
            filled = int(m.sum())
            if filled == 0 or filled == h * w:
                raise ValueError(
                    f"mask {i} must cover some but not all cells, covers {filled}"
                )
    elif batch.masks is not None:
        raise ValueError("masks are only accepted by the oracle objective")
    return k, c, h, w


def _easy_negatives(
    unit_audio: List[Tensor], col_totals: List[Tensor], i: int, hw: int, normalize: bool
) -> Optional[Tensor]:
    k = len(unit_audio)
    total = None
    for j in range(k):
        if j == i:
            continue
        term = apply("inner", unit_audio[i], col_totals[j])
        total = term if total is None else apply("add", total, term)
    if total is None:
        return None
    scale = 1.0 / hw
    if normalize and k > 1:
        scale /= k - 1
    return apply("scalar_mul", total, value=scale)


def _assemble(pos_terms, neg_terms, self_maps, trimaps) -> LossOutput:
    k = len(pos_terms)
    total = None
    per_sample = np.empty(k, dtype=np.float64)
    for i in range(k):
        ell = _softplus(apply("sub", neg_terms[i], pos_terms[i]))
        per_sample[i] = float(ell.data)
        total = ell if total is None else apply("add", total, ell)
    loss = apply("scalar_mul", total, value=1.0 / k)
    return LossOutput(
        loss=loss,
        positives=np.array([float(p.data) for p in pos_terms]),
        negatives=np.array([float(n.data) for n in neg_terms]),
        per_sample=per_sample,
        maps=self_maps,
        trimaps=trimaps,
    )


def selfsup_loss(batch: LossBatch, cfg: LossConfig = LossConfig()) -> LossOutput:
    """Self-supervised objective with tri-map mined positives and negatives.

    Per sample, the positive term is the similarity mean weighted by the
    soft above-positive mask; hard negatives weight by one minus the soft
    above-negative mask; easy negatives average each *other* clip's full
    map. The per-sample loss is softplus(negatives - positive), averaged
    over the batch.
    """
    cfg.validate()
    if cfg.mode != "selfsup":
        raise ValueError(f"selfsup_loss called with mode {cfg.mode!r}")
    k, c, h, w = _check_batch(batch, want_masks=False)
    if k == 1 and not cfg.include_hard_negatives:
        raise ValueError("k=1 with only easy negatives leaves an empty negative set")

    unit_a = [apply("normalize", a, axis=0) for a in batch.audio]
    unit_v = [apply("normalize", v, axis=0) for v in batch.visual]
    self_maps = [_cosine_from_unit(unit_a[i], unit_v[i]) for i in range(k)]
    trimaps = [trimap(s, cfg) for s in self_maps]
    col_totals = None
    if cfg.include_easy_negatives and k > 1:
        col_totals = [apply("sum", uv, axes=(1, 2)) for uv in unit_v]

    pos_terms, neg_terms = [], []
    for i in range(k):
        pos_terms.append(_weighted_mean(trimaps[i].above_pos, self_maps[i]))
        neg = None
        if cfg.include_hard_negatives:
            ones = _const(1.0, (h, w), self_maps[i].data.dtype)
            outside = apply("sub", ones, trimaps[i].above_neg)
            neg = _weighted_mean(outside, self_maps[i])
        if col_totals is not None:
            easy = _easy_negatives(unit_a, col_totals, i, h * w, cfg.normalize_easy)
            if easy is not None:
                neg = easy if neg is None else apply("add", neg, easy)
        neg_terms.append(neg)
    return _assemble(pos_terms, neg_terms, self_maps, trimaps)


def oracle_loss(batch: LossBatch, cfg: LossConfig = LossConfig(mode="oracle")) -> LossOutput:
    """Same objective as `selfsup_loss` with given binary masks as the split.

    The positive region is each sample's mask, hard negatives its
    complement; masks must cover some but not all cells.
    """
    cfg.validate()
    if cfg.mode != "oracle":
        raise ValueError(f"oracle_loss called with mode {cfg.mode!r}")
    k, c, h, w = _check_batch(batch, want_masks=True)
    if k == 1 and not cfg.include_hard_negatives:
        raise ValueError("k=1 with only easy negatives leaves an empty negative set")

    unit_a = [apply("normalize", a, axis=0) for a in batch.audio]
    unit_v = [apply("normalize", v, axis=0) for v in batch.visual]
    self_maps = [_cosine_from_unit(unit_a[i], unit_v[i]) for i in range(k)]
    col_totals = None
    if cfg.include_easy_negatives and k > 1:
        col_totals = [apply("sum", uv, axes=(1, 2)) for uv in unit_v]

    pos_terms, neg_terms = [], []
    for i in range(k):
        dtype = self_maps[i].data.dtype
        inside = Tensor(np.asarray(batch.masks[i], dtype=dtype))
        pos_terms.append(_weighted_mean(inside, self_maps[i]))
        neg = None
        if cfg.include_hard_negatives:
            ones = _const(1.0, (h, w), dtype)
            outside = apply("sub", ones, inside)
            neg = _weighted_mean(outside, self_maps[i])
        if col_totals is not None:
            easy = _easy_negatives(unit_a, col_totals, i, h * w, cfg.normalize_easy)
            if easy is not None:
                neg = easy if neg is None else apply("add", neg, easy)
        neg_terms.append(neg)
    return _assemble(pos_terms, neg_terms, self_maps, None)


def loss_grad_check(
    seed: int = 0,
    k: int = 3,
    c: int = 4,
    h: int = 4,
    w: int = 4,
    cfg: LossConfig = LossConfig(),
    fd_epsilon: float = 1e-5,
) -> float:
    """Finite-difference check of the full objective on one random batch.

    Returns the max relative error over every audio and visual component.
    real64 throughout; the easy-negative term keeps all gradient paths live,
    so saturation never pins a component at exactly zero. Near-saturated
    sigmoid paths do leave some components around 1e-6, where a 1e-6 step
    drowns in f64 cancellation noise; 1e-5 balances that against truncation.
    """
    from .tensor import grad_check

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10C4]))
    leaves = []
    for _ in range(k):
        leaves.append(Tensor(rng.normal(size=c), requires_grad=True))
        leaves.append(Tensor(rng.normal(size=(c, h, w)), requires_grad=True))

    def run(*parts):
        batch = LossBatch(audio=list(parts[0::2]), visual=list(parts[1::2]))
        return selfsup_loss(batch, cfg).loss

    return grad_check(run, leaves, fd_epsilon=fd_epsilon)
