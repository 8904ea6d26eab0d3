"""Localization metrics: consensus masks, cIoU, success curves, AUC.

The metric arithmetic is deliberately plain: cIoU accumulates per-pixel
sums with sequential Python-float additions in row-major order, and AUC
integrates the 21-point success curve as (sum of adjacent score pairs)/40.
Keeping the operation order pinned makes independently written
reimplementations agree bit-for-bit, which the tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .audio import SpectrogramParams, crop_or_pad, load_wav, stft_magnitude
from .encoders import EncoderConfig, encode_audio, encode_visual
from .loss import correspondence_map
from .manifest import BBox, Manifest
from .tensor import Tensor
from .tensorio import load_tensor

UPSAMPLING = "bilinear-corners"

# success-curve thresholds: 0.0, 0.05, ..., 1.0
CURVE_POINTS = 21


@dataclass(frozen=True)
class GroundTruthMask:
    values: np.ndarray  # [H,W] real64, entries are multiples of 1/consensus
    consensus: int


@dataclass
class EvalConfig:
    seconds: float = 3.0
    consensus: int = 2
    threshold: float = 0.5
    spectrogram: SpectrogramParams = field(default_factory=SpectrogramParams)

    def validate(self) -> None:
        problems = []
        if not self.seconds > 0:
            problems.append(f"seconds must be > 0, got {self.seconds}")
        if self.consensus < 1:
            problems.append(f"consensus must be >= 1, got {self.consensus}")
        if not 0.0 < self.threshold < 1.0:
            problems.append(f"threshold must lie in (0,1), got {self.threshold}")
        if problems:
            raise ValueError("invalid eval config: " + "; ".join(problems))
        self.spectrogram.validate()


@dataclass
class EvalReport:
    tag: str
    sample_ids: List[str]
    cious: List[float]
    success_at_half: float
    mean_ciou: float
    curve: List[float]  # success ratio at thresholds 0.05*i
    auc_value: float
    consensus: int
    threshold: float
    upsampling: str = UPSAMPLING


def _as_box(b) -> BBox:
    return b if isinstance(b, BBox) else BBox(*b)


def consensus_mask(box_groups, height: int, width: int, consensus: int = 2) -> GroundTruthMask:
    """Aggregate annotator box groups into min(sum of union masks / C, 1).

    Each group is one annotator's boxes; a group's mask is the union of its
    boxes clamped to the frame. Boxes that vanish after clamping are errors.
    """
    if len(box_groups) == 0:
        raise ValueError("consensus_mask needs at least one annotator group")
    if consensus < 1:
        raise ValueError(f"consensus must be >= 1, got {consensus}")
    votes = np.zeros((height, width), dtype=np.float64)
    for group in box_groups:
        union = np.zeros((height, width), dtype=bool)
        for raw in group:
            box = _as_box(raw)
            x0, y0 = max(box.x, 0), max(box.y, 0)
            x1, y1 = min(box.x + box.width, width), min(box.y + box.height, height)
            if x1 <= x0 or y1 <= y0:
                raise ValueError(
                    f"box {box} is degenerate after clamping to "
                    f"{height}x{width} frame"
                )
            union[y0:y1, x0:x1] = True
        votes += union
    return GroundTruthMask(np.minimum(votes / consensus, 1.0), consensus)


def _axis_weights(n_in: int, n_out: int):
    if n_in == 1 or n_out == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def upsample_heatmap(heat, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize, then min-max normalize to [0,1].

    A constant map has no span to normalize, and maps to all 0.5.
    """
    grid = np.asarray(getattr(heat, "data", heat), dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"heatmap must be rank 2, got shape {grid.shape}")
    h, w = grid.shape
    if height < h or width < w:
        raise ValueError(
            f"target {height}x{width} is smaller than source {h}x{w}"
        )
    lo, hi, frac = _axis_weights(h, height)
    rows = grid[lo] * (1.0 - frac)[:, None] + grid[hi] * frac[:, None]
    lo, hi, frac = _axis_weights(w, width)
    out = rows[:, lo] * (1.0 - frac)[None, :] + rows[:, hi] * frac[None, :]
    span = out.max() - out.min()
    if span == 0.0:
        return np.full((height, width), 0.5)
    return (out - out.min()) / span


def ciou(pred: np.ndarray, gt, threshold: float = 0.5) -> float:
    """Consensus IoU: mass of gt inside {pred > t}, over total gt mass
    plus the count of predicted pixels outside the gt support."""
    values = gt.values if isinstance(gt, GroundTruthMask) else np.asarray(gt)
    pred = np.asarray(pred)
    if pred.shape != values.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {values.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    inside = 0.0
    total = 0.0
    false_pos = 0.0
    for p, g in zip(pred.ravel().tolist(), values.ravel().tolist()):
        total += g
        if p > threshold:
            if g > 0.0:
                inside += g
            else:
                false_pos += 1.0
    if total == 0.0:
        raise ValueError("ground truth mask is empty")
    return inside / (total + false_pos)


def success_curve(cious: Sequence[float]) -> List[float]:
    """Fraction of samples whose cIoU strictly exceeds each of the 21
    thresholds 0.05*i."""
    values = list(cious)
    if not values:
        raise ValueError("empty cIoU list")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"cIoU {v} outside [0,1]")
    curve = []
    for i in range(CURVE_POINTS):
        t = 0.05 * i
        hits = 0
        for v in values:
            if v > t:
                hits += 1
        curve.append(hits / len(values))
    return curve


def auc(cious: Sequence[float]) -> float:
    """Trapezoid area under the success curve over uniform 0.05 spacing."""
    curve = success_curve(cious)
    pair_total = 0.0
    for i in range(CURVE_POINTS - 1):
        pair_total += curve[i] + curve[i + 1]
    return pair_total / 40.0


def _report(tag, sample_ids, cious, consensus, threshold) -> EvalReport:
    curve = success_curve(cious)
    total = 0.0
    for v in cious:
        total += v
    return EvalReport(
        tag=tag,
        sample_ids=list(sample_ids),
        cious=list(cious),
        success_at_half=curve[10],
        mean_ciou=total / len(cious),
        curve=curve,
        auc_value=auc(cious),
        consensus=consensus,
        threshold=threshold,
    )


def evaluate(
    params: dict,
    enc_cfg: EncoderConfig,
    manifest: Manifest,
    eval_cfg: EvalConfig = EvalConfig(),
    tag: Optional[str] = None,
) -> EvalReport:
    """Run the full localization protocol over a manifest.

    Per sample: encode the image and its (cropped/padded) audio, probe the
    visual map with the audio embedding, upsample the similarity map to
    pixel space, and score it against the annotators' consensus mask.
    """
    eval_cfg.validate()
    if not manifest.records:
        raise ValueError("manifest has no records")
    frozen = {name: t.detach() for name, t in params.items()}
    sample_ids, cious = [], []
    for r in manifest.records:
        image_path = manifest.path_for(r.image)
        audio_path = manifest.path_for(r.audio)
        for p in (image_path, audio_path):
            if not p.exists():
                raise FileNotFoundError(f"sample {r.sample_id!r}: missing file {p}")
        image = load_tensor(image_path)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(
                f"sample {r.sample_id!r}: image must be [3,H,W], got {image.shape}"
            )
        samples, rate = load_wav(audio_path)
        samples = crop_or_pad(samples, eval_cfg.seconds, rate)
        spec = stft_magnitude(samples, eval_cfg.spectrogram)
        visual = encode_visual(Tensor(image), frozen, enc_cfg)
        audio_emb = encode_audio(Tensor(spec[None]), frozen, enc_cfg)
        sim = correspondence_map(audio_emb, visual)
        heat = upsample_heatmap(sim.data, image.shape[1], image.shape[2])
        gt = consensus_mask(r.boxes, image.shape[1], image.shape[2],
                            eval_cfg.consensus)
        sample_ids.append(r.sample_id)
        cious.append(ciou(heat, gt, eval_cfg.threshold))
    name = tag if tag is not None else (manifest.name or "eval")
    return _report(name, sample_ids, cious, eval_cfg.consensus, eval_cfg.threshold)


def random_heatmap_baseline(
    manifest: Manifest,
    image_hw: tuple,
    grid_hw: tuple,
    eval_cfg: EvalConfig = EvalConfig(),
    trials: int = 1000,
    seed: int = 0,
) -> float:
    """Monte-Carlo success@0.5 of uniform-noise heatmaps on a manifest.

    Trial b scores a fresh U(-1,1) grid, pushed through the same upsample
    and normalization path as real predictions, against sample b mod n.
    """
    eval_cfg.validate()
    if not manifest.records:
        raise ValueError("manifest has no records")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    height, width = image_hw
    gts = [
        consensus_mask(r.boxes, height, width, eval_cfg.consensus)
        for r in manifest.records
    ]
    rng = np.random.default_rng(seed)
    hits = 0
    for b in range(trials):
        grid = rng.uniform(-1.0, 1.0, size=grid_hw)
        heat = upsample_heatmap(grid, height, width)
        if ciou(heat, gts[b % len(gts)], eval_cfg.threshold) > 0.5:
            hits += 1
    return hits / trials


def format_report(report: EvalReport) -> str:
    """Deterministic text form: key/value header plus a per-sample table."""
    lines = [
        "eval-report",
        f"tag={report.tag}",
        f"samples={len(report.sample_ids)}",
        f"consensus={report.consensus}",
        f"threshold={report.threshold!r}",
        f"upsampling={report.upsampling}",
        f"success@0.5={report.success_at_half!r}",
        f"mean-ciou={report.mean_ciou!r}",
        f"auc={report.auc_value!r}",
        "curve=" + ",".join(repr(v) for v in report.curve),
        "per-sample:",
    ]
    for sid, value in zip(report.sample_ids, report.cious):
        lines.append(f"id={sid} ciou={value!r}")
    return "".join(line + "\n" for line in lines)


def write_report(report: EvalReport, path) -> None:
    from pathlib import Path

    Path(path).write_text(format_report(report), encoding="ascii")
