"""Deterministic training loop.

Spectrograms are computed once at dataset load; each step encodes a freshly
sampled batch, applies the contrastive objective, and takes one Adam step.
Everything downstream of the seed is reproducible: rerunning the same config
and seed yields byte-identical loss curves and checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .audio import crop_or_pad, load_wav, stft_magnitude
from .config import RunConfig, config_hash, hash_to_tensor, save_run_config, tensor_to_hash
from .encoders import (
    EncoderConfig,
    encode_audio_batch,
    encode_visual_batch,
    feature_shape,
    init_params,
)
from .evaluation import consensus_mask
from .loss import LossBatch, oracle_loss, selfsup_loss
from .manifest import Manifest, read_manifest
from .optim import AdamState, adam_step, init_adam
from .tensor import NonFiniteError, Tensor, apply, backward
from .tensorio import FormatError, load_checkpoint, load_tensor, save_checkpoint

# disjoint stream tags for the per-step batch sampler
_BATCH_STREAM = 0xBA7C


class TrainAbort(RuntimeError):
    """Non-finite loss or update; carries the step and last good checkpoint."""

    def __init__(self, step: int, checkpoint: Optional[Path], reason: str):
        super().__init__(
            f"training aborted at step {step}: {reason}; "
            + (f"last good checkpoint: {checkpoint}" if checkpoint else "no checkpoint written")
        )
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainingSet:
    ids: List[str]
    images: np.ndarray  # [n,3,H,W] real32
    specs: np.ndarray  # [n,1,F,T] real32
    grid_masks: Optional[np.ndarray] = None  # [n,h,w] real32, oracle mode only


@dataclass
class TrainResult:
    run_dir: Path
    steps: int
    losses: List[float]
    curve_path: Path
    checkpoint_path: Path


@dataclass
class CheckpointBundle:
    params: dict
    state: AdamState
    step: int
    config_hash: str


def visual_grid(enc_cfg: EncoderConfig, image_hw: tuple) -> tuple:
    _, h, w = feature_shape(enc_cfg.visual, (3, image_hw[0], image_hw[1]))
    return h, w


def pixel_mask_to_grid(mask: np.ndarray, grid_hw: tuple) -> np.ndarray:
    """Downsample a binary pixel mask to the feature grid: a cell is on when
    any pixel in its image region is on."""
    height, width = mask.shape
    gh, gw = grid_hw
    out = np.zeros((gh, gw), dtype=np.float32)
    for i in range(gh):
        r0, r1 = i * height // gh, (i + 1) * height // gh
        for j in range(gw):
            c0, c1 = j * width // gw, (j + 1) * width // gw
            out[i, j] = 1.0 if mask[r0:r1, c0:c1].any() else 0.0
    return out


def load_training_set(manifest: Manifest, cfg: RunConfig) -> TrainingSet:
    """Load every sample's image and spectrogram into memory.

    Oracle mode also rasterizes each record's boxes to the feature grid, so
    the loss can consume ground truth without touching pixel space again.
    """
    if not manifest.records:
        raise ValueError("training manifest has no records")
    enc_cfg = cfg.encoder_config()
    ids, images, specs, masks = [], [], [], []
    oracle = cfg.loss.mode == "oracle"
    grid_hw = None
    for r in manifest.records:
        image = load_tensor(manifest.path_for(r.image))
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(
                f"sample {r.sample_id!r}: image must be [3,H,W], got {image.shape}"
            )
        samples, rate = load_wav(manifest.path_for(r.audio))
        samples = crop_or_pad(samples, cfg.train.audio_seconds, rate)
        spec = stft_magnitude(samples, cfg.eval.spectrogram)
        ids.append(r.sample_id)
        images.append(image.astype(np.float32))
        specs.append(spec[None].astype(np.float32))
        if oracle:
            if grid_hw is None:
                grid_hw = visual_grid(enc_cfg, image.shape[1:])
            gt = consensus_mask(r.boxes, image.shape[1], image.shape[2], consensus=1)
            grid = pixel_mask_to_grid(gt.values > 0, grid_hw)
            if not grid.any() or grid.all():
                raise ValueError(
                    f"sample {r.sample_id!r}: ground truth covers "
                    f"{'no' if not grid.any() else 'every'} feature cell"
                )
            masks.append(grid)
    return TrainingSet(
        ids=ids,
        images=np.stack(images),
        specs=np.stack(specs),
        grid_masks=np.stack(masks) if oracle else None,
    )


def checkpoint_payload(params: dict, state: AdamState, step: int, hex_hash: str) -> dict:
    named = {f"param/{name}": t.data for name, t in params.items()}
    named.update({f"adam.m/{name}": m for name, m in state.m.items()})
    named.update({f"adam.v/{name}": v for name, v in state.v.items()})
    named["meta/step"] = np.array([float(step)], dtype=np.float64)
    named["meta/config_hash"] = hash_to_tensor(hex_hash)
    return named


def save_run_checkpoint(path, params, state, step, hex_hash) -> None:
    save_checkpoint(path, checkpoint_payload(params, state, step, hex_hash))


def load_run_checkpoint(path) -> CheckpointBundle:
    named = load_checkpoint(path)
    for key in ("meta/step", "meta/config_hash"):
        if key not in named:
            raise FormatError(f"checkpoint {path} is missing entry {key!r}")
    params, m, v = {}, {}, {}
    for key, arr in named.items():
        if key.startswith("param/"):
            params[key[len("param/"):]] = Tensor(arr, requires_grad=True)
        elif key.startswith("adam.m/"):
            m[key[len("adam.m/"):]] = arr
        elif key.startswith("adam.v/"):
            v[key[len("adam.v/"):]] = arr
        elif not key.startswith("meta/"):
            raise FormatError(f"checkpoint {path} has unknown entry {key!r}")
    if set(params) != set(m) or set(params) != set(v):
        raise FormatError(f"checkpoint {path} has mismatched param/moment entries")
    step = int(named["meta/step"][0])
    return CheckpointBundle(
        params=params,
        state=AdamState(m=m, v=v, step=step),
        step=step,
        config_hash=tensor_to_hash(named["meta/config_hash"]),
    )


def _flatten_config(cfg: RunConfig) -> List[str]:
    from .config import to_dict

    lines = []
    for section, value in sorted(to_dict(cfg).items()):
        if isinstance(value, dict):
            for key, v in sorted(value.items()):
                lines.append(f"{section}.{key}={v!r}")
        else:
            lines.append(f"{section}={value!r}")
    return lines


def write_metadata(cfg: RunConfig, path) -> None:
    from . import __version__

    lines = [f"build=avloc/{__version__}", f"config_hash={config_hash(cfg)}"]
    lines += _flatten_config(cfg)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sample_batch(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _BATCH_STREAM, step]))
    return rng.choice(n, size=min(batch_size, n), replace=False)


def group_slices(total: int, group: int) -> List[slice]:
    """Contiguous slices of `group` samples covering range(total) in order.

    A lone trailing sample is folded into the previous group so every loss
    term sees at least a pair (when total itself is >= 2).
    """
    stops = list(range(group, total, group))
    if stops and total - stops[-1] == 1:
        stops.pop()
    edges = [0] + stops + [total]
    return [slice(a, b) for a, b in zip(edges, edges[1:])]


def split_rows(batched: Tensor) -> List[Tensor]:
    """[N, ...] -> N per-sample tensors, differentiably, via one-hot rows."""
    n = batched.shape[0]
    rest = batched.shape[1:]
    size = int(np.prod(rest, dtype=np.int64))
    flat = apply("reshape", batched, shape=(n, size))
    out = []
    for i in range(n):
        onehot = np.zeros((1, n), dtype=batched.data.dtype)
        onehot[0, i] = 1.0
        row = apply("matmul", Tensor(onehot), flat)
        out.append(apply("reshape", row, shape=rest))
    return out


def train(cfg: RunConfig, log=None) -> TrainResult:
    """Run the configured number of steps; returns paths to the artifacts.

    Raises TrainAbort as soon as the loss or any updated parameter goes
    non-finite; the curve so far is flushed and the last interval checkpoint
    is left in place.
    """
    cfg.loss.validate()
    for section in (cfg.train, cfg.optim, cfg.data):
        problems = section.validate()
        if problems:
            raise ValueError("; ".join(problems))

    data_dir = Path(cfg.data.dir)
    manifest = read_manifest(data_dir / cfg.data.train_manifest)
    training = load_training_set(manifest, cfg)
    n = len(training.ids)

    enc_cfg = cfg.encoder_config()
    params = init_params(enc_cfg, cfg.seed)
    state = init_adam(params)
    hex_hash = config_hash(cfg)

    run_dir = Path(cfg.run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, run_dir / "config.yaml")
    write_metadata(cfg, run_dir / "metadata.txt")
    curve_path = run_dir / "curve.txt"

    loss_fn = oracle_loss if cfg.loss.mode == "oracle" else selfsup_loss
    losses: List[float] = []
    curve_lines: List[str] = []
    last_ckpt: Optional[Path] = None

    def flush_curve() -> None:
        curve_path.write_text("".join(curve_lines), encoding="utf-8")

    def abort(step: int, reason: str):
        flush_curve()
        raise TrainAbort(step, last_ckpt, reason)

    for step in range(1, cfg.train.steps + 1):
        idx = _sample_batch(n, cfg.train.batch_size, cfg.seed, step)
        try:
            visual_maps = split_rows(
                encode_visual_batch(Tensor(training.images[idx]), params, enc_cfg)
            )
            audio_embs = split_rows(
                encode_audio_batch(Tensor(training.specs[idx]), params, enc_cfg)
            )
            masks = None
            if training.grid_masks is not None:
                masks = [training.grid_masks[j] for j in idx]
            # the easy-negative sum scales with the number of samples sharing a
            # loss term, so the optimization batch is split into small
            # contrastive groups; the per-sample mean is recovered by weighting
            # each group loss with its size
            loss_t = None
            for rows in group_slices(len(idx), cfg.train.loss_group_size):
                part = LossBatch(
                    audio=audio_embs[rows],
                    visual=visual_maps[rows],
                    masks=None if masks is None else masks[rows],
                )
                part_loss = loss_fn(part, cfg.loss).loss
                weighted = apply(
                    "scalar_mul", part_loss, value=float(rows.stop - rows.start)
                )
                loss_t = weighted if loss_t is None else apply("add", loss_t, weighted)
            loss_t = apply("scalar_mul", loss_t, value=1.0 / len(idx))
        except NonFiniteError as err:
            abort(step, f"non-finite forward value ({err})")
        value = float(loss_t.data)
        if not math.isfinite(value):
            abort(step, f"loss is {value}")
        grads = backward(loss_t)
        grad_arrays = {name: grads[t].data for name, t in params.items()}
        for name in sorted(grad_arrays):
            if not np.isfinite(grad_arrays[name]).all():
                abort(step, f"non-finite gradient for parameter {name!r}")
        params, state = adam_step(
            params, grad_arrays, state,
            lr=cfg.optim.lr, beta1=cfg.optim.beta1,
            beta2=cfg.optim.beta2, eps=cfg.optim.eps,
        )
        for name in sorted(params):
            if not np.isfinite(params[name].data).all():
                abort(step, f"non-finite update for parameter {name!r}")

        losses.append(value)
        curve_lines.append(f"step={step} loss={value!r}\n")
        if log is not None and (step % 100 == 0 or step == 1):
            log(f"step {step}/{cfg.train.steps} loss {value:.6f}")
        if step % cfg.train.checkpoint_every == 0 and step != cfg.train.steps:
            path = ckpt_dir / f"ckpt_{step:06d}.tsrpack"
            save_run_checkpoint(path, params, state, step, hex_hash)
            last_ckpt = path

    final_path = ckpt_dir / "final.tsrpack"
    save_run_checkpoint(final_path, params, state, cfg.train.steps, hex_hash)
    flush_curve()
    (run_dir / "done.txt").write_text(f"steps={cfg.train.steps}\n", encoding="utf-8")
    return TrainResult(
        run_dir=run_dir,
        steps=cfg.train.steps,
        losses=losses,
        curve_path=curve_path,
        checkpoint_path=final_path,
    )
