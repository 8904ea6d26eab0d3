"""Seeded synthetic audio-visual world with planted sounding regions.

Each class owns a fixed patch texture and a fixed set of pure tones drawn
from a frequency grid spaced two DFT bins apart, so any two distinct tones
anywhere in the world are separable at the audio frontend's resolution.
While grid capacity allows, classes get fully disjoint tone sets; past
capacity (e.g. hundreds of classes) they get distinct subsets of the grid.

A sample plants the class patch on a flat gray background, optionally adds
visual-only distractor patches from other classes, and pairs the image with
the class tones plus white noise. The ground-truth mask is exactly the
planted patch's footprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .audio import save_wav
from .manifest import BBox, Manifest, SampleRecord, read_manifest, write_manifest
from .tensorio import save_tensor

TONE_MIN_HZ = 200.0
TONE_MAX_HZ = 6000.0
TONE_GAP_BINS = 2
TONES_PER_CLASS = (2, 4)  # inclusive size range

MIN_COLOR_DISTANCE = 0.4
PLACEMENT_TRIES = 200

# per-sample RNG stream codes
_STREAMS = {"train": 0, "seen": 1, "unseen": 2}


@dataclass(frozen=True)
class SyntheticClass:
    class_id: int
    tones: Tuple[float, ...]
    texture: np.ndarray  # [3, ts, ts] float32 in [0,1]


@dataclass
class SyntheticSample:
    image: np.ndarray  # [3, H, W] float32 in [0,1]
    waveform: np.ndarray  # float32
    gt_mask: np.ndarray  # [H, W] bool, the patch footprint
    class_id: int
    patch_box: BBox
    distractor_boxes: Tuple[BBox, ...]


@dataclass
class DatagenConfig:
    num_classes: int = 40
    seen_fraction: float = 0.5
    train_per_class: int = 40
    test_per_class: int = 8
    image_size: int = 64
    texture_size: int = 40
    patch_min: int = 13
    patch_max: int = 40
    min_distractors: int = 1
    max_distractors: int = 2
    seconds: float = 3.0
    rate: int = 16000
    snr_db: Optional[float] = 20.0

    def validate(self) -> None:
        problems = []
        if self.num_classes < 1:
            problems.append(f"num_classes must be >= 1, got {self.num_classes}")
        if not 0.0 < self.seen_fraction < 1.0:
            problems.append(
                f"seen_fraction must lie in (0, 1), got {self.seen_fraction}"
            )
        if self.train_per_class < 1:
            problems.append(
                f"train_per_class must be >= 1, got {self.train_per_class}"
            )
        if self.test_per_class < 1:
            problems.append(f"test_per_class must be >= 1, got {self.test_per_class}")
        if self.image_size < 16:
            problems.append(f"image_size must be >= 16, got {self.image_size}")
        if not 1 <= self.patch_min <= self.patch_max:
            problems.append(
                f"patch bounds must satisfy 1 <= min <= max, got "
                f"{self.patch_min}..{self.patch_max}"
            )
        if self.patch_max > min(self.image_size, self.texture_size):
            problems.append(
                f"patch_max {self.patch_max} exceeds image/texture size "
                f"{min(self.image_size, self.texture_size)}"
            )
        area = self.image_size**2
        if self.patch_min**2 < 0.04 * area or self.patch_max**2 > 0.40 * area:
            problems.append(
                "patch sides must keep patch area within 4-40% of the image "
                f"({self.patch_min}..{self.patch_max} px on {self.image_size} px)"
            )
        if not 0 <= self.min_distractors <= self.max_distractors:
            problems.append(
                f"distractor counts must satisfy 0 <= min <= max, got "
                f"{self.min_distractors}..{self.max_distractors}"
            )
        if not self.seconds > 0:
            problems.append(f"seconds must be > 0, got {self.seconds}")
        if self.rate < 2000:
            problems.append(f"rate must be >= 2000, got {self.rate}")
        if self.snr_db is not None and not math.isfinite(self.snr_db):
            problems.append(f"snr_db must be finite or None, got {self.snr_db}")
        if problems:
            raise ValueError("invalid datagen config: " + "; ".join(problems))


def tone_slots(rate: int = 16000, n_fft: int = 512) -> List[float]:
    """Frequency grid: every TONE_GAP_BINS-th DFT bin inside the tone band."""
    bin_hz = rate / n_fft
    lo = math.ceil(TONE_MIN_HZ / bin_hz)
    hi = math.floor(TONE_MAX_HZ / bin_hz)
    return [b * bin_hz for b in range(lo, hi + 1, TONE_GAP_BINS)]


def _palette_low(t: float) -> np.ndarray:
    """Warm ramp indexed by a normalized frequency: red rises, green falls."""
    return np.array([0.15 + 0.75 * t, 0.75 - 0.55 * t, 0.20], dtype=np.float64)


def _palette_high(t: float) -> np.ndarray:
    """Cool ramp indexed by a normalized frequency, disjoint from the warm one."""
    return np.array([0.10 + 0.30 * t, 0.35 + 0.30 * t, 0.95 - 0.35 * t], dtype=np.float64)


def _draw_texture(
    rng: np.random.Generator, size: int, t_low: float, t_high: float
) -> np.ndarray:
    """Two-color blocky pattern whose colors index the class's tone extremes.

    Appearance is a smooth function of the lowest and highest tone frequency
    (normalized to [0,1] over the slot grid), so the sound->look mapping can
    be learned on one half of the classes and carries over to the held-out
    half. The two ramps keep at least MIN_COLOR_DISTANCE apart for every
    (t_low, t_high) pair; only the block layout is random.
    """
    colors = np.stack([_palette_low(t_low), _palette_high(t_high)])
    block = 4
    coarse = rng.integers(0, 2, size=(size // block, size // block))
    pattern = np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)
    pattern = pattern[:size, :size]
    tex = np.where(pattern[None], colors[0][:, None, None], colors[1][:, None, None])
    return tex.astype(np.float32)


def gen_class_set(
    num_classes: int, seed: int, rate: int = 16000, n_fft: int = 512,
    texture_size: int = 40,
) -> List[SyntheticClass]:
    """Deterministic class table: tone sets dealt from a shuffled slot deck.

    Sizes are drawn uniformly from TONES_PER_CLASS. While the deck lasts,
    classes are pairwise disjoint; afterwards the deck reshuffles, so a
    slot is reused at most ceil(total/len(slots)) times. Tone sets are
    always distinct as sets.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    slots = tone_slots(rate, n_fft)
    lo, hi = TONES_PER_CLASS
    capacity = sum(math.comb(len(slots), s) for s in range(lo, hi + 1))
    if num_classes > capacity:
        raise ValueError(
            f"infeasible tone packing: {num_classes} classes need distinct "
            f"subsets but only {capacity} exist"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
    sizes = rng.integers(lo, hi + 1, size=num_classes)
    deck: List[int] = []
    taken = set()
    classes = []
    for cid in range(num_classes):
        s = int(sizes[cid])
        if len(deck) < s:
            deck = list(rng.permutation(len(slots))) + deck
        pick = [deck.pop() for _ in range(s)]
        key = frozenset(pick)
        tries = 0
        while len(key) < s or key in taken:
            pick = list(rng.choice(len(slots), size=s, replace=False))
            key = frozenset(pick)
            tries += 1
            if tries > 1000:
                raise ValueError("infeasible tone packing: ran out of subsets")
        taken.add(key)
        tones = tuple(sorted(slots[j] for j in pick))
        span = slots[-1] - slots[0]
        t_low = (tones[0] - slots[0]) / span
        t_high = (tones[-1] - slots[0]) / span
        texture = _draw_texture(rng, texture_size, t_low, t_high)
        classes.append(SyntheticClass(cid, tones, texture))
    return classes


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Flat gray, one level per image.

    Within-image background gradients would hand the contrastive objective a
    per-image unique extremum (e.g. the brightest bump), which is exactly the
    kind of one-hot shortcut a translation-equivariant net can latch onto. A
    flat field leaves the planted patches as the only image structure.
    """
    gray = np.float32(rng.uniform(0.25, 0.55))
    return np.full((3, size, size), gray, dtype=np.float32)


def _overlaps(a: BBox, b: BBox) -> bool:
    return (
        a.x < b.x + b.width
        and b.x < a.x + a.width
        and a.y < b.y + b.height
        and b.y < a.y + a.height
    )


def _place_patch(rng, side, size, placed):
    for _ in range(PLACEMENT_TRIES):
        x = int(rng.integers(0, size - side + 1))
        y = int(rng.integers(0, size - side + 1))
        box = BBox(x, y, side, side)
        if not any(_overlaps(box, other) for other in placed):
            return box
    return None


def _tone_waveform(tones, rng, n, rate, dtype=np.float64):
    t = np.arange(n, dtype=dtype) / rate
    amp = 0.5 / len(tones)
    wave = np.zeros(n, dtype=dtype)
    for f in tones:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave += amp * np.sin(2.0 * np.pi * f * t + phase)
    return wave


def gen_sample(
    cls: SyntheticClass,
    distractor_classes: Sequence[SyntheticClass],
    rng: np.random.Generator,
    cfg: DatagenConfig = DatagenConfig(),
) -> SyntheticSample:
    """One paired sample; the waveform carries only `cls`'s tones."""
    cfg.validate()
    if any(d.class_id == cls.class_id for d in distractor_classes):
        raise ValueError("distractor classes must differ from the target class")
    size = cfg.image_size
    image = _background(rng, size)

    side = int(rng.integers(cfg.patch_min, cfg.patch_max + 1))
    patch_box = _place_patch(rng, side, size, [])
    placed = [patch_box]

    distractor_boxes = []
    if distractor_classes:
        want = int(rng.integers(cfg.min_distractors, cfg.max_distractors + 1))
        for _ in range(want):
            other = distractor_classes[int(rng.integers(len(distractor_classes)))]
            d_side = int(rng.integers(cfg.patch_min, cfg.patch_max + 1))
            box = _place_patch(rng, d_side, size, placed)
            if box is None:
                continue  # image too crowded for this distractor
            placed.append(box)
            distractor_boxes.append(box)
            image[:, box.y : box.y + d_side, box.x : box.x + d_side] = (
                other.texture[:, :d_side, :d_side]
            )

    # target painted last so its footprint is exactly the gt mask
    image[:, patch_box.y : patch_box.y + side, patch_box.x : patch_box.x + side] = (
        cls.texture[:, :side, :side]
    )
    gt = np.zeros((size, size), dtype=bool)
    gt[patch_box.y : patch_box.y + side, patch_box.x : patch_box.x + side] = True

    n = int(round(cfg.seconds * cfg.rate))
    wave = _tone_waveform(cls.tones, rng, n, cfg.rate)
    if cfg.snr_db is not None:
        power = float(np.mean(wave**2))
        noise_std = math.sqrt(power / (10.0 ** (cfg.snr_db / 10.0)))
        wave = wave + rng.normal(0.0, noise_std, size=n)
    wave = np.clip(wave, -1.0, 1.0)

    return SyntheticSample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        waveform=wave.astype(np.float32),
        gt_mask=gt,
        class_id=cls.class_id,
        patch_box=patch_box,
        distractor_boxes=tuple(distractor_boxes),
    )


def _meta_text(cfg: DatagenConfig, seed: int) -> str:
    pairs = sorted(vars(cfg).items())
    lines = ["datagen-meta", f"seed={seed}"]
    lines += [f"{k}={v!r}" for k, v in pairs]
    return "".join(line + "\n" for line in lines)


def _write_sample(sample, sid, split, out_dir, rate) -> SampleRecord:
    image_rel = f"images/{sid}.tsr"
    audio_rel = f"audio/{sid}.wav"
    save_tensor(out_dir / image_rel, sample.image)
    save_wav(out_dir / audio_rel, sample.waveform, rate=rate)
    return SampleRecord(
        sample_id=sid,
        image=image_rel,
        audio=audio_rel,
        class_id=sample.class_id,
        split=split,
        boxes=((sample.patch_box,),),
    )


def split_classes(classes, seen_fraction, seed):
    """Seeded disjoint seen/unseen class split; both sides non-empty."""
    n_seen = int(round(len(classes) * seen_fraction))
    if not 1 <= n_seen <= len(classes) - 1:
        raise ValueError(
            f"seen_fraction {seen_fraction} leaves no classes on one side "
            f"of the split ({n_seen} of {len(classes)})"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5911]))
    order = rng.permutation(len(classes))
    seen = sorted(int(i) for i in order[:n_seen])
    unseen = sorted(int(i) for i in order[n_seen:])
    return [classes[i] for i in seen], [classes[i] for i in unseen]


def gen_dataset(
    classes: Sequence[SyntheticClass],
    cfg: DatagenConfig,
    seed: int,
    out_dir,
) -> Tuple[Manifest, Manifest, Manifest]:
    """Write the full tree and return (train, test-seen, test-unseen).

    Layout under out_dir: images/*.tsr, audio/*.wav, train.txt,
    test_seen.txt, test_unseen.txt, datagen.meta. Per-sample RNG streams
    derive from (seed, split, class, index) alone, so output bytes do not
    depend on generation order.
    """
    cfg.validate()
    if seed < 0:
        raise ValueError(f"seed must be >= 0, got {seed}")
    if len(classes) != cfg.num_classes:
        raise ValueError(
            f"class table has {len(classes)} entries, config says "
            f"{cfg.num_classes}"
        )
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)

    seen, unseen = split_classes(classes, cfg.seen_fraction, seed)

    def generate(pool, prefix, count, split_tag):
        records = []
        stream = _STREAMS[prefix]
        for cls in pool:
            others = [c for c in pool if c.class_id != cls.class_id]
            for idx in range(count):
                srng = np.random.default_rng(
                    np.random.SeedSequence([seed, stream, cls.class_id, idx])
                )
                sample = gen_sample(cls, others, srng, cfg)
                sid = f"{prefix}_c{cls.class_id:03d}_i{idx:03d}"
                records.append(
                    _write_sample(sample, sid, split_tag, out_dir, cfg.rate)
                )
        return records

    train_records = generate(seen, "train", cfg.train_per_class, "train")
    seen_records = generate(seen, "seen", cfg.test_per_class, "test")
    unseen_records = generate(unseen, "unseen", cfg.test_per_class, "test")

    write_manifest(train_records, out_dir / "train.txt")
    write_manifest(seen_records, out_dir / "test_seen.txt")
    write_manifest(unseen_records, out_dir / "test_unseen.txt")
    (out_dir / "datagen.meta").write_text(_meta_text(cfg, seed), encoding="ascii")

    return (
        read_manifest(out_dir / "train.txt"),
        read_manifest(out_dir / "test_seen.txt"),
        read_manifest(out_dir / "test_unseen.txt"),
    )


def dataset_up_to_date(cfg: DatagenConfig, seed: int, out_dir) -> bool:
    """True when out_dir already holds a complete tree for (cfg, seed)."""
    out_dir = Path(out_dir)
    meta = out_dir / "datagen.meta"
    if not meta.exists():
        return False
    if meta.read_text(encoding="ascii") != _meta_text(cfg, seed):
        return False
    try:
        for name in ("train.txt", "test_seen.txt", "test_unseen.txt"):
            read_manifest(out_dir / name)
    except (FileNotFoundError, ValueError):
        return False
    return True
