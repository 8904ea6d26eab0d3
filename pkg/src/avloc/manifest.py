"""Line-oriented sample manifests tying images, audio, and annotations.

One record per line, space-separated named fields:

    id=s0007 image=images/s0007.tsr audio=audio/s0007.wav class=3 \
        split=train boxes=12,20,15,15;11,19,16,16

`boxes` groups bounding boxes by annotator: groups are ';'-separated,
boxes inside a group '+'-separated, each box "x,y,w,h" in pixels. Paths
are relative to the manifest file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

SPLITS = ("train", "val", "test")

_FIELDS = ("id", "image", "audio", "class", "split", "boxes")


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    width: int
    height: int

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"degenerate box {self}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin out of frame: {self}")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image: str
    audio: str
    class_id: int
    split: str
    boxes: Tuple[Tuple[BBox, ...], ...]  # one inner tuple per annotator

    def validate(self) -> None:
        for token in (self.sample_id, self.image, self.audio):
            if not token or any(ch.isspace() for ch in token):
                raise ValueError(
                    f"sample {self.sample_id!r}: fields must be non-empty "
                    f"and free of whitespace, got {token!r}"
                )
        if self.split not in SPLITS:
            raise ValueError(
                f"sample {self.sample_id!r}: split must be one of {SPLITS}, "
                f"got {self.split!r}"
            )
        if not self.boxes or any(len(group) == 0 for group in self.boxes):
            raise ValueError(
                f"sample {self.sample_id!r}: needs at least one box per annotator"
            )
        for group in self.boxes:
            for box in group:
                box.validate()


@dataclass
class Manifest:
    root: Path
    records: List[SampleRecord]
    name: str = ""

    def path_for(self, relative: str) -> Path:
        return self.root / relative


def _format_boxes(groups: Sequence[Sequence[BBox]]) -> str:
    return ";".join(
        "+".join(f"{b.x},{b.y},{b.width},{b.height}" for b in group)
        for group in groups
    )


def _parse_boxes(text: str, sample_id: str) -> Tuple[Tuple[BBox, ...], ...]:
    groups = []
    for group_text in text.split(";"):
        boxes = []
        for box_text in group_text.split("+"):
            parts = box_text.split(",")
            if len(parts) != 4:
                raise ValueError(
                    f"sample {sample_id!r}: box {box_text!r} is not x,y,w,h"
                )
            try:
                x, y, w, h = (int(p) for p in parts)
            except ValueError:
                raise ValueError(
                    f"sample {sample_id!r}: box {box_text!r} has non-integer parts"
                ) from None
            boxes.append(BBox(x, y, w, h))
        groups.append(tuple(boxes))
    return tuple(groups)


def format_record(record: SampleRecord) -> str:
    record.validate()
    return (
        f"id={record.sample_id} image={record.image} audio={record.audio} "
        f"class={record.class_id} split={record.split} "
        f"boxes={_format_boxes(record.boxes)}"
    )


def parse_record(line: str) -> SampleRecord:
    fields = {}
    for chunk in line.split():
        key, sep, value = chunk.partition("=")
        if not sep:
            raise ValueError(f"malformed manifest chunk {chunk!r}")
        if key in fields:
            raise ValueError(f"duplicate field {key!r} in manifest line")
        fields[key] = value
    missing = [f for f in _FIELDS if f not in fields]
    if missing:
        raise ValueError(f"manifest line missing fields {missing}: {line!r}")
    extra = sorted(set(fields) - set(_FIELDS))
    if extra:
        raise ValueError(f"manifest line has unknown fields {extra}")
    sample_id = fields["id"]
    try:
        class_id = int(fields["class"])
    except ValueError:
        raise ValueError(
            f"sample {sample_id!r}: class must be an integer, "
            f"got {fields['class']!r}"
        ) from None
    record = SampleRecord(
        sample_id=sample_id,
        image=fields["image"],
        audio=fields["audio"],
        class_id=class_id,
        split=fields["split"],
        boxes=_parse_boxes(fields["boxes"], sample_id),
    )
    record.validate()
    return record


def write_manifest(records: Sequence[SampleRecord], path) -> None:
    path = Path(path)
    seen = set()
    for r in records:
        if r.sample_id in seen:
            raise ValueError(f"duplicate sample id {r.sample_id!r}")
        seen.add(r.sample_id)
    lines = [format_record(r) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="ascii")


def read_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    seen = set()
    for raw in path.read_text(encoding="ascii").splitlines():
        line = raw.strip()
        if not line:
            continue
        record = parse_record(line)
        if record.sample_id in seen:
            raise ValueError(f"duplicate sample id {record.sample_id!r} in {path}")
        seen.add(record.sample_id)
        records.append(record)
    manifest = Manifest(root=path.parent, records=records, name=path.stem)
    if check_files:
        for r in records:
            for rel in (r.image, r.audio):
                target = manifest.path_for(rel)
                if not target.exists():
                    raise FileNotFoundError(
                        f"sample {r.sample_id!r}: missing file {target}"
                    )
    return manifest
