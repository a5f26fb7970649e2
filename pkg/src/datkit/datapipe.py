"""Interview preprocessing and dataset plumbing.

File formats handled here:

* transcript: UTF-8 CSV with header ``start_time,stop_time,speaker,value``,
  times in decimal seconds; only rows spoken by ``Participant`` survive.
* manifest: UTF-8 JSON lines. The first line declares
  ``{"dim": <int>, "task": "depression"|"ptsd"}``; every following line is
  one example with fields id, participant, gender, label, split, embedding.
* cut list: JSON lines of ``{interview_id, ordinal, spans: [[start, stop], ...]}``.
* audio: RIFF/WAVE, 16-bit mono PCM, little-endian.
"""

from __future__ import annotations

import csv
import io
import json
import random
import wave
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import FormatError, ParseError, RangeError, ValidationError

TRANSCRIPT_HEADER = ("start_time", "stop_time", "speaker", "value")
PARTICIPANT = "Participant"
TASKS = ("depression", "ptsd")
SPLITS = ("train", "test")


@dataclass(frozen=True)
class Utterance:
    start: float
    stop: float
    speaker: str
    text: str
    interview_id: str = ""

    def __post_init__(self):
        if not (self.stop > self.start >= 0.0):
            raise ValidationError(f"need 0 <= start < stop, got [{self.start}, {self.stop}]")

    @property
    def duration(self) -> float:
        return self.stop - self.start


@dataclass(frozen=True)
class SpeechSegment:
    interview_id: str
    ordinal: int
    members: tuple[Utterance, ...]
    total_duration: float

    def spans(self) -> list[list[float]]:
        return [[u.start, u.stop] for u in self.members]


@dataclass(eq=False)
class Example:
    id: str
    participant: str
    gender: int  # 0 = male, 1 = female
    label: int  # 0 = negative, 1 = positive
    split: str
    embedding: np.ndarray  # float32

    def __post_init__(self):
        if self.gender not in (0, 1):
            raise ValidationError(f"record {self.id!r}: gender must be 0 or 1, got {self.gender}")
        if self.label not in (0, 1):
            raise ValidationError(f"record {self.id!r}: label must be 0 or 1, got {self.label}")
        if self.split not in SPLITS:
            raise ValidationError(f"record {self.id!r}: split must be one of {SPLITS}, got {self.split!r}")
        self.embedding = np.asarray(self.embedding, dtype=np.float32)

    def __eq__(self, other):
        return (
            isinstance(other, Example)
            and (self.id, self.participant, self.gender, self.label, self.split)
            == (other.id, other.participant, other.gender, other.label, other.split)
            and np.array_equal(self.embedding, other.embedding)
        )


@dataclass
class Manifest:
    dim: int
    task: str
    examples: list[Example] = field(default_factory=list)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __len__(self) -> int:
        return len(self.examples)


@contextmanager
def open_text(source, mode="r"):
    if isinstance(source, (str, Path)):
        with open(source, mode, encoding="utf-8", newline="") as fh:
            yield fh
    else:
        yield source


def parse_transcript(source, interview_id: str = "") -> list[Utterance]:
    """Read participant utterances from a transcript CSV, in file order."""
    with open_text(source) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("transcript is empty, expected a header row") from None
        if tuple(h.strip() for h in header) != TRANSCRIPT_HEADER:
            raise ParseError(f"line 1: expected header {','.join(TRANSCRIPT_HEADER)}, got {','.join(header)}")
        utterances = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                start, stop = float(row[0]), float(row[1])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: bad timing value ({exc})") from None
            speaker, text = row[2].strip(), row[3]
            if speaker != PARTICIPANT:
                continue
            try:
                utterances.append(Utterance(start, stop, speaker, text, interview_id))
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
        return utterances


def load_exclusions(source) -> dict[str, set[int]]:
    """Exclusion list: JSON object mapping interview id to utterance indices to drop."""
    with open_text(source) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ParseError("exclusion list must be a JSON object of id -> index list")
    return {str(k): {int(i) for i in v} for k, v in raw.items()}


def apply_exclusions(utterances: Sequence[Utterance], excluded: set[int]) -> list[Utterance]:
    return [u for i, u in enumerate(utterances) if i not in excluded]


def drop_tail(utterances: Sequence[Utterance], n: int = 2) -> list[Utterance]:
    """Drop the final ``n`` utterances of one interview (noise-prone tail rows)."""
    if n < 0:
        raise ValidationError(f"n must be >= 0, got {n}")
    return list(utterances[: len(utterances) - n]) if n else list(utterances)


def segment(
    utterances: Sequence[Utterance], max_seconds: float = 10.0, max_members: int = 5
) -> list[SpeechSegment]:
    """Greedy left-to-right grouping of consecutive utterances.

    An utterance joins the open segment only while the accumulated duration
    stays within ``max_seconds`` and the member count below ``max_members``;
    otherwise the segment is flushed and a new one starts. An utterance
    longer than ``max_seconds`` becomes a segment on its own.
    """
    segments: list[SpeechSegment] = []
    acc: list[Utterance] = []
    acc_duration = 0.0

    def flush():
        nonlocal acc, acc_duration
        if acc:
            interview = acc[0].interview_id
            segments.append(SpeechSegment(interview, len(segments), tuple(acc), acc_duration))
            acc, acc_duration = [], 0.0

    for utt in utterances:
        if utt.duration <= 0:
            raise ValidationError(f"non-positive duration on utterance at {utt.start}")
        if acc and (acc_duration + utt.duration > max_seconds or len(acc) >= max_members):
            flush()
        acc.append(utt)
        acc_duration += utt.duration
    flush()
    return segments


def write_cut_list(segments: Iterable[SpeechSegment], sink) -> None:
    with open_text(sink, "w") as fh:
        for seg in segments:
            fh.write(
                json.dumps(
                    {"interview_id": seg.interview_id, "ordinal": seg.ordinal, "spans": seg.spans()}
                )
                + "\n"
            )


def read_cut_list(source) -> list[dict]:
    with open_text(source) as fh:
        rows = []
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            if not {"interview_id", "ordinal", "spans"} <= set(row):
                raise ValidationError(f"line {lineno}: cut-list row missing required keys")
            rows.append(row)
        return rows


def _read_wav(source) -> tuple[bytes, int, int]:
    data = Path(source).read_bytes() if isinstance(source, (str, Path)) else bytes(source)
    try:
        with wave.open(io.BytesIO(data)) as wav:
            if wav.getcomptype() != "NONE":
                raise FormatError(f"unsupported WAV compression {wav.getcomptype()!r}")
            if wav.getnchannels() != 1 or wav.getsampwidth() != 2:
                raise FormatError(
                    f"expected 16-bit mono PCM, got {wav.getnchannels()} channel(s) "
                    f"at {8 * wav.getsampwidth()} bits"
                )
            return wav.readframes(wav.getnframes()), wav.getframerate(), wav.getnframes()
    except wave.Error as exc:
        raise FormatError(f"not a readable WAV stream: {exc}") from None


def slice_wav(source, seg: SpeechSegment) -> bytes:
    """Cut one segment out of a 16-bit mono PCM WAV, sample-exact.

    Every member span [start, stop) maps to sample indices
    [round(start*sr), round(stop*sr)); the concatenated samples are returned
    as a complete WAV file at the original rate and bit depth.
    """
    frames, rate, nframes = _read_wav(source)
    pieces = []
    for utt in seg.members:
        lo, hi = round(utt.start * rate), round(utt.stop * rate)
        if lo < 0 or hi > nframes:
            raise RangeError(
                f"span [{utt.start}, {utt.stop}) maps to samples [{lo}, {hi}) "
                f"outside the file's {nframes} frames"
            )
        pieces.append(frames[2 * lo : 2 * hi])
    out = io.BytesIO()
    with wave.open(out, "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(rate)
        wav.writeframes(b"".join(pieces))
    return out.getvalue()


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


def read_manifest(source) -> Manifest:
    with open_text(source) as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        return Manifest(dim=0, task="depression")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"line 1: {exc}") from None
    _require(isinstance(meta, dict) and "dim" in meta and "task" in meta, "first line must declare dim and task")
    dim, task = meta["dim"], meta["task"]
    _require(isinstance(dim, int) and dim > 0, f"declared dim must be a positive integer, got {dim!r}")
    _require(task in TASKS, f"task must be one of {TASKS}, got {task!r}")
    manifest = Manifest(dim=dim, task=task)
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        try:
            example = Example(
                id=str(rec["id"]),
                participant=str(rec["participant"]),
                gender=rec["gender"],
                label=rec["label"],
                split=rec["split"],
                embedding=rec["embedding"],
            )
        except KeyError as exc:
            raise ValidationError(f"line {lineno}: record missing field {exc}") from None
        _require(
            len(example.embedding) == dim,
            f"record {example.id!r}: embedding length {len(example.embedding)} != declared dim {dim}",
        )
        manifest.examples.append(example)
    return manifest


def write_manifest(manifest: Manifest, sink) -> None:
    _require(manifest.task in TASKS, f"task must be one of {TASKS}, got {manifest.task!r}")
    with open_text(sink, "w") as fh:
        fh.write(json.dumps({"dim": manifest.dim, "task": manifest.task}) + "\n")
        for ex in manifest.examples:
            _require(
                len(ex.embedding) == manifest.dim,
                f"record {ex.id!r}: embedding length {len(ex.embedding)} != declared dim {manifest.dim}",
            )
            fh.write(
                json.dumps(
                    {
                        "id": ex.id,
                        "participant": ex.participant,
                        "gender": ex.gender,
                        "label": ex.label,
                        "split": ex.split,
                        "embedding": [float(v) for v in ex.embedding],
                    }
                )
                + "\n"
            )


def batches(
    examples: Sequence[Example], batch_size: int = 8, seed: int = 0, shuffle: bool = False
) -> list[list[Example]]:
    """Split examples into batches; the final partial batch is kept.

    Shuffling is a seeded Fisher-Yates permutation of the input order.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    order = list(examples)
    if shuffle:
        random.Random(seed).shuffle(order)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
