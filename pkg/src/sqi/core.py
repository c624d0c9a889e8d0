"""Domain types shared by every stage of the inference pipeline."""

from __future__ import annotations

import base64
import binascii
import enum
from dataclasses import dataclass, field
from pathlib import Path


class SqiError(Exception):
    """Base class for every error raised by this package."""


class ImageError(SqiError):
    pass


class FailureMode(enum.Enum):
    METRIC_HALLUCINATION = "metric-hallucination"
    BACKGROUND_INTERFERENCE = "background-interference"
    CONFIRMATION_BIAS = "confirmation-bias"


class Stage(enum.Enum):
    """Blocks of a compiled protocol, in the order they must be rendered."""

    AXIOMS = "axioms"
    DECOMPOSITION = "decomposition"
    COUNTERFACTUAL = "counterfactual"
    ANSWER_FORMAT = "answer-format"


# One reasoning stage per failure mode; ANSWER_FORMAT carries no constraints.
STAGE_FOR_FAILURE_MODE: dict[FailureMode, Stage] = {
    FailureMode.METRIC_HALLUCINATION: Stage.AXIOMS,
    FailureMode.BACKGROUND_INTERFERENCE: Stage.DECOMPOSITION,
    FailureMode.CONFIRMATION_BIAS: Stage.COUNTERFACTUAL,
}
FAILURE_MODE_FOR_STAGE: dict[Stage, FailureMode] = {
    stage: mode for mode, stage in STAGE_FOR_FAILURE_MODE.items()
}


class Answer(enum.Enum):
    YES = "yes"
    NO = "no"


class ParseStatus(enum.Enum):
    CLEAN = "clean"
    RECOVERED = "recovered"
    UNPARSEABLE = "unparseable"


SUPPORTED_MEDIA_TYPES = ("image/png", "image/jpeg", "image/webp")


def sniff_media_type(data: bytes) -> str | None:
    if data.startswith(b"\x89PNG\r\n\x1a\n"):
        return "image/png"
    if data.startswith(b"\xff\xd8\xff"):
        return "image/jpeg"
    if len(data) >= 12 and data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "image/webp"
    return None


@dataclass(frozen=True)
class ImageRef:
    """An opaque image payload: base64 text plus its media type.

    ``source`` remembers where the bytes came from and is excluded from
    equality, so the same picture loaded from two paths compares equal.
    """

    media_type: str
    data_b64: str
    source: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.media_type not in SUPPORTED_MEDIA_TYPES:
            raise ImageError(f"unsupported media type {self.media_type!r}")
        try:
            raw = base64.b64decode(self.data_b64, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise ImageError(f"image payload is not valid base64: {exc}") from None
        sniffed = sniff_media_type(raw)
        if sniffed != self.media_type:
            raise ImageError(
                f"image payload does not decode to {self.media_type} (looks like {sniffed})"
            )

    @classmethod
    def from_bytes(cls, data: bytes, source: str | None = None) -> "ImageRef":
        media_type = sniff_media_type(data)
        if media_type is None:
            where = f" {source}" if source else ""
            raise ImageError(f"image{where} is not png, jpeg or webp")
        return cls(media_type, base64.b64encode(data).decode("ascii"), source)

    @classmethod
    def from_path(cls, path: str | Path) -> "ImageRef":
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), source=str(path))

    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{self.data_b64}"


@dataclass(frozen=True)
class IllusionQuery:
    item_id: str
    image: ImageRef
    question: str
    gt_label: int | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.item_id, str) or not self.item_id:
            raise ValueError("item_id must be a non-empty string")
        if not isinstance(self.question, str) or not self.question.strip():
            raise ValueError(f"item {self.item_id}: question is empty")
        if self.gt_label is not None and (
            isinstance(self.gt_label, bool) or self.gt_label not in (0, 1)
        ):
            raise ValueError(f"item {self.item_id}: gt_label must be 0 or 1")


@dataclass(frozen=True)
class Verdict:
    answer: Answer | None
    parse_status: ParseStatus

    def __post_init__(self) -> None:
        unparseable = self.parse_status is ParseStatus.UNPARSEABLE
        if unparseable != (self.answer is None):
            raise ValueError("an answer is present exactly when the verdict is parseable")

    @property
    def numeric_label(self) -> int | None:
        if self.answer is None:
            return None
        return 1 if self.answer is Answer.YES else 0

    @classmethod
    def unparseable(cls) -> "Verdict":
        return cls(None, ParseStatus.UNPARSEABLE)


def verdict_from_label(label: int) -> Verdict:
    if isinstance(label, bool) or label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    return Verdict(Answer.YES if label == 1 else Answer.NO, ParseStatus.CLEAN)


def verdict_to_label(verdict: Verdict) -> int | None:
    return verdict.numeric_label


@dataclass(frozen=True)
class ReasoningTrace:
    decomposition: str
    initial_judgment: str
    counterfactual: str
    final: Verdict
    raw: str

    @property
    def parse_status(self) -> ParseStatus:
        return self.final.parse_status
