"""Visual inputs: images pass through as-is, videos are reduced to sampled frames."""

from __future__ import annotations

import enum
import mimetypes
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .gateway import ImagePart

VIDEO_SUFFIXES = {".mp4", ".mov", ".avi", ".mkv", ".webm", ".m4v", ".mpg", ".mpeg"}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".webp", ".gif", ".bmp"}


class MediaError(ValueError):
    pass


class MediaKind(str, enum.Enum):
    IMAGE = "image"
    VIDEO = "video"


@dataclass(frozen=True)
class MediaInput:
    kind: MediaKind
    source: str
    frames: tuple[ImagePart, ...] = field(default=(), repr=False)
    frame_indices: tuple[int, ...] = ()
    total_frames: Optional[int] = None

    def __post_init__(self):
        if not self.frames:
            raise MediaError(f"{self.source}: no frames")
        if self.kind is MediaKind.IMAGE and len(self.frames) != 1:
            raise MediaError("an image carries exactly one frame")

    def describe(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "source": self.source,
            "frame_indices": list(self.frame_indices),
            "total_frames": self.total_frames,
            "frame_sha256": [f.digest for f in self.frames],
        }


def _is_url(source: str) -> bool:
    return source.startswith(("http://", "https://"))


def uniform_frame_indices(total: int, count: int) -> list[int]:
    """Evenly spaced indices over ``range(total)``, first and last included."""
    if count < 1:
        raise MediaError("frame_count must be >= 1")
    if total <= 0:
        return []
    if count >= total:
        return list(range(total))
    if count == 1:
        return [0]
    return [i * (total - 1) // (count - 1) for i in range(count)]


def sample_frames(video_source: str, frame_count: int = 8, jpeg_quality: int = 90) -> MediaInput:
    import cv2

    if frame_count < 1:
        raise MediaError("frame_count must be >= 1")
    if not _is_url(video_source) and not Path(video_source).is_file():
        raise MediaError(f"cannot read video {video_source}")
    def open_capture():
        cap = cv2.VideoCapture(str(video_source))
        if not cap.isOpened():
            raise MediaError(f"cannot open video {video_source}")
        return cap

    # container frame counts are unreliable; count what actually decodes
    cap = open_capture()
    total = 0
    try:
        while cap.grab():
            total += 1
    finally:
        cap.release()
    indices = uniform_frame_indices(total, frame_count)
    if not indices:
        raise MediaError(f"no decodable frames in {video_source}")

    wanted = set(indices)
    parts = []
    cap = open_capture()
    try:
        for i in range(indices[-1] + 1):
            if not cap.grab():
                raise MediaError(f"{video_source}: frame {i} vanished on second pass")
            if i not in wanted:
                continue
            ok, frame = cap.retrieve()
            if not ok:
                raise MediaError(f"cannot decode frame {i} of {video_source}")
            ok, buf = cv2.imencode(".jpg", frame, [cv2.IMWRITE_JPEG_QUALITY, jpeg_quality])
            if not ok:
                raise MediaError(f"cannot encode frame {i} of {video_source}")
            parts.append(ImagePart("image/jpeg", data=buf.tobytes()))
    finally:
        cap.release()
    return MediaInput(MediaKind.VIDEO, str(video_source), tuple(parts), tuple(indices), total)


def load_image(source: str) -> MediaInput:
    if _is_url(source):
        return MediaInput(MediaKind.IMAGE, source, (ImagePart(url=source),), (0,), 1)
    path = Path(source)
    if not path.is_file():
        raise MediaError(f"cannot read image {source}")
    media_type = mimetypes.guess_type(path.name)[0] or "image/png"
    data = path.read_bytes()
    if not data:
        raise MediaError(f"empty image file {source}")
    return MediaInput(MediaKind.IMAGE, source, (ImagePart(media_type, data=data),), (0,), 1)


def is_video(source: str) -> bool:
    suffix = Path(source.split("?", 1)[0]).suffix.lower()
    return suffix in VIDEO_SUFFIXES


def load_media(source: str, frame_count: int = 8) -> MediaInput:
    """Images by suffix or URL pass through; known video suffixes get frame sampling."""
    if is_video(source):
        return sample_frames(source, frame_count)
    return load_image(source)
