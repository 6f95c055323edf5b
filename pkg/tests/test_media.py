import pytest

from epoche.media import MediaError, MediaKind, load_media, sample_frames, uniform_frame_indices
from helpers import write_png, write_video


def independent_indices(total, count):
    # nearest-below point of each of `count` equal steps across [0, total-1]
    step = (total - 1) / (count - 1)
    return [int(i * step + 1e-9) for i in range(count)]


def test_uniform_indices_example():
    assert uniform_frame_indices(80, 8) == [0, 11, 22, 33, 45, 56, 67, 79]
    assert independent_indices(80, 8) == [0, 11, 22, 33, 45, 56, 67, 79]


@pytest.mark.parametrize("total", [2, 5, 17, 80, 301, 1000])
@pytest.mark.parametrize("count", [2, 3, 8, 16])
def test_uniform_indices_properties(total, count):
    idx = uniform_frame_indices(total, count)
    if count >= total:
        assert idx == list(range(total))
        return
    assert idx == independent_indices(total, count)
    assert idx[0] == 0 and idx[-1] == total - 1
    assert idx == sorted(set(idx))


def test_uniform_indices_edges():
    assert uniform_frame_indices(3, 8) == [0, 1, 2]
    assert uniform_frame_indices(10, 1) == [0]
    assert uniform_frame_indices(0, 4) == []
    with pytest.raises(MediaError):
        uniform_frame_indices(10, 0)


def test_sample_frames(tmp_path):
    video = write_video(tmp_path / "v.mp4", 80)
    media = sample_frames(str(video), 8)
    assert media.kind is MediaKind.VIDEO
    assert media.frame_indices == (0, 11, 22, 33, 45, 56, 67, 79)
    assert len(media.frames) == 8 and media.frames[0].media_type == "image/jpeg"
    assert [f.digest for f in sample_frames(str(video), 8).frames] == [f.digest for f in media.frames]


def test_sample_frames_clamps(tmp_path):
    video = write_video(tmp_path / "short.mp4", 3)
    media = load_media(str(video), 8)
    assert len(media.frames) == 3


def test_image_single_frame(tmp_path):
    image = write_png(tmp_path / "a.png", 1)
    media = load_media(str(image))
    assert media.kind is MediaKind.IMAGE and len(media.frames) == 1
    assert media.frames[0].data == image.read_bytes()
    assert media.frames[0].media_type == "image/png"


def test_image_url_passthrough():
    media = load_media("https://example.test/a.jpg")
    assert media.frames[0].url == "https://example.test/a.jpg"


def test_missing_media(tmp_path):
    with pytest.raises(MediaError):
        load_media(str(tmp_path / "missing.mp4"))
    with pytest.raises(MediaError):
        load_media(str(tmp_path / "missing.png"))
    bad = tmp_path / "bad.mp4"
    bad.write_bytes(b"not a video")
    with pytest.raises(MediaError):
        load_media(str(bad))
