# tests/test_imagecore.py

import numpy as np
import pytest

from iqa_forge.imagecore import (
    ImageFormat,
    PixelImage,
    center_crop,
    codec_info,
    decode,
    encode,
    hflip,
    load_image,
    random_crop,
    resize_bilinear,
    resize_largest_side,
    resize_shorter_side,
    save_image,
)
from iqa_forge.utils.enhanced_errors import (
    CropLargerThanImage,
    InvalidDimensions,
    IoError,
    MalformedFile,
    QualityOutOfRange,
    UnsupportedFormat,
)


def _ramp(width, height):
    values = np.arange(width * height * 3, dtype=np.int64) % 256
    return PixelImage.from_buffer(width, height, values.astype(np.uint8))


def test_png_decode_recovers_known_pixels():
    pixels = np.array([[[0, 10, 20], [30, 40, 50]], [[200, 210, 220], [255, 0, 128]]], dtype=np.uint8)
    img = PixelImage(pixels)
    decoded = decode(encode(img, ImageFormat.PNG), "png")
    assert decoded == img
    assert decode(encode(decoded, "PNG"), "PNG") == img


def test_decode_rejects_one_byte_input():
    with pytest.raises(MalformedFile):
        decode(b"\x89", ImageFormat.PNG)


def test_decode_rejects_mismatched_format(textured_image):
    with pytest.raises(MalformedFile):
        decode(encode(textured_image, ImageFormat.PNG), ImageFormat.JPEG)


def test_unsupported_format():
    with pytest.raises(UnsupportedFormat):
        decode(b"GIF89a", "GIF")


def test_jpeg_size_monotone_in_quality(textured_image):
    for img in (textured_image, PixelImage(np.full((64, 64, 3), 128, dtype=np.uint8))):
        assert len(encode(img, ImageFormat.JPEG, 10)) <= len(encode(img, ImageFormat.JPEG, 90))


@pytest.mark.parametrize("quality", [0, 101, None, 50.5])
def test_jpeg_quality_out_of_range(gray_image, quality):
    with pytest.raises(QualityOutOfRange):
        encode(gray_image, ImageFormat.JPEG, quality)


def test_jpeg_decode_keeps_dimensions(textured_image):
    out = decode(encode(textured_image, ImageFormat.JPEG, 30), ImageFormat.JPEG)
    assert out.size == textured_image.size


def test_pixel_image_validates_buffer():
    with pytest.raises(InvalidDimensions):
        PixelImage.from_buffer(2, 2, np.zeros(11, dtype=np.uint8))
    with pytest.raises(InvalidDimensions):
        PixelImage(np.zeros((0, 3, 3), dtype=np.uint8))
    with pytest.raises(InvalidDimensions):
        PixelImage(np.full((2, 2, 3), 300))


def test_resize_to_same_size_is_identity(textured_image):
    assert resize_bilinear(textured_image, 64, 64) == textured_image


def test_resize_matches_hand_computed_bilinear():
    img = PixelImage(np.array([[[0, 0, 0], [255, 255, 255]]], dtype=np.uint8))
    out = resize_bilinear(img, 4, 1)
    # half-pixel centers sample the source at -0.25 (clamped), 0.25, 0.75 and 1.25 (clamped)
    assert out.pixels[0, :, 0].tolist() == [0, 64, 191, 255]
    assert out.size == (4, 1)


def test_resize_largest_side_preserves_aspect():
    img = _ramp(512, 256)
    out = resize_largest_side(img, 256)
    assert out.size == (256, 128)


def test_resize_shorter_side():
    out = resize_shorter_side(_ramp(300, 200), 100)
    assert out.size == (150, 100)


def test_resize_rejects_empty_target(textured_image):
    with pytest.raises(InvalidDimensions):
        resize_bilinear(textured_image, 0, 10)


def test_resize_does_not_mutate_input(textured_image):
    before = textured_image.pixels.copy()
    resize_bilinear(textured_image, 17, 33)
    assert np.array_equal(textured_image.pixels, before)


def test_hflip_is_an_involution(textured_image):
    flipped = hflip(textured_image)
    assert flipped != textured_image
    assert hflip(flipped) == textured_image
    assert np.array_equal(flipped.pixels[:, 0], textured_image.pixels[:, -1])


def test_center_crop_takes_middle_window():
    img = _ramp(4, 4)
    out = center_crop(img, 2, 2)
    assert np.array_equal(out.pixels, img.pixels[1:3, 1:3])


def test_center_crop_odd_remainder_goes_top_left():
    img = _ramp(5, 5)
    out = center_crop(img, 2, 2)
    assert np.array_equal(out.pixels, img.pixels[1:3, 1:3])


def test_random_crop_is_deterministic(textured_image):
    a = random_crop(textured_image, 20, 30, np.random.default_rng(3))
    b = random_crop(textured_image, 20, 30, np.random.default_rng(3))
    assert a == b
    assert a.size == (20, 30)


def test_crop_larger_than_image(textured_image, rng):
    with pytest.raises(CropLargerThanImage):
        center_crop(textured_image, 65, 10)
    with pytest.raises(CropLargerThanImage):
        random_crop(textured_image, 10, 65, rng)


def test_save_and_load_roundtrip(tmp_path, textured_image):
    path = tmp_path / "img.png"
    save_image(textured_image, path)
    assert load_image(path) == textured_image


def test_load_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError) as excinfo:
        load_image(tmp_path / "missing.png")
    assert excinfo.value.exit_code == 2


def test_load_unknown_extension(tmp_path):
    with pytest.raises(UnsupportedFormat):
        load_image(tmp_path / "image.bmp")


def test_codec_info_names_pillow():
    info = codec_info()
    assert info["codec"] == "Pillow"
    assert info["pillow_version"]
