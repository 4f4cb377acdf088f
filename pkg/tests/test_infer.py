import json

import numpy as np
import pytest

from facemask.backbone import Backbone, EmbeddingStore
from facemask.dataset import ImageBuffer, Label, Split
from facemask.infer import (
    FONT_SCALE,
    GLYPH_H,
    LINE_WIDTH,
    MASK_COLOR,
    NO_MASK_COLOR,
    Detection,
    FaceBox,
    classify_crops,
    confidence_text,
    crop,
    read_boxes,
    render_overlay,
)
from facemask.nnhead import HeadParameters
from facemask.synthetic import separable_embeddings
from facemask.train import TrainConfig, train


def write_lines(path, *objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))
    return path


def test_read_boxes_two_boxes(tmp_path):
    p = write_lines(tmp_path / "b.jsonl", {"image": "a.ppm", "boxes": [[1, 2, 3, 4], [5, 6, 7, 8]]},
                    {"image": "b.ppm", "boxes": []})
    boxes = read_boxes(p)
    assert boxes == {"a.ppm": [FaceBox(1, 2, 3, 4), FaceBox(5, 6, 7, 8)], "b.ppm": []}


def test_read_boxes_empty_file(tmp_path):
    (tmp_path / "b.jsonl").write_text("")
    assert read_boxes(tmp_path / "b.jsonl") == {}


def test_read_boxes_zero_width_reports_line(tmp_path):
    p = write_lines(tmp_path / "b.jsonl", {"image": "a.ppm", "boxes": [[0, 0, 4, 4]]},
                    {"image": "c.ppm", "boxes": [[0, 0, 0, 4]]})
    with pytest.raises(ValueError, match="line 2"):
        read_boxes(p)


def test_read_boxes_duplicate_image(tmp_path):
    p = write_lines(tmp_path / "b.jsonl", {"image": "a.ppm", "boxes": []}, {"image": "a.ppm", "boxes": []})
    with pytest.raises(ValueError, match="duplicate"):
        read_boxes(p)


@pytest.mark.parametrize("line", ['{"boxes": []}', "not json", '{"image": 3, "boxes": []}',
                                  '{"image": "a", "boxes": [[1, 2]]}'])
def test_read_boxes_malformed(tmp_path, line):
    (tmp_path / "b.jsonl").write_text(line + "\n")
    with pytest.raises(ValueError, match="line 1"):
        read_boxes(tmp_path / "b.jsonl")


def test_box_clamp():
    assert FaceBox(-5, -5, 10, 10).clamp(20, 20) == FaceBox(0, 0, 5, 5)
    assert FaceBox(15, 0, 10, 10).clamp(20, 20) == FaceBox(15, 0, 5, 10)
    with pytest.raises(ValueError, match="outside"):
        FaceBox(30, 0, 5, 5).clamp(20, 20)


def test_crop_region(rng):
    px = rng.integers(0, 256, (10, 12, 3), dtype=np.uint8)
    assert np.array_equal(crop(ImageBuffer(px), FaceBox(2, 3, 4, 5)).pixels, px[3:8, 2:6])


@pytest.mark.parametrize("conf, text", [(0.5, "50%"), (0.996, "100%"), (0.873, "87%"), (0.994, "99%")])
def test_confidence_text(conf, text):
    assert confidence_text(conf) == text


def blank(w=60, h=60, value=128):
    return ImageBuffer(np.full((h, w, 3), value, np.uint8))


def test_render_no_detections_is_copy():
    img = blank()
    out = render_overlay(img, [])
    assert out == img and out.pixels is not img.pixels


def test_render_perimeter_and_purity():
    img = blank()
    before = img.pixels.copy()
    box = FaceBox(10, 30, 20, 20)
    out = render_overlay(img, [Detection(box, Label.MASK, 0.9)]).pixels
    assert np.array_equal(img.pixels, before)
    region = out[30:50, 10:30]
    ring = np.ones((20, 20), bool)
    ring[LINE_WIDTH:-LINE_WIDTH, LINE_WIDTH:-LINE_WIDTH] = False
    assert np.all(region[ring] == MASK_COLOR)
    assert np.all(region[~ring] == 128)
    # text sits above the box
    text_rows = out[30 - 2 - GLYPH_H * FONT_SCALE:28]
    assert np.any(np.all(text_rows == MASK_COLOR, axis=2))
    # nothing drawn outside box and text band
    untouched = np.ones(out.shape[:2], bool)
    untouched[30:50, 10:30] = False
    untouched[30 - 2 - GLYPH_H * FONT_SCALE:28, 10:] = False
    assert np.all(out[untouched] == 128)


def test_render_colors_by_label():
    out = render_overlay(blank(), [Detection(FaceBox(5, 20, 15, 15), Label.NO_MASK, 0.7)]).pixels
    assert tuple(out[20, 5]) == NO_MASK_COLOR


def test_render_text_inside_when_no_room_above():
    out = render_overlay(blank(), [Detection(FaceBox(0, 0, 50, 50), Label.MASK, 1.0)]).pixels
    inner = out[LINE_WIDTH:50 - LINE_WIDTH, LINE_WIDTH:50 - LINE_WIDTH]
    assert np.any(np.all(inner == MASK_COLOR, axis=2))


def test_render_painters_order():
    dets = [Detection(FaceBox(10, 25, 20, 20), Label.MASK, 0.9),
            Detection(FaceBox(10, 25, 20, 20), Label.NO_MASK, 0.9)]
    out = render_overlay(blank(), dets).pixels
    assert tuple(out[25, 10]) == NO_MASK_COLOR
    assert not np.any(np.all(out == MASK_COLOR, axis=2))


def test_render_rejects_gray():
    with pytest.raises(ValueError):
        render_overlay(ImageBuffer(np.zeros((10, 10, 1), np.uint8)), [])


def test_classify_zero_params_half(rng):
    img = ImageBuffer(rng.integers(0, 256, (50, 40, 3), dtype=np.uint8))
    dets = classify_crops(img, [FaceBox(0, 0, 40, 50), FaceBox(5, 5, 10, 10)],
                          Backbone.default_builtin(), HeadParameters.zeros(32))
    assert [d.confidence for d in dets] == [0.5, 0.5]
    assert dets[0].box == FaceBox(0, 0, 40, 50)


def random_params(rng, d=32):
    p = HeadParameters.zeros(d)
    for arr in p.arrays():
        arr[...] = rng.standard_normal(arr.shape).astype(np.float32) * 0.05
    return p


def test_classify_grayscale_flag(rng):
    params = random_params(rng)
    bb = Backbone.default_builtin()
    box = [FaceBox(0, 0, 30, 30)]
    neutral = np.repeat(rng.integers(0, 256, (30, 30, 1), dtype=np.uint8), 3, axis=2)
    # luma of an R=G=B pixel is the pixel itself, so the flag is a no-op here
    a = classify_crops(ImageBuffer(neutral), box, bb, params, grayscale=True)
    b = classify_crops(ImageBuffer(neutral), box, bb, params, grayscale=False)
    assert a == b
    colored = rng.integers(0, 256, (30, 30, 3), dtype=np.uint8)
    a = classify_crops(ImageBuffer(colored), box, bb, params, grayscale=True)
    b = classify_crops(ImageBuffer(colored), box, bb, params, grayscale=False)
    assert a[0].confidence != b[0].confidence


def test_classify_box_outside_raises():
    with pytest.raises(ValueError, match="outside"):
        classify_crops(blank(20, 20), [FaceBox(25, 25, 5, 5)], Backbone.default_builtin(),
                       HeadParameters.zeros(32))


def test_classify_separable_embeddings_confident():
    manifest, store = separable_embeddings(n=120, n_train=80, dims=(5, 5, 8), seed=4)
    params, _ = train(manifest, Backbone.embedding(store),
                      TrainConfig(epochs=30, steps_per_epoch=10, batch_size=16, seed=0))
    tests = manifest.split(Split.TEST)
    crops = EmbeddingStore(store.dims)
    for i, rec in enumerate(tests):
        crops.add(f"scene.ppm#{i}", store[rec.path].values)
    boxes = [FaceBox(0, 0, 4, 4)] * len(tests)
    dets = classify_crops(blank(10, 10), boxes, Backbone.embedding(crops), params, image_key="scene.ppm")
    assert [d.label for d in dets] == [r.label for r in tests]
    assert np.mean([d.confidence for d in dets]) > 0.99
