import dataclasses

import numpy as np
import pytest

from ppg.composer import (
    INSET,
    MIN_CONTRAST,
    Palette,
    compose_poster,
    contrast_ratio,
    extract_palette,
    fit_text,
    pick_text_color,
    procedural_background,
    relative_luminance,
)
from ppg.layout import Category, Element, Layout
from ppg.render import box_to_pixels


def test_palette_weights_and_order():
    img = np.zeros((10, 10, 4), np.uint8)
    img[..., 3] = 255
    img[:6, :, :3] = (250, 10, 10)
    img[6:, :, :3] = (10, 10, 250)
    img[9, 9, 3] = 0  # transparent pixels are ignored
    pal = extract_palette(img)
    assert pal.dominant == (250, 10, 10) and pal.accent == (10, 10, 250)
    assert sum(w for _, w in pal.colors) == pytest.approx(1.0)
    assert pal.colors[0][1] == pytest.approx(60 / 99)
    with pytest.raises(ValueError):
        Palette(())


def test_grayscale_product_gives_grayscale_background():
    img = np.zeros((8, 8, 4), np.uint8)
    img[..., :3] = np.arange(64).reshape(8, 8, 1) * 3
    img[..., 3] = 255
    bg = procedural_background(extract_palette(img), (40, 60), seed=3)
    assert bg.shape == (60, 40, 3)
    assert (bg[..., 0] == bg[..., 1]).all() and (bg[..., 1] == bg[..., 2]).all()
    assert np.array_equal(bg, procedural_background(extract_palette(img), (40, 60), seed=3))


def test_background_luminance_is_light(records):
    lums = []
    for i, r in enumerate(records):
        bg = procedural_background(extract_palette(r.cutout()), (64, 96), seed=i)
        lums.append(relative_luminance(bg.reshape(-1, 3).mean(axis=0)))
    assert np.mean(lums) >= 0.6


def test_pick_text_color_examples():
    white = np.full((4, 4, 3), 255, np.uint8)
    black = np.zeros((4, 4, 3), np.uint8)
    assert pick_text_color(white) == (0, 0, 0)
    assert contrast_ratio((0, 0, 0), (255, 255, 255)) == pytest.approx(21.0)
    assert pick_text_color(black) == (255, 255, 255)
    # sRGB 188 is linear luminance ~0.5
    gray = np.full((4, 4, 3), 188, np.uint8)
    assert relative_luminance((188, 188, 188)) == pytest.approx(0.5, abs=0.01)
    assert contrast_ratio(pick_text_color(gray), (188, 188, 188)) >= MIN_CONTRAST
    with pytest.raises(ValueError):
        pick_text_color(np.zeros((0, 3, 3), np.uint8))


def test_black_or_white_always_clears_contrast_floor():
    rng = np.random.default_rng(0)
    for rgb in rng.integers(0, 256, (2000, 3)):
        region = np.broadcast_to(rgb, (2, 2, 3)).astype(np.uint8)
        assert contrast_ratio(pick_text_color(region), rgb) >= MIN_CONTRAST


def test_fit_text_prefers_one_line_and_wraps_when_narrow():
    size, lines = fit_text("Fresh Coffee", 0, 300, 60)
    assert lines == ["Fresh Coffee"] and size >= 12
    size, lines = fit_text("Fresh roasted morning coffee beans", 0, 60, 120)
    assert len(lines) > 1
    assert fit_text("x", 0, 0, 10) is None


def text_regions(result, record, layout, seed):
    """Region means over each text box, measured on the same poster with no text drawn."""
    bare = compose_poster(record, layout, seed, draw_text=False)
    out = []
    for e in result.report["elements"]:
        if e["category"] == "text" and "color" in e:
            x0, y0, x1, y1 = e["box_px"]
            out.append((e, bare.image[y0:y1, x0:x1].reshape(-1, 3).astype(np.float64).mean(axis=0)))
    return out


def test_text_inside_box_with_contrast(records):
    checked = 0
    for i, r in enumerate(records[:12]):
        res = compose_poster(r, r.ground_truth, seed=i)
        assert res.image.shape == (750, 513, 3)
        for e, mean in text_regions(res, r, r.ground_truth, i):
            x0, y0, x1, y1 = e["box_px"]
            ix0, iy0, ix1, iy1 = e["ink_px"]
            assert ix0 >= x0 + INSET and iy0 >= y0 + INSET
            assert ix1 <= x1 - INSET and iy1 <= y1 - INSET
            assert contrast_ratio(e["color"], mean) >= MIN_CONTRAST
            checked += 1
    assert checked > 20


def test_compose_is_deterministic(records):
    r = records[3]
    a = compose_poster(r, r.ground_truth, seed=9)
    b = compose_poster(r, r.ground_truth, seed=9)
    assert np.array_equal(a.image, b.image) and a.report == b.report


def test_png_bytes_are_reproducible(tmp_path, records):
    r = records[4]
    for k in range(2):
        compose_poster(r, r.ground_truth, seed=2).save(tmp_path / f"{k}.png", tmp_path / f"{k}.json")
    assert (tmp_path / "0.png").read_bytes() == (tmp_path / "1.png").read_bytes()
    assert (tmp_path / "0.json").read_text() == (tmp_path / "1.json").read_text()


def test_text_deficit_is_an_error(records):
    r = records[0]
    texts = r.ground_truth.texts
    layout = Layout(tuple(dataclasses.replace(e, text=None) for e in r.ground_truth.elements))
    with pytest.raises(ValueError, match="short by"):
        compose_poster(r, layout, 0, texts=[t.text for t in texts][:-1] if texts else [])


def test_zero_text_layout_has_background_and_product_only(records):
    r = records[5]
    layout = Layout(tuple(e for e in r.ground_truth.elements if e.category == Category.PRODUCT))
    res = compose_poster(r, layout, 1)
    assert res.report["missing_glyphs"] == 0
    assert all(e["category"] == "product" for e in res.report["elements"])
    x0, y0, x1, y1 = box_to_pixels(layout.product, 513, 750)
    outside = res.image.copy()
    outside[y0:y1, x0:x1] = 0
    bg = procedural_background(extract_palette(r.cutout()), (513, 750), 1)
    bg[y0:y1, x0:x1] = 0
    assert np.array_equal(outside, bg)


def test_underlay_drawn_before_text(records):
    r = next(r for r in records if r.ground_truth.of(Category.UNDERLAY))
    with_text = compose_poster(r, r.ground_truth, 0)
    text_el = next(e for e in with_text.report["elements"] if e["category"] == "text" and e.get("ink_px"))
    x0, y0, x1, y1 = text_el["ink_px"]
    patch = with_text.image[y0:y1, x0:x1].reshape(-1, 3)
    # pure text color pixels survive on top of everything else
    assert (patch == np.array(text_el["color"])).all(axis=1).any()


def test_missing_glyphs_are_boxed_and_counted(records):
    r = records[0]
    layout = Layout((Element(Category.TEXT, 0.5, 0.2, 0.8, 0.1, text="新品 上市 sale"),))
    res = compose_poster(r, layout, 0)
    entry = res.report["elements"][0]
    assert entry["missing_glyphs"] == 4 and res.report["missing_glyphs"] == 4
    x0, y0, x1, y1 = entry["box_px"]
    ix0, iy0, ix1, iy1 = entry["ink_px"]
    assert x0 + INSET <= ix0 and ix1 <= x1 - INSET and y0 + INSET <= iy0 and iy1 <= y1 - INSET
