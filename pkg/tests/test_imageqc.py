import colorsys
import json

import numpy as np
import pytest
from scipy import ndimage

from annoqc.geometry import BinaryMask
from annoqc.imageqc import (
    BlurScore,
    ImageQcParams,
    Thumbnail,
    blur_map,
    blur_tile_score,
    detect_coverslip_edge,
    detect_pen,
    detect_tissue,
    load_thumbnail,
    luminance,
    morphological_cleanup,
    otsu_threshold,
    overlay_png,
    result_to_doc,
    rgb_to_hsv,
    run_imageqc,
)

PINK = (190, 135, 160)
BLUE = (40, 60, 200)
GREEN = (50, 180, 70)
INK = (10, 10, 10)
SLIP = (70, 60, 55)


def make_slide(seed=11, blur_sigma=0.0):
    """512x512 synthetic slide: white ground, noisy pink tissue block,
    pen strokes, ink dot, dark coverslip strip on the left."""
    rng = np.random.RandomState(seed)
    img = np.full((512, 512, 3), 245, dtype=np.int16)
    img[150:400, 150:400] = PINK
    # binary 32px clumps, same offset on all channels: luminance structure
    # steep enough to survive blur + quantization, saturation untouched
    blocks = np.kron(rng.choice([-50, 50], size=(8, 8)), np.ones((32, 32), int))
    img[150:400, 150:400] += blocks[:250, :250, None]
    img[100:300, 420:440] = BLUE
    img[420:470, 100:300] = GREEN
    img[200:220, 200:220] = INK
    img[:, 0:8] = SLIP
    img[0:50, 0:13] = BLUE  # pen crossing the coverslip margin
    img = np.clip(img, 0, 255).astype(np.uint8)
    if blur_sigma > 0:
        img = np.stack(
            [ndimage.gaussian_filter(img[..., c].astype(float), blur_sigma)
             for c in range(3)],
            axis=-1,
        ).clip(0, 255).astype(np.uint8)
    return Thumbnail(img, downsample=32.0, mpp=0.25)


def test_rgb_to_hsv_matches_colorsys():
    rng = np.random.RandomState(3)
    cols = rng.randint(0, 256, size=(500, 3)).astype(np.uint8)
    h, s, v = rgb_to_hsv(cols.reshape(1, 500, 3))
    for i, (r, g, b) in enumerate(cols):
        eh, es, ev = colorsys.rgb_to_hsv(r / 255.0, g / 255.0, b / 255.0)
        assert abs((h[0, i] / 360.0 - eh + 0.5) % 1.0 - 0.5) < 1e-9
        assert abs(s[0, i] - es) < 1e-9
        assert abs(v[0, i] - ev) < 1e-9


def test_otsu_splits_bimodal_sample():
    rng = np.random.RandomState(5)
    lo = rng.normal(0.12, 0.02, size=4000).clip(0, 1)
    hi = rng.normal(0.72, 0.03, size=3000).clip(0, 1)
    t = otsu_threshold(np.concatenate([lo, hi]))
    # ties across the empty gap resolve to its low edge
    assert lo.max() - 0.01 < t < hi.min()
    assert (lo <= t).all()
    assert (hi > t).all()


def test_otsu_rejects_empty():
    with pytest.raises(ValueError):
        otsu_threshold(np.array([]))


class TestPen:
    def test_strokes_found_tissue_and_ground_not(self):
        thumb = make_slide()
        pen = detect_pen(thumb).data
        assert pen[150:250, 425:435].all()  # blue stroke
        assert pen[430:460, 150:250].all()  # green stroke
        assert pen[205:215, 205:215].all()  # black ink
        assert not pen[300:350, 300:350].any()  # pink tissue
        assert not pen[20:80, 300:400].any()  # white ground

    def test_wrapping_red_band(self):
        red = np.zeros((4, 4, 3), dtype=np.uint8)
        red[...] = (200, 30, 40)  # hue around 356
        thumb = Thumbnail(red, 32.0, 0.25)
        assert detect_pen(thumb).data.all()


class TestCoverslip:
    def test_dark_margin_strip_flagged_whole_and_dilated(self):
        thumb = make_slide()
        cover = detect_coverslip_edge(thumb).data
        assert cover[:, 0:8].all()
        assert cover[:, 8:10].all()  # two rounds of 3x3 dilation
        assert not cover[:, 12:].any()

    def test_interior_dark_line_ignored(self):
        img = np.full((200, 200, 3), 245, dtype=np.uint8)
        img[:, 100:103] = 20  # dark, but far from any margin
        thumb = Thumbnail(img, 32.0, 0.25)
        assert not detect_coverslip_edge(thumb).data.any()

    def test_bright_slide_has_no_edges(self):
        img = np.full((64, 64, 3), 240, dtype=np.uint8)
        assert not detect_coverslip_edge(Thumbnail(img, 32.0, 0.25)).data.any()


class TestTissue:
    def test_pink_block_recovered(self):
        # artifact-free slide: ground vs. tissue is the only split
        rng = np.random.RandomState(2)
        img = np.full((512, 512, 3), 245, dtype=np.int16)
        img[150:400, 150:400] = PINK
        img[150:400, 150:400] += rng.randint(-25, 26, size=(250, 250, 1))
        thumb = Thumbnail(np.clip(img, 0, 255).astype(np.uint8), 32.0, 0.25)
        tissue = detect_tissue(thumb).data
        assert tissue[150:400, 150:400].all()
        assert not tissue[0:150, :].any()

    def test_artifact_exclusion_keeps_split_clean(self):
        # saturated pen would hijack the threshold unless excluded
        thumb = make_slide()
        pen = detect_pen(thumb).data
        cover = detect_coverslip_edge(thumb).data
        tissue = detect_tissue(thumb, exclude=pen | cover).data
        assert tissue[160:390, 160:390].mean() > 0.98
        assert not tissue[20:120, 20:120].any()

    def test_excluded_pixels_never_tissue(self):
        thumb = make_slide()
        exclude = np.zeros(thumb.shape, dtype=bool)
        exclude[150:400, 150:400] = True
        tissue = detect_tissue(thumb, exclude=exclude).data
        assert not tissue[150:400, 150:400].any()

    def test_flat_slide_has_no_tissue(self):
        img = np.full((128, 128, 3), 245, dtype=np.uint8)
        assert detect_tissue(Thumbnail(img, 32.0, 0.25)).popcount() == 0


def _blob_mask(data):
    data = np.asarray(data, dtype=bool)
    return BinaryMask(data.shape[1], data.shape[0], 32.0, (0.0, 0.0), data)


class TestCleanup:
    def test_speck_removed_object_kept(self):
        data = np.zeros((100, 100), dtype=bool)
        data[10:15, 10:15] = True  # 25 px speck
        data[40:60, 40:60] = True  # 400 px object
        out = morphological_cleanup(_blob_mask(data), 64, 64).data
        assert not out[10:15, 10:15].any()
        assert out[40:60, 40:60].all()

    def test_small_hole_filled_large_hole_kept(self):
        data = np.zeros((100, 100), dtype=bool)
        data[10:90, 10:90] = True
        data[20:25, 20:25] = False  # 25 px hole
        data[50:70, 50:70] = False  # 400 px hole
        out = morphological_cleanup(_blob_mask(data), 64, 64).data
        assert out[20:25, 20:25].all()
        assert not out[50:70, 50:70].any()

    def test_background_touching_border_never_filled(self):
        data = np.zeros((30, 30), dtype=bool)
        data[0:30, 10:20] = True  # band; background halves touch the border
        out = morphological_cleanup(_blob_mask(data), 4, 10_000).data
        assert (out == data).all()

    def test_idempotent_on_random_masks(self):
        rng = np.random.RandomState(7)
        for trial in range(100):
            raw = rng.rand(80, 80) > rng.uniform(0.35, 0.75)
            once = morphological_cleanup(_blob_mask(raw), 20, 20)
            twice = morphological_cleanup(once, 20, 20)
            assert (once.data == twice.data).all(), f"trial {trial}"


class TestBlurScore:
    def test_stripe_directional_score(self):
        tile = np.zeros((64, 64))
        tile[:, 1::2] = 1.0  # alternating columns
        score = blur_tile_score(tile)
        assert abs(score.horizontal - 1.0 / 9.0) < 0.02
        assert score.vertical == 1.0  # no variation along rows
        assert score.value == 1.0

    def test_stripes_smoothed_across_become_blurrier(self):
        tile = np.zeros((64, 64))
        tile[:, 1::2] = 1.0
        smoothed = ndimage.gaussian_filter(tile, sigma=1.0)
        assert (
            blur_tile_score(smoothed).horizontal
            > blur_tile_score(tile).horizontal
        )

    def test_flat_tile_is_maximally_smooth(self):
        score = blur_tile_score(np.full((32, 32), 0.5))
        assert score.horizontal == score.vertical == score.value == 1.0

    @pytest.mark.parametrize("texture", ["checker", "noise", "ramp"])
    def test_gaussian_blur_strictly_increases_score(self, texture):
        rng = np.random.RandomState(13)
        ix, iy = np.meshgrid(np.arange(128), np.arange(128))
        if texture == "checker":
            base = ((ix // 8 + iy // 8) % 2).astype(float)
        elif texture == "noise":
            base = rng.rand(128, 128)
        else:
            base = ix / 127.0 + 0.3 * rng.rand(128, 128)
        scores = []
        for sigma in (0, 1, 2, 4):
            img = base if sigma == 0 else ndimage.gaussian_filter(base, sigma)
            scores.append(blur_tile_score(img).value)
        assert all(a < b for a, b in zip(scores, scores[1:])), scores

    def test_rejects_degenerate_tiles(self):
        with pytest.raises(ValueError):
            blur_tile_score(np.zeros((1, 64)))
        with pytest.raises(ValueError):
            blur_tile_score(np.zeros(64))


def _half_blurry_slide():
    """256x128: top row of tiles is ground, bottom row is tissue with the
    left half textured (sharp) and the right half constant (smooth)."""
    rng = np.random.RandomState(21)
    img = np.full((128, 256, 3), 245, dtype=np.int16)
    img[64:128, :] = PINK
    img[64:128, 0:128] += rng.randint(-20, 21, size=(64, 128, 1))
    return Thumbnail(np.clip(img, 0, 255).astype(np.uint8), 32.0, 0.25)


class TestBlurMap:
    def test_counts_and_fraction(self):
        thumb = _half_blurry_slide()
        tissue = detect_tissue(thumb).data
        tiles, fraction = blur_map(luminance(thumb.pixels), tissue)
        assert len(tiles) == 8
        counted = [t for t in tiles if t.counted]
        assert len(counted) == 4
        assert all(t.y == 64 for t in counted)
        assert fraction == 0.5

    def test_slide_denominator_counts_everything(self):
        thumb = _half_blurry_slide()
        tissue = detect_tissue(thumb).data
        params = ImageQcParams(blur_denominator="slide")
        tiles, fraction = blur_map(luminance(thumb.pixels), tissue, params)
        assert all(t.counted for t in tiles)
        # the 4 ground tiles are constant, so they count as smooth too
        assert fraction == 6 / 8

    def test_partial_edge_tiles_skipped(self):
        gray = np.zeros((100, 130))
        tiles, _ = blur_map(gray, np.ones((100, 130), dtype=bool))
        assert len(tiles) == 2  # 1 row x 2 cols of whole 64px tiles


class TestRunImageQc:
    def test_sharp_slide_accepted(self):
        res = run_imageqc(make_slide())
        assert res.decision == "accept"
        assert res.reason is None
        assert res.blurry_fraction <= 0.6
        assert res.tile_px == 64

    def test_blurred_slide_rejected(self):
        res = run_imageqc(make_slide(blur_sigma=8.0))
        assert res.decision == "reject"
        assert res.reason == "blur"
        assert res.blurry_fraction > 0.6

    def test_blank_slide_rejected_for_no_tissue(self):
        img = np.full((256, 256, 3), 245, dtype=np.uint8)
        res = run_imageqc(Thumbnail(img, 32.0, 0.25))
        assert res.decision == "reject"
        assert res.reason == "no-tissue"
        assert res.warnings

    def test_masks_pairwise_disjoint(self):
        res = run_imageqc(make_slide())
        pen, cover, tissue = res.pen.data, res.coverslip.data, res.tissue.data
        assert not (pen & cover).any()
        assert not (pen & tissue).any()
        assert not (cover & tissue).any()
        # the engineered pen-over-margin overlap was resolved toward pen
        assert pen[10:40, 10:12].all()
        assert res.coverslip.popcount() > 0

    def test_rejection_threshold_is_strict(self):
        thumb = _half_blurry_slide()
        at = run_imageqc(thumb, reject_fraction=0.5)
        below = run_imageqc(thumb, reject_fraction=0.49)
        assert at.blurry_fraction == 0.5
        assert at.decision == "accept"
        assert below.decision == "reject"
        assert below.reason == "blur"

    def test_result_doc_is_json_ready(self):
        res = run_imageqc(make_slide())
        doc = result_to_doc(res)
        text = json.dumps(doc)
        back = json.loads(text)
        assert back["decision"] == "accept"
        assert back["tile_px"] == 64
        assert back["counted_tiles"] == res.counted_tiles
        assert len(back["tiles"]) == len(res.tiles)
        assert back["tissue_px"] == res.tissue.popcount()

    def test_overlay_size(self):
        thumb = make_slide()
        img = overlay_png(thumb, run_imageqc(thumb))
        assert img.size == (512, 512)


class TestThumbnailIo:
    def test_load_with_sidecar(self, tmp_path):
        thumb = make_slide()
        overlay = tmp_path / "w1.png"
        from PIL import Image

        Image.fromarray(thumb.pixels).save(overlay)
        (tmp_path / "w1.json").write_text(
            json.dumps({"downsample": 32.0, "mpp": 0.25}), encoding="utf-8"
        )
        loaded = load_thumbnail(overlay)
        assert loaded.downsample == 32.0
        assert loaded.mpp == 0.25
        assert (loaded.pixels == thumb.pixels).all()

    def test_load_defaults_without_sidecar(self, tmp_path):
        from PIL import Image

        path = tmp_path / "plain.png"
        Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(path)
        loaded = load_thumbnail(path, downsample=4.0, mpp=0.5)
        assert loaded.downsample == 4.0 and loaded.mpp == 0.5

    def test_thumbnail_validation(self):
        with pytest.raises(ValueError):
            Thumbnail(np.zeros((4, 4), dtype=np.uint8), 1.0, 0.25)
        with pytest.raises(ValueError):
            Thumbnail(np.zeros((4, 4, 3), dtype=np.uint8), 0.5, 0.25)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            ImageQcParams(tile_px=8)
        with pytest.raises(ValueError):
            ImageQcParams(blur_denominator="boxes")
        with pytest.raises(ValueError):
            ImageQcParams(blur_reject_fraction=1.5)
