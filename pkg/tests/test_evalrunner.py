import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from t2icount.data import CountingSample
from t2icount.errors import InputError
from t2icount.evalrunner import (REFERENCE_ROWS, compute_metrics, coverage_map, format_table, oracle_predictor,
                                 run_benchmark, sliding_window_maps, sliding_window_predict, window_starts,
                                 write_report)


def constant_model(c):
    return lambda im, prompt: torch.full((im.shape[-2] // 8, im.shape[-1] // 8), c)


def content_model(im, prompt):
    """Density = mean over channels, pooled to 1/8: depends on content and position."""
    return torch.nn.functional.avg_pool2d(im.mean(0, keepdim=True)[None], 8)[0, 0]


def brute_force_coverage(h, w, window, stride):
    ph = max(window, math.ceil(h / 8) * 8)
    pw = max(window, math.ceil(w / 8) * 8)
    cover = np.zeros((ph, pw), dtype=int)
    ys = list(range(0, ph - window + 1, stride))
    xs = list(range(0, pw - window + 1, stride))
    if ys[-1] + window < ph:
        ys.append(ph - window)
    if xs[-1] + window < pw:
        xs.append(pw - window)
    for y in ys:
        for x in xs:
            cover[y:y + window, x:x + window] += 1
    return cover[::8, ::8]


def test_window_starts():
    assert window_starts(384, 384, 384) == [0]
    assert window_starts(768, 384, 384) == [0, 384]
    assert window_starts(504, 384, 384) == [0, 120]


def test_single_window_equals_direct_forward():
    img = torch.rand(3, 384, 384)
    out = sliding_window_predict(content_model, img, "x")
    assert torch.allclose(out, content_model(img, "x"), atol=1e-6)


def test_exact_tiling_is_concatenation():
    img = torch.rand(3, 384, 768)
    out = sliding_window_predict(content_model, img, "x")
    ref = torch.cat([content_model(img[:, :, :384], "x"), content_model(img[:, :, 384:], "x")], dim=1)
    assert torch.allclose(out, ref, atol=1e-6)


def test_constant_density_survives_overlap():
    out = sliding_window_predict(constant_model(0.25), torch.rand(3, 500, 384), "x")
    assert out.shape == (63, 48)
    assert torch.allclose(out, torch.full_like(out, 0.25), atol=1e-6)


@pytest.mark.parametrize("h,w", [(500, 384), (384, 384), (100, 37), (800, 1000), (768, 384)])
def test_coverage_matches_brute_force(h, w):
    assert (coverage_map(h, w).numpy() == brute_force_coverage(h, w, 384, 384)).all()


def test_small_images_pad_and_crop():
    out = sliding_window_predict(constant_model(1.0), torch.rand(3, 20, 9), "x")
    assert out.shape == (3, 2)


def test_coarse_maps_stitch_on_the_density_grid():
    # the clamped second window starts at 120 px, off the 1/32 grid
    def predict(im, p):
        h, w = im.shape[-2:]
        return {"density": torch.ones(h // 8, w // 8), "S3": torch.full((h // 32, w // 32), 0.5)}
    maps = sliding_window_maps(predict, torch.rand(3, 500, 384), "x")
    assert maps["S3"].shape == maps["density"].shape == (63, 48)
    assert torch.allclose(maps["S3"], torch.full_like(maps["S3"], 0.5))


def test_coarse_map_cells_are_repeated():
    def predict(im, p):
        return {"S3": torch.arange(4.0).view(2, 2)}
    S = sliding_window_maps(predict, torch.rand(3, 64, 64), "x", window=64, stride=64)["S3"]
    assert S.shape == (8, 8)
    assert (S[:4, :4] == 0).all() and (S[4:, 4:] == 3).all()


def test_maps_that_do_not_tile_are_rejected():
    with pytest.raises(InputError):
        sliding_window_maps(lambda im, p: {"x": torch.ones(3, 3)}, torch.rand(3, 64, 64), "x", 64, 64)


def test_metrics_examples():
    mae, rmse = compute_metrics([(10, 8), (5, 9)])
    assert mae == pytest.approx(3, abs=1e-9) and rmse == pytest.approx(math.sqrt(10), abs=1e-9)
    assert compute_metrics([(7, 7)]) == (0.0, 0.0)
    with pytest.raises(InputError):
        compute_metrics([])


@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_rmse_at_least_mae_and_permutation_invariant(pairs):
    mae, rmse = compute_metrics(pairs)
    assert rmse >= mae - 1e-9 * max(1.0, mae)
    mae2, rmse2 = compute_metrics(list(reversed(pairs)))
    assert mae2 == pytest.approx(mae) and rmse2 == pytest.approx(rmse)


def samples(n=3):
    rng = np.random.default_rng(0)
    return [CountingSample(f"im{i}", "dots", rng.uniform(0, 60, size=(i + 2, 2)), image_tensor=torch.rand(3, 70, 64))
            for i in range(n)]


def test_oracle_scores_zero():
    res = run_benchmark(oracle_predictor(4.0), samples(), "synth")
    assert res.mae == pytest.approx(0, abs=1e-6) and res.rmse == pytest.approx(0, abs=1e-6)
    assert res.n == 3 and not res.failures


def test_failures_are_recorded_not_fatal():
    def predict(sample):
        if sample.image_id == "im1":
            raise RuntimeError("boom")
        return torch.zeros(2, 2)
    res = run_benchmark(predict, samples())
    assert res.n == 2 and res.failures == [("im1", "boom")]


def test_report_files(tmp_path):
    res = run_benchmark(oracle_predictor(4.0), samples(), "fsc147s", "minority", "abc")
    summary = write_report(res, tmp_path, "test", "oracle")
    assert summary["mae"] <= summary["rmse"] + 1e-9 and summary["config_hash"] == "abc"
    records = [json.loads(l) for l in (tmp_path / "records.jsonl").read_text().splitlines()]
    assert [r["id"] for r in records] == ["im0", "im1", "im2"]
    assert set(records[0]) == {"id", "pred", "gt", "abs_err"}
    table = (tmp_path / "table.txt").read_text()
    assert "4.69" in table and "8.06" in table and "oracle" in table


def test_reference_rows_are_static():
    assert REFERENCE_ROWS["fsc147"][0][1]["test"] == (11.76, 97.86)
    assert REFERENCE_ROWS["carpk"][0][1]["test"] == (8.61, 13.47)


def test_format_table_alignment():
    text = format_table([("a", {"val": (1.0, 2.0)}), ("long name", {})], ["val"])
    lines = text.splitlines()
    assert len({len(l) for l in lines}) == 1
    assert "-" in lines[-1]
