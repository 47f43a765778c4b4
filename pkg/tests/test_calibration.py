import csv
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from bayes_seg import tensor as T
from bayes_seg.calibration import (
    McConfig,
    ReliabilityBin,
    binarize,
    ece_dataset,
    ece_image,
    mc_predict,
    merge_bins,
    reliability_svg,
    reliability_table,
    saliency_map,
    saliency_uncertainty,
    write_reliability_csv,
)
from bayes_seg.segnet import ArchitectureConfig, build_model, forward_mean, forward_stochastic
from oracles import brute_force_ece, mc_scaling_ratio

SMALL = dict(depth=2, base_channels=2, input_size=16)


# -------------------------------------------------------------------- ECE

def test_ece_confident_and_correct():
    y = (np.arange(64).reshape(8, 8) % 5 == 0).astype(float)
    p = np.where(y == 1, 1 - 1e-7, 1e-7)
    assert ece_image(p, y)[0] < 1e-6


def test_ece_calibrated_single_bin():
    p = np.full(10, 0.7)
    y = np.array([1] * 7 + [0] * 3, dtype=float)
    assert ece_image(p, y)[0] == pytest.approx(0.0, abs=1e-15)


def test_ece_overconfident():
    p = np.full(10, 0.9)
    y = np.array([1] * 5 + [0] * 5, dtype=float)
    ece, bins = ece_image(p, y)
    assert ece == pytest.approx(0.4, abs=1e-15)
    rows = reliability_table(bins)
    full = [r for r in rows if r[2]]
    assert len(full) == 1
    assert full[0][5] == pytest.approx(-0.4, abs=1e-15)
    assert all(math.isnan(r[3]) and math.isnan(r[5]) for r in rows if not r[2])


def test_ece_calibrated_across_bins():
    # background pixels p=0.2 (confidence 0.8), 8 of 10 truly background;
    # foreground pixels p=0.6, 6 of 10 truly foreground
    p = np.array([0.2] * 10 + [0.6] * 10)
    y = np.array([0] * 8 + [1] * 2 + [1] * 6 + [0] * 4, dtype=float)
    assert ece_image(p, y)[0] == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(50))
def test_ece_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    shape = (int(r.integers(1, 20)), int(r.integers(1, 20)))
    m = int(r.integers(1, 25))
    p = r.uniform(0, 1, shape)
    # sprinkle exact bin edges and endpoints
    flat = p.reshape(-1)
    k = min(flat.size, 5)
    flat[:k] = r.choice([0.0, 0.5, 1.0, 1 / m, (m - 1) / m], k)
    y = (r.uniform(size=shape) > 0.4).astype(float)
    ece, bins = ece_image(p, y, m)
    ref, counts = brute_force_ece(p, y, m)
    assert abs(ece - ref) <= 1e-12
    assert [b.count for b in bins] == counts
    assert sum(b.count for b in bins) == p.size
    assert 0.0 <= ece <= 1.0


def test_ece_dataset():
    assert ece_dataset([0.3]) == 0.3
    assert ece_dataset([0.0, 0.4]) == pytest.approx(0.2, abs=1e-15)
    r = np.random.default_rng(0)
    per = []
    for _ in range(5):
        p, y = r.uniform(size=(8, 8)), (r.uniform(size=(8, 8)) > 0.5).astype(float)
        per.append(ece_image(p, y)[0])
        assert abs(per[-1] - brute_force_ece(p, y, 15)[0]) <= 1e-12
    assert abs(ece_dataset(per) - sum(per) / 5) <= 1e-12
    with pytest.raises(ValueError):
        ece_dataset([])


def test_ece_errors():
    with pytest.raises(ValueError):
        ece_image(np.array([]), np.array([]))
    with pytest.raises(ValueError):
        ece_image(np.array([0.5]), np.array([1.0]), num_bins=0)
    with pytest.raises(ValueError):
        ece_image(np.array([0.5]), np.array([1.0]), confidence="entropy")


def test_ece_foreground_convention():
    p = np.full(10, 0.3)
    y = np.array([1] * 3 + [0] * 7, dtype=float)
    assert ece_image(p, y, confidence="foreground")[0] == pytest.approx(0.0, abs=1e-15)
    # under the default convention the same pixels are 70% confident background, all 7 right
    assert ece_image(p, y)[0] == pytest.approx(0.0, abs=1e-15)


def test_threshold_tie_is_background():
    ece, bins = ece_image(np.array([0.5]), np.array([0.0]))
    assert ece == pytest.approx(0.5)
    assert binarize(np.array([0.5, 0.5000001]))[0] == 0.0
    assert binarize(np.array([0.5, 0.5000001]))[1] == 1.0


def test_binarize_idempotent(rng):
    m = binarize(rng.uniform(size=(5, 5)))
    np.testing.assert_array_equal(binarize(m), m)


def test_merge_bins_counts():
    r = np.random.default_rng(1)
    per = [ece_image(r.uniform(size=(6, 6)), np.ones((6, 6)))[1] for _ in range(4)]
    merged = merge_bins(per)
    assert sum(b.count for b in merged) == 4 * 36
    for m, grp in zip(merged, zip(*per)):
        assert m.count == sum(b.count for b in grp)


def test_reliability_csv_and_svg(tmp_path):
    bins = [ReliabilityBin(0.0, 0.5, 0, math.nan, math.nan), ReliabilityBin(0.5, 1.0, 4, 0.75, 0.5)]
    rows = reliability_table(bins)
    path = tmp_path / "rel.csv"
    write_reliability_csv(path, rows)
    with open(path, newline="") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["bin_lo", "bin_hi", "count", "conf", "acc", "gap"]
    assert got[1] == ["0.0", "0.5", "0", "n/a", "n/a", "n/a"]
    assert float(got[2][5]) == -0.25
    svg = reliability_svg(rows, 0.125)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert svg == reliability_svg(rows, 0.125)
    assert "0.1250" in svg
    assert svg.count('class="gap"') == 1


# ---------------------------------------------------------------- MC predict

def test_mc_deterministic_model():
    model = build_model(ArchitectureConfig(**SMALL), np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(2, 3, 16, 16))
    mean, std, pred = mc_predict(model, x, McConfig(num_samples=50))
    np.testing.assert_array_equal(mean, forward_mean(model, x).data)
    assert np.all(std == 0)
    m1, _, p1 = mc_predict(model, x, McConfig(num_samples=1))
    np.testing.assert_array_equal(m1, mean)
    np.testing.assert_array_equal(p1, pred)


def test_mc_single_sample_is_one_forward():
    model = build_model(ArchitectureConfig(**SMALL, stochastic_kind="reparam", sigma0=0.1), np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(1, 3, 16, 16))
    mean, std, _ = mc_predict(model, x, McConfig(num_samples=1), np.random.default_rng(4))
    probs, _ = forward_stochastic(model, x, np.random.default_rng(4))
    np.testing.assert_array_equal(mean, probs.data)
    assert np.all(std == 0)


def test_mc_bounds_and_mask():
    model = build_model(ArchitectureConfig(**SMALL, stochastic_kind="mnf", placement="per_decoder", sigma0=0.3),
                        np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(3, 16, 16))
    mean, std, pred = mc_predict(model, x, McConfig(num_samples=8))
    assert mean.shape == (1, 1, 16, 16)
    assert np.all((mean >= 0) & (mean <= 1))
    assert np.all((std >= 0) & (std <= 0.5))
    assert std.max() > 0
    np.testing.assert_array_equal(pred, (mean > 0.5).astype(float))


def test_mc_scaling():
    assert 1.4 <= mc_scaling_ratio() <= 2.8


def test_mc_config_validation():
    with pytest.raises(ValueError):
        McConfig(num_samples=0)


# -------------------------------------------------------------------- saliency

def test_saliency_zero_head():
    model = build_model(ArchitectureConfig(**SMALL), np.random.default_rng(0))
    head = model.layers["head"]
    head.weight.data = np.zeros_like(head.weight.data)
    head.bias.data = np.array([3.0])  # every pixel predicted foreground, but constant
    sal = saliency_map(model, np.random.default_rng(1).uniform(size=(3, 16, 16)))
    assert sal.shape == (16, 16)
    assert np.all(sal == 0)


def test_saliency_linear_model():
    w = np.array([0.5, -2.0, 1.25])

    def linear(x):
        return T.conv2d(x, T.Tensor(w.reshape(1, 3, 1, 1)), T.Tensor(np.array([0.1])))

    img = np.random.default_rng(2).uniform(-1, 1, (3, 6, 6))
    sal = saliency_map(linear, img)
    active = (np.tensordot(w, img, axes=1) + 0.1) > 0.5
    np.testing.assert_allclose(sal, np.where(active, np.abs(w).max(), 0.0), rtol=0, atol=0)
    assert active.any() and (~active).any()


def test_saliency_matches_finite_differences():
    model = build_model(ArchitectureConfig(**SMALL, decoder_style="linknet_add"), np.random.default_rng(3))
    model.layers["head"].bias.data = np.array([0.3])
    img = np.random.default_rng(4).uniform(size=(3, 16, 16))
    probs = forward_mean(model, img[None]).data
    sel = (probs > 0.5).astype(float)
    assert sel.sum() > 0
    sal = saliency_map(model, img)

    def target(x):
        return float(np.sum(forward_mean(model, x[None]).data * sel))

    h = 1e-6
    r = np.random.default_rng(5)
    for _ in range(5):
        i, j = r.integers(0, 16, 2)
        g = []
        for c in range(3):
            xp, xm = img.copy(), img.copy()
            xp[c, i, j] += h
            xm[c, i, j] -= h
            g.append(abs(target(xp) - target(xm)) / (2 * h))
        ref = max(g)
        assert abs(sal[i, j] - ref) <= 1e-3 * max(ref, 1e-8)


def test_saliency_uncertainty_cases():
    img = np.random.default_rng(6).uniform(size=(3, 16, 16))
    det = build_model(ArchitectureConfig(**SMALL), np.random.default_rng(0))
    assert np.all(saliency_uncertainty(det, img, McConfig(num_samples=5)) == 0)

    stoch = build_model(ArchitectureConfig(**SMALL, stochastic_kind="reparam", sigma0=0.1), np.random.default_rng(0))
    stoch.layers["head"].bias.data = np.array([0.5])
    su = saliency_uncertainty(stoch, img, McConfig(num_samples=6))
    assert np.all(su >= 0)
    assert su.max() > 0

    for layer in stoch.layers.values():
        if layer.stochastic:
            layer.weight.rho.data[:] = -80.0
            layer.bias.rho.data[:] = -80.0
    assert np.max(saliency_uncertainty(stoch, img, McConfig(num_samples=6))) < 1e-8
