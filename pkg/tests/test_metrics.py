"""Metric correctness against closed forms and loop oracles."""
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stpredict.metrics import (MetricReport, compute_report, csi, frame_mse,
                               gaussian_window, psnr, ssim)
from stpredict.tensor import ContractError, ShapeError

from _oracles import ssim_loop


def _frames(rng, shape=(24, 24)):
    return rng.random(shape).astype(np.float32)


# --- mse / psnr -----------------------------------------------------------------


def test_mse_trivial_cases(np_rng):
    a = _frames(np_rng)
    assert frame_mse(a, a) == 0.0
    z, o = np.zeros((16, 16)), np.ones((16, 16))
    assert frame_mse(z, o) == 1.0
    with pytest.raises(ShapeError):
        frame_mse(np.zeros((4, 4)), np.zeros((4, 5)))


def test_mse_matches_loop_oracle(np_rng):
    a, b = _frames(np_rng, (3, 9, 9)), _frames(np_rng, (3, 9, 9))
    acc, cnt = 0.0, 0
    for c in range(3):
        for y in range(9):
            for x in range(9):
                acc += (float(a[c, y, x]) - float(b[c, y, x])) ** 2
                cnt += 1
    assert abs(frame_mse(a, b) - acc / cnt) < 1e-12


def test_psnr_log_arithmetic():
    truth = np.zeros((16, 16))
    assert abs(psnr(np.full((16, 16), 0.1), truth) - 20.0) < 1e-9
    val = psnr(np.full((16, 16), 0.5), truth)
    assert abs(val - 10.0 * math.log10(4.0)) < 1e-9
    assert abs(val - 6.0206) < 1e-3


def test_psnr_cap_on_identical_frames(np_rng):
    a = _frames(np_rng)
    assert psnr(a, a) == 100.0
    assert psnr(a, a + 1e-6) == 100.0
    assert psnr(a, a, cap=40.0) == 40.0


def test_psnr_max_val_scaling():
    truth = np.zeros((8, 8))
    pred = np.full((8, 8), 25.5)
    assert abs(psnr(pred, truth, max_val=255.0) - 20.0) < 1e-9


# --- ssim ----------------------------------------------------------------------


def test_ssim_identical_is_exactly_one(np_rng):
    a = _frames(np_rng)
    assert ssim(a, a) == 1.0


def test_ssim_constant_frames_closed_form():
    a = np.zeros((16, 16))
    b = np.ones((16, 16))
    c1 = 0.01 ** 2
    expected = c1 / (1.0 + c1)
    assert abs(ssim(a, b) - expected) < 1e-12
    assert abs(expected - 9.999e-5) < 1e-7


def test_ssim_matches_window_loop_oracle(np_rng):
    a, b = _frames(np_rng, (20, 20)), _frames(np_rng, (20, 20))
    b = np.clip(0.7 * b + 0.3 * a, 0.0, 1.0)
    assert abs(ssim(a, b) - ssim_loop(a, b)) <= 1e-5


def test_ssim_multichannel_averages_planes(np_rng):
    a, b = _frames(np_rng, (2, 16, 16)), _frames(np_rng, (2, 16, 16))
    per = [ssim(a[c], b[c]) for c in range(2)]
    assert abs(ssim(a, b) - np.mean(per)) < 1e-12


def test_ssim_rejects_small_frames():
    with pytest.raises(ContractError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((2, 2, 16, 16)), np.zeros((2, 2, 16, 16)))
    with pytest.raises(ContractError):
        gaussian_window(window=0)


def test_symmetry(np_rng):
    a, b = _frames(np_rng), _frames(np_rng)
    assert ssim(a, b) == ssim(b, a)
    assert frame_mse(a, b) == frame_mse(b, a)


def test_monotone_degradation_under_noise(np_rng):
    truth = np.clip(_frames(np_rng, (32, 32)), 0.2, 0.8)
    noise = np_rng.standard_normal((32, 32))
    psnrs, ssims = [], []
    for amp in (0.0, 0.02, 0.05, 0.1, 0.2):
        pred = np.clip(truth + amp * noise, 0.0, 1.0)
        psnrs.append(psnr(pred, truth))
        ssims.append(ssim(pred, truth))
    assert all(x > y for x, y in zip(psnrs, psnrs[1:]))
    assert all(x > y for x, y in zip(ssims, ssims[1:]))


@given(st.integers(0, 2 ** 32 - 1))
def test_ssim_bounded(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((12, 12))
    b = rng.random((12, 12))
    assert -1.0 <= ssim(a, b) <= 1.0


# --- csi -----------------------------------------------------------------------


def test_csi_trivial_cases():
    a = np.array([[0.9, 0.1], [0.8, 0.2]])
    assert csi(a, a, 0.5) == 1.0
    b = np.array([[0.1, 0.9], [0.2, 0.9]])
    assert csi(a, b, 0.5) == 0.0
    # no positives anywhere
    assert csi(np.zeros((4, 4)), np.zeros((4, 4)), 0.5) == 1.0


def test_csi_hand_counted_thirds():
    truth = np.zeros((3, 3))
    truth[0, 0] = truth[0, 1] = truth[1, 0] = truth[1, 1] = 1.0
    pred = np.zeros((3, 3))
    pred[0, 0] = pred[0, 1] = 1.0          # two hits
    pred[2, 1] = pred[2, 2] = 1.0          # two false alarms
    assert abs(csi(pred, truth, 0.5) - 1.0 / 3.0) < 1e-12


def test_csi_threshold_is_inclusive():
    a = np.array([[0.5]])
    b = np.array([[0.5]])
    assert csi(a, b, 0.5) == 1.0
    assert csi(a, np.array([[0.49]]), 0.5) == 0.0


# --- report --------------------------------------------------------------------


def test_compute_report_batched_averaging(np_rng):
    pred = np_rng.random((2, 3, 1, 16, 16))
    truth = np_rng.random((2, 3, 1, 16, 16))
    rep = compute_report(pred, truth, thresholds=(0.5,))
    assert rep.horizon == 3
    for t in range(3):
        manual = np.mean([frame_mse(pred[i, t], truth[i, t])
                          for i in range(2)])
        assert abs(rep.mse[t] - manual) < 1e-12
        manual_csi = np.mean([csi(pred[i, t], truth[i, t], 0.5)
                              for i in range(2)])
        assert abs(rep.csi[0.5][t] - manual_csi) < 1e-12
    assert abs(rep.mean_mse - np.mean(rep.mse)) < 1e-12
    assert set(rep.summary()) == {"mse", "psnr", "ssim", "csi@0.5"}


def test_report_csv_layout(np_rng):
    pred = np_rng.random((1, 4, 1, 16, 16))
    rep = compute_report(pred, pred.copy(), thresholds=(0.3, 0.5))
    lines = rep.to_csv().strip().split("\n")
    assert lines[0] == "t,mse,psnr,ssim,csi@0.3,csi@0.5"
    assert len(lines) == 5
    assert [row.split(",")[0] for row in lines[1:]] == ["1", "2", "3", "4"]
    first = lines[1].split(",")
    assert float(first[1]) == 0.0
    assert float(first[2]) == 100.0
    assert float(first[3]) == 1.0


def test_report_validation():
    with pytest.raises(ContractError):
        MetricReport(mse=[0.1], psnr=[20.0, 21.0], ssim=[0.9], csi={})
    with pytest.raises(ContractError):
        MetricReport(mse=[0.1], psnr=[20.0], ssim=[1.5], csi={})
    with pytest.raises(ContractError):
        MetricReport(mse=[0.1], psnr=[20.0], ssim=[0.9], csi={0.5: [1.2]})
    with pytest.raises(ContractError):
        MetricReport(mse=[], psnr=[], ssim=[], csi={})
    with pytest.raises(ShapeError):
        compute_report(np.zeros((2, 3, 16, 16)), np.zeros((2, 3, 16, 16)))