import numpy as np
import pytest

from uavfl import baselines as bl
from uavfl.ao import AoConfig

from conftest import tiny


def test_labels_and_validation():
    assert bl.SCHEMES == ("AO", "FDMA", "FixedTrajectory", "FixedUserAllocation", "Thresholding(0.5)")
    assert bl.thresholding(0.3).label == "Thresholding(0.3)"
    with pytest.raises(ValueError):
        bl.BaselineKind("Random")
    with pytest.raises(ValueError):
        bl.thresholding(1.0)
    with pytest.raises(ValueError):
        bl.BaselineKind("FixedUserAllocation", fraction=0.0)


def test_equal_split_with_as_many_rbs_as_devices():
    split = bl.equal_split(3, 3, 2, chi=10)
    assert np.all(split.counts == 10)
    assert np.array_equal(split.alpha.sum(axis=1), split.counts)
    # device m owns RB m
    assert np.all(split.alpha[1, 10:20] == 1) and np.all(split.alpha[1, :10] == 0)


def test_equal_split_uneven():
    split = bl.equal_split(3, 4, 1, chi=2)
    assert sorted(split.counts[:, 0]) == [2, 3, 3]
    assert split.counts.sum() == 8


def test_threshold_keeps_large_entries():
    alpha = np.zeros((2, 3, 1))
    alpha[:, :, 0] = [[0.9, 0.6, 0.1], [0.1, 0.4, 0.9]]
    out, forced = bl.threshold_alpha(alpha, 0.5)
    assert out[:, :, 0].tolist() == [[1, 1, 0], [0, 0, 1]]
    assert forced == []


def test_threshold_zero_keeps_any_positive_and_breaks_ties():
    alpha = np.zeros((2, 2, 1))
    alpha[:, :, 0] = [[0.5, 0.3], [0.5, 0.7]]
    out, _ = bl.threshold_alpha(alpha, 0.0)
    # RB 0 is a tie and goes to the lower index
    assert out[:, :, 0].tolist() == [[1, 0], [0, 1]]


def test_threshold_gives_every_device_an_rb():
    alpha = np.zeros((3, 4, 1))
    alpha[:, :, 0] = [[0.9, 0.9, 0.9, 0.0], [0.1, 0.1, 0.1, 0.0], [0.0, 0.0, 0.0, 0.3]]
    out, forced = bl.threshold_alpha(alpha, 0.5)
    assert np.all(out.sum(axis=1) >= 1) and np.all(out.sum(axis=0) <= 1)
    # device 1 takes the unused RB, device 2 the donor's highest one
    assert out[1, 3, 0] == 1 and out[2, 2, 0] == 1 and out[0, :2, 0].tolist() == [1, 1]
    assert sorted(forced) == [(1, 0), (2, 0)]


@pytest.fixture(scope="module")
def runs(desk):
    sc = desk
    return sc, {label: bl.run_scheme(label, sc) for label in bl.SCHEMES}


def test_ao_beats_every_baseline(runs):
    _, res = runs
    ao = res["AO"][1].objective
    for label in bl.SCHEMES[1:]:
        assert ao <= res[label][1].objective * (1 + 1e-9), label


def test_final_states_pass_audits(runs):
    _, res = runs
    for label, (_, _, r) in res.items():
        assert r.audits["energy_ok"] and r.audits["kinematics_ok"], label


def test_pinned_blocks(runs):
    sc, res = runs
    ft = res["FixedTrajectory"][0]
    assert np.array_equal(ft.q, sc.straight_line())
    fua = res["FixedUserAllocation"][0]
    assert np.allclose(fua.f, 0.5 * sc.f_max[:, None]) or res["FixedUserAllocation"][2].trace.notes
    fdma = res["FDMA"][0]
    counts = fdma.alpha.sum(axis=1)
    assert counts.max() - counts.min() <= 1


def test_custom_delta_label():
    sc = tiny(1, m=2, u=3, n=6, uav={"start": [495.0, 500.0], "end": [505.0, 500.0]})
    state, _, r = bl.run_scheme("Thresholding(0.2)", sc, AoConfig(l_max=2))
    assert np.all((state.alpha == 0) | (state.alpha == 1))
    assert r.audits["energy_ok"]
