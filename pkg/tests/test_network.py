import numpy as np
import pytest
from sklearn.base import clone

from predcode.data import synth_bars
from predcode.exceptions import ConfigError, ShapeError
from predcode.network import PredictiveCodingNetwork, StageParameters, write_history
from predcode.ops import FilterBank


def tiny(**kw):
    params = dict(stages=((4, 3), (3, 2)), filter_size=3, invariance_size=3, state_iters=15,
                  cause_iters=15, topdown_iters=2, batch_size=8, epochs=2, seed=0)
    params.update(kw)
    return PredictiveCodingNetwork(**params)


@pytest.fixture(scope="module")
def bars():
    return synth_bars(24, size=8, seed=0).images


def test_estimator_api(bars):
    net = tiny()
    assert clone(net).get_params() == net.get_params()
    assert net.fit(bars) is net
    Z = net.transform(bars[:5])
    # stage 1 causes on 4x4, stage 2 on 2x2
    assert Z.shape == (5, 3 * 16 + 2 * 4)
    parts = net.transform_stages(bars[:5])
    np.testing.assert_array_equal(np.concatenate(parts, axis=1), Z)
    assert len(net.history_) == 4
    assert {"epoch", "stage", "mse", "mse_percent", "sparsity", "state_iters", "cause_iters"} <= set(net.history_[0])


def test_fit_is_deterministic(bars):
    a = tiny().fit(bars)
    b = tiny().fit(bars)
    assert a.history_ == b.history_
    for sa, sb in zip(a.stages_, b.stages_):
        np.testing.assert_array_equal(sa.D.filters, sb.D.filters)
        np.testing.assert_array_equal(sa.G.filters, sb.G.filters)


def test_filters_stay_unit_norm(bars):
    net = tiny(trainer="dual").fit(bars)
    for s in net.stages_:
        np.testing.assert_allclose(s.D.norms(), 1, atol=1e-15)
        np.testing.assert_allclose(s.G.norms(), 1, atol=1e-15)


def test_forward_infer_structure(bars):
    net = tiny()
    net.stages_ = net.init_stages(1)
    results = net.forward_infer(bars[:3])
    assert [r.states.shape for r in results] == [(3, 4, 8, 8), (3, 3, 4, 4)]
    assert [r.causes.shape for r in results] == [(3, 3, 4, 4), (3, 2, 2, 2)]
    np.testing.assert_array_equal(results[1].input, results[0].causes)
    assert len(results[0].reports) == 2
    for r in results:
        # the reported solution is the state map that was pooled
        np.testing.assert_array_equal(r.states, r.state_report.solution)


def test_temporal_mode_runs(bars):
    net = tiny(mode="temporal", epochs=1).fit(bars)
    assert all(s.C is not None for s in net.stages_)
    assert net.transform(bars[:4]).shape[0] == 4


def test_validation(bars):
    with pytest.raises(ConfigError):
        tiny(filter_size=4).fit(bars)
    with pytest.raises(ConfigError):
        tiny(stages=()).fit(bars)
    with pytest.raises(ConfigError):
        tiny(mode="online").fit(bars)
    with pytest.raises(ConfigError):
        tiny(state_lambda=(0.1,)).fit(bars)
    with pytest.raises(ShapeError):
        tiny(stages=((4, 3),) * 4, state_lambda=0.1, cause_lambda=0.1, alpha=1.0).fit(bars)
    with pytest.raises(ShapeError):
        tiny().fit(np.zeros((4, 8)))
    net = tiny().fit(bars)
    with pytest.raises(ShapeError):
        net.transform(np.zeros((2, 2, 8, 8)))


def test_stage_parameters_validation():
    D = FilterBank.random(4, 1, 3, 0)
    with pytest.raises(ShapeError):
        StageParameters(D, FilterBank.random(2, 3, 3, 0))
    with pytest.raises(ValueError):
        StageParameters(D, FilterBank.random(2, 4, 3, 0), alpha=0.0)
    s = StageParameters.random(1, 4, 2, rng=0)
    assert np.all(s.G.filters >= 0)
    assert set(s.arrays()) == {"D", "G"}


def test_write_history(tmp_path):
    rows = [{"epoch": 1, "stage": 1, "mse": 0.1, "mse_percent": 10.0, "sparsity": 0.2, "state_iters": 3.0, "cause_iters": 4.0}]
    write_history(rows, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines() == [
        "epoch,stage,mse,mse_percent,sparsity,state_iters,cause_iters",
        "1,1,0.1,10.0,0.2,3.0,4.0",
    ]


def test_identical_images_reduce_reconstruction_error():
    image = synth_bars(1, size=8, seed=2).images
    X = np.repeat(image, 32, axis=0)
    net = tiny(stages=((4, 3),), state_lambda=0.1, cause_lambda=0.1, alpha=1.0, epochs=2, batch_size=8).fit(X)
    mse = [r["mse"] for r in net.history_]
    assert mse[1] < mse[0]
