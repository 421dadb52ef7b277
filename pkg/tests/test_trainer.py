from dataclasses import replace

import numpy as np
import pytest

from ntklab.errors import ClassificationError, ConfigError, DivergenceError
from ntklab.fscil import make_synthetic
from ntklab.model import NetworkSpec, init_params, param_count
from ntklab.ntk import convergence_bound_check
from ntklab.numerics import make_rng
from ntklab.trainer import AUTO_ETA0, TrainConfig, fit_regression, init_state, run_protocol, train_base_session


SPEC = NetworkSpec(8, (24,), 12, 1.0, 0.1)
CFG = TrainConfig(steps=20, lr=0.5, ways=5, shots=3, queries=2, spectrum_every=5, probe_size=8, alpha=0.1, beta_hyper=1e-2)


@pytest.fixture(scope="module")
def tiny():
    return make_synthetic(20, 12, 8, 0.5, make_rng(0), sessions=2, ways=5)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(spectrum_every=0)
    with pytest.raises(ConfigError):
        TrainConfig(probe_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr="fast")
    assert TrainConfig(lr=AUTO_ETA0).lr == AUTO_ETA0


def test_zero_steps_is_noop(tiny):
    st = train_base_session(tiny, SPEC, replace(CFG, steps=0))
    assert st.params.theta.tobytes() == init_params(SPEC, make_rng(0, 0)).theta.tobytes()
    assert st.loss_trace == [] and st.step == 0
    assert len(st.spectrum_trace) == 1


def test_trace_lengths(tiny):
    st = train_base_session(tiny, SPEC, CFG)
    assert len(st.loss_trace) == st.step == 20
    assert [r.step for r in st.spectrum_trace] == [0, 5, 10, 15, 20]
    assert all(np.isfinite(st.loss_trace))


def test_deterministic(tiny):
    a = train_base_session(tiny, SPEC, CFG)
    b = train_base_session(tiny, SPEC, CFG)
    assert np.array(a.loss_trace).tobytes() == np.array(b.loss_trace).tobytes()
    assert a.params.theta.tobytes() == b.params.theta.tobytes()
    c = train_base_session(tiny, SPEC, replace(CFG, seed=1))
    assert c.loss_trace != a.loss_trace


def test_training_reduces_loss(tiny):
    st = train_base_session(tiny, SPEC, replace(CFG, steps=60))
    assert np.mean(st.loss_trace[-10:]) < np.mean(st.loss_trace[:10])


def test_separable_data_base_accuracy():
    ds = make_synthetic(20, 12, 8, 1e-6, make_rng(1), sessions=2, ways=5)
    st = train_base_session(ds, SPEC, replace(CFG, steps=200, spectrum_every=50))
    assert run_protocol(st, ds).accuracies[0] == 1.0


def test_ablation_switches_run(tiny):
    st = train_base_session(tiny, SPEC, replace(CFG, gamma=0.0, alpha=0.0, beta_hyper=0.0))
    assert len(st.loss_trace) == 20


def test_divergence_reports_step(tiny):
    with pytest.raises(DivergenceError) as err:
        train_base_session(tiny, SPEC, replace(CFG, lr=1e6))
    assert err.value.step >= 0


def test_input_dim_mismatch(tiny):
    with pytest.raises(ConfigError):
        init_state(tiny, NetworkSpec(5, (4,), 3), CFG)


def test_protocol_report_shape(tiny):
    st = train_base_session(tiny, SPEC, CFG)
    rep = run_protocol(st, tiny)
    assert len(rep.accuracies) == 3
    assert rep.pd == pytest.approx(rep.accuracies[0] - rep.accuracies[-1])


def test_single_session_pd_zero():
    ds = make_synthetic(10, 12, 8, 0.5, make_rng(2), sessions=0, ways=5)
    st = train_base_session(ds, SPEC, replace(CFG, steps=3))
    rep = run_protocol(st, ds)
    assert len(rep.accuracies) == 1 and rep.pd == 0.0


def test_zero_network_embedding_error(tiny):
    st = init_state(tiny, SPEC, CFG, init_hook=np.zeros(param_count(SPEC)))
    with pytest.raises(ClassificationError, match="zero-norm"):
        run_protocol(st, tiny)


def test_auto_eta0_run_records_convergence():
    ds = make_synthetic(10, 12, 8, 0.5, make_rng(3), sessions=0, ways=5)
    st = train_base_session(ds, SPEC, replace(CFG, lr=AUTO_ETA0, steps=5))
    assert st.convergence is not None and len(st.convergence.losses) == 5
    assert st.lr == pytest.approx(st.convergence.eta0)


def test_fit_regression_bound_auto_eta0():
    spec = NetworkSpec(4, (1024,), 1, 1.0, 0.1)
    x = make_rng(4).standard_normal((32, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.sin(3 * x[:, :1])
    run = fit_regression(init_params(spec, make_rng(5)), x, y, AUTO_ETA0, 200, record_every=10)
    chk = convergence_bound_check(run.losses, run.ntk0, steps=run.steps)
    assert chk.all_satisfied
    assert run.losses[-1] < run.losses[0]
