import numpy as np
import pytest

from deltafm import model as M
from deltafm.objective import Batch, BatchObjective, ObjectiveConfig, delta_fm_plan, fm_plan
from deltafm.schedule import LINEAR
from deltafm.streams import Streams


def small_model(seed=3, d=2, width=16, classes=2):
    return M.init(d, [width, width], classes, 8, 16, seed)


def random_batch(rng, n=8, d=2, classes=2):
    return Batch(rng.normal(size=(n, d)), rng.integers(0, classes + 1, size=n), rng.normal(size=(n, d)))


def test_init_deterministic_and_seeded():
    a = M.init(2, [64, 64], 2, 8, 16, 7)
    b = M.init(2, [64, 64], 2, 8, 16, 7)
    c = M.init(2, [64, 64], 2, 8, 16, 8)
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)


def test_init_biases_zero():
    m = M.init(2, [64, 64], 2, 8, 16, 7)
    for name, t in m.tensors.items():
        if name.startswith("b"):
            assert not t.any()


@pytest.mark.parametrize("args", [(0, [64, 64], 2, 8, 16), (2, [0], 2, 8, 16), (2, [8], 0, 8, 16),
                                  (2, [8], 2, 0, 16), (2, [8], 2, 8, -1), (2, [], 2, 8, 16)])
def test_init_rejects_bad_dims(args):
    with pytest.raises(ValueError):
        M.init(*args, seed=0)


def test_forward_pure_and_shaped(rng):
    for d in (1, 2, 5):
        m = M.init(d, [12, 7], 3, 4, 5, seed=d)
        x = rng.normal(size=(6, d))
        out1 = m.forward(x, 0.3, 1)
        out2 = m.forward(x, 0.3, 1)
        assert out1.shape == (6, d)
        assert np.array_equal(out1, out2)
        assert m.forward(x[0], 0.3, None).shape == (d,)


def test_class_conditioning_wired(rng):
    m = M.init(2, [64, 64], 2, 8, 16, 7)
    x = rng.normal(size=2)
    outs = [m.forward(x, 0.4, y) for y in (0, 1, None)]
    assert not np.allclose(outs[0], outs[1])
    assert not np.allclose(outs[0], outs[2])


def test_label_out_of_range():
    m = small_model()
    with pytest.raises(ValueError):
        m.forward(np.zeros(2), 0.5, 3)
    with pytest.raises(ValueError):
        m.forward(np.zeros(2), 0.5, -1)
    m.forward(np.zeros(2), 0.5, m.null_class)


def test_no_batch_coupling(rng):
    m = small_model()
    x = rng.normal(size=(10, 2))
    t = rng.uniform(size=10)
    y = rng.integers(0, 3, size=10)
    full = m.forward(x, t, y)
    single = np.stack([m.forward(x[i], t[i], y[i]) for i in range(10)])
    np.testing.assert_allclose(full, single, rtol=0, atol=1e-14)


def _plans(rng):
    batch = random_batch(rng)
    yield "fm", fm_plan(batch, LINEAR, Streams.from_seed(1))
    for lam in (0.0, 0.05, 0.5):
        yield f"dfm-{lam}", delta_fm_plan(batch, LINEAR, ObjectiveConfig(lam=lam), Streams.from_seed(1))


def finite_difference(m, plan, h=1e-5):
    grad = np.empty_like(m.params)
    for k in range(m.params.size):
        old = m.params[k]
        m.params[k] = old + h
        up = M.loss_value(m, plan).total
        m.params[k] = old - h
        down = M.loss_value(m, plan).total
        m.params[k] = old
        grad[k] = (up - down) / (2 * h)
    return grad


def test_gradient_matches_finite_differences(rng):
    m = small_model()
    for name, plan in _plans(rng):
        tape = M.loss_and_gradient(m, plan)
        fd = finite_difference(m, plan)
        scale = np.maximum(np.abs(fd), 1e-3 * np.abs(fd).max())
        rel = np.max(np.abs(tape.gradient - fd) / scale)
        assert rel <= 1e-4, (name, rel)
        assert tape.gradient.shape == m.params.shape


def test_loss_value_consistent(rng):
    m = small_model()
    for _, plan in _plans(rng):
        assert abs(M.loss_and_gradient(m, plan).loss - M.loss_value(m, plan).total) <= 1e-12


def test_stationary_point_of_output_bias(rng):
    # zero the output weights: the model output is the output bias b, a single
    # free parameter in 1-D, and the loss is a quadratic in b
    m = M.init(1, [8], 2, 2, 3, seed=0)
    m.tensors["W1"][...] = 0.0
    n = 12
    plan = BatchObjective(rng.normal(size=(n, 1)), rng.uniform(size=n), rng.integers(0, 2, size=n),
                          v_pos=rng.normal(size=(n, 1)), v_neg=rng.normal(size=(n, 1)), lam=0.3)
    b_star = (plan.v_pos.mean() - 0.3 * plan.v_neg.mean()) / (1 - 0.3)
    m.tensors["b1"][...] = b_star
    tape = M.loss_and_gradient(m, plan)
    bias_index = m.params.size - 1
    assert abs(tape.gradient[bias_index]) < 1e-14
    m.tensors["b1"][...] = b_star + 0.1
    assert abs(M.loss_and_gradient(m, plan).gradient[bias_index]) > 1e-3


def test_empty_batch():
    m = small_model()
    plan = BatchObjective(np.zeros((0, 2)), np.zeros(0), np.zeros(0, int), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        M.loss_and_gradient(m, plan)


def test_checkpoint_round_trip(tmp_path):
    m = M.init(3, [10, 20, 5], 4, 6, 7, seed=11)
    path = tmp_path / "m.dfm"
    M.save(m, path)
    back = M.load(path)
    assert back.config() == m.config()
    assert back.params.tobytes() == m.params.tobytes()


def test_checkpoint_layout():
    m = M.init(2, [4, 5], 2, 3, 2, seed=0)
    blob = M.dumps(m)
    assert blob[:4] == b"DFM1"
    header = np.frombuffer(blob[4:4 + 4 * 7], dtype="<u4")
    assert header.tolist() == [2, 2, 4, 5, 2, 3, 2]
    count = int(np.frombuffer(blob[32:40], dtype="<u8")[0])
    assert count == m.params.size
    assert np.array_equal(np.frombuffer(blob[40:], dtype="<f8"), m.params)


def test_checkpoint_corruption():
    blob = M.dumps(small_model())
    with pytest.raises(M.CheckpointError, match="not a checkpoint"):
        M.loads(b"XXXX" + blob[4:])
    with pytest.raises(M.CheckpointError, match="truncated"):
        M.loads(blob[:-8])
    with pytest.raises(M.CheckpointError, match="truncated"):
        M.loads(blob[:10])
