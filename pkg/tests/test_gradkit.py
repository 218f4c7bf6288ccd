import numpy as np
import pytest

from ambiforge import gradkit as gk
from ambiforge.gradkit import Adam, NonFiniteError, PlateauScheduler, Tensor, numerical_gradient


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def check_grad(build, *shapes, seed=0, tol=1e-5, positive=False):
    """Compare autodiff and central differences of ``sum(build(*xs) * probe)``."""
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    probe = None

    def scalar(vals):
        nonlocal probe
        out = build(*[Tensor(v) for v in vals]).value
        if probe is None:
            probe = np.random.default_rng(seed + 1).standard_normal(out.shape)
        return float(np.sum(out * probe))

    scalar(xs)
    ts = [Tensor(x, requires_grad=True) for x in xs]
    (build(*ts) * probe).sum().backward()
    for i, x in enumerate(xs):
        def f(v, i=i):
            vals = list(xs)
            vals[i] = v
            return scalar(vals)
        assert rel_err(ts[i].grad, numerical_gradient(f, x)) < tol


def test_square_sum_gradient():
    x = Tensor(np.arange(5.0), requires_grad=True)
    gk.sum_axis(gk.square(x)).backward()
    assert np.array_equal(x.grad, 2 * np.arange(5.0))


@pytest.mark.parametrize("name,build,shapes,positive", [
    ("add", lambda a, b: a + b, [(3, 4), (4,)], False),
    ("mul", lambda a, b: a * b, [(3, 4), (3, 1)], False),
    ("div", lambda a, b: a / b, [(3, 4), (3, 4)], True),
    ("sub", lambda a, b: a - b, [(2, 3), (2, 3)], False),
    ("matmul", lambda a, b: gk.matmul(a, b), [(4, 3), (3, 5)], False),
    ("matmul_batched", lambda a, b: gk.matmul(a, b), [(2, 4, 3), (3, 5)], False),
    ("matmul_vec", lambda a, b: gk.matmul(a, b), [(3,), (3, 5)], False),
    ("einsum", lambda a, b: gk.einsum("btf,fk->btk", a, b), [(2, 3, 4), (4, 2)], False),
    ("softmax", lambda a: gk.softmax(a, axis=-1), [(3, 5)], False),
    ("sigmoid", gk.sigmoid, [(3, 4)], False),
    ("tanh", gk.tanh, [(3, 4)], False),
    ("exp", gk.exp, [(3, 4)], False),
    ("sqrt", gk.sqrt, [(3, 4)], True),
    ("hypot", gk.hypot, [(3, 4), (3, 4)], False),
    ("sum_axis", lambda a: gk.sum_axis(a, 1), [(3, 4, 2)], False),
    ("mean_tuple", lambda a: gk.mean(a, (0, 2)), [(3, 4, 2)], False),
    ("slice", lambda a: gk.slice_(a, (slice(None), slice(1, 3))), [(3, 4)], False),
    ("fancy_slice", lambda a: gk.slice_(a, ([0, 0, 2],)), [(3, 4)], False),
    ("concat", lambda a, b: gk.concat([a, b], axis=1), [(2, 3), (2, 2)], False),
    ("stack", lambda a, b: gk.stack([a, b], axis=1), [(2, 3), (2, 3)], False),
    ("transpose", lambda a: gk.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    ("reshape", lambda a: gk.reshape(a, (4, 3)), [(2, 6)], False),
    ("pad", lambda a: gk.pad(a, ((1, 0), (0, 2))), [(2, 3)], False),
    ("scale", lambda a: gk.scale(a, -2.5), [(2, 3)], False),
    ("relu", gk.relu, [(3, 4)], False),
])
def test_op_gradients(name, build, shapes, positive):
    check_grad(build, *shapes, positive=positive)


@pytest.mark.parametrize("causal", [True, False])
def test_conv_gradient_and_naive_oracle(causal):
    check_grad(lambda x, w, b: gk.conv2d_3x3_grouped(x, w, b, causal), (2, 3, 2, 4, 5), (3, 2, 2, 3, 3), (3, 2))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 2, 4, 5))
    w = rng.standard_normal((2, 3, 2, 3, 3))
    out = gk.conv2d_3x3_grouped(x, w, None, causal).value
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1), (2, 0) if causal else (1, 1)))
    for g in range(2):
        for o in range(3):
            for h in range(4):
                for t in range(5):
                    ref = np.sum(w[g, o] * xp[0, g, :, h : h + 3, t : t + 3])
                    assert out[0, g, o, h, t] == pytest.approx(ref, abs=1e-12)


def test_conv_causality():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 1, 2, 3, 8))
    w = rng.standard_normal((1, 2, 2, 3, 3))
    y0 = gk.conv2d_3x3_grouped(x, w).value
    x[..., 5] += 1.0
    y1 = gk.conv2d_3x3_grouped(x, w).value
    assert np.array_equal(y0[..., :5], y1[..., :5])
    assert not np.array_equal(y0[..., 5:], y1[..., 5:])


def test_softmax_identities():
    x = Tensor(np.random.default_rng(3).standard_normal((4, 6)) * 10, requires_grad=True)
    s = gk.softmax(x, axis=1)
    assert np.allclose(s.value.sum(axis=1), 1.0, atol=1e-12)
    gk.sum_axis(s).backward()
    assert np.abs(x.grad).max() < 1e-12


def test_single_visit_and_unused_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    unused = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    z = gk.sum_axis(y + y + y)
    _ = unused * 2
    z.backward()
    assert np.array_equal(x.grad, 6 * x.value)
    assert unused.grad is None
    # a second backward accumulates on top
    z.backward()
    assert np.array_equal(x.grad, 12 * x.value)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_and_shape_errors():
    with pytest.raises(NonFiniteError):
        gk.sqrt(Tensor(np.array([-1.0]), requires_grad=True))
    with pytest.raises(NonFiniteError):
        gk.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        gk.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        gk.conv2d_3x3_grouped(np.ones((1, 2, 2, 3, 3)), np.ones((2, 2, 2, 2, 2)))
    with pytest.raises(ValueError):
        gk.sum_axis(Tensor(np.ones(3), requires_grad=True) * 2).reshape(1, 1).backward(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (Tensor(np.ones(3), requires_grad=True) * 2).backward()


def test_gru_zero_parameters_halve_state():
    params = {k: Tensor(np.zeros(v.shape), requires_grad=True)
              for k, v in gk.init_gru_params(3, 4, np.random.default_rng(0)).items()}
    h = np.array([1.0, -2.0, 0.5, 4.0])
    out = gk.gru_cell(np.ones(3), h, params)
    assert np.allclose(out.value, h / 2, atol=1e-15)


def gru_reference(xs, h, W_ih, W_hh, b_ih, b_hh):
    """Plain numpy GRU written out gate by gate."""
    H = len(h)
    sig = lambda v: 1 / (1 + np.exp(-v))
    outs = []
    for x in xs:
        r = sig(x @ W_ih[:, :H] + b_ih[:H] + h @ W_hh[:, :H] + b_hh[:H])
        z = sig(x @ W_ih[:, H:2 * H] + b_ih[H:2 * H] + h @ W_hh[:, H:2 * H] + b_hh[H:2 * H])
        n = np.tanh(x @ W_ih[:, 2 * H:] + b_ih[2 * H:] + r * (h @ W_hh[:, 2 * H:] + b_hh[2 * H:]))
        h = (1 - z) * n + z * h
        outs.append(h)
    return np.array(outs)


def test_gru_layer_matches_reference_and_cell():
    rng = np.random.default_rng(4)
    params = gk.init_gru_params(3, 5, rng)
    xs = rng.standard_normal((2, 8, 3))
    h0 = rng.standard_normal((2, 5))
    out = gk.gru_layer(xs, params, h0).value
    vals = [params[k].value for k in ("W_ih", "W_hh", "b_ih", "b_hh")]
    for b in range(2):
        assert np.allclose(out[b], gru_reference(xs[b], h0[b], *vals), atol=1e-13)
    h = Tensor(h0)
    for t in range(8):
        h = gk.gru_cell(xs[:, t], h, params)
    assert np.allclose(h.value, out[:, -1], atol=1e-14)
    with pytest.raises(ValueError):
        gk.gru_cell(np.ones(4), h0[0], params)


def test_gru_gradient_through_time():
    rng = np.random.default_rng(5)
    params = gk.init_gru_params(3, 4, rng)
    xs = rng.standard_normal((1, 8, 3))
    probe = rng.standard_normal((1, 8, 4))

    def loss():
        return gk.sum_axis(gk.gru_layer(xs, params) * probe)

    loss().backward()
    for name, p in params.items():
        def f(v, p=p):
            old = p.value
            p.value = v
            val = float(loss().value)
            p.value = old
            return val
        assert rel_err(p.grad, numerical_gradient(f, p.value)) < 1e-5


def test_gru_hidden_512_supported():
    params = gk.init_gru_params(770, 512, np.random.default_rng(0))
    out = gk.gru_layer(np.zeros((1, 2, 770)), params)
    assert out.shape == (1, 2, 512)


def test_adam_first_step_and_reference():
    p = Tensor(np.array([0.0, 0.0, 0.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-3)
    p.grad = np.array([2.0, -0.5, 1e3])
    opt.step()
    assert np.allclose(p.value, -1e-3 * np.sign([2.0, -0.5, 1e3]), rtol=1e-6)
    # reference recursion over several steps
    rng = np.random.default_rng(6)
    x = rng.standard_normal(4)
    q = Tensor(x.copy(), requires_grad=True)
    opt = Adam({"q": q}, lr=0.01, beta1=0.8, beta2=0.99, eps=1e-6)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        q.grad = g
        opt.step()
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        x = x - 0.01 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-6)
    assert np.allclose(q.value, x, atol=1e-14)


def test_adam_minimizes_quadratic_bowl():
    x = Tensor(np.array([3.0, -2.0, 1.5]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.03)
    A = np.diag([1.0, 4.0, 9.0])
    for step in range(500):
        opt.zero_grad()
        loss = gk.sum_axis(gk.matmul(x, Tensor(A)) * x)
        loss.backward()
        opt.step()
    assert np.linalg.norm(x.value) < 1e-3


def test_adam_rejects_nonfinite_gradient():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam({"p": p})
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError, match="p"):
        opt.step()
    assert opt.step_count == 0 and np.array_equal(p.value, np.zeros(2))


def test_plateau_scheduler():
    opt = Adam({"p": Tensor(np.zeros(1), requires_grad=True)}, lr=1e-3)
    sched = PlateauScheduler(opt, 0.3, 10)
    sched.step(1.0)
    lrs = [sched.step(1.0) for _ in range(10)]
    assert lrs[:9] == [1e-3] * 9
    assert lrs[9] == pytest.approx(3e-4)
    sched.step(0.5)
    assert sched.bad_epochs == 0 and sched.best == 0.5


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    params = {"a": Tensor(rng.standard_normal((2, 3)), requires_grad=True),
              "b": Tensor(rng.standard_normal(4), requires_grad=True)}
    opt = Adam(params, lr=0.02)
    for p in params.values():
        p.grad = rng.standard_normal(p.shape)
    opt.step()
    sched = PlateauScheduler(opt)
    sched.step(0.3)
    gk.save_checkpoint(tmp_path / "ck", params, opt, sched, {"note": 1})
    ck = gk.load_checkpoint(tmp_path / "ck")
    for k, p in params.items():
        assert np.array_equal(ck["params"][k], p.value)
        assert np.array_equal(ck["adam_m"][k], opt.m[k])
        assert np.array_equal(ck["adam_v"][k], opt.v[k])
    assert ck["optimizer"]["step"] == 1 and ck["optimizer"]["lr"] == 0.02
    assert ck["scheduler"]["best"] == 0.3 and ck["extra"] == {"note": 1}
    raw = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "ck.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        gk.load_checkpoint(tmp_path / "ck")
