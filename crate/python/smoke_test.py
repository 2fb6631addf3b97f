"""Smoke test for the installed Python bindings: python python/smoke_test.py"""

import os
import tempfile

import numpy as np

import lambdakit


def test_forward_shapes_and_implementations():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 16, 4))
    y = lambdakit.forward(x, "seq:16", k=4, h=2, d_out=6, scope="5")
    assert y.shape == (2, 16, 6)
    conv = lambdakit.forward(x, "seq:16", k=4, h=2, d_out=6, scope="5", implementation="conv")
    assert np.max(np.abs(conv - y)) < 1e-12


def test_causal_ignores_future():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 8, 3))
    z = x.copy()
    z[:, 5:] += 10.0
    a = lambdakit.forward(x, "seq:8", k=2, h=2, d_out=4, causal=True)
    b = lambdakit.forward(z, "seq:8", k=2, h=2, d_out=4, causal=True)
    assert np.array_equal(a[:, :5], b[:, :5])


def test_bad_arguments_raise_value_error():
    try:
        lambdakit.forward(np.zeros((1, 4, 2)), "seq:4", k=2, h=1, d_out=1, scope="2")
    except ValueError:
        return
    raise AssertionError("even scope accepted")


def test_verify_oracle():
    report = lambdakit.verify("oracle", cases=10)
    assert report["passed"], report


def test_memmodel():
    rows = lambdakit.memmodel()["rows"]
    layer = next(r for r in rows if r["op"] == "lambda-layer" and r["k"] == 16)
    assert abs(layer["gib"] - 1.9) / 1.9 <= 0.02


def test_ltns_round_trip():
    with tempfile.TemporaryDirectory() as d:
        for dtype in (np.float64, np.float32):
            a = np.arange(24, dtype=dtype).reshape(2, 3, 4) / 7
            path = os.path.join(d, "t.ltns")
            lambdakit.save_tensor(path, a)
            b = lambdakit.load_tensor(path)
            assert b.dtype == dtype and np.array_equal(a, b)


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
    print("python smoke test passed")
