"""Lambda layers with relative position embeddings, backed by Rust."""

import json

import numpy as np

from . import _lambdakit

__version__ = _lambdakit.__version__


def forward(x, geometry, k, h, d_out, *, seed=0, scope=None, boundary="clamped",
            implementation="einsum", causal=False):
    """Self-context lambda layer on ``x`` of shape ``[b, n, d_in]``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    data, shape = _lambdakit.forward(
        x.ravel().tolist(), list(x.shape), geometry, k, h, d_out,
        seed=seed, scope=scope, boundary=boundary,
        implementation=implementation, causal=causal,
    )
    return np.asarray(data, dtype=np.float64).reshape(shape)


def verify(suite, *, seed=None, cases=120):
    """Runs a verification suite and returns its report as a dict."""
    return json.loads(_lambdakit.verify(suite, seed=seed, cases=cases))


def memmodel(*, b=128, k=16, h=8, bytes=4):
    return json.loads(_lambdakit.memmodel(b=b, k=k, h=h, bytes=bytes))


def save_tensor(path, array):
    """Writes ``array`` in LTNS format, keeping float32 if it is float32."""
    array = np.asarray(array)
    f32 = array.dtype == np.float32
    _lambdakit.save_tensor(str(path), array.astype(np.float64).ravel().tolist(),
                           list(array.shape), f32=f32)


def load_tensor(path):
    data, shape, dtype = _lambdakit.load_tensor(str(path))
    return np.asarray(data, dtype=np.float64).reshape(shape).astype(
        np.float32 if dtype == "f32" else np.float64)


__all__ = ["forward", "verify", "memmodel", "save_tensor", "load_tensor", "__version__"]
