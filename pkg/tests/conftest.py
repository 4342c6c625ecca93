import numpy as np
import pytest

from cracknet import _kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["python", "cython"])
def kernel_backend(request):
    """Run a test under each available kernel backend."""
    if request.param == "cython" and _kernels.compiled_backend is None:
        pytest.skip("compiled kernels not built")
    previous = _kernels.BACKEND
    _kernels.use_backend(request.param)
    yield request.param
    _kernels.use_backend(previous)


def naive_conv2d(x, w, b, stride, padding):
    """Nested-loop cross-correlation on an H x W x C array."""
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-wd // stride)
        th = max((ho - 1) * stride + kh - h, 0)
        tw = max((wo - 1) * stride + kw - wd, 0)
        pt, pl = th // 2, tw // 2
    else:
        ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
        pt = pl = 0
    out = np.zeros((ho, wo, cout))
    for oy in range(ho):
        for ox in range(wo):
            for co in range(cout):
                acc = 0.0 if b is None else b[co]
                for ky in range(kh):
                    for kx in range(kw):
                        iy, ix = oy * stride + ky - pt, ox * stride + kx - pl
                        if 0 <= iy < h and 0 <= ix < wd:
                            for ci in range(cin):
                                acc += x[iy, ix, ci] * w[ky, kx, ci, co]
                out[oy, ox, co] = acc
    return out


def randomize(params, rng, scale=0.5):
    """Overwrite every tensor in a parameter tree with well-spread values.

    Default initialisations are tiny, which makes attention nearly uniform
    and oracle comparisons weak. Positive-only fields stay positive.
    """
    from cracknet.params import named_tensors

    for name, t in named_tensors(params):
        if name.endswith("sigma"):
            t.data[...] = rng.uniform(0.5, 2.0, t.shape)
        else:
            t.data[...] = rng.standard_normal(t.shape) * scale
    return params


def np_softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def np_bilinear(x, f):
    """Half-pixel bilinear upsampling of an h x w x C array, edge-clamped."""
    h, w, c = x.shape
    out = np.zeros((h * f, w * f, c))

    def taps(o, n):
        src = min(max((o + 0.5) / f - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        return i0, i1, src - i0

    for oy in range(h * f):
        y0, y1, ty = taps(oy, h)
        for ox in range(w * f):
            x0, x1, tx = taps(ox, w)
            out[oy, ox] = ((1 - ty) * (1 - tx) * x[y0, x0] + (1 - ty) * tx * x[y0, x1]
                           + ty * (1 - tx) * x[y1, x0] + ty * tx * x[y1, x1])
    return out
