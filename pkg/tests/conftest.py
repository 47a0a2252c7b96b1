import numpy as np
import pytest


def scalarize(out, probe):
    """Project an op output onto a fixed probe so finite differences see a scalar."""
    return float((out * probe).sum())


def central_diff(f, arrays, h=1e-5):
    """Central-difference gradient of scalar f(*numpy arrays) w.r.t. each array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / denom


def check_grads(make_fn, arrays, rng, h=1e-5, tol=1e-4):
    """Compare tape gradients against central differences.

    `make_fn(list_of_diffarrays) -> DiffArray`; every entry of `arrays`
    receives a gradient check through a random linear probe of the output.
    """
    from hig.tensor import DiffArray

    das = [DiffArray(a.copy(), requires_grad=True) for a in arrays]
    out = make_fn(das)
    probe = rng.standard_normal(out.shape)
    out.backward(probe)

    def scalar(*raw):
        das2 = [DiffArray(r) for r in raw]
        return float((make_fn(das2).values * probe).sum())

    numeric = central_diff(scalar, [a.copy() for a in arrays], h=h)
    for da, num in zip(das, numeric):
        err = rel_err(da.grad, num)
        assert err < tol, f"gradient mismatch: rel err {err:.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
