import numpy as np
import pytest

from ssod import netcore as nc


def numeric_grad(f, arrays, idx_sample=None, h=1e-6, must=None):
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array.

    ``idx_sample`` limits each array to that many random coordinates (the
    rest are returned as NaN) so large inputs stay cheap; flat indices in
    ``must[i]`` are always checked.
    """
    rng = np.random.default_rng(1234)
    out = []
    for n, a in enumerate(arrays):
        g = np.full(a.shape, np.nan)
        flat = np.arange(a.size)
        if idx_sample is not None and a.size > idx_sample:
            flat = rng.choice(a.size, idx_sample, replace=False)
            if must is not None:
                flat = np.union1d(flat, must[n])
        for k in flat:
            i = np.unravel_index(k, a.shape)
            old = a[i]
            a[i] = old + h
            fp = f(*arrays)
            a[i] = old - h
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def analytic_grad(build, arrays):
    ts = [nc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    out.backward()
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, ts)]


def rel_error(analytic, numeric) -> float:
    """max |a - n| / max(|a|, |n|) over the checked coordinates, with a 1e-8 floor."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        m = ~np.isnan(n)
        if not m.any():
            continue
        num = np.max(np.abs(a[m] - n[m]))
        den = max(np.max(np.abs(a[m])), np.max(np.abs(n[m])), 1e-8)
        worst = max(worst, num / den)
    return worst


def grad_check(build, arrays, idx_sample=None) -> float:
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    f = lambda *xs: build(*(nc.Tensor(x) for x in xs)).item()
    an = analytic_grad(build, arrays)
    # the largest analytic entries are always among the checked coordinates
    must = [np.argsort(-np.abs(g).ravel())[:40] for g in an]
    return rel_error(an, numeric_grad(f, arrays, idx_sample, must=must))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from ssod.synthdata import DatasetSpec, generate

    root = tmp_path_factory.mktemp("data") / "tiny"
    generate(DatasetSpec(num_images=100, num_test=20, seed=3), root)
    return root
