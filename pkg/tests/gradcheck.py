"""Central finite-difference oracle, independent of the autodiff code path."""
import numpy as np


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||) for one parameter."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_params(f, named_params, rng, max_entries=None, h=1e-5, floor=1e-8):
    """Worst relative error over parameters; analytic grads must already be in ``p.grad``.

    Small tensors are checked entry by entry. Larger ones (more than
    ``max_entries`` scalars) are checked on a random subset of entries plus one
    random direction spanning the whole tensor. Parameters whose analytic and
    numeric gradients are both below ``floor`` count as exact zeros.
    """
    worst, report = 0.0, {}
    for name, p in named_params:
        arr = p.data
        flat = arr.reshape(-1)
        ana = p.grad.reshape(-1) if p.grad is not None else np.zeros(flat.size)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num[k] = (fp - fm) / (2 * h)
        errs = [_zero_aware(ana[idx], num, floor)]
        if len(idx) < flat.size:
            v = rng.standard_normal(flat.size)
            orig = flat.copy()
            flat[:] = orig + h * v
            fp = f()
            flat[:] = orig - h * v
            fm = f()
            flat[:] = orig
            errs.append(_zero_aware(np.array([ana @ v]), np.array([(fp - fm) / (2 * h)]), floor))
        report[name] = max(errs)
        worst = max(worst, report[name])
    return worst, report


def _zero_aware(a, n, floor):
    if np.linalg.norm(a) < floor and np.linalg.norm(n) < floor:
        return 0.0
    return rel_error(a, n)
