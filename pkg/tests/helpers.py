"""Shared test utilities: gradient checking and brute-force oracles."""

import itertools

import numpy as np

from factorcast import autodiff as ad

FD_STEP = 1e-5
FD_RTOL = 1e-5
FD_ATOL = 1e-9


def fd_gradient(loss_fn, leaf: ad.Tensor, coords=None, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of loss_fn() w.r.t. selected coords of leaf."""
    flat = leaf.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    out = np.zeros(flat.size)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn().item()
        flat[i] = orig - step
        lo = loss_fn().item()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(leaf.data.shape)


def assert_grad_matches_fd(loss_fn, leaves, rng=None, coords_per_leaf=None,
                           rtol: float = FD_RTOL, atol: float = FD_ATOL):
    """Run backward once and compare against central differences.

    ``loss_fn`` must rebuild the graph from the same leaf tensors on every
    call. When ``coords_per_leaf`` is set, a random subset of coordinates is
    checked per leaf (seeded via ``rng``).
    """
    if isinstance(leaves, ad.Tensor):
        leaves = [leaves]
    leaves = list(leaves)
    for leaf in leaves:
        leaf.grad = None
    loss = loss_fn()
    ad.backward(loss)
    for leaf in leaves:
        got = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        size = leaf.data.size
        if coords_per_leaf is not None and size > coords_per_leaf:
            assert rng is not None
            coords = rng.choice(size, size=coords_per_leaf, replace=False)
        else:
            coords = range(size)
        want = fd_gradient(loss_fn, leaf, coords=coords)
        got_flat, want_flat = got.reshape(-1), want.reshape(-1)
        for i in coords:
            a, b = got_flat[i], want_flat[i]
            err = abs(a - b)
            ok = err <= atol or err <= rtol * max(abs(a), abs(b))
            assert ok, (
                f"gradient mismatch on {getattr(leaf, 'name', None) or 'leaf'}[{i}]: "
                f"reverse-mode {a!r} vs finite-difference {b!r}"
            )


def brute_force_segmentation(series, k, min_segment=2):
    """Exhaustive optimal segmentation, independent of the DP implementation.

    Enumerates breakpoint tuples in lexicographic order and keeps strictly
    better costs, so the first optimum (the lexicographically earliest) wins.
    """
    series = np.asarray(series, dtype=np.float64)
    t = series.size

    def seg_cost(seg):
        return float(((seg - seg.mean()) ** 2).sum())

    best_cost, best_bps = None, None
    for bps in itertools.combinations(range(min_segment, t - min_segment + 1), k):
        if any(b2 - b1 < min_segment for b1, b2 in zip(bps, bps[1:])):
            continue
        bounds = (0,) + bps + (t,)
        cost = sum(seg_cost(series[a:b]) for a, b in zip(bounds[:-1], bounds[1:]))
        if best_cost is None or cost < best_cost:
            best_cost, best_bps = cost, bps
    return best_cost, best_bps


class TinyModel:
    """Linear features and per-task linear heads over the trainer's model protocol."""

    def __init__(self, rng, in_dim=3, feat_dim=2, tasks=None, init_scale=0.5):
        from factorcast.targets import TaskId
        self.store = ad.ParamStore()
        self.theta = self.store.add("theta/f", rng.normal(0.0, init_scale, (in_dim, feat_dim)))
        for task in tasks or (TaskId.MA, TaskId.PF):
            arity = 2 if task is TaskId.CPD else 1
            self.store.add(f"w/{task.value}/g", rng.normal(0.0, init_scale, (feat_dim, arity)))

    def features(self, x):
        return ad.matmul(ad.constant(x), self.theta)

    def head_out(self, x, task):
        return ad.matmul(self.features(x), self.store[f"w/{task.value}/g"])

    def task_loss(self, x, task, y):
        from factorcast.targets import TaskId
        pred = self.head_out(x, task)
        if task is TaskId.CPD:
            return ad.cross_entropy(pred, np.asarray(y).reshape(-1))
        return ad.mse(pred, ad.constant(np.asarray(y)))

    def contrastive_matrices(self, x, task):
        f = self.features(x)
        return f, ad.matmul(f, self.store[f"w/{task.value}/g"])

    def predict(self, x, task):
        return self.head_out(x, task)
