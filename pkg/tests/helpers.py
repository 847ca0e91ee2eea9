"""Independent reference implementations used as test oracles."""

import math

import numpy as np

from forgetlab.autograd import Tensor


def brute_forgetting(a):
    """Average forgetting straight from the definition, 1-based indices."""
    n = len(a)
    total = 0.0
    for i in range(2, n + 1):
        s = 0.0
        for j in range(1, i):
            s += a[i - 1][j - 1] - a[j - 1][j - 1]
        total += s / (i - 1)
    return total / (n - 1)


def brute_avg_acc(a):
    n = len(a)
    return sum(a[n - 1][j] for j in range(n)) / n


def brute_avg_lacc(a):
    return sum(a[j][j] for j in range(len(a))) / len(a)


def random_lower(rng, n):
    return [[float(rng.uniform()) for _ in range(i + 1)] for i in range(n)]


def t_halfwidth(values, level=0.95):
    """t-interval half-width with the df=1 quantile in closed form (Cauchy)."""
    v = np.asarray(values, dtype=float)
    assert len(v) == 2
    q = math.tan(math.pi * (level / 2))  # t_{0.975, 1}
    return q * v.std(ddof=1) / math.sqrt(len(v))


class Scalar:
    """One-parameter model with the clone / named_parameters protocol."""

    def __init__(self, w):
        self.w = Tensor(np.array([float(w)]), requires_grad=True)

    def clone(self):
        return Scalar(self.w.data[0])

    def named_parameters(self):
        return [("w", self.w)]


# ---------------------------------------------------------------------------
# gradient-check cases: name -> builder(rng) -> (scalar function, point)
# ---------------------------------------------------------------------------

from forgetlab import autograd as ag  # noqa: E402


def _dims(rng, k=2):
    return [int(v) for v in rng.integers(1, 9, size=k)]


def _weigh(out, rng):
    """Random linear functional so every output coordinate carries gradient."""
    w = Tensor(rng.standard_normal(out.shape))
    return ag.sum(ag.mul(out, w))


def _away_from_zero(rng, shape, gap=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, gap * np.sign(x + 1e-30) * 2, x)


def _case_matmul_left(rng):
    n, d, m = [int(v) for v in rng.integers(1, 9, size=3)]
    b = Tensor(rng.standard_normal((d, m)))
    return lambda x: _weigh(ag.matmul(x, b), np.random.default_rng(1)), rng.standard_normal((n, d))


def _case_matmul_right(rng):
    n, d, m = [int(v) for v in rng.integers(1, 9, size=3)]
    a = Tensor(rng.standard_normal((n, d)))
    return lambda x: _weigh(ag.matmul(a, x), np.random.default_rng(2)), rng.standard_normal((d, m))


def _case_add_broadcast(rng):
    n, d = _dims(rng)
    a = Tensor(rng.standard_normal((n, d)))
    return lambda x: _weigh(ag.add(a, x), np.random.default_rng(3)), rng.standard_normal(d)


def _case_add(rng):
    n, d = _dims(rng)
    a = Tensor(rng.standard_normal((n, d)))
    return lambda x: _weigh(ag.add(x, a), np.random.default_rng(4)), rng.standard_normal((n, d))


def _case_sub(rng):
    n, d = _dims(rng)
    a = Tensor(rng.standard_normal((n, d)))
    return lambda x: _weigh(ag.sub(a, x), np.random.default_rng(5)), rng.standard_normal((n, d))


def _case_mul(rng):
    n, d = _dims(rng)
    a = Tensor(rng.standard_normal((n, d)))
    return lambda x: _weigh(ag.mul(x, a), np.random.default_rng(6)), rng.standard_normal((n, d))


def _case_mul_self(rng):
    n, d = _dims(rng)
    return lambda x: _weigh(ag.mul(x, x), np.random.default_rng(7)), rng.standard_normal((n, d))


def _case_relu(rng):
    n, d = _dims(rng)
    return lambda x: _weigh(ag.relu(x), np.random.default_rng(8)), _away_from_zero(rng, (n, d))


def _case_log(rng):
    n, d = _dims(rng)
    return lambda x: _weigh(ag.log(x), np.random.default_rng(9)), rng.uniform(0.5, 3.0, size=(n, d))


def _case_exp(rng):
    n, d = _dims(rng)
    return lambda x: _weigh(ag.exp(x), np.random.default_rng(10)), rng.standard_normal((n, d))


def _case_softmax(rng):
    n, d = _dims(rng)
    return lambda x: _weigh(ag.softmax(x), np.random.default_rng(11)), rng.standard_normal((n, d))


def _case_log_softmax(rng):
    n, d = _dims(rng)
    return lambda x: _weigh(ag.log_softmax(x), np.random.default_rng(12)), rng.standard_normal((n, d))


def _case_cross_entropy(rng):
    n, d = _dims(rng)
    y = rng.integers(0, d, size=n)
    return lambda x: ag.cross_entropy(x, y), rng.standard_normal((n, d))


def _case_sum_axis(rng):
    n, d = _dims(rng)
    axis = int(rng.integers(0, 2))
    return lambda x: _weigh(ag.sum(x, axis=axis), np.random.default_rng(13)), rng.standard_normal((n, d))


def _case_mean(rng):
    n, d = _dims(rng)
    axis = [None, 0, 1][int(rng.integers(0, 3))]
    return lambda x: _weigh(ag.mean(x, axis=axis), np.random.default_rng(14)), rng.standard_normal((n, d))


def _case_rows(rng):
    n, d = _dims(rng)
    idx = rng.integers(0, n, size=int(rng.integers(1, 9)))  # repeats exercise accumulation
    return lambda x: _weigh(ag.rows(x, idx), np.random.default_rng(15)), rng.standard_normal((n, d))


def _case_getitem(rng):
    n, d = _dims(rng)
    idx = rng.integers(0, n, size=int(rng.integers(1, 9)))
    return lambda x: _weigh(x[idx], np.random.default_rng(16)), rng.standard_normal((n, d))


def _case_transpose(rng):
    n, d = _dims(rng)
    return lambda x: _weigh(ag.transpose(x), np.random.default_rng(17)), rng.standard_normal((n, d))


def _case_neg_scale(rng):
    n, d = _dims(rng)
    c = float(rng.standard_normal())
    return lambda x: _weigh(ag.scale(ag.neg(x), c), np.random.default_rng(18)), rng.standard_normal((n, d))


def _case_logdet(rng):
    # FDiv's inner term: log|I + a X^T X| as a function of the feature matrix X
    m, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
    a = float(rng.uniform(0.5, 2.0))
    eye = Tensor(np.eye(d))

    def f(x):
        return ag.logdet_spd(ag.add(eye, ag.scale(ag.matmul(ag.transpose(x), x), a)))

    return f, rng.standard_normal((m, d))


def _mlp_case(which):
    """2-layer MLP cross-entropy as a function of one of its parameter tensors."""

    def build(rng):
        n, d, h, c = [int(v) for v in rng.integers(1, 9, size=4)]
        c = max(c, 2)
        x = Tensor(rng.standard_normal((n, d)))
        y = rng.integers(0, c, size=n)
        shapes = {"w1": (d, h), "b1": (h,), "w2": (h, c), "b2": (c,)}
        while True:
            fixed = {k: Tensor(0.7 * rng.standard_normal(s)) for k, s in shapes.items()}
            pre = x.data @ fixed["w1"].data + fixed["b1"].data
            if np.all(np.abs(pre) > 1e-3):  # differentiable point: no relu kink within reach of h
                break

        def f(t):
            p = {**fixed, which: t}
            hidden = ag.relu(ag.add(ag.matmul(x, p["w1"]), p["b1"]))
            return ag.cross_entropy(ag.add(ag.matmul(hidden, p["w2"]), p["b2"]), y)

        return f, fixed[which].data.copy()

    return build


GRAD_CASES = {
    "matmul_left": _case_matmul_left,
    "matmul_right": _case_matmul_right,
    "add": _case_add,
    "add_broadcast": _case_add_broadcast,
    "sub": _case_sub,
    "mul": _case_mul,
    "mul_self": _case_mul_self,
    "relu": _case_relu,
    "log": _case_log,
    "exp": _case_exp,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "cross_entropy": _case_cross_entropy,
    "sum": _case_sum_axis,
    "mean": _case_mean,
    "rows": _case_rows,
    "getitem": _case_getitem,
    "transpose": _case_transpose,
    "neg_scale": _case_neg_scale,
    "logdet_spd": _case_logdet,
    "mlp_w1": _mlp_case("w1"),
    "mlp_b1": _mlp_case("b1"),
    "mlp_w2": _mlp_case("w2"),
    "mlp_b2": _mlp_case("b2"),
}


def mean_metric(results, learner, get):
    """Mean of ``get(run)`` over one learner's runs."""
    return float(np.mean([get(r) for r in results if r.learner == learner]))
