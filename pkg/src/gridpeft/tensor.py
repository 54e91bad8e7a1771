"""Dense float64 tensors with reverse-mode differentiation.

Gradients are recorded on an explicit :class:`GradientSession`.  A tensor
takes part in differentiation only if it was registered with
``session.watch`` or was computed from such a tensor; everything else is a
constant.  There is no global tape, so independent forward/backward passes
(for instance one per sample) never see each other's state.

>>> s = GradientSession()
>>> w = s.watch(Tensor([1.0, 2.0, 3.0]))
>>> loss = (w * w).sum() * 0.5
>>> s.backward(loss)[w]
array([1., 2., 3.])
"""

import math

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError, NumericError, RankError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


class Tensor:
    """A row-major float64 array, optionally bound to a gradient session."""

    __slots__ = ("data", "grad_enabled", "_session", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, grad_enabled=False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if not np.isfinite(arr).all():
            raise NumericError("tensor data must be finite")
        self.data = arr
        self.grad_enabled = grad_enabled
        self._session = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad_enabled = False
        t._session = None
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def session(self):
        return self._session

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        tag = ", grad" if self._session is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class GradientSession:
    """Records differentiable operations and evaluates gradients in reverse.

    A session is single-use: after :meth:`backward` its record is released.
    """

    def __init__(self):
        self._tape = []
        self._leaves = []
        self._done = False

    def watch(self, t):
        """Return a participating leaf that shares ``t``'s storage."""
        if self._done:
            raise ContractError("session already consumed by backward()")
        leaf = Tensor._wrap(t.data if isinstance(t, Tensor) else np.array(t, dtype=np.float64))
        leaf.grad_enabled = True
        leaf._session = self
        self._leaves.append(leaf)
        return leaf

    def _record(self, node):
        self._tape.append(node)

    def backward(self, loss):
        """Gradients of scalar ``loss`` for every watched leaf it depends on."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward() needs a scalar loss, got shape {shape}")
        if loss._session is not self:
            raise ContractError("loss was not produced under this session")
        if self._done:
            raise ContractError("session already consumed by backward()")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or parent._session is not self:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = GradientMap()
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if g is not None:
                out._store[id(leaf)] = (leaf, np.ascontiguousarray(g).reshape(leaf.shape))
        self._tape = []
        self._done = True
        return out


class GradientMap:
    """Leaf tensor -> gradient array, looked up by identity."""

    def __init__(self):
        self._store = {}

    def __getitem__(self, leaf):
        return self._store[id(leaf)][1]

    def get(self, leaf, default=None):
        item = self._store.get(id(leaf))
        return default if item is None else item[1]

    def __contains__(self, leaf):
        return id(leaf) in self._store

    def __len__(self):
        return len(self._store)


def backward(loss, session):
    """Functional spelling of ``session.backward(loss)``."""
    return session.backward(loss)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fn, check=True):
    if check and not np.isfinite(data).all():
        raise NumericError("operation produced non-finite values")
    out = Tensor._wrap(data)
    session = None
    for p in parents:
        if p._session is not None:
            if session is not None and p._session is not session:
                raise ContractError("operands belong to different gradient sessions")
            session = p._session
    if session is not None:
        out._session = session
        out._parents = parents
        out._backward = grad_fn
        session._record(out)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    """Elementwise product; ``b`` may be a Python scalar."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    b = as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def abs_(x):
    """|x| with subgradient 0 at the kink."""
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = ndtr(xd)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    y = x.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def grad_fn(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    return _make(np.asarray(y, dtype=np.float64), (x,), grad_fn)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return mul(sum_(x, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), grad_fn)


def softmax_lastdim(x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), grad_fn)


def layernorm_lastdim(x, gamma, beta, eps=1e-5):
    """Normalise each last-axis slice (biased variance), then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(
            f"layernorm affine parameters {gamma.shape}/{beta.shape} do not match width {n}"
        )
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def grad_fn(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), grad_fn)


# ------------------------------------------------------------------- structure


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return _make(y, (x,), lambda g: (g.reshape(old),), check=False)


def permute(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise RankError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    y = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make(y, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),), check=False)


def pi_shift(x):
    """Move the last axis to the front: (d1, ..., dn) -> (dn, d1, ..., dn-1)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise RankError(f"pi_shift needs rank >= 2, got rank {x.ndim}")
    n = x.ndim
    return permute(x, (n - 1,) + tuple(range(n - 1)))


def swap_last2(x):
    x = as_tensor(x)
    n = x.ndim
    return permute(x, tuple(range(n - 2)) + (n - 1, n - 2))


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    ndim = ts[0].ndim
    axis = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in ts]}"
            )
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(ts))
        )

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), grad_fn, check=False)


def concat_first(a, b):
    """Stack ``a`` above ``b`` along the first axis."""
    return concat([a, b], axis=0)


def slice_axis(x, axis, start, stop):
    x = as_tensor(x)
    axis = axis % x.ndim
    shape = x.shape
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def grad_fn(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), grad_fn, check=False)


def slice_first(x, start, stop):
    return slice_axis(x, 0, start, stop)


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    old = x.shape
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {old} to {shape}") from None
    return _make(y, (x,), lambda g: (_unbroadcast(g, old),), check=False)


# --------------------------------------------------------------- 2-d resampling


def _separable(x, rows, cols):
    # out[..., i, j] = sum_kl rows[i, k] x[..., k, l] cols[j, l]
    x = as_tensor(x)
    y = np.matmul(np.matmul(rows, x.data), cols.T)

    def grad_fn(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return _make(y, (x,), grad_fn, check=False)


def _pool_matrix(n_out, factor):
    m = np.zeros((n_out, n_out * factor))
    for i in range(n_out):
        m[i, i * factor:(i + 1) * factor] = 1.0 / factor
    return m


def upsample_matrix(n_in, factor):
    """Half-pixel bilinear interpolation weights, edges clamped."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) / factor - 0.5, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m


def avg_pool_2d(x, factor):
    """Non-overlapping mean pooling over the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise RankError("avg_pool_2d needs rank >= 2")
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"grid {h}x{w} not divisible by pooling factor {factor}")
    return _separable(x, _pool_matrix(h // factor, factor), _pool_matrix(w // factor, factor))


def bilinear_upsample_2d(x, factor):
    """Bilinear upsampling of the last two axes by an integer factor."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise RankError("bilinear_upsample_2d needs rank >= 2")
    h, w = x.shape[-2:]
    return _separable(x, upsample_matrix(h, factor), upsample_matrix(w, factor))


# ------------------------------------------------------------------ scoring


def gaussian_crps(mu, sigma, obs):
    """Elementwise closed-form CRPS of N(mu, sigma^2) against ``obs``."""
    mu, sigma, obs = as_tensor(mu), as_tensor(sigma), as_tensor(obs)
    if (sigma.data <= 0).any():
        raise NumericError("gaussian_crps needs sigma > 0")
    z = (obs.data - mu.data) / sigma.data
    cdf = ndtr(z)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    value = sigma.data * (2.0 * pdf + z * (2.0 * cdf - 1.0) - _INV_SQRT_PI)
    shapes = (mu.shape, sigma.shape, obs.shape)

    def grad_fn(g):
        slope = g * (2.0 * cdf - 1.0)
        return (
            _unbroadcast(-slope, shapes[0]),
            _unbroadcast(g * (2.0 * pdf - _INV_SQRT_PI), shapes[1]),
            _unbroadcast(slope, shapes[2]),
        )

    return _make(value, (mu, sigma, obs), grad_fn)
