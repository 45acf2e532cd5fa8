"""
Minimal rank-4 tensor engine with reverse-mode gradients.

Only what the booster networks need: 3x3 same-size convolutions, leaky-relu,
sigmoid, channel concatenation, an L1 loss and Adam. Layers cache what their
backward pass needs during ``forward`` and accumulate parameter gradients into
``Tensor4.grad`` during ``backward``, so a :class:`Sequential` stack is trained
with the usual ``zero_grad`` / ``forward`` / ``backward`` / ``step`` loop.

Training runs in float32; :func:`grad_check` clones a network to float64 and
compares analytic gradients against central finite differences.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ContractError

__all__ = [
    "Tensor4",
    "Conv2d",
    "LeakyReLU",
    "Sigmoid",
    "Sequential",
    "AdamState",
    "Adam",
    "conv2d_forward",
    "conv2d_backward",
    "leaky_relu",
    "leaky_relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "concat_channels",
    "l1_loss",
    "adam_step",
    "grad_check",
]


class Tensor4:
    """A ``(n, c, h, w)`` array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None, dtype=np.float32):
        data = np.ascontiguousarray(data, dtype=dtype)
        if data.ndim != 4:
            raise ContractError(f"Tensor4 needs a rank-4 array, got shape {data.shape}")
        if grad is not None:
            grad = np.ascontiguousarray(grad, dtype=data.dtype)
            if grad.shape != data.shape:
                raise ContractError(f"grad shape {grad.shape} != data shape {data.shape}")
        self.data = data
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def is_finite(self):
        ok = bool(np.isfinite(self.data).all())
        if self.grad is not None:
            ok = ok and bool(np.isfinite(self.grad).all())
        return ok

    def copy(self):
        return Tensor4(self.data.copy(), None if self.grad is None else self.grad.copy(),
                       dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor4(shape={self.shape}, dtype={self.dtype})"


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x):
    """(n, c, h, w) -> (n, c*9, h*w) over a zero-padded 3x3 neighbourhood."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, c, 9, h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy * 3 + dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, c * 9, h * w)


def _col2im(cols, shape):
    n, c, h, w = shape
    cols = cols.reshape(n, c, 9, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy * 3 + dx]
    return xp[:, :, 1:-1, 1:-1]


class Conv2d:
    """3x3 convolution, stride 1, zero padding 1 (output keeps the input size).

    Weights are drawn uniformly from ``[-s, s]`` with ``s = sqrt(1 / (c_in * 9))``;
    biases start at zero. ``bias`` is stored as a ``(1, c_out, 1, 1)`` tensor so
    it broadcasts over the output directly.
    """

    def __init__(self, c_in, c_out, rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        s = np.sqrt(1.0 / (c_in * 9))
        w = rng.uniform(-s, s, size=(c_out, c_in, 3, 3))
        self.weight = Tensor4(w, dtype=dtype)
        self.bias = Tensor4(np.zeros((1, c_out, 1, 1)), dtype=dtype)
        self._cols = None
        self._in_shape = None

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def c_out(self):
        return self.weight.shape[0]

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, cache=True):
        if x.shape[1] != self.c_in:
            raise ContractError(f"conv expects {self.c_in} input channels, got {x.shape[1]}")
        n, _, h, w = x.shape
        cols = _im2col(x.data)
        wm = self.weight.data.reshape(self.c_out, -1)
        out = np.matmul(wm, cols).reshape(n, self.c_out, h, w)
        out += self.bias.data
        if cache:
            self._cols = cols
            self._in_shape = x.shape
        return Tensor4(out, dtype=x.dtype)

    def backward(self, grad_out):
        if self._cols is None:
            raise ContractError("backward called without a cached forward pass")
        gi, gw, gb = _conv_backward_cols(grad_out.data, self._cols, self._in_shape, self.weight.data)
        for p, g in ((self.weight, gw), (self.bias, gb)):
            if p.grad is None:
                p.grad = g
            else:
                p.grad += g
        self._cols = None
        return Tensor4(gi, dtype=grad_out.dtype)


def _conv_backward_cols(g, cols, in_shape, weight):
    n, c, h, w = in_shape
    c_out = weight.shape[0]
    if g.shape != (n, c_out, h, w):
        raise ContractError(f"grad_out shape {g.shape} does not match forward output {(n, c_out, h, w)}")
    g = g.reshape(n, c_out, h * w)
    gw = np.zeros((c_out, c * 9), dtype=g.dtype)
    for i in range(n):
        gw += g[i] @ cols[i].T
    gb = g.sum(axis=(0, 2)).reshape(1, c_out, 1, 1)
    wm = weight.reshape(c_out, -1)
    gcols = np.matmul(wm.T, g)
    gi = _col2im(gcols, in_shape)
    return gi, gw.reshape(weight.shape), gb


def conv2d_forward(input, layer):
    """Zero-padded 3x3 cross-correlation of ``input`` with ``layer`` plus bias."""
    return layer.forward(input, cache=False)


def conv2d_backward(grad_out, cached_input, layer):
    """Return ``(grad_input, grad_weight, grad_bias)`` for one conv layer.

    ``grad_weight`` has the weight's ``(c_out, c_in, 3, 3)`` shape and
    ``grad_bias`` is the per-output-channel sum of ``grad_out``, flattened.
    """
    if cached_input.shape[1] != layer.c_in:
        raise ContractError(f"conv expects {layer.c_in} input channels, got {cached_input.shape[1]}")
    cols = _im2col(cached_input.data)
    gi, gw, gb = _conv_backward_cols(grad_out.data, cols, cached_input.shape, layer.weight.data)
    return Tensor4(gi, dtype=grad_out.dtype), gw, gb.ravel()


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def leaky_relu(input, slope=0.2):
    if not 0.0 <= slope < 1.0:
        raise ContractError(f"slope must lie in [0, 1), got {slope}")
    x = input.data
    return Tensor4(np.where(x >= 0, x, slope * x), dtype=x.dtype)


def leaky_relu_backward(grad_out, cached_input, slope=0.2):
    g = grad_out.data
    return Tensor4(np.where(cached_input.data >= 0, g, slope * g), dtype=g.dtype)


def sigmoid(input):
    # expit saturates cleanly instead of overflowing in exp(-x)
    return Tensor4(expit(input.data), dtype=input.dtype)


def sigmoid_backward(grad_out, output):
    y = output.data
    return Tensor4(grad_out.data * y * (1 - y), dtype=y.dtype)


class LeakyReLU:
    def __init__(self, slope=0.2):
        self.slope = slope
        self._x = None

    def parameters(self):
        return []

    def forward(self, x, cache=True):
        if cache:
            self._x = x
        return leaky_relu(x, self.slope)

    def backward(self, grad_out):
        gi = leaky_relu_backward(grad_out, self._x, self.slope)
        self._x = None
        return gi


class Sigmoid:
    def __init__(self):
        self._y = None

    def parameters(self):
        return []

    def forward(self, x, cache=True):
        y = sigmoid(x)
        if cache:
            self._y = y
        return y

    def backward(self, grad_out):
        gi = sigmoid_backward(grad_out, self._y)
        self._y = None
        return gi


def concat_channels(*tensors):
    """Stack tensors along the channel axis."""
    shapes = {(t.shape[0],) + t.shape[2:] for t in tensors}
    if len(shapes) != 1:
        raise ContractError(f"cannot concatenate tensors of shapes {[t.shape for t in tensors]}")
    return Tensor4(np.concatenate([t.data for t in tensors], axis=1), dtype=tensors[0].dtype)


class Sequential:
    """A plain stack of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, cache=True):
        for layer in self.layers:
            x = layer.forward(x, cache=cache)
        return x

    __call__ = forward

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                out.append((f"{i}.weight", layer.weight))
                out.append((f"{i}.bias", layer.bias))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Deep copy with every parameter cast to ``dtype`` and no gradients."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone


# ---------------------------------------------------------------------------
# loss and optimiser
# ---------------------------------------------------------------------------

def l1_loss(pred, target):
    """Mean absolute error and its gradient with respect to ``pred``.

    The gradient is ``sign(pred - target) / size`` with ``sign(0) = 0``.
    """
    if pred.shape != target.shape:
        raise ContractError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    size = diff.size
    loss = float(np.abs(diff, dtype=np.float64).sum() / size)
    grad = np.sign(diff) / size
    return loss, Tensor4(grad, dtype=pred.dtype)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` and ``grads`` are sequences of same-shaped arrays. Moment buffers
    are created on the first call.
    """
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ContractError(f"grad {i} shape {g.shape} != param shape {params[i].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {i} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a list of :class:`Tensor4` parameters using their ``grad`` buffers."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _loss_and_kinks(net, x, t):
    """L1 loss plus the sign pattern of every non-smooth point it passes through."""
    signs = []
    for layer in net.layers:
        if isinstance(layer, LeakyReLU):
            signs.append(x.data >= 0)
        x = layer.forward(x, cache=False)
    diff = x.data - t.data
    signs.append(np.sign(diff))
    return float(np.abs(diff).sum() / diff.size), signs


def _same_pattern(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def grad_check(network, input, h=1e-3, target=None, min_h=1e-8):
    """Largest relative error between analytic and central-difference gradients.

    ``network`` is a :class:`Sequential` (or a list of layers). It is cloned to
    float64 before anything is evaluated, so the original is untouched. The
    scalar being differentiated is ``l1_loss(network(input), target)``;
    ``target`` defaults to zeros.

    A difference quotient is only meaningful if the loss stays on one smooth
    piece between ``-h`` and ``+h``. When a perturbation flips a leaky-relu or
    L1 sign, that element is re-measured with the step divided by 10 (down to
    ``min_h``).

    Each element's error is ``|a - n| / max(|a|, |n|, 1e-10)``, which is 0 when
    both gradients vanish.
    """
    if h <= 0:
        raise ContractError(f"step h must be positive, got {h}")
    if not isinstance(network, Sequential):
        network = Sequential(network)
    net = network.astype(np.float64)
    x = Tensor4(input.data, dtype=np.float64)
    if target is None:
        t = Tensor4(np.zeros(net.forward(x, cache=False).shape), dtype=np.float64)
    else:
        t = Tensor4(target.data, dtype=np.float64)

    net.zero_grad()
    _, g = l1_loss(net.forward(x), t)
    net.backward(g)
    _, base_pattern = _loss_and_kinks(net, x, t)

    worst = 0.0
    for p in net.parameters():
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h
            while True:
                flat[i] = orig + step
                up, pat_up = _loss_and_kinks(net, x, t)
                flat[i] = orig - step
                down, pat_down = _loss_and_kinks(net, x, t)
                flat[i] = orig
                smooth = _same_pattern(pat_up, base_pattern) and _same_pattern(pat_down, base_pattern)
                if smooth or step / 10 < min_h:
                    break
                step /= 10
            numeric = (up - down) / (2 * step)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-10)
            worst = max(worst, err)
    return worst
