"""Minimal reverse-mode autodiff over numpy arrays.

A Node wraps an ndarray value; every op records its parents and a closure
that routes the incoming gradient to them.  backward() walks the graph in
reverse topological order.  There is no graph compiler and no broadcasting
magic: each op states exactly what it differentiates.  The filter bank is a
constant everywhere, so kernel gradients are contracted against it to give
gradients in basis-coefficient space, and the bank itself never receives
gradients.

Double precision is supported throughout for verification; training runs in
single precision.
"""

import numpy as np

from . import tensorops as T
from .basis import SteerableBasis


class Node:
    __slots__ = ("value", "grad", "track", "_parents", "_backward")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value)
        self.grad = None
        self.track = True
        self._parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"


def leaf(value) -> Node:
    return Node(np.asarray(value))


def constant(value) -> Node:
    """Input data: no gradient is ever produced for it."""
    node = Node(np.asarray(value))
    node.track = False
    return node


def _needs_grad(node: Node) -> bool:
    return node.track or node._backward is not None


def _accumulate(node: Node, grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = grad.astype(node.value.dtype, copy=True)
    else:
        node.grad += grad


def backward(loss: Node, params=()) -> None:
    """Populate .grad on every reachable node; unreachable params get zeros."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    topo: list[Node] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.value)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitive ops


def reshape(x: Node, shape) -> Node:
    out = Node(x.value.reshape(shape), (x,))
    out._backward = lambda g: _accumulate(x, g.reshape(x.value.shape))
    return out


def transpose(x: Node, axes) -> Node:
    inverse = np.argsort(axes)
    out = Node(np.ascontiguousarray(x.value.transpose(axes)), (x,))
    out._backward = lambda g: _accumulate(x, g.transpose(inverse))
    return out


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add needs matching shapes, got {a.value.shape} and {b.value.shape}")
    out = Node(a.value + b.value, (a, b))

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    out._backward = _bw
    return out


def scale(x: Node, factor: float) -> Node:
    out = Node(x.value * factor, (x,))
    out._backward = lambda g: _accumulate(x, g * factor)
    return out


def relu(x: Node) -> Node:
    mask = x.value > 0
    out = Node(np.where(mask, x.value, 0.0), (x,))
    out._backward = lambda g: _accumulate(x, np.where(mask, g, 0.0))
    return out


def matmul(x: Node, w: Node) -> Node:
    out = Node(x.value @ w.value, (x, w))

    def _bw(g):
        if _needs_grad(x):
            _accumulate(x, g @ w.value.T)
        if _needs_grad(w):
            _accumulate(w, x.value.T @ g)

    out._backward = _bw
    return out


def add_row_bias(x: Node, b: Node) -> Node:
    """x [N, M] + b [M]."""
    out = Node(x.value + b.value[None, :], (x, b))

    def _bw(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=0))

    out._backward = _bw
    return out


def add_channel_bias(x: Node, b: Node) -> Node:
    """x [N, C, ...] + one bias value per channel."""
    expand = (None, slice(None)) + (None,) * (x.value.ndim - 2)
    out = Node(x.value + b.value[expand], (x, b))

    def _bw(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=tuple(i for i in range(g.ndim) if i != 1)))

    out._backward = _bw
    return out


def conv2d(x: Node, kernel: Node, padding_mode: str = T.PAD_ZERO) -> Node:
    v = kernel.value.shape[-1]
    out = Node(T.conv2d(x.value, kernel.value, padding_mode), (x, kernel))

    def _bw(g):
        if _needs_grad(x):
            _accumulate(x, T.conv2d_input_grad(g, kernel.value, padding_mode))
        if _needs_grad(kernel):
            _accumulate(kernel, T.conv2d_kernel_grad(g, x.value, v, padding_mode))

    out._backward = _bw
    return out


def max_pool2d(x: Node, window: int) -> Node:
    h, w = x.value.shape[-2:]
    ho, wo = h // window, w // window
    lead = x.value.shape[:-2]
    cropped = x.value[..., : ho * window, : wo * window]
    tiles = cropped.reshape(*lead, ho, window, wo, window)
    tiles = np.ascontiguousarray(tiles.swapaxes(-3, -2)).reshape(*lead, ho, wo, window * window)
    arg = tiles.argmax(axis=-1)
    out_val = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]
    out = Node(out_val, (x,))

    def _bw(g):
        gt = np.zeros_like(tiles)
        np.put_along_axis(gt, arg[..., None], g[..., None], axis=-1)
        gt = gt.reshape(*lead, ho, wo, window, window).swapaxes(-3, -2)
        gx = np.zeros_like(x.value)
        gx[..., : ho * window, : wo * window] = gt.reshape(*lead, ho * window, wo * window)
        _accumulate(x, gx)

    out._backward = _bw
    return out


def max_axis(x: Node, axis: int) -> Node:
    """Max reduction along one axis (scale projection, spatial maxima)."""
    axis = axis % x.value.ndim
    arg = x.value.argmax(axis=axis)
    out_val = np.take_along_axis(x.value, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    out = Node(out_val, (x,))

    def _bw(g):
        gx = np.zeros_like(x.value)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(x, gx)

    out._backward = _bw
    return out


def assemble_kernel(w: Node, basis: SteerableBasis, origin: int = 0, num_levels: int | None = None) -> Node:
    """Mix the fixed bank with coefficient gradients flowing back to w.

    w [O, C, K_S, N_b] -> kernel [O, C, K_S, S, V, V] over the level window.
    """
    if num_levels is None:
        num_levels = basis.num_levels - origin
    bank = basis.data[:, origin : origin + num_levels].astype(w.value.dtype, copy=False)
    out = Node(np.einsum("ocji,islm->ocjslm", w.value, bank), (w,))
    out._backward = lambda g: _accumulate(w, np.einsum("ocjslm,islm->ocji", g, bank))
    return out


def block_scale_kernel(kappa: Node, num_scales: int) -> Node:
    """Linear scatter [O, C, K_S, S, V, V] -> block kernel [O*S, C*S, V, V]."""
    o, c, k_s, s, v, _ = kappa.value.shape
    if s != num_scales:
        raise ValueError(f"kernel holds {s} levels, feature window has {num_scales}")

    def scatter(kval):
        big = np.zeros((o, s, c, s, v, v), dtype=kval.dtype)
        for j in range(k_s):
            idx = np.arange(s - j)
            big[:, idx, :, idx + j] += kval[:, :, j, : s - j].transpose(2, 0, 1, 3, 4)
        return big.reshape(o * s, c * s, v, v)

    out = Node(scatter(kappa.value), (kappa,))

    def _bw(g):
        gb = g.reshape(o, s, c, s, v, v)
        gk = np.zeros_like(kappa.value)
        for j in range(k_s):
            idx = np.arange(s - j)
            gk[:, :, j, : s - j] = gb[:, idx, :, idx + j].transpose(1, 2, 0, 3, 4)
        _accumulate(kappa, gk)

    out._backward = _bw
    return out


def conv2d_per_level(x: Node, kappa: Node, padding_mode: str = T.PAD_ZERO) -> Node:
    """Level-wise 2D correlation: x [N,C,S,U,U], kappa [O,C,S,V,V] -> [N,O,S,U,U].

    Without scale interaction the block kernel is level-diagonal, so the
    dense expanded convolution would spend S times the arithmetic on zero
    blocks; iterating the levels keeps only the useful work.
    """
    n, c, s, u1, u2 = x.value.shape
    o, _, s2, v, _ = kappa.value.shape
    if s2 != s:
        raise ValueError(f"kernel holds {s2} levels, feature map has {s}")
    dtype = np.result_type(x.value.dtype, kappa.value.dtype)
    radius = (v - 1) // 2
    out_val = np.empty((n, o, s, u1, u2), dtype=dtype)
    cols_cache = []
    for k in range(s):
        xp = T.pad_spatial(np.ascontiguousarray(x.value[:, :, k]), radius, padding_mode)
        cols = T._unfold_kmajor(xp, v, u1, u2)  # [C*V*V, N*P]
        kmat = kappa.value[:, :, k].reshape(o, -1).astype(dtype, copy=False)
        res = kmat @ cols
        out_val[:, :, k] = res.reshape(o, n, u1, u2).transpose(1, 0, 2, 3)
        cols_cache.append(cols if _needs_grad(kappa) else None)
    out = Node(out_val, (x, kappa))

    def _bw(g):
        if _needs_grad(kappa):
            gk = np.empty_like(kappa.value)
            for k in range(s):
                gmat = np.ascontiguousarray(g[:, :, k].transpose(1, 0, 2, 3)).reshape(o, -1)
                gk[:, :, k] = (gmat.astype(dtype, copy=False) @ cols_cache[k].T).reshape(o, c, v, v)
            _accumulate(kappa, gk)
        cols_cache.clear()
        if _needs_grad(x):
            gx = np.empty_like(x.value)
            for k in range(s):
                gx[:, :, k] = T.conv2d_input_grad(g[:, :, k], kappa.value[:, :, k], padding_mode)
            _accumulate(x, gx)

    out._backward = _bw
    return out


def softmax_cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean cross-entropy between softmax(logits [N, K]) and integer labels."""
    z = logits.value
    single = z.ndim == 1
    zb = z[None] if single else z
    labels = np.atleast_1d(np.asarray(labels))
    n, k = zb.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    zmax = zb.max(axis=1, keepdims=True)
    shifted = zb - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    picked = zb[np.arange(n), labels]
    out = Node(np.asarray((lse - picked).mean(), dtype=z.dtype), (logits,))

    def _bw(g):
        soft = np.exp(shifted)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), labels] -= 1.0
        gz = soft * (g / n)
        _accumulate(logits, gz[0] if single else gz)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# composite scale-convolution layers


def scale_conv_th(
    x: Node,
    w: Node,
    bias: Node | None,
    basis: SteerableBasis,
    padding_mode: str = T.PAD_ZERO,
    origin: int = 0,
    num_levels: int | None = None,
) -> Node:
    """Lift [N, C, U, U] to [N, C_out, S, U, U] with gradients to w (and bias)."""
    if num_levels is None:
        num_levels = basis.num_levels - origin
    kappa = assemble_kernel(w, basis, origin, num_levels)  # [O, C, 1, S, V, V]
    o, c, _, s, v, _ = kappa.value.shape
    flat = reshape(transpose(reshape(kappa, (o, c, s, v, v)), (0, 2, 1, 3, 4)), (o * s, c, v, v))
    out = conv2d(x, flat, padding_mode)
    n, _, u1, u2 = out.value.shape
    out = reshape(out, (n, o, s, u1, u2))
    if bias is not None:
        out = add_channel_bias(out, bias)
    return out


def scale_conv_hh(
    x: Node,
    w: Node,
    bias: Node | None,
    basis: SteerableBasis,
    padding_mode: str = T.PAD_ZERO,
    origin: int = 0,
) -> Node:
    """Map [N, C, S, U, U] to [N, C_out, S, U, U]; w may carry K_S > 1."""
    n, c, s, u1, u2 = x.value.shape
    kappa = assemble_kernel(w, basis, origin, s)
    o, _, k_s = kappa.value.shape[:3]
    if k_s == 1:
        v = kappa.value.shape[-1]
        out = conv2d_per_level(x, reshape(kappa, (o, c, s, v, v)), padding_mode)
    else:
        big = block_scale_kernel(kappa, s)
        out = conv2d(reshape(x, (n, c * s, u1, u2)), big, padding_mode)
        out = reshape(out, (n, o, s, u1, u2))
    if bias is not None:
        out = add_channel_bias(out, bias)
    return out


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """SGD with classical or Nesterov momentum and optional L2 weight decay."""

    def __init__(self, params, lr, momentum=0.0, nesterov=False, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p, vel in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            vel *= self.momentum
            vel += g
            update = g + self.momentum * vel if self.nesterov else vel
            p.value -= self.lr * update


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def step_decay_lr(lr0: float, epoch: int, boundaries=(20, 40), factor: float = 0.1) -> float:
    """Piecewise-constant schedule: divide by 1/factor at each boundary epoch."""
    lr = lr0
    for b in boundaries:
        if epoch >= b:
            lr *= factor
    return lr


# ---------------------------------------------------------------------------
# initialisation and verification


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = fan_in**-0.5
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def finite_difference_check(make_loss, params, h: float = 1e-5, max_entries: int | None = None, rng=None) -> float:
    """Worst relative mismatch between backward() and central differences.

    For each parameter tensor, up to max_entries coordinates are probed and
    the analytic/numeric gradient slices are compared in the L2 norm.  Call
    with float64 parameters; single precision cannot resolve h = 1e-5.
    """
    loss = make_loss()
    zero_grads(params)
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        fd = np.empty(idx.size, dtype=np.float64)
        for pos, i in enumerate(idx):
            keep = flat[i]
            flat[i] = keep + h
            up = float(make_loss().value)
            flat[i] = keep - h
            down = float(make_loss().value)
            flat[i] = keep
            fd[pos] = (up - down) / (2 * h)
        an = ga.reshape(-1)[idx].astype(np.float64)
        denom = max(float(np.linalg.norm(fd)), 1e-12)
        worst = max(worst, float(np.linalg.norm(an - fd)) / denom)
    return worst
