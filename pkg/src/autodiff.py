# src/autodiff.py

import hashlib
from dataclasses import dataclass, field
import numpy as np
from src.utils import ShapeError

"""
Minimal dense reverse-mode automatic differentiation on numpy arrays.
- Tensor wraps a float64 array; operations record their parents and a backward rule.
- Tape orders the recorded graph topologically and runs the backward pass.
- Module/Linear hold parameters, Adam updates them, save/load use numpy containers.
"""


class Tensor:
    """
    Dense float64 array with optional gradient tracking.
    """

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.parents = parents
        self.backward_fn = backward
        self.op = op
        self.is_parameter = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self, grad=None):
        Tape.record(self).backward(grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """
    Recorded operations reachable from an output, in topological order.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def record(cls, output):
        order = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return cls(order)

    def backward(self, grad=None):
        """
        Propagates gradients from the output; leaf gradients accumulate additively.
        """
        if not self.nodes:
            return
        output = self.nodes[-1]
        if not output.requires_grad:
            return
        seed = np.ones_like(output.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"backward seed shape {seed.shape} does not match output {output.shape}")
        grads = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def unbroadcast(grad, shape):
    """Sums a broadcast gradient back to the operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a, c):
    a = _wrap(a)
    c = float(c)

    def backward(g):
        return (g * c,)
    return _result(a.data * c, (a,), backward, "scale")


def matmul(a, b):
    """
    Matrix product over the last two axes with numpy batch broadcasting.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _result(out, (a, b), backward, "matmul")


def relu(a):
    a = _wrap(a)
    positive = a.data > 0

    def backward(g):
        return (g * positive,)
    return _result(np.where(positive, a.data, 0.0), (a,), backward, "relu")


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _result(out, tuple(tensors), backward, "concat")


def slice_(a, index):
    a = _wrap(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _result(a.data[index], (a,), backward, "slice")


def reshape(a, shape):
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)
    return _result(out, (a,), backward, "reshape")


def transpose(a, axes):
    a = _wrap(a)
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)
    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def reduce_max_rows(a):
    """
    Max over the row axis (-2); the gradient goes to the first maximal row.
    """
    a = _wrap(a)
    if a.ndim < 2:
        raise ShapeError(f"reduce_max_rows needs at least 2 dims, got {a.shape}")
    idx = np.argmax(a.data, axis=-2)[..., None, :]
    out = np.take_along_axis(a.data, idx, axis=-2)[..., 0, :]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g[..., None, :], axis=-2)
        return (full,)
    return _result(out, (a,), backward, "reduce_max_rows")


def masked_segment_max(values, mask):
    """
    Elementwise max over the neighbors of every node.

    Args:
        values (Tensor): (..., n, m, h) candidate messages, receiver first.
        mask (np.ndarray): (n, m) boolean neighbor mask.

    Returns:
        Tensor: (..., n, h); nodes without neighbors receive zeros. The gradient
        of each output slot goes to its first maximal neighbor only.
    """
    values = _wrap(values)
    mask = np.asarray(mask, dtype=bool)
    if values.ndim < 3 or values.shape[-3:-1] != mask.shape:
        raise ShapeError(f"masked_segment_max: values {values.shape} do not match mask {mask.shape}")
    masked = np.where(mask[..., None], values.data, -np.inf)
    idx = np.argmax(masked, axis=-2)[..., None, :]
    has_neighbor = mask.any(axis=1)[:, None]
    out = np.where(has_neighbor, np.take_along_axis(values.data, idx, axis=-2)[..., 0, :], 0.0)

    def backward(g):
        full = np.zeros_like(values.data)
        np.put_along_axis(full, idx, (g * has_neighbor)[..., None, :], axis=-2)
        return (full,)
    return _result(out, (values,), backward, "masked_segment_max")


def sum_(a):
    a = _wrap(a)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(np.asarray(a.data.sum()), (a,), backward, "sum")


def mean(a):
    a = _wrap(a)
    return scale(sum_(a), 1.0 / max(a.data.size, 1))


def _weights(mask, shape):
    if mask is None:
        return np.ones(shape)
    return np.broadcast_to(np.asarray(mask, dtype=np.float64), shape)


def mse_loss(pred, target, mask=None):
    """Mean squared error over the (optionally masked) entries."""
    pred = _wrap(pred)
    target = np.asarray(target, dtype=np.float64)
    if np.broadcast_shapes(pred.shape, target.shape) != pred.shape:
        raise ShapeError(f"mse_loss: target {target.shape} does not fit prediction {pred.shape}")
    w = _weights(mask, pred.shape)
    count = w.sum()
    if count == 0:
        return Tensor(0.0)
    diff = pred.data - target

    def backward(g):
        return (g * 2.0 * w * diff / count,)
    return _result(np.asarray((w * diff ** 2).sum() / count), (pred,), backward, "mse_loss")


def sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def bce_with_logits(logits, targets, mask=None):
    """Mean binary cross-entropy on raw logits."""
    logits = _wrap(logits)
    y = np.asarray(targets, dtype=np.float64)
    if np.broadcast_shapes(logits.shape, y.shape) != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} do not fit logits {logits.shape}")
    w = _weights(mask, logits.shape)
    count = w.sum()
    if count == 0:
        return Tensor(0.0)
    x = logits.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * w * (sigmoid(x) - y) / count,)
    return _result(np.asarray((w * per).sum() / count), (logits,), backward, "bce_with_logits")


def softmax_cross_entropy(logits, targets, mask=None):
    """
    Mean categorical cross-entropy over the last axis.

    Args:
        logits (Tensor): (..., k) scores.
        targets (np.ndarray): (...) integer classes.
        mask (np.ndarray): Optional (...) row weights.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=int)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = _weights(mask, targets.shape)
    count = w.sum()
    if count == 0:
        return Tensor(0.0)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    picked = np.take_along_axis(log_p, targets[..., None], axis=-1)[..., 0]
    onehot = np.zeros_like(log_p)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)

    def backward(g):
        return (g * (np.exp(log_p) - onehot) * w[..., None] / count,)
    return _result(np.asarray(-(w * picked).sum() / count), (logits,), backward, "softmax_cross_entropy")


def grad_check(f, x, eps=1e-5):
    """
    Compares autodiff against central finite differences.

    Args:
        f (callable): Tensor -> scalar Tensor.
        x (Tensor | np.ndarray): Evaluation point.
        eps (float): Finite-difference step.

    Returns:
        float: max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|) over coordinates.
    """
    point = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tracked = Tensor(point.copy(), requires_grad=True)
    out = f(tracked)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    g_ad = np.zeros_like(point) if tracked.grad is None else tracked.grad
    g_fd = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(Tensor(point.copy())).data)
        flat[i] = orig - eps
        f_minus = float(f(Tensor(point.copy())).data)
        flat[i] = orig
        g_fd.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * eps)
    rel = np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(rel.max()) if rel.size else 0.0


def parameter(data):
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    t.is_parameter = True
    return t


def glorot_uniform(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """
    Container of parameters and sub-modules, discovered from attributes.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.is_parameter:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in state:
                if strict:
                    raise ShapeError(f"checkpoint is missing parameter '{name}'")
                continue
            if state[name].shape != p.shape:
                raise ShapeError(f"parameter '{name}': checkpoint shape {state[name].shape} vs model {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


class Linear(Module):
    """
    y = x W (+ b) applied over the last axis.
    """

    def __init__(self, in_dim, out_dim, rng, bias=True, zero_init=False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init:
            self.weight = parameter(np.zeros((in_dim, out_dim)))
        else:
            self.weight = parameter(glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        return y if self.bias is None else add(y, self.bias)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One Adam update with bias correction.

    Args:
        params (dict): name -> array.
        grads (dict): name -> gradient array.
        state (AdamState): Moments and timestep.

    Returns:
        tuple: (new params, new state, applied). A non-finite gradient leaves
        params and state untouched and returns applied=False.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            return params, state, False
    t = state.t + 1
    new_params, m, v = {}, dict(state.m), dict(state.v)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        m[name] = beta1 * m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v[name] = beta2 * v.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1 ** t)
        v_hat = v[name] / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t), True


class Adam:
    """
    Adam over a module's trainable parameters; frozen parameters are skipped.
    """

    def __init__(self, module, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.module = module
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self):
        """
        Applies one update from the accumulated gradients.

        Returns:
            bool: False when the batch was skipped because of a non-finite gradient.
        """
        trainable = [(n, p) for n, p in self.module.named_parameters() if p.requires_grad]
        if not trainable:
            return True
        params = {n: p.data for n, p in trainable}
        grads = {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in trainable}
        new_params, self.state, applied = adam_step(
            params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        if applied:
            for n, p in trainable:
                p.data = new_params[n]
        return applied

    def zero_grad(self):
        self.module.zero_grad()


def parameter_checksum(module):
    """sha256 over the names, shapes and bytes of all parameters."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode("utf-8"))
        h.update(str(p.shape).encode("utf-8"))
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def save_params(path, arrays):
    """
    Writes named arrays into a numpy .npz container (shape headers included).
    """
    with open(path, 'wb') as f:
        np.savez(f, **arrays)


def load_params(path):
    with np.load(path) as data:
        return {name: data[name].astype(np.float64) for name in data.files}
