"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Operations are recorded on the active ``Tape`` (entered with ``with Tape():``).
Outside a tape the primitives compute forward values only, which is what
evaluation passes use.
"""

from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import InvariantError, NasSelectionError, NumericError
from .prng import CounterRNG

# Floor for the relative-error denominator in grad_check
GRAD_CHECK_FLOOR = 1e-8


class AutodiffError(NasSelectionError):
    """Misuse of the autodiff engine."""


class ShapeMismatchError(AutodiffError, InvariantError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, shape_a: tuple[int, ...], shape_b: tuple[int, ...]):
        self.primitive = primitive
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{primitive}: shape mismatch {self.shape_a} vs {self.shape_b}")


class NonFiniteError(AutodiffError, NumericError):
    """A primitive produced NaN or Inf."""

    def __init__(self, primitive: str, node_index: int | None):
        self.primitive = primitive
        self.node_index = node_index
        where = f"node {node_index}" if node_index is not None else "untaped value"
        super().__init__(f"{primitive}: non-finite output at {where}")


class TapeError(AutodiffError):
    """Invalid backward request (non-scalar loss, foreign or consumed tape)."""


class NonDeterministicModelError(AutodiffError, InvariantError):
    """Model builder returned different values for the same seed."""


class OptimizerError(AutodiffError):
    """Invalid optimizer state or update."""


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(dim <= 0 for dim in arr.shape):
            raise AutodiffError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", None)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Constant view sharing this tensor's data."""
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class TapeNode:
    index: int
    primitive: str
    inputs: tuple[Tensor | None, ...]
    output: Tensor
    backward: BackwardFn


_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)


class Tape:
    """Ordered record of primitive applications on one thread."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False
        self._tokens: list[Any] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def record(
        self,
        primitive: str,
        inputs: tuple[Tensor | None, ...],
        out: np.ndarray,
        backward: BackwardFn,
    ) -> Tensor:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        index = len(self.nodes)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(primitive, index)
        requires_grad = False
        for t in inputs:
            if t is None or not t.requires_grad:
                continue
            requires_grad = True
            if t._tape is not self:
                self.leaves.setdefault(id(t), t)
        result = Tensor._wrap(out, requires_grad=requires_grad)
        result._tape = self
        self.nodes.append(TapeNode(index, primitive, inputs, result, backward))
        return result


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording for the block (forward values only)."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def _record(
    primitive: str,
    inputs: tuple[Tensor | None, ...],
    out: np.ndarray,
    backward: BackwardFn,
) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(primitive, None)
        return Tensor._wrap(out)
    return tape.record(primitive, inputs, out, backward)


def _same_shape(primitive: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(primitive, a.shape, b.shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scale(a: Tensor, factor: float) -> Tensor:
    c = float(factor)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    left, right = a.data, b.data
    return _record("matmul", (a, b), left @ right, lambda g: (g @ right.T, left.T @ g))


def bias_add(a: Tensor, bias: Tensor) -> Tensor:
    if a.data.ndim != 2 or bias.data.ndim != 1 or a.shape[1] != bias.shape[0]:
        raise ShapeMismatchError("bias_add", a.shape, bias.shape)
    return _record("bias_add", (a, bias), a.data + bias.data, lambda g: (g, g.sum(axis=0)))


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _record("relu", (a,), np.where(active, a.data, 0.0), lambda g: (g * active,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _record(
        "mean",
        (a,),
        np.array(a.data.mean()),
        lambda g: (np.full(a.shape, float(g) / n),),
    )


def softmax(a: Tensor, mask: np.ndarray | None = None, renormalize: bool = True) -> Tensor:
    """
    Softmax over a vector, optionally restricted to the entries where ``mask`` is True.

    With ``renormalize`` the weights are a softmax over the active entries only.
    Without it the full softmax is computed and masked entries are set to zero,
    so the active weights sum to less than one.
    """
    if a.data.ndim != 1:
        raise ShapeMismatchError("softmax", a.shape, (a.size,))
    active = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if active.shape != a.shape:
        raise ShapeMismatchError("softmax", a.shape, active.shape)
    if not active.any():
        raise AutodiffError("softmax: every entry is masked")

    if renormalize:
        z = a.data[active]
        e = np.exp(z - z.max())
        s_active = e / e.sum()
        out = np.zeros(a.shape)
        out[active] = s_active

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            ga = np.zeros(a.shape)
            g_active = g[active]
            ga[active] = s_active * (g_active - np.dot(g_active, s_active))
            return (ga,)

        return _record("softmax", (a,), out, backward)

    e = np.exp(a.data - a.data.max())
    s = e / e.sum()
    keep = active.astype(np.float64)

    def backward_full(g: np.ndarray) -> tuple[np.ndarray]:
        gm = g * keep
        return (s * (gm - np.dot(gm, s)),)

    return _record("softmax", (a,), s * keep, backward_full)


def weighted_sum(weights: Tensor, terms: Sequence[Tensor | None]) -> Tensor:
    """Return ``sum_i weights[i] * terms[i]``; ``None`` terms contribute exactly zero."""
    if weights.data.ndim != 1 or weights.shape[0] != len(terms):
        raise ShapeMismatchError("weighted_sum", weights.shape, (len(terms),))
    present = [t for t in terms if t is not None]
    if not present:
        raise AutodiffError("weighted_sum: every term is None")
    ref = present[0]
    for t in present[1:]:
        _same_shape("weighted_sum", ref, t)

    w = weights.data
    out = np.zeros(ref.shape)
    for wi, t in zip(w, terms, strict=True):
        if t is not None:
            out = out + wi * t.data

    def backward(g: np.ndarray) -> list[np.ndarray | None]:
        gw = np.array([0.0 if t is None else float(np.sum(g * t.data)) for t in terms])
        grads: list[np.ndarray | None] = [gw]
        grads.extend(None if t is None else wi * g for wi, t in zip(w, terms, strict=True))
        return grads

    return _record("weighted_sum", (weights, *terms), out, backward)


def cross_entropy(logits: Tensor, labels: Any) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (n, c) against integer ``labels`` (n,)."""
    y = np.atleast_1d(np.asarray(labels))
    z = logits.data.reshape(1, -1) if logits.data.ndim == 1 else logits.data
    if z.ndim != 2 or y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise ShapeMismatchError("cross_entropy", logits.shape, y.shape)
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= z.shape[1]:
        raise AutodiffError(f"cross_entropy: labels must be integers in [0, {z.shape[1]})")

    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, y].mean()

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        probs = np.exp(log_probs)
        probs[rows, y] -= 1.0
        return ((probs * (float(g) / n)).reshape(logits.shape),)

    return _record("cross_entropy", (logits,), np.array(loss), backward)


def gaussian_noise_const(shape: tuple[int, ...], seed: int, x: Tensor | None = None) -> Tensor:
    """
    N(0, 1) samples drawn from ``CounterRNG(seed)``.

    ``x`` is accepted so the op can sit on an edge like any other operation; its
    value is ignored and it receives a zero gradient.
    """
    data = CounterRNG(seed).normal(tuple(shape))
    if x is None:
        return _record("gaussian_noise_const", (), data, lambda g: ())
    return _record("gaussian_noise_const", (x,), data, lambda g: (np.zeros(x.shape),))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, wrt: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """
    Reverse-mode pass from a scalar loss over its tape.

    Every requires_grad leaf used on the tape, plus every tensor in ``wrt``,
    gets an entry in the returned map; tensors that do not influence the loss
    get zeros. Gradients are also accumulated into ``tensor.grad``.
    The tape is consumed.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not computed on a tape")
    if tape.consumed:
        raise TapeError("tape already consumed")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None or not node.output.requires_grad:
            continue
        for inp, g in zip(node.inputs, node.backward(upstream), strict=False):
            if inp is None or g is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = g if prev is None else prev + g

    targets: dict[int, Tensor] = dict(tape.leaves)
    for t in wrt:
        targets.setdefault(id(t), t)

    result: dict[Tensor, np.ndarray] = {}
    for key, tensor in targets.items():
        g = grads.get(key)
        g = np.zeros(tensor.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != tensor.shape:
            g = g.reshape(tensor.shape)
        result[tensor] = g
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
    return result


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

LossFn = Callable[[Mapping[str, Tensor], Any], Tensor]
ModelBuilder = Callable[[int], tuple[dict[str, Tensor], LossFn]]


def grad_check(
    build_model: ModelBuilder,
    inputs: Any,
    epsilon: float = 1e-5,
    seed: int = 0,
) -> float:
    """
    Compare autodiff gradients against central finite differences.

    Args:
        build_model: ``seed -> (params, loss_fn)`` where ``loss_fn(params, inputs)``
            returns a scalar Tensor
        inputs: Passed through to ``loss_fn``
        epsilon: Central-difference step, in (0, 1e-2]
        seed: Seed handed to ``build_model``

    Returns:
        max over all parameter coordinates of
        ``|autodiff - central| / max(|central|, 1e-8)``
    """
    if not 0.0 < epsilon <= 1e-2:
        raise AutodiffError(f"epsilon must be in (0, 1e-2], got {epsilon}")

    params, loss_fn = build_model(seed)
    twin_params, twin_loss_fn = build_model(seed)
    if sorted(params) != sorted(twin_params) or any(
        not np.array_equal(params[k].data, twin_params[k].data) for k in params
    ):
        raise NonDeterministicModelError("model builder produced different parameters")
    base_value = loss_fn(params, inputs).item()
    if base_value != twin_loss_fn(twin_params, inputs).item():
        raise NonDeterministicModelError("model produced different losses for one seed")
    if base_value != loss_fn(params, inputs).item():
        raise NonDeterministicModelError("model is not deterministic across calls")

    with Tape():
        loss = loss_fn(params, inputs)
    analytic = backward(loss, wrt=params.values())

    worst = 0.0
    for tensor in params.values():
        original = tensor.data
        for i in range(original.size):
            plus = original.copy()
            plus.flat[i] += epsilon
            minus = original.copy()
            minus.flat[i] -= epsilon
            tensor.data = plus
            f_plus = loss_fn(params, inputs).item()
            tensor.data = minus
            f_minus = loss_fn(params, inputs).item()
            tensor.data = original
            central = (f_plus - f_minus) / (2.0 * epsilon)
            auto = float(analytic[tensor].flat[i])
            rel = abs(auto - central) / max(abs(central), GRAD_CHECK_FLOOR)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptState:
    """Learning rates and momentum buffers for the weight and α updates."""

    learning_rate_w: float
    learning_rate_alpha: float
    momentum: float = 0.0
    step_count: int = 0
    alpha_step_count: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate_w <= 0 or self.learning_rate_alpha <= 0:
            raise OptimizerError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise OptimizerError(f"momentum must be in [0, 1), got {self.momentum}")


def _checked_grad(name: str, param: Tensor, grad: np.ndarray) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape:
        raise ShapeMismatchError(f"update of {name}", param.shape, g.shape)
    if not np.all(np.isfinite(g)):
        raise OptimizerError(f"non-finite gradient for {name}")
    return g


def sgd_momentum_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptState,
) -> Mapping[str, Tensor]:
    """
    One SGD+momentum update: ``v = mu * v + g``; ``w = w - lr * v``.

    Only parameters present in ``grads`` move. Parameter arrays are replaced,
    never written in place, so earlier snapshots stay valid.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise OptimizerError(f"gradients for unknown parameters: {sorted(unknown)}")
    updates = {name: _checked_grad(name, params[name], g) for name, g in grads.items()}
    for name, g in updates.items():
        prev = state.velocity.get(name)
        v = g if prev is None else state.momentum * prev + g
        state.velocity[name] = v
        params[name].data = params[name].data - state.learning_rate_w * v
    state.step_count += 1
    return params


def gradient_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptState,
) -> Mapping[str, Tensor]:
    """Plain gradient descent with ``learning_rate_alpha`` (used for α)."""
    unknown = set(grads) - set(params)
    if unknown:
        raise OptimizerError(f"gradients for unknown parameters: {sorted(unknown)}")
    updates = {name: _checked_grad(name, params[name], g) for name, g in grads.items()}
    for name, g in updates.items():
        params[name].data = params[name].data - state.learning_rate_alpha * g
    state.alpha_step_count += 1
    return params
