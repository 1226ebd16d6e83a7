"""
Dense float64 tensors with reverse-mode differentiation.

Tensors are `torch.Tensor` objects in float64 and the reverse pass is torch's
autograd. This module adds the pieces the models rely on beyond that: the
shape-checked primitive table, named RNG streams that make dropout and noise
reproducible, a `Graph` recorder for inspecting what a forward pass built, and
a finite-difference gradient checker.
"""
import math
import zlib
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

from app.errors import NonFiniteError, ShapeError, SimulError, VocabularyError

DTYPE = torch.float64
LN_EPS = 1e-5


def as_tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE).clone()
    return t.requires_grad_(requires_grad)


def check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains non-finite values")


class RngStreams:
    """Named, independently seeded torch generators ("dropout", "gumbel", "mask", ...)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, torch.Generator] = {}

    def stream_seed(self, name: str) -> int:
        return (self.seed * 1_000_003 + zlib.crc32(name.encode("utf-8"))) % (2 ** 63)

    def __getitem__(self, name: str) -> torch.Generator:
        gen = self._gens.get(name)
        if gen is None:
            gen = torch.Generator()
            gen.manual_seed(self.stream_seed(name))
            self._gens[name] = gen
        return gen

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {name: gen.get_state() for name, gen in sorted(self._gens.items())}

    def load_state_dict(self, states: dict[str, torch.Tensor]):
        for name, state in states.items():
            self[name].set_state(state.to(torch.uint8).clone())


# -- graph recording ---------------------------------------------------------

@dataclass
class Node:
    index: int
    op_kind: str
    inputs: list[int]
    output_shape: tuple


def _tensors_in(obj):
    if isinstance(obj, torch.Tensor):
        yield obj
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from _tensors_in(item)
    elif isinstance(obj, dict):
        for item in obj.values():
            yield from _tensors_in(item)


class Graph(TorchFunctionMode):
    """
    Records, in execution order, every torch operation that consumes a tensor
    requiring grad while the context is active. Node inputs refer to the indices
    of the nodes that produced them (-1 for leaves), so the list is topologically
    ordered by construction.
    """

    def __init__(self):
        super().__init__()
        self.nodes: list[Node] = []
        self._producer: dict[int, int] = {}
        self._keep: list[torch.Tensor] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        out = func(*args, **kwargs)
        inputs = [t for t in _tensors_in((args, kwargs))]
        if any(t.requires_grad for t in inputs):
            outputs = [o for o in _tensors_in(out) if o.requires_grad]
            if outputs:
                index = len(self.nodes)
                name = getattr(func, "__name__", str(func))
                self.nodes.append(Node(
                    index=index,
                    op_kind=name,
                    inputs=[self._producer.get(id(t), -1) for t in inputs],
                    output_shape=tuple(outputs[0].shape),
                ))
                for o in outputs:
                    self._producer[id(o)] = index
                    self._keep.append(o)
        return out

    def contains(self, t: torch.Tensor) -> bool:
        return id(t) in self._producer

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.op_kind] = counts.get(node.op_kind, 0) + 1
        return counts


# -- primitives --------------------------------------------------------------

def _suffix_compatible(a: torch.Size, b: torch.Size) -> bool:
    if a == b:
        return True
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    return len(short) == 0 or tuple(long[len(long) - len(short):]) == tuple(short)


def _elementwise(op_kind, fn):
    def run(a, b):
        if isinstance(b, torch.Tensor) and not _suffix_compatible(a.shape, b.shape):
            raise ShapeError(op_kind, [a.shape, b.shape])
        return fn(a, b)
    return run


def _matmul(a, b):
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape])
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", [a.shape, b.shape], "batch dimensions differ")
    return torch.matmul(a, b)


def _transpose(a, dim0=-2, dim1=-1):
    if a.dim() < 2:
        raise ShapeError("transpose", [a.shape], "needs at least 2 dimensions")
    return a.transpose(dim0, dim1)


def _layer_norm(a, weight=None, bias=None, eps=LN_EPS):
    width = a.shape[-1]
    for p in (weight, bias):
        if p is not None and tuple(p.shape) != (width,):
            raise ShapeError("layer_norm", [a.shape, p.shape])
    return F.layer_norm(a, (width,), weight, bias, eps)


def _embedding_lookup(weight, ids):
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= weight.shape[0]):
        bad = int(ids.max()) if int(ids.max()) >= weight.shape[0] else int(ids.min())
        raise VocabularyError(bad, weight.shape[0])
    return F.embedding(ids, weight)


def _masked_fill(a, mask, value):
    try:
        out_shape = torch.broadcast_shapes(a.shape, mask.shape)
    except RuntimeError:
        raise ShapeError("masked_fill", [a.shape, mask.shape])
    if out_shape != a.shape:
        raise ShapeError("masked_fill", [a.shape, mask.shape], "mask widens the input")
    return a.masked_fill(mask, value)


def _concat(tensors, axis=0):
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)
        ):
            raise ShapeError("concat", [x.shape for x in tensors])
    return torch.cat(tensors, dim=axis)


def _reshape(a, shape):
    if math.prod(shape) != a.numel() and -1 not in shape:
        raise ShapeError("reshape", [a.shape, torch.Size(shape)])
    return a.reshape(shape)


def _reduce(op_kind, fn):
    def run(a, axis=None, keepdim=False):
        if axis is None:
            return fn(a)
        if not -a.dim() <= axis < a.dim():
            raise ShapeError(op_kind, [a.shape], f"axis {axis} out of range")
        return fn(a, dim=axis, keepdim=keepdim)
    return run


def _dropout(a, rate, generator=None, training=True):
    if not 0.0 <= rate < 1.0:
        raise SimulError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return a
    keep = torch.rand(a.shape, generator=generator, dtype=a.dtype) >= rate
    return a * keep / (1.0 - rate)


PRIMITIVES: dict[str, Callable] = {
    "matmul": _matmul,
    "transpose": _transpose,
    "add": _elementwise("add", torch.add),
    "multiply": _elementwise("multiply", torch.mul),
    "divide": _elementwise("divide", torch.div),
    "exp": torch.exp,
    "log": torch.log,
    "relu": torch.relu,
    "softmax": lambda a, axis=-1: torch.softmax(a, dim=axis),
    "log_softmax": lambda a, axis=-1: torch.log_softmax(a, dim=axis),
    "layer_norm": _layer_norm,
    "embedding_lookup": _embedding_lookup,
    "masked_fill": _masked_fill,
    "concat": _concat,
    "reshape": _reshape,
    "sum": _reduce("sum", torch.sum),
    "mean": _reduce("mean", torch.mean),
    "dropout": _dropout,
}


def primitive_forward(op_kind: str, *inputs, **attrs) -> torch.Tensor:
    fn = PRIMITIVES.get(op_kind)
    if fn is None:
        raise SimulError(f"unknown primitive '{op_kind}'")
    return fn(*inputs, **attrs)


def backward(loss: torch.Tensor, graph: Graph | None = None):
    if loss.numel() != 1 or loss.dim() > 1:
        raise ShapeError("backward", [loss.shape], "loss must be a scalar")
    if graph is not None and not graph.contains(loss):
        raise SimulError("loss was not produced inside the given graph")
    loss.reshape(()).backward()


def grad_check(f: Callable, x, eps: float = 1e-5) -> float:
    """
    Max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|),
    numeric gradients by central differences. `x` is a tensor or a sequence of
    tensors passed positionally to `f`; `f` must return a scalar and be
    deterministic.
    """
    xs = [x] if isinstance(x, torch.Tensor) else list(x)
    leaves = [t.detach().clone().to(DTYPE).requires_grad_(True) for t in xs]
    out = f(*leaves)
    check_finite(out.detach(), "function value")
    analytic = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for leaf, grad in zip(leaves, analytic):
            grad = torch.zeros_like(leaf) if grad is None else grad
            check_finite(grad, "analytic gradient")
            flat = leaf.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = f(*leaves).item()
                flat[i] = orig - eps
                minus = f(*leaves).item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * eps)
                if not math.isfinite(numeric):
                    raise NonFiniteError(f"numeric gradient at element {i} is not finite")
                a = grad.reshape(-1)[i].item()
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst


def sinusoidal_positions(length: int, dim: int, offset: int = 0) -> torch.Tensor:
    positions = torch.arange(offset, offset + length, dtype=DTYPE).unsqueeze(1)
    half = dim // 2
    rates = torch.exp(
        torch.arange(half, dtype=DTYPE) * -(math.log(10000.0) / max(half - 1, 1))
    )
    angles = positions * rates.unsqueeze(0)
    table = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if dim % 2:
        table = torch.cat([table, torch.zeros(length, 1, dtype=DTYPE)], dim=1)
    return table
