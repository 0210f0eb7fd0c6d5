"""
Dense-matrix reverse-mode automatic differentiation.

A Tape records every primitive applied during a forward pass (kind, input
node ids, output value, cached values). backward() walks the tape in
reverse, accumulating gradients into the registered leaves. The graph is
rebuilt on every training step, so there is no graph reuse.

All values are 2-D float64 numpy arrays.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import ContractError, DimensionError, DomainError


KINDS = (
    "matmul",
    "add",
    "subtract",
    "multiply",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "concat",
    "row_l2_squared",
    "abs_sum",
    "row_abs_sum",
    "row_mean",
    "row_sum",
    "sum",
    "scale",
    "cosine_rows",
    "clip",
)

# rows with a smaller L2 norm are treated as having this norm in cosine_rows
COSINE_NORM_FLOOR = 1e-12


@dataclass
class Node:
    kind: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    cache: Dict[str, Any] = field(default_factory=dict)
    attrs: Dict[str, Any] = field(default_factory=dict)
    leaf_name: Optional[str] = None


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, kind={node.kind}, shape={node.value.shape})"


def _as_matrix(value: Any) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"matrices are 2-D, got shape {arr.shape}")
    # values on the tape are never mutated in place
    arr.setflags(write=False)
    return arr


class Tape:
    def __init__(self):
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}

    def _push(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, name: str, value: Any) -> Var:
        """Register a parameter matrix; backward() reports its gradient under `name`."""
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} already registered on this tape")
        var = self._push(Node("leaf", (), _as_matrix(value), leaf_name=name))
        self.leaves[name] = var.id
        return var

    def constant(self, value: Any) -> Var:
        return self._push(Node("constant", (), _as_matrix(value)))


# ---------- FORWARD / BACKWARD RULES ----------


def _shape_error(kind: str, *shapes: Tuple[int, ...]) -> DimensionError:
    joined = " and ".join(str(tuple(s)) for s in shapes)
    return DimensionError(f"{kind}: shapes {joined} do not conform")


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    # b may match a exactly, be a 1×cols row vector or a rows×1 column vector
    if b.shape == a.shape:
        return
    if b.shape == (1, a.shape[1]) or b.shape == (a.shape[0], 1):
        return
    raise _shape_error(kind, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and shape[1] == grad.shape[1]:
        return grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and shape[0] == grad.shape[0]:
        return grad.sum(axis=1, keepdims=True)
    return np.full(shape, grad.sum())


def _row_norms(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    raw = np.sqrt((a * a).sum(axis=1, keepdims=True))
    return np.maximum(raw, COSINE_NORM_FLOOR), raw >= COSINE_NORM_FLOOR


def _forward(kind: str, xs: List[np.ndarray], attrs: Dict[str, Any]) -> Tuple[np.ndarray, Dict[str, Any]]:
    if kind == "matmul":
        a, b = xs
        if a.shape[1] != b.shape[0]:
            raise _shape_error(kind, a.shape, b.shape)
        return a @ b, {}

    if kind in ("add", "subtract", "multiply"):
        a, b = xs
        _check_broadcast(kind, a, b)
        if kind == "add":
            return a + b, {}
        if kind == "subtract":
            return a - b, {}
        return a * b, {}

    if kind == "relu":
        return np.maximum(xs[0], 0.0), {}
    if kind == "sigmoid":
        return expit(xs[0]), {}
    if kind == "tanh":
        return np.tanh(xs[0]), {}
    if kind == "exp":
        return np.exp(xs[0]), {}
    if kind == "log":
        a = xs[0]
        if np.any(a <= 0):
            raise DomainError(f"log: non-positive entry {a.min()!r} in input of shape {a.shape}")
        return np.log(a), {}

    if kind == "concat":
        rows = {x.shape[0] for x in xs}
        if len(rows) != 1:
            raise _shape_error(kind, *(x.shape for x in xs))
        return np.concatenate(xs, axis=1), {}

    if kind == "row_l2_squared":
        a = xs[0]
        return (a * a).sum(axis=1, keepdims=True), {}
    if kind == "abs_sum":
        return np.abs(xs[0]).sum().reshape(1, 1), {}
    if kind == "row_abs_sum":
        return np.abs(xs[0]).sum(axis=1, keepdims=True), {}
    if kind == "row_mean":
        return xs[0].mean(axis=1, keepdims=True), {}
    if kind == "row_sum":
        return xs[0].sum(axis=1, keepdims=True), {}
    if kind == "sum":
        return xs[0].sum().reshape(1, 1), {}
    if kind == "scale":
        return xs[0] * float(attrs["factor"]), {}

    if kind == "cosine_rows":
        a, b = xs
        if a.shape[1] != b.shape[1]:
            raise _shape_error(kind, a.shape, b.shape)
        na, live_a = _row_norms(a)
        nb, live_b = _row_norms(b)
        a_hat = a / na
        b_hat = b / nb
        return a_hat @ b_hat.T, {
            "a_hat": a_hat,
            "b_hat": b_hat,
            "na": na,
            "nb": nb,
            "live_a": live_a,
            "live_b": live_b,
        }

    if kind == "clip":
        return np.clip(xs[0], attrs["low"], attrs["high"]), {}

    raise ContractError(f"unknown operation kind {kind!r}")


def _backward(node: Node, g: np.ndarray, xs: List[np.ndarray]) -> List[np.ndarray]:
    kind = node.kind
    out = node.value

    if kind == "matmul":
        a, b = xs
        return [g @ b.T, a.T @ g]
    if kind == "add":
        return [g, _reduce_to(g, xs[1].shape)]
    if kind == "subtract":
        return [g, -_reduce_to(g, xs[1].shape)]
    if kind == "multiply":
        a, b = xs
        return [g * b, _reduce_to(g * a, b.shape)]
    if kind == "relu":
        return [g * (xs[0] > 0)]
    if kind == "sigmoid":
        return [g * out * (1.0 - out)]
    if kind == "tanh":
        return [g * (1.0 - out * out)]
    if kind == "exp":
        return [g * out]
    if kind == "log":
        return [g / xs[0]]
    if kind == "concat":
        grads, start = [], 0
        for x in xs:
            width = x.shape[1]
            grads.append(g[:, start:start + width])
            start += width
        return grads
    if kind == "row_l2_squared":
        return [2.0 * xs[0] * g]
    if kind in ("abs_sum", "row_abs_sum"):
        return [np.sign(xs[0]) * g]
    if kind == "row_mean":
        return [np.broadcast_to(g / xs[0].shape[1], xs[0].shape)]
    if kind == "row_sum":
        return [np.broadcast_to(g, xs[0].shape)]
    if kind == "sum":
        return [np.full(xs[0].shape, g[0, 0])]
    if kind == "scale":
        return [g * float(node.attrs["factor"])]
    if kind == "cosine_rows":
        c = node.cache
        a_hat, b_hat = c["a_hat"], c["b_hat"]
        ga_hat = g @ b_hat
        gb_hat = g.T @ a_hat
        # d(x/|x|) = (I - x̂x̂ᵀ)/|x|; rows under the norm floor use a constant norm
        ga = np.where(
            c["live_a"],
            (ga_hat - a_hat * (ga_hat * a_hat).sum(axis=1, keepdims=True)) / c["na"],
            ga_hat / c["na"],
        )
        gb = np.where(
            c["live_b"],
            (gb_hat - b_hat * (gb_hat * b_hat).sum(axis=1, keepdims=True)) / c["nb"],
            gb_hat / c["nb"],
        )
        return [ga, gb]
    if kind == "clip":
        a = xs[0]
        inside = (a >= node.attrs["low"]) & (a <= node.attrs["high"])
        return [g * inside]

    raise ContractError(f"no backward rule for {kind!r}")


# ---------- PUBLIC API ----------


def forward_primitive(tape: Tape, kind: str, inputs: Sequence[Var], **attrs: Any) -> Var:
    """
    Apply one primitive and record it on the tape.

    Raises DimensionError on non-conforming shapes and DomainError for log
    of a non-positive entry.
    """
    if kind not in KINDS:
        raise ContractError(f"unknown operation kind {kind!r}; expected one of {KINDS}")
    for var in inputs:
        if var.tape is not tape:
            raise ContractError(f"{kind}: input {var!r} belongs to another tape")
    xs = [tape.nodes[v.id].value for v in inputs]
    value, cache = _forward(kind, xs, attrs)
    value = np.asarray(value, dtype=np.float64)
    value.setflags(write=False)
    return tape._push(Node(kind, tuple(v.id for v in inputs), value, cache, dict(attrs)))


def backward(tape: Tape, output: Var) -> Dict[str, np.ndarray]:
    """
    Reverse accumulation from a 1×1 output. Returns leaf name -> gradient;
    leaves not on the output's path get zero matrices.
    """
    if output.tape is not tape:
        raise ContractError("backward: output node belongs to another tape")
    out_node = tape.nodes[output.id]
    if out_node.value.shape != (1, 1):
        raise ContractError(f"backward: output must be 1x1, got {out_node.value.shape}")

    # only nodes downstream of a leaf need a gradient
    needs = [False] * (output.id + 1)
    for node_id in range(output.id + 1):
        node = tape.nodes[node_id]
        needs[node_id] = node.leaf_name is not None or any(needs[i] for i in node.inputs)

    grads: List[Optional[np.ndarray]] = [None] * (output.id + 1)
    grads[output.id] = np.ones((1, 1))

    for node_id in range(output.id, -1, -1):
        g = grads[node_id]
        node = tape.nodes[node_id]
        if g is None or not node.inputs or not needs[node_id]:
            continue
        xs = [tape.nodes[i].value for i in node.inputs]
        for input_id, gi in zip(node.inputs, _backward(node, g, xs)):
            if not needs[input_id]:
                continue
            if grads[input_id] is None:
                grads[input_id] = np.array(gi, dtype=np.float64)
            else:
                grads[input_id] = grads[input_id] + gi

    result: Dict[str, np.ndarray] = {}
    for name, leaf_id in tape.leaves.items():
        g = grads[leaf_id] if leaf_id < len(grads) else None
        result[name] = g if g is not None else np.zeros_like(tape.nodes[leaf_id].value)
    return result


# ---------- SHORTHANDS ----------


def matmul(a: Var, b: Var) -> Var:
    return forward_primitive(a.tape, "matmul", [a, b])


def add(a: Var, b: Var) -> Var:
    return forward_primitive(a.tape, "add", [a, b])


def subtract(a: Var, b: Var) -> Var:
    return forward_primitive(a.tape, "subtract", [a, b])


def multiply(a: Var, b: Var) -> Var:
    return forward_primitive(a.tape, "multiply", [a, b])


def scale(a: Var, factor: float) -> Var:
    return forward_primitive(a.tape, "scale", [a], factor=factor)


def concat(parts: Sequence[Var]) -> Var:
    return forward_primitive(parts[0].tape, "concat", list(parts))


def total(a: Var) -> Var:
    return forward_primitive(a.tape, "sum", [a])


def unary(kind: str, a: Var) -> Var:
    return forward_primitive(a.tape, kind, [a])


def clip(a: Var, low: float, high: float) -> Var:
    return forward_primitive(a.tape, "clip", [a], low=low, high=high)


def safe_log(a: Var, floor: float = 1e-12, ceiling: float = np.inf) -> Var:
    """log(max(a, floor)); losses clamp here, the log primitive itself stays strict."""
    return unary("log", clip(a, floor, ceiling))


# ---------- GRADIENT CHECK ----------


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    entry_errors: Dict[str, np.ndarray]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


ScalarFn = Callable[[Tape, Dict[str, Var]], Var]


def finite_difference_check(
    f: ScalarFn,
    params: Union[Mapping[str, Any], Sequence[Any]],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-2,
) -> GradCheckReport:
    """
    Compare backward() against central differences (f(p+h) - f(p-h)) / 2h.

    f builds a 1×1 result on the tape it is given from the leaf vars it
    receives. Errors are |analytic - numeric| / max(|analytic|, |numeric|, floor),
    so entries with near-zero gradients are judged on absolute error.
    """
    if step <= 0:
        raise ContractError(f"finite_difference_check: step must be > 0, got {step}")
    if isinstance(params, Mapping):
        values = {name: _as_matrix(v).copy() for name, v in params.items()}
    else:
        values = {f"p{i}": _as_matrix(v).copy() for i, v in enumerate(params)}

    def evaluate(current: Dict[str, np.ndarray]) -> Tuple[float, Tape, Var]:
        tape = Tape()
        leaves = {name: tape.leaf(name, value) for name, value in current.items()}
        out = f(tape, leaves)
        return float(out.value[0, 0]), tape, out

    _, tape, out = evaluate(values)
    analytic = backward(tape, out)

    max_err: Dict[str, float] = {}
    entry_err: Dict[str, np.ndarray] = {}
    for name, value in values.items():
        errors = np.zeros_like(value)
        for idx in np.ndindex(*value.shape):
            plus = {k: v.copy() for k, v in values.items()}
            minus = {k: v.copy() for k, v in values.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            numeric = (evaluate(plus)[0] - evaluate(minus)[0]) / (2.0 * step)
            exact = analytic[name][idx]
            errors[idx] = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        entry_err[name] = errors
        max_err[name] = float(errors.max()) if errors.size else 0.0

    return GradCheckReport(max_rel_error=max_err, entry_errors=entry_err, tolerance=tolerance)
