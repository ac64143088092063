"""Reverse-mode differentiation over a tape recorded during the forward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    # backward(grad_out, needs) -> one gradient (or None) per input
    backward: Callable | None = None
    param: str | None = None
    requires_grad: bool = False

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Append-only record of a forward computation.

    Node ids increase toward the outputs, so reverse id order is a valid
    topological order for backpropagation.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    @property
    def ops(self) -> list[Node]:
        return [n for n in self.nodes if n.op != "leaf"]

    def leaf(self, value, param: str | None = None) -> Node:
        node = Node(len(self.nodes), "leaf", (), np.asarray(value), param=param,
                    requires_grad=param is not None)
        self.nodes.append(node)
        return node

    def record(self, op: str, inputs: Sequence[Node], value, backward) -> Node:
        node = Node(
            len(self.nodes),
            op,
            tuple(n.id for n in inputs),
            value,
            backward,
            requires_grad=any(n.requires_grad for n in inputs),
        )
        self.nodes.append(node)
        return node


def backward(tape: Tape, loss_seed: float = 1.0, output: Node | None = None) -> dict[str, np.ndarray]:
    """Gradients of the scalar terminal node with respect to every parameter leaf.

    Leaves without a parameter name (inputs, labels) are skipped.  A parameter
    used by several nodes receives the sum of its contributions.
    """
    if not tape.nodes:
        raise ContractError("cannot differentiate an empty tape")
    terminal = output if output is not None else tape.nodes[-1]
    if terminal.value.size != 1:
        raise ContractError(
            f"backward needs a scalar terminal node, got shape {terminal.value.shape}"
        )
    nodes = tape.nodes
    grads: dict[int, np.ndarray] = {
        terminal.id: np.full(terminal.value.shape, loss_seed, dtype=terminal.value.dtype)
    }
    result: dict[str, np.ndarray] = {}
    for node in reversed(nodes[: terminal.id + 1]):
        g = grads.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        if node.param is not None:
            prev = result.get(node.param)
            result[node.param] = g if prev is None else prev + g
            continue
        if node.backward is None:
            continue
        needs = tuple(nodes[i].requires_grad for i in node.inputs)
        for i, gi in zip(node.inputs, node.backward(g, needs)):
            if gi is None or not nodes[i].requires_grad:
                continue
            prev = grads.get(i)
            grads[i] = gi if prev is None else prev + gi
    return result


def _loss_value(graph, x, params, labels, weights):
    from .graph import forward_loss

    loss, _ = forward_loss(graph, x, params, labels=labels, weights=weights)
    return float(loss.value.reshape(()))


def grad_check(graph, x, params, h: float = 1e-3, tol: float | None = None, labels=None,
               samples: int = 12, seed: int = 0):
    """Largest relative gap between analytic and central-difference gradients.

    Runs in 64-bit.  With `labels` the loss is softmax cross-entropy on the
    graph logits, otherwise a fixed random linear functional of the output.
    Up to `samples` coordinates per parameter are probed; the error for each
    is ``|analytic - numeric| / max(1, |analytic|)``.  When `tol` is given
    the result is also compared against it and returned as ``(err, ok)``.
    """
    from .graph import forward, forward_loss

    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    weights = None
    if labels is None:
        out, _ = forward(graph, x, params)
        weights = rng.standard_normal(out.shape)

    loss, tape = forward_loss(graph, x, params, labels=labels, weights=weights)
    analytic = backward(tape, output=loss)

    worst = 0.0
    for name in sorted(params):
        p = params[name]
        g = analytic.get(name, np.zeros_like(p))
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            up = _loss_value(graph, x, params, labels, weights)
            flat[idx] = orig - h
            down = _loss_value(graph, x, params, labels, weights)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            a = g.reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    if tol is not None:
        return worst, worst <= tol
    return worst
