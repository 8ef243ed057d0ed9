"""Reverse-mode automatic differentiation over float64 arrays.

A ``Tape`` is an append-only list of primitive nodes; forward values are
computed eagerly at node creation. The backward pass (``Tape.gradient``)
emits ordinary nodes onto the same tape instead of accumulating into
buffers, so a gradient is itself a differentiable expression and
``gradient`` can be applied to functions of earlier gradients (nesting
depth 3+ is exercised by the tests). This is what lets the constraint
penalty differentiate through the meta-gradient.

Finiteness is enforced at extraction points (``assert_finite``) rather
than per node: on failure the tape is scanned so the error names the first
node that produced a non-finite value.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .errors import NumericError, UsageError


def _as_f64(value):
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Node:
    """One taped value. Create through Tape methods, never directly."""

    __slots__ = ("tape", "idx", "op", "inputs", "value", "requires_grad", "meta")

    def __init__(self, tape, idx, op, inputs, value, requires_grad, meta=None):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad
        self.meta = meta

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(#{self.idx} {self.op} shape={self.value.shape})"

    # Operator sugar; scalars go through cheap `scale`/const nodes.
    def __add__(self, other):
        other = self.tape.as_node(other)
        return self.tape.add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return self.tape.neg(self)

    def __sub__(self, other):
        other = self.tape.as_node(other)
        return self.tape.add(self, self.tape.neg(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.mul(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


class Tape:
    """Append-only computation tape; single-threaded by construction."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    # -- node construction ------------------------------------------------

    def _append(self, op, inputs, value, requires_grad, meta=None):
        node = Node(self, len(self.nodes), op, inputs, value, requires_grad, meta)
        self.nodes.append(node)
        return node

    def assert_finite(self, node: Node) -> Node:
        """Raise NumericError naming the first offending node if `node` is
        non-finite anywhere."""
        if backend.all_finite(node.value):
            return node
        for candidate in self.nodes:
            if candidate.idx > node.idx:
                break
            if not backend.all_finite(candidate.value):
                raise NumericError(f"non-finite value in node #{candidate.idx} ({candidate.op})")
        raise NumericError(f"non-finite value in node #{node.idx} ({node.op})")

    def _check(self, *nodes):
        for n in nodes:
            if not isinstance(n, Node):
                raise UsageError(f"expected a tape node, got {type(n).__name__}")
            if n.tape is not self:
                raise UsageError("node belongs to a different tape")
        return nodes

    def as_node(self, x):
        return x if isinstance(x, Node) else self.const(x)

    def leaf(self, value) -> Node:
        """Register a differentiable input (parameter block)."""
        return self._append("leaf", (), _as_f64(value), True)

    def const(self, value) -> Node:
        """Register a non-differentiable input (data, coefficients)."""
        return self._append("const", (), _as_f64(value), False)

    def stop_gradient(self, a: Node) -> Node:
        (a,) = self._check(a)
        return self._append("stopgrad", (a,), a.value, False)

    def add(self, a, b):
        a, b = self._check(a, b)
        return self._append("add", (a, b), a.value + b.value, a.requires_grad or b.requires_grad)

    def add_n(self, terms):
        terms = tuple(self._check(*terms))
        if len(terms) == 1:
            return terms[0]
        acc = terms[0].value + terms[1].value
        for t in terms[2:]:
            acc += t.value
        return self._append("add_n", terms, acc, any(t.requires_grad for t in terms))

    def neg(self, a):
        (a,) = self._check(a)
        return self._append("neg", (a,), -a.value, a.requires_grad)

    def mul(self, a, b):
        a, b = self._check(a, b)
        return self._append("mul", (a, b), a.value * b.value, a.requires_grad or b.requires_grad)

    def scale(self, a, c: float):
        (a,) = self._check(a)
        return self._append("scale", (a,), a.value * c, a.requires_grad, meta=float(c))

    def axpy(self, a, c: float, b):
        """a + c*b in one node; the workhorse of unrolled parameter updates."""
        a, b = self._check(a, b)
        if a.value.shape != b.value.shape:
            raise UsageError(f"axpy shape mismatch: {a.value.shape} vs {b.value.shape}")
        return self._append(
            "axpy", (a, b), backend.axpy(a.value, c, b.value), a.requires_grad or b.requires_grad, meta=float(c)
        )

    def matmul(self, a, b):
        a, b = self._check(a, b)
        if a.value.ndim != 2 or b.value.ndim != 2:
            raise UsageError("matmul expects 2-D operands")
        return self._append("matmul", (a, b), a.value @ b.value, a.requires_grad or b.requires_grad)

    def transpose(self, a):
        (a,) = self._check(a)
        return self._append("transpose", (a,), a.value.T, a.requires_grad)

    def relu(self, a):
        (a,) = self._check(a)
        return self._append("relu", (a,), backend.relu(a.value), a.requires_grad)

    def abs(self, a):
        (a,) = self._check(a)
        return self._append("abs", (a,), np.abs(a.value), a.requires_grad)

    def exp(self, a):
        (a,) = self._check(a)
        return self._append("exp", (a,), np.exp(a.value), a.requires_grad)

    def log(self, a):
        (a,) = self._check(a)
        return self._append("log", (a,), np.log(a.value), a.requires_grad)

    def recip(self, a):
        (a,) = self._check(a)
        return self._append("recip", (a,), 1.0 / a.value, a.requires_grad)

    def sum(self, a, axis=None, keepdims=False):
        (a,) = self._check(a)
        val = np.sum(a.value, axis=axis, keepdims=keepdims)
        return self._append("sum", (a,), val, a.requires_grad, meta=(axis, keepdims))

    def reshape(self, a, shape):
        (a,) = self._check(a)
        return self._append("reshape", (a,), a.value.reshape(shape), a.requires_grad, meta=tuple(shape))

    def broadcast(self, a, shape):
        (a,) = self._check(a)
        return self._append("broadcast", (a,), np.broadcast_to(a.value, shape), a.requires_grad, meta=tuple(shape))

    def slice1d(self, a, start: int, stop: int):
        (a,) = self._check(a)
        if a.value.ndim != 1:
            raise UsageError("slice1d expects a 1-D node")
        return self._append("slice1d", (a,), a.value[start:stop], a.requires_grad, meta=(start, stop))

    def rows(self, a, start: int, stop: int):
        """Contiguous row range of a 2-D node."""
        (a,) = self._check(a)
        if a.value.ndim != 2:
            raise UsageError("rows expects a 2-D node")
        return self._append("rows", (a,), a.value[start:stop], a.requires_grad, meta=(start, stop))

    def embed_rows(self, a, start: int, stop: int, n_rows: int):
        (a,) = self._check(a)
        out = np.zeros((n_rows, a.value.shape[1]))
        out[start:stop] = a.value
        return self._append("embed_rows", (a,), out, a.requires_grad, meta=(start, stop, n_rows))

    def embed1d(self, a, start: int, stop: int, length: int):
        (a,) = self._check(a)
        out = np.zeros(length)
        out[start:stop] = a.value
        return self._append("embed1d", (a,), out, a.requires_grad, meta=(start, stop, length))

    def concat1d(self, parts):
        parts = tuple(self._check(*parts))
        for p in parts:
            if p.value.ndim != 1:
                raise UsageError("concat1d expects 1-D nodes")
        val = np.concatenate([p.value for p in parts])
        return self._append("concat1d", parts, val, any(p.requires_grad for p in parts))

    # -- backward ----------------------------------------------------------

    def _unbroadcast(self, g: Node, shape: tuple) -> Node:
        """Reduce g back to `shape` after numpy broadcasting."""
        if g.value.shape == shape:
            return g
        while g.value.ndim > len(shape):
            g = self.sum(g, axis=0)
        for ax, dim in enumerate(shape):
            if dim == 1 and g.value.shape[ax] != 1:
                g = self.sum(g, axis=ax, keepdims=True)
        if g.value.shape != shape:
            g = self.reshape(g, shape)
        return g

    def _expand(self, g: Node, shape: tuple, axis, keepdims) -> Node:
        """Inverse of sum: stretch g back over the summed axes."""
        if axis is None:
            if shape == ():
                return g
            return self.broadcast(self.reshape(g, (1,) * len(shape)), shape)
        if not keepdims:
            kd = list(g.value.shape)
            kd.insert(axis, 1)
            g = self.reshape(g, tuple(kd))
        return self.broadcast(g, shape)

    def _vjp(self, node: Node, g: Node, needed):
        """Yield (input, contribution) pairs; contributions are taped nodes.

        `needed` marks nodes from which a wrt node is reachable; inputs
        outside that set receive no contribution (their subgraphs are dead
        for this gradient).
        """
        op = node.op
        ins = node.inputs

        def want(a):
            return a.requires_grad and needed[a.idx]

        if op == "add":
            for a in ins:
                if want(a):
                    yield a, self._unbroadcast(g, a.value.shape)
        elif op == "add_n":
            for a in ins:
                if want(a):
                    yield a, g
        elif op == "neg":
            if want(ins[0]):
                yield ins[0], self.neg(g)
        elif op == "mul":
            a, b = ins
            if want(a):
                yield a, self._unbroadcast(self.mul(g, b), a.value.shape)
            if want(b):
                yield b, self._unbroadcast(self.mul(g, a), b.value.shape)
        elif op == "scale":
            if want(ins[0]):
                yield ins[0], self.scale(g, node.meta)
        elif op == "axpy":
            a, b = ins
            if want(a):
                yield a, g
            if want(b):
                yield b, self.scale(g, node.meta)
        elif op == "matmul":
            a, b = ins
            if want(a):
                yield a, self.matmul(g, self.transpose(b))
            if want(b):
                yield b, self.matmul(self.transpose(a), g)
        elif op == "transpose":
            if want(ins[0]):
                yield ins[0], self.transpose(g)
        elif op == "relu":
            # derivative is piecewise constant: a detached 0/1 mask is exact a.e.
            if want(ins[0]):
                yield ins[0], self.mul(g, self.const(backend.relu_mask(ins[0].value)))
        elif op == "abs":
            # sign(0) = 0: the subgradient at zero is taken as zero
            if want(ins[0]):
                yield ins[0], self.mul(g, self.const(backend.sign(ins[0].value)))
        elif op == "exp":
            if want(ins[0]):
                yield ins[0], self.mul(g, node)
        elif op == "log":
            if want(ins[0]):
                yield ins[0], self.mul(g, self.recip(ins[0]))
        elif op == "recip":
            if want(ins[0]):
                yield ins[0], self.neg(self.mul(g, self.mul(node, node)))
        elif op == "sum":
            if want(ins[0]):
                axis, keepdims = node.meta
                yield ins[0], self._expand(g, ins[0].value.shape, axis, keepdims)
        elif op == "broadcast":
            if want(ins[0]):
                yield ins[0], self._unbroadcast(g, ins[0].value.shape)
        elif op == "reshape":
            if want(ins[0]):
                yield ins[0], self.reshape(g, ins[0].value.shape)
        elif op == "slice1d":
            if want(ins[0]):
                start, stop = node.meta
                yield ins[0], self.embed1d(g, start, stop, ins[0].value.size)
        elif op == "embed1d":
            if want(ins[0]):
                start, stop, _ = node.meta
                yield ins[0], self.slice1d(g, start, stop)
        elif op == "rows":
            if want(ins[0]):
                start, stop = node.meta
                yield ins[0], self.embed_rows(g, start, stop, ins[0].value.shape[0])
        elif op == "embed_rows":
            if want(ins[0]):
                start, stop, _ = node.meta
                yield ins[0], self.rows(g, start, stop)
        elif op == "concat1d":
            offset = 0
            for a in ins:
                nxt = offset + a.value.size
                if want(a):
                    yield a, self.slice1d(g, offset, nxt)
                offset = nxt
        else:  # pragma: no cover - new primitive without a rule
            raise UsageError(f"no gradient rule for op {op!r}")

    def gradient(self, objective: Node, wrt):
        """Differentiate a scalar node with respect to leaf (or interior) nodes.

        Returns one gradient node per entry of `wrt` (a single node if `wrt`
        is a single node). The returned nodes live on this tape and can be
        differentiated again.
        """
        (objective,) = self._check(objective)
        if objective.value.shape != ():
            raise UsageError("objective must be a scalar node")
        single = isinstance(wrt, Node)
        wrt_list = [wrt] if single else list(wrt)
        self._check(*wrt_list)
        wrt_idx = {n.idx for n in wrt_list}

        # Only nodes from which some wrt node is reachable need adjoints;
        # without this, asking for head gradients would still backprop
        # through the (much larger) representation subgraph.
        top = objective.idx
        needed = bytearray(top + 1)
        for idx in wrt_idx:
            if idx <= top:
                needed[idx] = 1
        for idx in range(top + 1):
            node = self.nodes[idx]
            if not needed[idx] and node.requires_grad:
                for inp in node.inputs:
                    if needed[inp.idx]:
                        needed[idx] = 1
                        break

        contribs: dict[int, list[Node]] = {objective.idx: [self.const(1.0)]}
        found: dict[int, Node] = {}
        for idx in range(top, -1, -1):
            lst = contribs.pop(idx, None)
            if lst is None:
                continue
            node = self.nodes[idx]
            bar = lst[0] if len(lst) == 1 else self.add_n(lst)
            if idx in wrt_idx:
                found[idx] = bar
            if not node.inputs:
                continue
            for inp, contrib in self._vjp(node, bar, needed):
                contribs.setdefault(inp.idx, []).append(contrib)

        grads = []
        for n in wrt_list:
            got = found.get(n.idx)
            if got is None:
                got = self.const(np.zeros(n.value.shape))
            grads.append(got)
        return grads[0] if single else grads

    # -- replay -------------------------------------------------------------

    def replay(self) -> bool:
        """Re-execute every node's forward rule; True iff all values match bit-exact.

        Leaves and consts keep their stored values; everything else is
        recomputed from its inputs. Used to validate determinism of the
        recorded computation.
        """
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            ins = [values[i.idx] for i in node.inputs]
            val = _replay_forward(node, ins)
            if val.shape != node.value.shape or not np.array_equal(val, node.value, equal_nan=True):
                return False
            values[node.idx] = val
        return True


def _replay_forward(node: Node, ins):
    op = node.op
    if op in ("leaf", "const"):
        return node.value
    if op == "stopgrad":
        return ins[0]
    if op == "add":
        return ins[0] + ins[1]
    if op == "add_n":
        acc = ins[0] + ins[1]
        for v in ins[2:]:
            acc += v
        return acc
    if op == "neg":
        return -ins[0]
    if op == "mul":
        return ins[0] * ins[1]
    if op == "scale":
        return ins[0] * node.meta
    if op == "axpy":
        return backend.axpy(ins[0], node.meta, ins[1])
    if op == "matmul":
        return ins[0] @ ins[1]
    if op == "transpose":
        return ins[0].T
    if op == "relu":
        return backend.relu(ins[0])
    if op == "abs":
        return np.abs(ins[0])
    if op == "exp":
        return np.exp(ins[0])
    if op == "log":
        return np.log(ins[0])
    if op == "recip":
        return 1.0 / ins[0]
    if op == "sum":
        axis, keepdims = node.meta
        return np.sum(ins[0], axis=axis, keepdims=keepdims)
    if op == "reshape":
        return ins[0].reshape(node.meta)
    if op == "broadcast":
        return np.broadcast_to(ins[0], node.meta)
    if op == "slice1d":
        start, stop = node.meta
        return ins[0][start:stop]
    if op == "embed1d":
        start, stop, length = node.meta
        out = np.zeros(length)
        out[start:stop] = ins[0]
        return out
    if op == "rows":
        start, stop = node.meta
        return ins[0][start:stop]
    if op == "embed_rows":
        start, stop, n_rows = node.meta
        out = np.zeros((n_rows, ins[0].shape[1]))
        out[start:stop] = ins[0]
        return out
    if op == "concat1d":
        return np.concatenate(ins)
    raise UsageError(f"no replay rule for op {op!r}")


def finite_diff_grad(f, x0: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    Independent of the tape; used as the oracle the analytic gradients are
    tested against.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.empty_like(x0)
    flat = x0.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(xp.reshape(x0.shape)))
        fm = float(f(xm.reshape(x0.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation in finite differences at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
