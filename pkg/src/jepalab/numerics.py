"""Dense numeric substrate: shape-checked tensor ops, parameter stores, gradient checking.

PyTorch supplies storage and reverse-mode differentiation. This module pins the
op set the models are allowed to use and the error behaviour around it, and
provides a central-difference oracle that never touches autograd.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

LN_EPS = 1e-6


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        dims = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {dims}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf appears in a checked tensor."""


class BackwardError(RuntimeError):
    """Raised when a recorded forward pass is differentiated more than once."""


_CHECK_FINITE = True


@contextmanager
def finite_checks(enabled: bool):
    """Toggle :func:`check_finite`; vmapped traces cannot branch on tensor values."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def check_finite(x: Tensor, where: str) -> Tensor:
    if _CHECK_FINITE and not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{where}: non-finite values in tensor of shape {tuple(x.shape)}")
    return x


# ---------------------------------------------------------------------------
# core op set
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.dim() != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError("add_bias", x.shape, bias.shape)
    return x + bias


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with torch.nn weight layout (out, in)."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    if bias is not None and (bias.dim() != 1 or bias.shape[0] != weight.shape[0]):
        raise ShapeError("linear", weight.shape, bias.shape, detail="bias")
    return F.linear(x, weight, bias)


def layer_norm(
    x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS
) -> Tensor:
    d = x.shape[-1]
    for t in (weight, bias):
        if t is not None and tuple(t.shape) != (d,):
            raise ShapeError("layer_norm", x.shape, t.shape)
    return F.layer_norm(x, (d,), weight, bias, eps)


def softmax(x: Tensor) -> Tensor:
    return torch.softmax(x, dim=-1)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def residual_add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError("residual_add", x.shape, y.shape)
    return x + y


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, key_valid: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``q, k, v`` are ``(B, L, d)``; ``key_valid`` is an optional ``(B, L)`` bool
    mask, False marking padding that no query may attend to.
    """
    if q.shape != k.shape or k.shape != v.shape or q.dim() != 3:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    B, L, d = q.shape
    if d % heads:
        raise ShapeError("attention", q.shape, detail=f"dim not divisible by {heads} heads")
    hd = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(B, L, heads, hd).transpose(1, 2)

    mask = None
    if key_valid is not None:
        if tuple(key_valid.shape) != (B, L):
            raise ShapeError("attention", q.shape, key_valid.shape, detail="key mask")
        mask = key_valid[:, None, None, :]
    # written out rather than fused so that vmap (used by the gradient check) can batch it
    logits = torch.matmul(split(q), split(k).transpose(-2, -1)) * (1.0 / math.sqrt(hd))
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    out = torch.matmul(softmax(logits), split(v))
    return out.transpose(1, 2).reshape(B, L, d)


def avgpool1d(x: Tensor, kernel: int) -> Tensor:
    """Average pool along axis 0 with stride == kernel; a trailing remainder is dropped."""
    if kernel < 1:
        raise ShapeError("avgpool1d", x.shape, detail=f"kernel {kernel} < 1")
    if x.dim() < 1 or x.shape[0] == 0:
        raise ShapeError("avgpool1d", x.shape, detail="empty input")
    n = x.shape[0] // kernel
    return x[: n * kernel].reshape(n, kernel, *x.shape[1:]).mean(dim=1)


def avgpool2d(grid: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Average pool a ``(rows, cols, ...)`` grid; windows start at multiples of ``stride``.

    Returns ``(out_rows, out_cols, ...)`` with ``out = (n - kernel) // stride + 1``,
    which is ``n // kernel`` when ``stride == kernel``.
    """
    stride = kernel if stride is None else stride
    if grid.dim() < 2 or kernel < 1 or stride < 1:
        raise ShapeError("avgpool2d", grid.shape, detail=f"kernel={kernel} stride={stride}")
    rows, cols = grid.shape[:2]
    if rows < kernel or cols < kernel:
        raise ShapeError("avgpool2d", grid.shape, detail=f"grid smaller than kernel {kernel}")
    tail = grid.shape[2:]
    flat = grid.reshape(rows, cols, -1).permute(2, 0, 1).unsqueeze(0)
    pooled = F.avg_pool2d(flat, kernel_size=kernel, stride=stride)
    return pooled[0].permute(1, 2, 0).reshape(pooled.shape[2], pooled.shape[3], *tail)


def concat_seq(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the sequence axis (second to last)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_seq", detail="no inputs")
    tail = parts[0].shape[-1]
    lead = parts[0].shape[:-2]
    for p in parts:
        if p.shape[-1] != tail or p.shape[:-2] != lead:
            raise ShapeError("concat_seq", *(q.shape for q in parts))
    return torch.cat(parts, dim=-2)


def gather_rows(x: Tensor, index: Tensor | Sequence[int]) -> Tensor:
    idx = torch.as_tensor(index, dtype=torch.long)
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= x.shape[-2]):
        raise ShapeError("gather_rows", x.shape, idx.shape, detail="index out of range")
    return x.index_select(-2, idx)


def seq_mean(x: Tensor, valid: Tensor | None = None) -> Tensor:
    """Mean over the sequence axis, optionally restricted to ``valid`` rows."""
    if valid is None:
        return x.mean(dim=-2)
    if tuple(valid.shape) != tuple(x.shape[:-1]):
        raise ShapeError("seq_mean", x.shape, valid.shape)
    w = valid.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim=-2) / w.sum(dim=-2).clamp_min(1.0)


# ---------------------------------------------------------------------------
# parameters and gradients
# ---------------------------------------------------------------------------


class ParamStore(Mapping[str, Tensor]):
    """Named parameters in stable order, each with a gradient buffer of its own shape."""

    def __init__(self, params: Iterable[tuple[str, Tensor]]):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, p in params:
            if name in self._params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._params[name] = p

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls(module.named_parameters())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def grad(self, name: str) -> Tensor:
        p = self._params[name]
        return torch.zeros_like(p) if p.grad is None else p.grad

    def grads(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((n, self.grad(n)) for n in self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def numel(self) -> int:
        return sum(p.numel() for p in self._params.values())


def backward(loss: Tensor, store: ParamStore | None = None) -> None:
    """Differentiate a scalar loss once, filling ``.grad`` of every reachable leaf."""
    if loss.dim() != 0:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if getattr(loss, "_jepalab_consumed", False):
        raise BackwardError("backward called twice on the same recording")
    try:
        loss.backward()
    except RuntimeError as err:
        if "second time" in str(err):
            raise BackwardError("backward called twice on the same recording") from err
        raise
    loss._jepalab_consumed = True  # type: ignore[attr-defined]


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def _relative(a: Tensor, n: Tensor) -> float:
    num = float((a - n).abs().max()) if a.numel() else 0.0
    den = max(float(a.abs().max()) if a.numel() else 0.0, float(n.abs().max()) if n.numel() else 0.0, 1e-12)
    return num / den


def grad_check_report(
    model_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    mode64: bool = True,
    chunk: int = 1,
) -> dict[str, float]:
    """Per-tensor relative error between autograd and central differences.

    ``model_fn`` maps a name->tensor dict to a scalar. The error for one tensor
    is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``.
    With ``chunk > 1`` the perturbed evaluations are batched through
    ``torch.func.vmap``, so ``model_fn`` must be vmap-traceable.
    """
    dtype = torch.float64 if mode64 else torch.float32
    base = OrderedDict((k, v.detach().to(dtype).clone()) for k, v in params.items())

    leaves = OrderedDict((k, v.clone().requires_grad_(True)) for k, v in base.items())
    loss = model_fn(leaves)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    analytic = OrderedDict(
        (k, torch.zeros_like(v) if g is None else g.detach()) for (k, v), g in zip(leaves.items(), grads)
    )

    report: dict[str, float] = {}
    with torch.no_grad():
        for name, value in base.items():
            numeric = torch.empty_like(value).reshape(-1)
            n = value.numel()
            if chunk <= 1:
                flat = value.reshape(-1)
                for i in range(n):
                    orig = float(flat[i])
                    flat[i] = orig + eps
                    up = float(model_fn(base))
                    flat[i] = orig - eps
                    down = float(model_fn(base))
                    flat[i] = orig
                    numeric[i] = (up - down) / (2 * eps)
            else:
                numeric.copy_(_vmapped_differences(model_fn, base, name, eps, chunk))
            report[name] = _relative(analytic[name].reshape(-1), numeric)
    return report


def _vmapped_differences(model_fn, base, name, eps, chunk) -> Tensor:
    value = base[name]
    n = value.numel()
    out = torch.empty(n, dtype=value.dtype)
    others = {k: v for k, v in base.items() if k != name}

    def f(p: Tensor) -> Tensor:
        return model_fn({**others, name: p})

    batched = torch.func.vmap(f)
    for start in range(0, n, chunk):
        idx = torch.arange(start, min(start + chunk, n))
        delta = torch.zeros(len(idx), n, dtype=value.dtype)
        delta[torch.arange(len(idx)), idx] = eps
        up = value.reshape(1, -1) + delta
        down = value.reshape(1, -1) - delta
        fu = batched(up.reshape(len(idx), *value.shape))
        fd = batched(down.reshape(len(idx), *value.shape))
        out[idx] = (fu - fd) / (2 * eps)
    return out


def grad_check(
    model_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    mode64: bool = True,
    chunk: int = 1,
) -> float:
    """Maximum relative error over all parameter tensors; see :func:`grad_check_report`."""
    report = grad_check_report(model_fn, params, eps=eps, mode64=mode64, chunk=chunk)
    return max(report.values(), default=0.0)


def set_threads(n: int | None) -> None:
    if n is not None and n > 0:
        torch.set_num_threads(int(n))

