"""
Tensor substrate helpers: precision mode, seeding, checked backward pass,
finite-difference gradient checking and the flat checkpoint container.
"""

import hashlib
import json
import random
from collections import OrderedDict
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from mtlswin.config import settings
from mtlswin.errors import CheckpointError, NonDeterministicError, NonFiniteError, NumericsError

NamedParams = Union[nn.Module, Iterable[Tuple[str, nn.Parameter]]]

_DTYPE_CODES = {
    np.dtype("float32"): "f32",
    np.dtype("float64"): "f64",
    np.dtype("int64"): "i64",
    np.dtype("int32"): "i32",
    np.dtype("uint8"): "u8",
    np.dtype("bool"): "b1",
}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


@contextmanager
def precision(dtype: torch.dtype = torch.float64) -> Iterator[None]:
    """Temporarily switch torch's default floating dtype (64-bit for verification)"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def seed_everything(seed: int) -> torch.Generator:
    """Seed every RNG used by the package and return a dedicated torch generator"""
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def ensure_finite(tensor: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"Non-finite values in {what}")
    return tensor


def _named(params: NamedParams) -> List[Tuple[str, nn.Parameter]]:
    if isinstance(params, nn.Module):
        return list(params.named_parameters())
    return list(params)


def forward_backward(graph_root: torch.Tensor, params: NamedParams) -> Dict[str, torch.Tensor]:
    """
    Backpropagate a scalar loss and return dL/dθ for every trainable parameter.

    Frozen parameters (requires_grad=False) receive no gradient. Unreached
    trainable parameters report zeros. Existing ``.grad`` values are cleared
    first, so gradients never accumulate across calls.
    """
    if graph_root.numel() != 1:
        raise NumericsError(f"Backward root must be scalar, got shape {tuple(graph_root.shape)}")
    ensure_finite(graph_root.detach(), "loss")
    named = _named(params)
    for _, param in named:
        param.grad = None
    graph_root.reshape(()).backward()

    grads = {}
    for name, param in named:
        if not param.requires_grad:
            continue
        grad = param.grad if param.grad is not None else torch.zeros_like(param)
        if not torch.isfinite(grad).all():
            raise NonFiniteError(f"NaN/Inf gradient for parameter '{name}'")
        grads[name] = grad
    return grads


def gradcheck(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-6) -> float:
    """
    Compare autograd against central differences.

    Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
    """
    if x.dtype != torch.float64:
        raise NumericsError("gradcheck needs 64-bit inputs")
    if not 1e-6 <= eps <= 1e-3:
        raise NumericsError(f"eps {eps} outside [1e-6, 1e-3]")

    base = x.detach().clone()
    with torch.no_grad():
        first, second = f(base.clone()), f(base.clone())
    if not torch.equal(first, second):
        raise NonDeterministicError("f returned different values for identical inputs")

    point = base.clone().requires_grad_(True)
    out = f(point)
    if out.numel() != 1:
        raise NumericsError("gradcheck needs a scalar-valued f")
    (analytic,) = torch.autograd.grad(out.reshape(()), point, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(base)

    numeric = torch.zeros_like(base)
    flat = base.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = f(base).item()
            flat[i] = orig - eps
            minus = f(base).item()
            flat[i] = orig
            numeric.view(-1)[i] = (plus - minus) / (2 * eps)

    error = (analytic - numeric).abs() / analytic.abs().clamp(min=1.0)
    return float(error.max().item()) if error.numel() else 0.0


def _projection(shape: torch.Size, dtype: torch.dtype, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(tuple(shape), generator=g, dtype=dtype)


def _weighted(out: torch.Tensor, seed: int = 7) -> torch.Tensor:
    return (out * _projection(out.shape, out.dtype, seed)).sum()


def primitive_suite() -> List[Tuple[str, Callable[[torch.Tensor], torch.Tensor], List[Tuple[int, ...]]]]:
    """Differentiable primitives paired with the input shapes they are checked on"""
    from mtlswin import swin_blocks

    def matmul(x):
        w = _projection((x.shape[-1], 3), x.dtype, 11)
        return _weighted(x @ w)

    def layer_norm(x):
        c = x.shape[-1]
        return _weighted(F.layer_norm(x, (c,), _projection((c,), x.dtype, 3), _projection((c,), x.dtype, 4)))

    def reshape_permute(x):
        return _weighted(x.reshape(x.shape[0], -1, x.shape[-1]).permute(2, 0, 1).contiguous())

    def window_roundtrip(x):
        windows = swin_blocks.window_partition(torch.roll(x, (-1, -1), (1, 2)), 2)
        return _weighted(windows * windows)

    return [
        ("matmul", matmul, [(2, 3), (4, 5), (2, 3, 4)]),
        ("softmax", lambda x: _weighted(torch.softmax(x, dim=-1)), [(5,), (3, 4), (2, 3, 6)]),
        ("layer_norm", layer_norm, [(4,), (3, 5), (2, 3, 8)]),
        ("gelu", lambda x: _weighted(F.gelu(x)), [(6,), (3, 4), (2, 2, 3)]),
        ("reshape_permute", reshape_permute, [(2, 3, 4), (1, 4, 2), (3, 2, 5)]),
        ("concat", lambda x: _weighted(torch.cat([x, x * x], dim=-1)), [(3,), (2, 4), (2, 3, 2)]),
        ("mean", lambda x: _weighted(x.mean(dim=-1)) + x.mean() ** 2, [(4,), (3, 5), (2, 3, 4)]),
        ("window_partition_shift", window_roundtrip, [(1, 4, 4, 2), (2, 4, 6, 3), (1, 6, 6, 1)]),
        ("patch_merge_gather", lambda x: _weighted(swin_blocks.merge_gather(x)), [(1, 2, 2, 3), (2, 4, 4, 2), (1, 4, 6, 1)]),
        ("patch_expand_rearrange", lambda x: _weighted(swin_blocks.expand_rearrange(x, 2)), [(1, 1, 1, 8), (2, 2, 3, 4), (1, 3, 3, 12)]),
    ]


def run_gradcheck_suite(seed: int = 0, eps: float = 1e-6, tol: float = 1e-5) -> List[Dict[str, Any]]:
    """Gradcheck every primitive on each of its shapes at 64-bit"""
    report = []
    generator = torch.Generator().manual_seed(seed)
    for name, fn, shapes in primitive_suite():
        for shape in shapes:
            x = torch.randn(shape, generator=generator, dtype=torch.float64)
            error = gradcheck(fn, x, eps)
            report.append({"primitive": name, "shape": "x".join(map(str, shape)), "error": error, "passed": error < tol})
    failed = [r for r in report if not r["passed"]]
    if failed:
        logger.error(f"Gradcheck failed for {len(failed)} primitive/shape pairs")
    else:
        logger.success(f"Gradcheck passed for {len(report)} primitive/shape pairs")
    return report


def _encode(tensor: torch.Tensor) -> Tuple[str, str, bytes]:
    arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
    if arr.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"Unsupported dtype {arr.dtype}")
    code = _DTYPE_CODES[arr.dtype]
    shape = ",".join(str(d) for d in arr.shape) if arr.ndim else "-"
    return code, shape, arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, torch.Tensor], meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write tensors as header + (name, dtype, shape, little-endian bytes) records"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{settings.CHECKPOINT_HEADER}\n".encode())
        if meta is not None:
            blob = json.dumps(meta, sort_keys=True).encode()
            fh.write(f"meta {len(blob)}\n".encode())
            fh.write(blob)
        for name, tensor in tensors.items():
            if " " in name:
                raise CheckpointError(f"Tensor name may not contain spaces: {name!r}")
            code, shape, raw = _encode(tensor)
            fh.write(f"tensor {name} {code} {shape} {len(raw)}\n".encode())
            fh.write(raw)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple["OrderedDict[str, torch.Tensor]", Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    meta: Dict[str, Any] = {}
    with open(path, "rb") as fh:
        header = fh.readline().decode(errors="replace").rstrip("\n")
        if header != settings.CHECKPOINT_HEADER:
            raise CheckpointError(f"Bad checkpoint header: {header!r}")
        while True:
            line = fh.readline()
            if not line:
                break
            fields = line.decode(errors="replace").split()
            if not fields:
                raise CheckpointError(f"Blank record line in {path}")
            try:
                if fields[0] == "meta" and len(fields) == 2:
                    meta = json.loads(fh.read(int(fields[1])).decode())
                    continue
                if fields[0] != "tensor" or len(fields) != 5:
                    raise CheckpointError(f"Malformed record: {line!r}")
                _, name, code, shape, nbytes = fields
                if code not in _CODE_DTYPES:
                    raise CheckpointError(f"Unknown dtype code {code}")
                size = int(nbytes)
                raw = fh.read(size)
                if len(raw) != size:
                    raise CheckpointError(f"Truncated tensor '{name}'")
                dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
                dtype = _CODE_DTYPES[code]
                arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
            except (ValueError, UnicodeDecodeError) as e:
                raise CheckpointError(f"Malformed record {line!r} in {path}: {e}") from e
            tensors[name] = torch.from_numpy(arr.copy())
    return tensors, meta


def state_hash(source: Union[nn.Module, Mapping[str, torch.Tensor]]) -> str:
    """sha256 over names and raw bytes; identical iff the state is bit-identical"""
    state = source.state_dict() if isinstance(source, nn.Module) else source
    digest = hashlib.sha256()
    for name in sorted(state):
        code, shape, raw = _encode(state[name])
        digest.update(f"{name}|{code}|{shape}|".encode())
        digest.update(raw)
    return digest.hexdigest()
