"""Finite-difference verification of analytic gradients.

Each registered op builds a small problem: named float64 tensors packed into
one flat vector, a scalar objective (a fixed random projection of the op
output), and an analytic gradient. check_op compares that gradient against
central differences coordinate by coordinate.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch.func import functional_call

from .dpo import PreferencePair, SequenceScore, dpo_loss, dpo_loss_grad
from .encoder import FrameEncoder, TextEmbedding
from .tokenizer import (
    AggregatorLayer,
    DynamicMultiScalePool,
    RefinerLayer,
    RelPosSelfAttention,
    SoftTokenSelector,
)

ERROR_FLOOR = 1e-7
DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


def central_difference(f: Callable[[np.ndarray], float], x0: np.ndarray,
                       step: float = DEFAULT_STEP) -> np.ndarray:
    """Two-sided difference quotient of f at x0, one coordinate at a time."""
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        up = x0.copy()
        up.flat[i] += step
        down = x0.copy()
        down.flat[i] -= step
        f_up = f(up)
        f_down = f(down)
        if not (math.isfinite(f_up) and math.isfinite(f_down)):
            raise ValueError(f"non-finite evaluation while perturbing coordinate {i}")
        grad.flat[i] = (f_up - f_down) / (2.0 * step)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ERROR_FLOOR)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    op: str
    seed: int
    step: float
    tolerance: float
    max_errors: dict[str, float]
    passed: bool

    @property
    def failing(self) -> list[str]:
        return [name for name, err in self.max_errors.items() if err > self.tolerance]

    @property
    def worst(self) -> float:
        return max(self.max_errors.values())

    def summary(self) -> str:
        if self.passed:
            return f"{self.op}: pass (max rel err {self.worst:.3e})"
        bad = ", ".join(f"{n} ({self.max_errors[n]:.3e})" for n in self.failing)
        return f"{self.op}: FAIL at {bad}"


class TorchProblem:
    """Differentiable op with inputs and parameters flattened into one vector."""

    def __init__(self, run: Callable[[dict], torch.Tensor],
                 tensors: "OrderedDict[str, torch.Tensor]", seed: int):
        self.run = run
        self.shapes = OrderedDict((n, tuple(t.shape)) for n, t in tensors.items())
        self.slices = OrderedDict()
        offset = 0
        flats = []
        for name, tensor in tensors.items():
            size = tensor.numel()
            self.slices[name] = slice(offset, offset + size)
            flats.append(tensor.detach().to(torch.float64).reshape(-1).numpy())
            offset += size
        self.x0 = np.concatenate(flats) if flats else np.zeros(0)
        with torch.no_grad():
            out = self.run(self._unpack(self.x0, requires_grad=False))
        gen = torch.Generator().manual_seed(seed * 7919 + 13)
        self.projection = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def _unpack(self, x: np.ndarray, requires_grad: bool) -> dict:
        tensors = {}
        for name, sl in self.slices.items():
            t = torch.from_numpy(x[sl].copy()).reshape(self.shapes[name])
            tensors[name] = t.requires_grad_(requires_grad)
        return tensors

    def value(self, x: np.ndarray) -> float:
        with torch.no_grad():
            out = self.run(self._unpack(x, requires_grad=False))
        return float((out * self.projection).sum())

    def analytic(self, x: np.ndarray) -> np.ndarray:
        tensors = self._unpack(x, requires_grad=True)
        out = self.run(tensors)
        scalar = (out * self.projection).sum()
        grads = torch.autograd.grad(scalar, list(tensors.values()), allow_unused=True)
        flat = np.zeros_like(self.x0)
        for (name, sl), grad in zip(self.slices.items(), grads):
            if grad is not None:
                flat[sl] = grad.reshape(-1).numpy()
        return flat


def _module_problem(module: torch.nn.Module, seed: int,
                    inputs: "OrderedDict[str, torch.Tensor]",
                    call: Callable) -> TorchProblem:
    module = module.double()
    tensors = OrderedDict(inputs)
    for name, param in module.named_parameters():
        tensors[name] = param
    input_names = list(inputs)

    def run(packed: dict) -> torch.Tensor:
        params = {n: t for n, t in packed.items() if n not in input_names}
        args = [packed[n] for n in input_names]
        return call(module, params, *args)

    return TorchProblem(run, tensors, seed)


def _build_rpe(seed: int) -> TorchProblem:
    torch.manual_seed(seed)
    module = RelPosSelfAttention(embed_dim=8, heads=2, max_distance=3)
    x = torch.randn(1, 5, 8, dtype=torch.float64)
    return _module_problem(
        module, seed, OrderedDict(tokens=x),
        lambda m, params, tokens: functional_call(m, params, (tokens,)),
    )


def _build_svr(seed: int) -> TorchProblem:
    torch.manual_seed(seed)
    module = RefinerLayer(embed_dim=8, heads=2, max_distance=3)
    x = torch.randn(1, 5, 8, dtype=torch.float64)
    return _module_problem(
        module, seed, OrderedDict(tokens=x),
        lambda m, params, tokens: functional_call(m, params, (tokens,)),
    )


def _build_dts(seed: int) -> TorchProblem:
    torch.manual_seed(seed)
    module = SoftTokenSelector(embed_dim=8, top_k=4)
    x = torch.randn(6, 8, dtype=torch.float64)
    return _module_problem(
        module, seed, OrderedDict(tokens=x),
        lambda m, params, tokens: functional_call(m, params, (tokens,)).tokens,
    )


def _build_dmtp(seed: int) -> TorchProblem:
    torch.manual_seed(seed)
    module = DynamicMultiScalePool(embed_dim=8, kernels=(1, 2, 4))
    x = torch.randn(8, 8, dtype=torch.float64)
    return _module_problem(
        module, seed, OrderedDict(tokens=x),
        lambda m, params, tokens: functional_call(m, params, (tokens,)).tokens,
    )


def _build_tta(seed: int) -> TorchProblem:
    torch.manual_seed(seed)
    module = AggregatorLayer(embed_dim=8, heads=2)
    queries = torch.randn(3, 8, dtype=torch.float64)
    text = torch.randn(4, 8, dtype=torch.float64)
    pooled = torch.randn(4, 8, dtype=torch.float64)
    mask = torch.tensor([True, True, True, False])
    text = text.masked_fill(~mask.unsqueeze(1), 0.0)

    def call(m, params, q, tv, p):
        out, _ = functional_call(m, params, (q, TextEmbedding(tv, mask), p))
        return out

    return _module_problem(
        module, seed, OrderedDict(queries=queries, text=text, pooled=pooled), call,
    )


def _build_encoder(seed: int) -> TorchProblem:
    torch.manual_seed(seed)
    module = FrameEncoder(patch=(2, 2, 2), embed_dim=8)
    frames = torch.randn(2, 2, 4, 4, dtype=torch.float64)
    return _module_problem(
        module, seed, OrderedDict(frames=frames),
        lambda m, params, frames: functional_call(m, params, (frames,)).tokens,
    )


class DpoProblem:
    """Closed-form gradient of the preference loss over the four log-probs."""

    names = ("policy_chosen", "reference_chosen", "policy_rejected", "reference_rejected")

    def __init__(self, seed: int, beta: float = 0.3):
        rng = np.random.default_rng(seed)
        self.beta = beta
        self.x0 = rng.normal(0.0, 2.0, size=4)
        self.slices = OrderedDict(
            (name, slice(i, i + 1)) for i, name in enumerate(self.names)
        )

    @staticmethod
    def _pair(x: np.ndarray) -> PreferencePair:
        return PreferencePair(SequenceScore(float(x[0]), float(x[1])),
                              SequenceScore(float(x[2]), float(x[3])))

    def value(self, x: np.ndarray) -> float:
        return dpo_loss(self._pair(x), self.beta)

    def analytic(self, x: np.ndarray) -> np.ndarray:
        return np.array(dpo_loss_grad(self._pair(x), self.beta).as_tuple())


_REGISTRY: "OrderedDict[str, Callable[[int], object]]" = OrderedDict()


def register(op: str, builder: Callable[[int], object]) -> None:
    if op in _REGISTRY:
        raise ValueError(f"op {op!r} is already registered")
    _REGISTRY[op] = builder


def unregister(op: str) -> None:
    _REGISTRY.pop(op, None)


def registered_ops() -> list[str]:
    return list(_REGISTRY)


register("rpe_attention", _build_rpe)
register("svr_layer", _build_svr)
register("dts", _build_dts)
register("dmtp", _build_dmtp)
register("tta_layer", _build_tta)
register("encoder_projections", _build_encoder)
register("dpo_loss", DpoProblem)


def check_op(op: str, seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
             step: float = DEFAULT_STEP) -> GradCheckReport:
    """Compare an op's analytic gradient against central differences."""
    if op not in _REGISTRY:
        raise ValueError(f"unknown op {op!r}; registered ops: {', '.join(_REGISTRY)}")
    problem = _REGISTRY[op](seed)
    numeric = central_difference(problem.value, problem.x0, step)
    analytic = problem.analytic(problem.x0)
    errors = relative_errors(analytic, numeric)
    max_errors = {name: float(errors[sl].max()) for name, sl in problem.slices.items()}
    passed = all(err <= tolerance for err in max_errors.values())
    return GradCheckReport(op, seed, step, tolerance, max_errors, passed)


def check_all(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
              step: float = DEFAULT_STEP) -> list[GradCheckReport]:
    return [check_op(op, seed, tolerance, step) for op in _REGISTRY]


def error_curve(op: str, seed: int = 0,
                steps: tuple[float, ...] = (1e-3, 1e-4, 1e-5)) -> list[tuple[float, float]]:
    """Worst relative error at each step size, largest step first."""
    if op not in _REGISTRY:
        raise ValueError(f"unknown op {op!r}; registered ops: {', '.join(_REGISTRY)}")
    problem = _REGISTRY[op](seed)
    analytic = problem.analytic(problem.x0)
    curve = []
    for step in sorted(steps, reverse=True):
        numeric = central_difference(problem.value, problem.x0, step)
        curve.append((step, float(relative_errors(analytic, numeric).max())))
    return curve
