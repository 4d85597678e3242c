"""Gradient evaluation and the central-difference oracle."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from masd.nn.params import ParameterSet
from masd.nn.tensor import ShapeError, Tensor, _FreezeTape, freeze_tape

# graph(p, *inputs) -> Tensor or tuple of Tensors; the first output is the scalar loss.
Graph = Callable[..., "Tensor | Sequence[Tensor]"]


# central differences: derivative ~ sum_k w_k (f(x + k eps) - f(x - k eps)) / eps
_STENCILS = {
    2: ((1.0,), (0.5,)),
    4: ((1.0, 2.0), (8.0 / 12.0, -1.0 / 12.0)),
}


def _outputs(result) -> list[Tensor]:
    return [result] if isinstance(result, Tensor) else list(result)


def evaluate_with_gradients(
    params: Mapping[str, np.ndarray], graph: Graph, inputs: Sequence = ()
) -> tuple[list[np.ndarray], dict[str, np.ndarray]]:
    p = {k: Tensor(params[k], requires_grad=True) for k in params}
    outs = _outputs(graph(p, *inputs))
    loss = outs[0]
    if loss.data.size != 1:
        raise ShapeError(f"loss output {loss.op}#{loss.node_id} has shape {loss.shape}, expected scalar")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in p.items()}
    return [o.data for o in outs], grads


def _loss_value(params: Mapping[str, np.ndarray], graph: Graph, inputs: Sequence) -> float:
    p = {k: Tensor(params[k]) for k in params}
    return float(_outputs(graph(p, *inputs))[0].data)


def finite_diff_check(
    params: Mapping[str, np.ndarray],
    graph: Graph,
    inputs: Sequence = (),
    eps: float = 1e-6,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    stencil: int = 2,
) -> float:
    """Max over parameter tensors of ``|analytic - numeric| / max(|analytic|, |numeric|)``.

    Norms are taken over each named tensor. Below a denominator of 1e-12 the
    absolute error is reported instead. Stop-gradient outputs and frozen
    choices are held at their unperturbed values while differencing, so the
    oracle differentiates exactly the surrogate the analytic pass does.
    ``max_entries`` subsamples coordinates per tensor (seeded by ``rng``).
    ``stencil`` 4 uses the fourth-order five-point formula, which tolerates a
    larger ``eps`` and so suffers less cancellation on tiny gradients.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    if stencil not in _STENCILS:
        raise ValueError(f"stencil must be one of {sorted(_STENCILS)}, got {stencil}")
    offsets, weights = _STENCILS[stencil]
    tape = _FreezeTape()
    with freeze_tape(tape):
        _, grads = evaluate_with_gradients(params, graph, inputs)
    tape.replay = True
    base = {k: np.array(params[k], dtype=np.float64) for k in params}
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for name in names or sorted(base):
        flat_size = base[name].size
        coords = np.arange(flat_size)
        if max_entries is not None and flat_size > max_entries:
            coords = np.sort(rng.choice(flat_size, size=max_entries, replace=False))
        numeric = np.zeros(len(coords))
        for j, c in enumerate(coords):
            acc = 0.0
            for offset, weight in zip(offsets, weights):
                vals = []
                for sign in (1.0, -1.0):
                    trial = dict(base)
                    arr = base[name].copy().reshape(-1)
                    arr[c] += sign * offset * eps
                    trial[name] = arr.reshape(base[name].shape)
                    tape.cursor = 0
                    with freeze_tape(tape):
                        vals.append(_loss_value(trial, graph, inputs))
                acc += weight * (vals[0] - vals[1])
            numeric[j] = acc / eps
        analytic = grads[name].reshape(-1)[coords]
        diff = float(np.linalg.norm(analytic - numeric))
        denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
        err = diff if denom < 1e-12 else diff / denom
        worst = max(worst, err)
    return worst


def as_parameter_set(params: Mapping[str, np.ndarray], role: str = "mixed") -> ParameterSet:
    return params if isinstance(params, ParameterSet) else ParameterSet(params, role)
