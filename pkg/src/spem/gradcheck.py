"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Dict, Mapping

import numpy as np

from .autograd import Tensor, no_grad

# denominator floor so near-zero gradients are compared on an absolute scale
REL_FLOOR = 1e-3


def numerical_grad(loss_fn: Callable[[], Tensor], t: Tensor, h: float = 1e-4) -> np.ndarray:
    """d loss / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Mapping[str, Tensor],
                    h: float = 1e-4) -> Dict[str, float]:
    """Max relative error between backprop and finite differences, per named tensor."""
    for t in tensors.values():
        if t.dtype != np.float64:
            raise TypeError("gradient checks require float64 tensors")
        t.grad = None
    loss_fn().backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                for k, t in tensors.items()}
    return {k: relative_error(analytic[k], numerical_grad(loss_fn, t, h)) for k, t in tensors.items()}


# -- named cases used by the ``gradcheck`` command and the test-suite --------

TOLERANCE = 1e-4


def _randomize(params, rng, low=-2.0, high=2.0) -> None:
    for p in params:
        p.data[...] = rng.uniform(low, high, p.shape)


# central differences are only meaningful away from the kinks of max, min and relu;
# random cases that land this close to one are redrawn. Pool winners move with every
# upstream weight, so they get the wider margin.
KINK_MARGIN = 1e-2
RELU_MARGIN = 1e-3


class _NearKink(Exception):
    pass


def extreme_margin(x: np.ndarray) -> float:
    """Smallest gap between the largest (or smallest) value of a spatial plane and the next
    distinct value. Exact ties are ignored: they come from dead relus and stay tied."""
    margin = float("inf")
    for plane in x.reshape((-1,) + x.shape[-2:]):
        vals = np.unique(plane)
        if vals.size > 1:
            margin = min(margin, vals[-1] - vals[-2], vals[1] - vals[0])
    return float(margin)


def _require_margin(margin: float, needed: float = KINK_MARGIN) -> None:
    if margin < needed:
        raise _NearKink(margin)


def _weights(rng, shape) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, shape))


def _pooling_case(rng) -> Dict[str, float]:
    from .pooling import AdaptiveMix, MixCoefficient, global_avg_pool, mix_pool

    n, c, h, w = 2, int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    x = Tensor(rng.uniform(-2, 2, (n, c, h, w)), requires_grad=True)
    _require_margin(extreme_margin(x.data))
    mix = MixCoefficient(*rng.uniform(0.2, 1.5, 2))
    strat = AdaptiveMix(mix)
    r = _weights(rng, (n, c, 1, 1))
    errs = check_gradients(lambda: (mix_pool(x, strat) * r).sum(), {"x": x, "p0": mix.p0, "p1": mix.p1})
    errs["x(gap)"] = check_gradients(lambda: (global_avg_pool(x) * r).sum(), {"x": x})["x"]
    return errs


def _excitation_case(rng) -> Dict[str, float]:
    from .attention import excitation

    c = int(rng.integers(1, 6))
    u = Tensor(rng.uniform(-2, 2, (2, c, 1, 1)), requires_grad=True)
    g = Tensor(rng.uniform(-2, 2, c), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, c), requires_grad=True)
    r = _weights(rng, (2, c, 1, 1))
    return check_gradients(lambda: (excitation(u, g, b) * r).sum(), {"u": u, "gamma_exc": g, "beta_exc": b})


def _reweight_case(rng, code: str) -> Dict[str, float]:
    from .attention import ReweightVariant, SpemParams, reweight

    variant = ReweightVariant.parse(code)
    c = int(rng.integers(1, 6))
    f_max = Tensor(rng.uniform(-2, 2, (2, c, 1, 1)), requires_grad=True)
    f_min = Tensor(rng.uniform(-2, 2, (2, c, 1, 1)), requires_grad=True)
    params = SpemParams(c, variant)
    _randomize(params.parameters(), rng)
    r = _weights(rng, (2, c, 1, 1))
    named = {"f_max": f_max, "f_min": f_min}
    named.update((k, p) for k, p in params.named_parameters() if "rew" in k)
    if variant is ReweightVariant.NO_REWEIGHT:
        # the ones map is constant; route it through f_max so the loss stays differentiable
        return check_gradients(lambda: (reweight(f_max, f_min, params, variant) * f_max * r).sum(), named)
    return check_gradients(lambda: (reweight(f_max, f_min, params, variant) * r).sum(), named)


def _spem_case(rng) -> Dict[str, float]:
    from .attention import ReweightVariant, SpemParams, spem_forward
    from .pooling import AdaptiveMix, MixCoefficient

    c, h, w = int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x = Tensor(rng.uniform(-2, 2, (2, c, h, w)), requires_grad=True)
    _require_margin(extreme_margin(x.data))
    mix = MixCoefficient(*rng.uniform(0.2, 1.5, 2))
    params = SpemParams(c, ReweightVariant.SHARED_ADD_SIGMOID, mix)
    _randomize([p for k, p in params.named_parameters() if "mix" not in k], rng)
    r = _weights(rng, (2, c, 1, 1))
    named = {"x": x}
    named.update(params.named_parameters())
    strat = AdaptiveMix(mix)
    return check_gradients(
        lambda: (spem_forward(x, params, ReweightVariant.SHARED_ADD_SIGMOID, strat) * r).sum(), named)


def _block_case(rng) -> Dict[str, float]:
    from . import autograd as ag
    from .backbone import AttentionConfig, Bottleneck

    in_ch, planes = int(rng.integers(2, 5)), int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    block = Bottleneck(in_ch, planes, stride, AttentionConfig(kind="spem"), rng=rng)
    for k, p in block.named_parameters():
        if "attention" in k and "mix" not in k:
            p.data[...] = rng.uniform(-2, 2, p.shape)
        elif "bn" in k:
            p.data[...] = rng.uniform(0.5, 1.5, p.shape) if k.endswith("weight") else rng.uniform(-0.5, 0.5, p.shape)
    block.attention.params.mix.p0.data[...] = rng.uniform(0.2, 1.5)
    block.attention.params.mix.p1.data[...] = rng.uniform(0.2, 1.5)
    x = Tensor(rng.uniform(-2, 2, (2, in_ch, 4, 4)), requires_grad=True)
    with no_grad():
        a1 = block.bn1(x)
        a2 = block.bn2(block.conv1(ag.relu(a1)))
        a3 = block.bn3(block.conv2(ag.relu(a2)))
        branch = block.conv3(ag.relu(a3))
    _require_margin(min(float(np.min(np.abs(a.data))) for a in (a1, a2, a3)), RELU_MARGIN)
    _require_margin(extreme_margin(branch.data))
    out_hw = (4 - 1) // stride + 1
    r = _weights(rng, (2, planes * 4, out_hw, out_hw))
    named = {"x": x}
    named.update(block.named_parameters())
    return check_gradients(lambda: (block(x) * r).sum(), named)


REWEIGHT_CODES = ("ours", "a", "b", "c", "d", "e", "f", "g", "none")
SELECTORS = ("pooling", "excitation", "spem", "block") + tuple(f"reweight:{c}" for c in REWEIGHT_CODES)


MAX_REDRAWS = 100


def _draw_case(selector: str, rng) -> Dict[str, float]:
    if selector == "pooling":
        return _pooling_case(rng)
    if selector == "excitation":
        return _excitation_case(rng)
    if selector == "spem":
        return _spem_case(rng)
    if selector == "block":
        return _block_case(rng)
    return _reweight_case(rng, selector.split(":", 1)[1])


def run_selector(selector: str, seed: int = 0, trials: int = 3) -> Dict[str, float]:
    """Max relative error per parameter group over ``trials`` random shapes."""
    if selector not in SELECTORS:
        raise KeyError(selector)
    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    for _ in range(trials):
        for _attempt in range(MAX_REDRAWS):
            try:
                errs = _draw_case(selector, rng)
                break
            except _NearKink:
                continue
        else:
            raise RuntimeError(f"{selector}: no kink-free case in {MAX_REDRAWS} draws")
        for k, v in errs.items():
            report[k] = max(report.get(k, 0.0), v)
    return report
