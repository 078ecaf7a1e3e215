"""Finite-difference verification of every training loss on a reduced model."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .gfda import make_view_set
from .netcore import autodiff as ad
from .netcore.model import REDUCED, ModelState, as_tensors, segment_logits
from .synthdata import generate
from .trainer import TrainConfig, finetune_losses, pretrain_losses

LOSSES = ("l_scl", "l_ccl", "l_con", "l_pre", "l_sup", "l_reg", "total")
# parameter groups each loss is differentiated against
GROUPS = {
    "l_scl": ("enc", "style"),
    "l_ccl": ("enc", "content"),
    "l_con": ("enc", "dfpm"),
    "l_pre": ("enc", "style", "content", "dfpm"),
    "l_sup": ("enc", "dec"),
    "l_reg": ("enc", "dec"),
    "total": ("enc", "dec"),
}


@dataclass
class GradcheckResult:
    loss: str
    max_rel_error: float
    worst_param: str
    n_params: int
    relu_margin: float
    tolerance: float
    kink_crossings: int = 0     # perturbed evaluations whose ReLU on/off pattern changed

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance and self.kink_crossings == 0


def reduced_config(seed: int = 0) -> TrainConfig:
    net = REDUCED.to_dict()
    size = net.pop("image_size")
    return TrainConfig(seed=seed, image_size=size, net=net)


def smooth_point(state: ModelState, seed: int, weight_scale: float = 0.5,
                 bias_range: tuple = (0.2, 0.6)) -> ModelState:
    """Move every ReLU away from its kink.

    Biases get magnitudes in ``bias_range`` and weights are shrunk, so most
    pre-activations are pushed away from zero while enough signal survives for
    gradients to stay well above round-off.  The first unit of every layer keeps
    a positive bias so no layer is entirely inactive.
    """
    out = state.copy()
    rng = np.random.default_rng([seed, 4242])
    for name in sorted(out.params):
        v = out.params[name]
        if name.endswith(".b"):
            mag = rng.uniform(*bias_range, size=v.shape)
            sign = rng.choice([-1.0, 1.0], size=v.shape)
            sign.flat[0] = 1.0
            out.params[name] = mag * sign
        else:
            out.params[name] = v * weight_scale
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest absolute disagreement scaled by the larger gradient magnitude of the array."""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale


def _fixture(seed: int):
    config = reduced_config(seed)
    net = config.net_config()
    split = generate(seed, 4, 4, size=net.image_size, labeled=2)
    rng = np.random.default_rng([seed, 5])
    view_sets = [make_view_set(split.S[0].image, split.T2[0].image, config.sigma, rng, "s0", "t0")]
    state = ModelState.create(net, seed)
    state.init_teacher(seed)
    state = smooth_point(state, seed)
    labeled = (np.stack([s.image for s in split.S[:2]]), np.stack([s.mask for s in split.S[:2]]))
    unlabeled = np.stack([s.image for s in split.T2[:2]])
    teacher = segment_logits(state.params, unlabeled, net, "teacher.")
    return config, net, state, view_sets, labeled, unlabeled, teacher


def loss_functions(seed: int = 0) -> tuple[ModelState, dict[str, Callable[[dict], ad.Tensor]]]:
    """Scalar loss closures over a fixed batch; each takes a name -> Tensor map."""
    config, net, state, view_sets, labeled, unlabeled, teacher = _fixture(seed)
    mom = state.group("mom.enc")

    def pre(key, **switches):
        cfg = replace(config, **switches)
        return lambda P: pretrain_losses(P, mom, view_sets, cfg, net)[key]

    def fine(key):
        return lambda P: finetune_losses(P, teacher, labeled, unlabeled, net, config.lambda3)[key]

    fns = {
        "l_scl": pre("l_scl", scl=True, ccl=False, dfpm=False),
        "l_ccl": pre("l_ccl", scl=False, ccl=True, dfpm=False),
        "l_con": pre("l_con", scl=False, ccl=False, dfpm=True),
        "l_pre": pre("l_pre"),
        "l_sup": fine("l_sup"),
        "l_reg": fine("l_reg"),
        "total": fine("total"),
    }
    return state, fns


def check_loss(state: ModelState, fn: Callable[[dict], ad.Tensor], groups: tuple,
               h: float = 1e-3, tol: float = 1e-4, name: str = "") -> GradcheckResult:
    names = sorted(k for k in state.params if k.split(".")[0] in groups)
    P = as_tensors(state.params, trainable=False)
    P.update({n: ad.param(state.params[n], n) for n in names})
    with ad.relu_margin() as margins, ad.relu_pattern() as pattern:
        analytic = ad.backward(fn(P))
    margin = min(margins, default=np.inf)

    worst, worst_name, count, crossings = 0.0, "", 0, 0
    base = dict(state.params)
    for n in names:
        arr = base[n]
        numeric = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            vals = []
            for sgn in (1.0, -1.0):
                bumped = arr.copy()
                bumped[i] += sgn * h
                Q = as_tensors({**base, n: bumped}, trainable=False)
                with ad.relu_margin() as m, ad.relu_pattern() as pat:
                    vals.append(float(fn(Q).data))
                margin = min(margin, min(m, default=np.inf))
                crossings += not all(np.array_equal(x, y) for x, y in zip(pattern, pat))
            numeric[i] = (vals[0] - vals[1]) / (2.0 * h)
        err = relative_error(analytic[n], numeric)
        count += arr.size
        if err >= worst:
            worst, worst_name = err, n
    return GradcheckResult(name, worst, worst_name, count, margin, tol, crossings)


def run_gradcheck(seed: int = 0, h: float = 1e-3, tol: float = 1e-4,
                  losses=LOSSES) -> list[GradcheckResult]:
    state, fns = loss_functions(seed)
    return [check_loss(state, fns[k], GROUPS[k], h, tol, k) for k in losses]
