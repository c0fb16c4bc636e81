"""Minimal adversarial perturbations and baseline attacks.

All attacks are untargeted and operate on raw class scores. Norms stored in
:class:`AttackResult` are absolute; relative norms are computed in
:mod:`deepfool.robustness`.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateGradientError, DimensionError
from .models import argmax_label
from .tensor import backward, input_jacobian

INF = float("inf")


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters shared by the DeepFool variants.

    The overshoot is applied once, to the summed perturbation. ``clip``, when
    given as ``(low, high)``, is applied to the final adversarial input only.
    """

    overshoot: float = 0.02
    max_iterations: int = 50
    p: float = 2.0
    grad_tol: float = 1e-12
    clip: Optional[tuple] = None

    def __post_init__(self):
        p = float(self.p)
        object.__setattr__(self, "p", p)
        if not 1.0 <= p <= INF:
            raise ConfigError(f"norm order p must lie in [1, inf], got {p}")
        if not self.overshoot >= 0:
            raise ConfigError("overshoot must be >= 0")
        if int(self.max_iterations) < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not self.grad_tol > 0:
            raise ConfigError("grad_tol must be > 0")
        if self.clip is not None:
            lo, hi = self.clip
            if not lo < hi:
                raise ConfigError("clip range must satisfy low < high")
            object.__setattr__(self, "clip", (float(lo), float(hi)))

    def as_dict(self):
        return {
            "overshoot": self.overshoot,
            "max_iterations": self.max_iterations,
            "p": "inf" if self.p == INF else self.p,
            "grad_tol": self.grad_tol,
            "clip": list(self.clip) if self.clip else None,
        }


@dataclass
class AttackResult:
    perturbation: np.ndarray  # summed r_i, before the overshoot factor
    iterations: int
    original_label: int
    adversarial_label: int
    fooled: bool
    adversarial: np.ndarray  # x + (1 + overshoot) * perturbation, clipped
    overshoot: float = 0.0
    wall_time: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def norm2_raw(self):
        return float(np.linalg.norm(self.perturbation))

    @property
    def norm2_overshoot(self):
        return (1.0 + self.overshoot) * self.norm2_raw

    @property
    def norm_inf_raw(self):
        return float(np.max(np.abs(self.perturbation), initial=0.0))

    @property
    def norm_inf_overshoot(self):
        return (1.0 + self.overshoot) * self.norm_inf_raw


def _check_input(f, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (f.n_inputs,):
        raise DimensionError(f"expected input of shape ({f.n_inputs},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite entries")
    return x


def _finish(x, r, cfg):
    adv = x + (1.0 + cfg.overshoot) * r
    if cfg.clip is not None:
        adv = np.clip(adv, *cfg.clip)
    return adv


# -- steps -------------------------------------------------------------------


def _eligible_ratios(f_gaps, w_norms, tol):
    eligible = w_norms >= tol
    if not np.any(eligible):
        raise DegenerateGradientError(
            "every gradient gap is below the tolerance; the classifier is flat here"
        )
    ratios = np.full(len(f_gaps), INF)
    ratios[eligible] = np.abs(f_gaps[eligible]) / w_norms[eligible]
    return ratios


def deepfool_step_l2(f_gaps, w_gaps, grad_tol=1e-12):
    """Closest linearized hyperplane and the orthogonal step onto it.

    ``f_gaps`` has shape ``(K,)`` and ``w_gaps`` shape ``(K, n)``; the returned
    index refers to rows of these arrays. Ties go to the lowest index.
    """
    f_gaps = np.asarray(f_gaps, dtype=np.float64)
    w_gaps = np.asarray(w_gaps, dtype=np.float64)
    norms = np.linalg.norm(w_gaps, axis=1)
    ratios = _eligible_ratios(f_gaps, norms, grad_tol)
    l = int(np.argmin(ratios))
    r = abs(f_gaps[l]) / norms[l] ** 2 * w_gaps[l]
    return l, r


def dual_exponent(p):
    """Hoelder conjugate ``q = p / (p - 1)``, with 1 <-> inf."""
    if p == 1.0:
        return INF
    if p == INF:
        return 1.0
    return p / (p - 1.0)


def lq_norm(v, q, axis=-1):
    """``l_q`` norm, rescaled by the max entry so large ``q`` cannot overflow."""
    v = np.abs(np.asarray(v, dtype=np.float64))
    m = np.max(v, axis=axis, keepdims=True, initial=0.0)
    if q == INF:
        return np.squeeze(m, axis=axis)
    safe = np.where(m > 0, m, 1.0)
    s = np.sum((v / safe) ** q, axis=axis, keepdims=True) ** (1.0 / q)
    return np.squeeze(m * s, axis=axis)


def deepfool_step_lp(f_gaps, w_gaps, p, grad_tol=1e-12):
    """Minimal ``l_p`` step onto the closest linearized hyperplane.

    Hyperplanes are ranked by ``|f'_k| / ||w'_k||_q``. The returned step
    satisfies ``w'_l . r = |f'_l|`` and is ``l_p``-minimal among such vectors.
    Rows whose ``l_q`` norm is below ``grad_tol`` are ignored.
    """
    f_gaps = np.asarray(f_gaps, dtype=np.float64)
    w_gaps = np.asarray(w_gaps, dtype=np.float64)
    p = float(p)
    if not 1.0 <= p <= INF:
        raise ConfigError(f"norm order p must lie in [1, inf], got {p}")
    q = dual_exponent(p)
    norms = lq_norm(w_gaps, q, axis=1)
    ratios = _eligible_ratios(f_gaps, norms, grad_tol)
    l = int(np.argmin(ratios))
    w = w_gaps[l]
    gap = abs(f_gaps[l])
    if q == INF:
        # p = 1: all mass on the largest-magnitude coordinate
        j = int(np.argmax(np.abs(w)))
        r = np.zeros_like(w)
        r[j] = gap / abs(w[j]) * np.sign(w[j])
    elif q == 1.0:
        r = gap / norms[l] * np.sign(w)
    else:
        r = gap / norms[l] * (np.abs(w) / norms[l]) ** (q - 1.0) * np.sign(w)
    return l, r


# -- DeepFool ----------------------------------------------------------------


def _scalar_value_and_grad(f, x):
    if callable(f) and not hasattr(f, "forward"):
        value, grad = f(x)
        return float(value), np.asarray(grad, dtype=np.float64)
    if f.n_classes != 1:
        raise DimensionError("a binary classifier must produce a single score")
    logits, tape = f.forward(x)
    return float(logits[0]), backward(tape, np.ones(1))


def binary_label(value):
    """Class 1 when the score is positive, class 0 otherwise."""
    return int(value > 0.0)


def deepfool_binary(f, x, cfg=None, reference_label=None):
    """DeepFool for a single-score classifier deciding by ``sign(f)``.

    ``f`` is a classifier with one output, or a callable returning
    ``(value, gradient)``. The loop runs while the label of
    ``x + (1 + overshoot) * sum(r_i)`` equals ``reference_label`` (by default
    the label of ``x`` itself).
    """
    cfg = cfg or AttackConfig()
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    value, grad = _scalar_value_and_grad(f, x)
    k0 = binary_label(value)
    ref = k0 if reference_label is None else int(reference_label)
    r_tot = np.zeros_like(x)
    xi_value, xi_grad = value, grad
    label = k0
    i = 0
    while label == ref and i < cfg.max_iterations:
        gnorm2 = float(xi_grad @ xi_grad)
        if math.sqrt(gnorm2) < cfg.grad_tol:
            raise DegenerateGradientError(
                f"gradient norm below {cfg.grad_tol} at iteration {i}"
            )
        r_tot = r_tot + (-xi_value / gnorm2) * xi_grad
        i += 1
        xi_value, xi_grad = _scalar_value_and_grad(f, x + r_tot)
        label = binary_label(_scalar_value_and_grad(f, x + (1.0 + cfg.overshoot) * r_tot)[0])
    adv = _finish(x, r_tot, cfg)
    adv_label = binary_label(_scalar_value_and_grad(f, adv)[0])
    return AttackResult(
        perturbation=r_tot,
        iterations=i,
        original_label=k0,
        adversarial_label=adv_label,
        fooled=adv_label != k0,
        adversarial=adv,
        overshoot=cfg.overshoot,
        wall_time=time.perf_counter() - t0,
    )


def deepfool_multiclass(f, x, cfg=None):
    """Iterative linearization attack for a multiclass classifier.

    Each iteration linearizes every class score at the current iterate
    ``x + sum(r_i)`` and steps onto the closest face of the resulting
    polyhedron (``l_2`` or the general ``l_p`` rule, per ``cfg.p``). The loop
    stops once ``x + (1 + overshoot) * sum(r_i)`` changes label.
    """
    cfg = cfg or AttackConfig()
    t0 = time.perf_counter()
    x = _check_input(f, x)
    if f.n_classes < 2:
        raise DimensionError("multiclass DeepFool needs at least two classes")
    logits, tape = f.forward(x)
    k0 = argmax_label(logits)
    others = np.array([k for k in range(f.n_classes) if k != k0])
    r_tot = np.zeros_like(x)
    label = k0
    i = 0
    while label == k0 and i < cfg.max_iterations:
        jac = input_jacobian(tape)
        f_gaps = logits[others] - logits[k0]
        w_gaps = jac[others] - jac[k0]
        if cfg.p == 2.0:
            _, r_i = deepfool_step_l2(f_gaps, w_gaps, cfg.grad_tol)
        else:
            _, r_i = deepfool_step_lp(f_gaps, w_gaps, cfg.p, cfg.grad_tol)
        r_tot = r_tot + r_i
        i += 1
        logits, tape = f.forward(x + r_tot)
        label = argmax_label(f.logits(x + (1.0 + cfg.overshoot) * r_tot))
    adv = _finish(x, r_tot, cfg)
    adv_label = argmax_label(f.logits(adv))
    return AttackResult(
        perturbation=r_tot,
        iterations=i,
        original_label=k0,
        adversarial_label=adv_label,
        fooled=adv_label != k0,
        adversarial=adv,
        overshoot=cfg.overshoot,
        wall_time=time.perf_counter() - t0,
    )


def deepfool(f, x, cfg=None):
    """Dispatch to the binary or multiclass variant by output count."""
    if f.n_classes == 1:
        return deepfool_binary(f, x, cfg)
    return deepfool_multiclass(f, x, cfg)


def affine_exact_oracle(f, x, cfg=None):
    """Exact minimal ``l_2`` perturbation of an affine classifier.

    Every face of the decision polyhedron is checked and the closest one is
    projected onto in closed form. ``cfg`` only supplies the overshoot used
    for the fooled check and the degeneracy tolerance.
    """
    cfg = cfg or AttackConfig()
    t0 = time.perf_counter()
    x = _check_input(f, x)
    W, b = f.W, f.b
    scores = x @ W + b
    k0 = argmax_label(scores)
    best, best_k = INF, None
    for k in range(f.n_classes):
        if k == k0:
            continue
        w = W[:, k] - W[:, k0]
        wn = float(np.linalg.norm(w))
        if wn < cfg.grad_tol:
            continue
        dist = abs(scores[k] - scores[k0]) / wn
        if dist < best:
            best, best_k = dist, k
    if best_k is None:
        raise DegenerateGradientError("all class weight vectors coincide")
    w = W[:, best_k] - W[:, k0]
    r = abs(scores[best_k] - scores[k0]) / float(w @ w) * w
    adv = _finish(x, r, cfg)
    adv_label = argmax_label(f.logits(adv))
    return AttackResult(
        perturbation=r,
        iterations=0,
        original_label=k0,
        adversarial_label=adv_label,
        fooled=adv_label != k0,
        adversarial=adv,
        overshoot=cfg.overshoot,
        wall_time=time.perf_counter() - t0,
        info={"closest_class": best_k, "distance": best},
    )


# -- fast gradient sign --------------------------------------------------------


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(logits, y):
    """Mean softmax cross-entropy of ``logits`` against integer labels."""
    logits = np.atleast_2d(logits)
    y = np.atleast_1d(y)
    z = logits - np.max(logits, axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def loss_input_gradient(f, x, y):
    """Gradient of the cross-entropy loss with respect to the input(s).

    For a batch the gradient of each sample's own loss is returned (not of
    the batch mean).
    """
    logits, tape = f.forward(x)
    seed = softmax(logits)
    y = np.asarray(y)
    if seed.ndim == 1:
        seed[int(y)] -= 1.0
    else:
        seed[np.arange(len(y)), y] -= 1.0
    return backward(tape, seed)


def fast_gradient_sign(f, x, y, epsilon):
    """``epsilon * sign(grad_x J(x, y))``; zero gradient entries stay zero."""
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    x = _check_input(f, x)
    return epsilon * np.sign(loss_input_gradient(f, x, y))


def fgs_attack(f, x, y, epsilon):
    """Fast gradient sign packaged as an :class:`AttackResult`."""
    t0 = time.perf_counter()
    x = _check_input(f, x)
    k0 = argmax_label(f.logits(x))
    r = fast_gradient_sign(f, x, y, epsilon)
    adv = x + r
    adv_label = argmax_label(f.logits(adv))
    return AttackResult(
        perturbation=r,
        iterations=1,
        original_label=k0,
        adversarial_label=adv_label,
        fooled=adv_label != k0,
        adversarial=adv,
        overshoot=0.0,
        wall_time=time.perf_counter() - t0,
        info={"epsilon": epsilon},
    )


@dataclass(frozen=True)
class EpsilonSearch:
    epsilon: float
    reached: bool
    rate: float
    grid_step: float


def _sign_directions(f, X, y):
    return np.sign(loss_input_gradient(f, X, y))


def misclassification_rate(f, X, y, directions, epsilon):
    pred = np.argmax(f.logits(X + epsilon * directions), axis=1)
    return float(np.mean(pred != y))


def fgs_epsilon_search(
    f, dataset, target_rate=0.9, epsilon_max=None, steps=100, halvings=30
):
    """Smallest ``epsilon`` for which fast gradient sign misclassifies at
    least ``target_rate`` of ``dataset`` (against its true labels).

    The bracket ``[0, epsilon_max]`` is bisected ``halvings`` times and the
    final bracket scanned on a grid of ``steps`` points. If the target is not
    reached even at ``epsilon_max``, that value is returned with
    ``reached=False``.
    """
    X = np.asarray(dataset.x, dtype=np.float64)
    y = np.asarray(dataset.y)
    if len(X) == 0:
        raise ConfigError("epsilon search needs a non-empty dataset")
    if not 0 < target_rate <= 1:
        raise ConfigError("target_rate must lie in (0, 1]")
    if steps < 2:
        raise ConfigError("steps must be >= 2")
    if epsilon_max is None:
        epsilon_max = float(np.max(X) - np.min(X)) or 1.0
    D = _sign_directions(f, X, y)

    def rate(eps):
        return misclassification_rate(f, X, y, D, eps)

    r0 = rate(0.0)
    if r0 >= target_rate:
        return EpsilonSearch(0.0, True, r0, 0.0)
    r_max = rate(epsilon_max)
    if r_max < target_rate:
        return EpsilonSearch(float(epsilon_max), False, r_max, 0.0)
    lo, hi = 0.0, float(epsilon_max)
    for _ in range(halvings):
        mid = 0.5 * (lo + hi)
        if rate(mid) >= target_rate:
            hi = mid
        else:
            lo = mid
    grid = np.linspace(lo, hi, steps)
    for eps in grid[1:]:
        r = rate(eps)
        if r >= target_rate:
            return EpsilonSearch(float(eps), True, r, float(grid[1] - grid[0]))
    raise AssertionError("unreachable: the bracket's upper end meets the target")


# -- penalized optimization oracle -------------------------------------------


def default_penalty_schedule(start=1e2, ratio=0.25, count=40):
    return start * ratio ** np.arange(count)


def _linear_targets(f, x, margin):
    """Label at ``x``, a starting penalty and per-class linearized distances.

    ``dist[t]`` is the distance to the linearized boundary between the label
    and class ``t`` (infinite for the label itself); for affine models it is
    exact and a lower bound on the distance to class ``t``. With the hinge
    active, one exact step on the linearized objective, ``r = -g / (2 gamma)``,
    closes ``||g||^2 / (2 gamma)`` of the gap, so no target flips in one step
    above ``gamma = ||g||^2 / (2 (gap + margin))``; the largest such value is
    returned.
    """
    logits, tape = f.forward(x)
    k0 = argmax_label(logits)
    c = f.n_classes
    dist = np.full(c, INF)
    reach = 0.0
    for t in range(c):
        if t == k0:
            continue
        seed = np.zeros(c)
        seed[k0], seed[t] = 1.0, -1.0
        g = backward(tape, seed)
        gap = logits[k0] - logits[t] + margin
        gg = float(g @ g)
        if gg > 0:
            dist[t] = gap / np.sqrt(gg)
            reach = max(reach, gg / (2.0 * gap))
    return k0, reach, dist


def penalized_oracle(
    f,
    x,
    penalties=None,
    margin=1e-3,
    inner_steps=40,
    patience=2,
    targets="all",
    cfg=None,
):
    """Minimal perturbation by a sequence of penalized problems.

    For each weight ``gamma`` of a decreasing schedule this minimizes
    ``gamma * ||r||^2 + max(0, f_k0(x+r) - f_t(x+r) + margin)`` by gradient
    descent warm-started at the previous solution. With ``targets="all"`` one
    problem is solved per class ``t != k0`` (batched) and the best is kept;
    ``targets="max"`` solves a single problem with ``t`` the strongest
    competing class at each iterate, which can settle on a face that is not
    the nearest one.

    The step size is ``theta / (2 * gamma)``: each step moves a fraction
    ``theta`` of the way to the minimizer of the locally linearized objective,
    and ``theta`` shrinks geometrically within each problem so the iterates
    settle onto the hinge kink. Every iterate that changes the label is a
    candidate and the smallest one is returned. The schedule stops once
    ``patience`` consecutive weights fail to improve the best candidate and no
    unfinished problem can still beat it.
    """
    if targets not in ("all", "max"):
        raise ConfigError(f"targets must be 'all' or 'max', got {targets!r}")
    cfg = cfg or AttackConfig(overshoot=0.0)
    t0 = time.perf_counter()
    x = _check_input(f, x)
    k0, reach, dist = _linear_targets(f, x, margin)
    if penalties is None:
        # start one step above the largest penalty that can flip in one step
        start = reach / 0.25 if reach > 0 else 1e2
        penalties = default_penalty_schedule(start)
    c = f.n_classes
    if targets == "all":
        fixed = np.array([k for k in range(c) if k != k0])
    else:
        fixed = None
    rows = c - 1 if fixed is not None else 1
    R = np.zeros((rows, x.size))
    ever_flipped = np.zeros(rows, dtype=bool)
    best, best_norm = None, INF
    stale = evals = solved = 0
    decay = 1e-3 ** (1.0 / max(inner_steps - 1, 1))
    others = np.arange(c) != k0
    alive = np.arange(rows)
    for gamma in penalties:
        solved += 1
        idx = np.arange(alive.size)
        Ra = R[alive]
        theta = 0.5
        before = best_norm
        for _ in range(inner_steps):
            logits, tape = f.forward(x + Ra)
            evals += 1
            if fixed is None:
                t = np.array([int(np.argmax(np.where(others, logits[0], -INF)))])
            else:
                t = fixed[alive]
            flipped = np.argmax(logits, axis=1) != k0
            if np.any(flipped):
                ever_flipped[alive] |= flipped
                norms = np.linalg.norm(Ra, axis=1)
                j = int(np.argmin(np.where(flipped, norms, INF)))
                if norms[j] < best_norm:
                    best, best_norm = Ra[j].copy(), float(norms[j])
            active = logits[idx, k0] - logits[idx, t] + margin > 0
            seed = np.zeros_like(logits)
            seed[idx, k0] = active
            seed[idx, t] = -1.0 * active
            grad = 2.0 * gamma * Ra + backward(tape, seed)
            Ra = Ra - theta / (2.0 * gamma) * grad
            theta *= decay
        R[alive] = Ra
        if best is not None:
            stale = 0 if best_norm < before * (1 - 1e-6) else stale + 1
            if fixed is not None:
                # drop targets whose linearized boundary lies past the best
                alive = alive[dist[fixed[alive]] < best_norm]
            pending = ~ever_flipped[alive] & (
                np.linalg.norm(R[alive], axis=1) < best_norm
            )
            if alive.size == 0 or (stale >= patience and not np.any(pending)):
                break
    fooled = best is not None
    r_out = best if fooled else R[0]
    adv = _finish(x, r_out, cfg)
    adv_label = argmax_label(f.logits(adv))
    return AttackResult(
        perturbation=r_out,
        iterations=solved,
        original_label=k0,
        adversarial_label=adv_label,
        fooled=fooled and adv_label != k0,
        adversarial=adv,
        overshoot=cfg.overshoot,
        wall_time=time.perf_counter() - t0,
        info={"evaluations": evals},
    )
