"""Gradient-based adversarial example generation.

Two families:

* fgsm: one signed-gradient step of size epsilon on the cross-entropy loss,
  non-targeted (ascend w.r.t. the true label) or targeted (descend w.r.t.
  the target label).
* cw: margin attack minimizing ``dist(delta) + c * f(x + delta)`` inside the
  [0,1] box via the tanh change of variables, where
  ``f = max(max_{j != t} Z_j - Z_t, -kappa)``.  The constant c is tuned by
  per-sample binary search.  Norm variants: l2 (squared l2 distance term),
  l0 (repeated masked l2 runs, progressively freezing the pixels with the
  smallest |delta_i * grad_i|), linf (penalty sum(max(|delta_i| - tau, 0))
  with a per-sample bound tau that shrinks after every success).

Success is never trusted from the optimizer: every flagged result is
recomputed from the returned tensor (decode == target, f <= 0, box honored).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .rng import derive_seed, uniform_vector

_BOX_EPS = 1e-6          # tanh reparametrization needs x strictly inside (0,1)
_TAU_FLOOR = 1.0 / 256.0  # linf bound below one quantization level: stop


class BatchFormatError(ValueError):
    """Adversarial batch stream is malformed."""


@dataclass
class AttackSpec:
    family: str                  # fgsm | cw
    norm: str = "l2"             # l0 | l2 | linf (cw only)
    mode: str = "nontargeted"    # targeted | nontargeted
    epsilon: float = 0.3         # fgsm step on [0,1] images
    kappa: float = 0.0
    c_initial: float = 1e-3
    c_min: float = 1e-8
    c_max: float = 1e10
    c_steps: int = 9
    iterations: int = 1000
    learning_rate: float = 1e-2
    abort_early: bool = True

    def __post_init__(self):
        if self.family not in ("fgsm", "cw"):
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.norm not in ("l0", "l2", "linf"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.mode not in ("targeted", "nontargeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if not (0 < self.c_min <= self.c_initial <= self.c_max):
            raise ValueError(
                f"c bounds must satisfy 0 < min <= initial <= max, got "
                f"({self.c_min}, {self.c_initial}, {self.c_max})"
            )
        if self.c_steps < 1:
            raise ValueError(f"c_steps must be >= 1, got {self.c_steps}")
        if self.iterations < 1:
            raise ValueError(f"iteration budget must be >= 1, got {self.iterations}")

    def echo(self) -> dict:
        return {
            "family": self.family, "norm": self.norm, "mode": self.mode,
            "epsilon": self.epsilon, "kappa": self.kappa,
            "c_initial": self.c_initial, "c_min": self.c_min, "c_max": self.c_max,
            "c_steps": self.c_steps, "iterations": self.iterations,
            "learning_rate": self.learning_rate, "abort_early": self.abort_early,
        }


@dataclass
class AdversarialResult:
    adversarial_input: np.ndarray
    success: bool
    achieved_class: int
    distortion_norms: tuple      # (l0 count, l2, linf), recomputed from tensors
    iterations_used: int
    true_label: int = -1
    target: int = -1             # -1 when no target applies
    original_index: int = -1
    c_trace: list = field(default_factory=list)   # [(c, success flag), ...]


def lp_norm(delta: np.ndarray, p) -> float:
    """p in {0, 2, inf}: nonzero count / euclidean / max magnitude."""
    d = np.asarray(delta, dtype=np.float64).ravel()
    if not np.all(np.isfinite(d)):
        raise ValueError("norm of a non-finite tensor")
    if p == 0:
        return float(np.count_nonzero(d))
    if p == 2:
        return float(np.sqrt((d * d).sum()))
    if p in (np.inf, float("inf"), "inf"):
        return float(np.abs(d).max()) if d.size else 0.0
    raise ValueError(f"unsupported norm order {p!r}")


def distortion_norms(delta: np.ndarray) -> tuple:
    return (lp_norm(delta, 0), lp_norm(delta, 2), lp_norm(delta, np.inf))


def cw_objective_f(logits: np.ndarray, target: int, kappa: float) -> float:
    """max( max_{j != target} Z_j - Z_target, -kappa )."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    if z.size < 2:
        raise ValueError(f"need at least 2 classes, got {z.size}")
    if not 0 <= target < z.size:
        raise ValueError(f"target {target} out of range [0, {z.size})")
    others = np.delete(z, target)
    return float(max(others.max() - z[target], -kappa))


def _batched_cw_f(logits: np.ndarray, targets: np.ndarray, kappa: float):
    """Vectorized f plus the runner-up class index per row."""
    rows = np.arange(logits.shape[0])
    z_t = logits[rows, targets]
    masked = logits.copy()
    masked[rows, targets] = -np.inf
    runner = np.argmax(masked, axis=1)
    margin = masked[rows, runner] - z_t
    return np.maximum(margin, -kappa), runner, margin


def input_gradient(net, x: np.ndarray, objective: str = "cross-entropy", *,
                   label: int | None = None, target: int | None = None,
                   kappa: float = 0.0):
    """(objective value, gradient w.r.t. x) for a single input.

    objective "cross-entropy" differentiates J(x, label); "cw_f"
    differentiates f(x; target, kappa), with gradient zero on the
    saturated branch f = -kappa.
    """
    x = L.as_tensor(x)
    logits, traces = net.forward_batch(x[None], train=False)
    z = logits[0]
    if objective == "cross-entropy":
        if label is None:
            raise ValueError("cross-entropy objective needs label=")
        value = L.cross_entropy_loss(z, label)
        dlogits = L.cross_entropy_grad(z, label)[None]
    elif objective == "cw_f":
        if target is None:
            raise ValueError("cw_f objective needs target=")
        value = cw_objective_f(z, target, kappa)
        dlogits = np.zeros_like(logits)
        if value > -kappa:
            others = z.copy()
            others[target] = -np.inf
            runner = int(np.argmax(others))
            dlogits[0, runner] = 1.0
            dlogits[0, target] = -1.0
    else:
        raise ValueError(f"unknown objective {objective!r}")
    net.zero_grads()
    grad = net.backward_batch(traces, dlogits)[0]
    return value, grad


# -- fgsm ---------------------------------------------------------------------

def fgsm_batch(net, images: np.ndarray, labels: np.ndarray, spec: AttackSpec):
    """One-step signed-gradient attack on a batch.

    ``labels`` holds true labels in non-targeted mode (success = label
    changed) and target labels in targeted mode (success = target reached).
    """
    if spec.family != "fgsm":
        raise ValueError(f"spec family is {spec.family!r}, expected fgsm")
    images = L.as_tensor(images)
    labels = np.asarray(labels, dtype=np.int64)
    logits, traces = net.forward_batch(images, train=False)
    n = images.shape[0]
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), labels] = 1.0
    dlogits = L.softmax(logits) - onehot          # per-sample d J / d logits
    net.zero_grads()
    grads = net.backward_batch(traces, dlogits)
    step = spec.epsilon * np.sign(grads)
    if spec.mode == "targeted":
        step = -step
    adv = np.clip(images + step, 0.0, 1.0)
    # rounding of (x + eps) - x can land one ulp past the budget; walk
    # offenders back toward x until the recomputed delta fits exactly
    over = np.abs(adv - images) > spec.epsilon
    while np.any(over):
        adv[over] = np.nextafter(adv[over], images[over])
        over = np.abs(adv - images) > spec.epsilon
    predicted = net.decode_batch(adv)
    results = []
    for i in range(n):
        delta = adv[i] - images[i]
        ok = (predicted[i] == labels[i]) if spec.mode == "targeted" \
            else (predicted[i] != labels[i])
        results.append(AdversarialResult(
            adversarial_input=adv[i].copy(), success=bool(ok),
            achieved_class=int(predicted[i]),
            distortion_norms=distortion_norms(delta), iterations_used=1,
            true_label=int(labels[i]) if spec.mode != "targeted" else -1,
            target=int(labels[i]) if spec.mode == "targeted" else -1,
            original_index=i,
        ))
    return results


def fgsm(net, x: np.ndarray, label: int, spec: AttackSpec) -> AdversarialResult:
    """Single-input fgsm; see fgsm_batch for the label convention."""
    return fgsm_batch(net, L.as_tensor(x)[None], np.array([label]), spec)[0]


# -- cw core ------------------------------------------------------------------

def _verify_success(net, adv_row: np.ndarray, target: int, kappa: float) -> bool:
    """Recompute the success condition from the tensor alone."""
    if adv_row.min() < 0.0 or adv_row.max() > 1.0:
        return False
    probs, logits = net.encode(adv_row)
    if int(np.argmax(probs)) != target:
        return False
    return cw_objective_f(logits, target, kappa) <= 0.0


class _RunOutcome:
    """Per-sample best solution of one optimizer run."""

    def __init__(self, n, shape):
        self.success = np.zeros(n, dtype=bool)
        self.best_dist = np.full(n, np.inf)
        self.best_adv = np.zeros((n,) + shape)
        self.best_f_grad = np.zeros((n,) + shape)   # grad of f at the best point
        self.best_f = np.full(n, np.inf)            # closest-to-success f seen
        self.best_f_adv = np.zeros((n,) + shape)    # tensor achieving best_f
        self.iterations = np.zeros(n, dtype=np.int64)


def _optimize_fixed_c(net, x0, targets, c_vec, spec, *,
                      mask=None, tau=None, v0=None):
    """Adam in tanh space at fixed per-sample c; returns per-sample bests.

    Distance term: squared l2 of delta when ``tau`` is None, otherwise
    sum(max(|delta| - tau_i, 0)) and max|delta| as the tracked norm.
    ``mask`` (0/1, x0-shaped) confines the perturbation: frozen pixels hold
    the original value exactly.  ``v0`` warm-starts the perturbation
    variable.  best_dist is recomputed from the recorded tensor.
    """
    n = x0.shape[0]
    shape = x0.shape[1:]
    cexp = (slice(None),) + (None,) * len(shape)     # broadcast [n] over pixels
    w0 = np.arctanh(2.0 * np.clip(x0, _BOX_EPS, 1.0 - _BOX_EPS) - 1.0)
    v = np.zeros_like(x0) if v0 is None else v0.copy()
    m_adam = np.zeros_like(v)
    v_adam = np.zeros_like(v)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    out = _RunOutcome(n, shape)
    rows = np.arange(n)
    check_every = max(spec.iterations // 10, 1)
    # early abort is per sample so each result stays a pure function of its
    # own input; batching and chunking then cannot change any outcome
    frozen = np.zeros(n, dtype=bool)
    prev_obj = np.full(n, np.inf)

    for it in range(spec.iterations):
        w = w0 + v
        z = 0.5 * (np.tanh(w) + 1.0)
        x_adv = mask * z + (1.0 - mask) * x0 if mask is not None else z
        delta = x_adv - x0
        logits, traces = net.forward_batch(x_adv, train=False)
        f_val, runner, margin = _batched_cw_f(logits, targets, spec.kappa)

        # gradient of c*f w.r.t. logits; saturated rows contribute nothing
        dlogits = np.zeros_like(logits)
        live = margin > -spec.kappa
        dlogits[rows[live], runner[live]] = c_vec[live]
        dlogits[rows[live], targets[live]] = -c_vec[live]
        net.zero_grads()
        f_grad_scaled = net.backward_batch(traces, dlogits)

        if tau is None:
            dist = (delta.reshape(n, -1) ** 2).sum(axis=1)
            dist_grad = 2.0 * delta
            true_norm = np.sqrt(dist)
        else:
            over = np.abs(delta) - tau[cexp]
            dist = np.clip(over, 0.0, None).reshape(n, -1).sum(axis=1)
            dist_grad = np.sign(delta) * (over > 0.0)
            true_norm = np.abs(delta).reshape(n, -1).max(axis=1)

        succ = (np.argmax(logits, axis=1) == targets) & (f_val <= 0.0)
        better = succ & (true_norm < out.best_dist)
        if better.any():
            idx = rows[better]
            out.success[idx] = True
            out.best_dist[idx] = true_norm[idx]
            out.best_adv[idx] = x_adv[idx]
            scale = np.where(c_vec[idx] > 0.0, c_vec[idx], 1.0)
            out.best_f_grad[idx] = f_grad_scaled[idx] / scale[(slice(None),) + (None,) * len(shape)]
        closer = f_val < out.best_f
        if closer.any():
            idx = rows[closer]
            out.best_f[idx] = f_val[idx]
            out.best_f_adv[idx] = x_adv[idx]

        grad_xadv = dist_grad + f_grad_scaled
        grad_w = grad_xadv * 0.5 * (1.0 - np.tanh(w) ** 2)
        if mask is not None:
            grad_w *= mask
        m_adam = beta1 * m_adam + (1.0 - beta1) * grad_w
        v_adam = beta2 * v_adam + (1.0 - beta2) * grad_w * grad_w
        t = it + 1
        step = spec.learning_rate * (m_adam / (1.0 - beta1 ** t)) / \
            (np.sqrt(v_adam / (1.0 - beta2 ** t)) + eps)
        moving = ~frozen
        v[moving] -= step[moving]
        out.iterations[moving] = t

        if spec.abort_early and t % check_every == 0:
            obj = dist + c_vec * f_val
            frozen |= moving & (obj > 0.9999 * prev_obj)
            prev_obj = np.where(moving, obj, prev_obj)
            if frozen.all():
                break
    return out


def _update_c(c, lower, upper, upper_found, success, c_max):
    """One binary-search step on c, per sample, in place.

    Success shrinks the upper bound; failure raises the lower bound and,
    while no success has bounded the search from above, multiplies c by 10.
    """
    upper[success] = np.minimum(upper[success], c[success])
    upper_found |= success
    fail = ~success
    lower[fail] = np.maximum(lower[fail], c[fail])
    mid = upper_found & (upper < c_max)
    c[mid] = 0.5 * (lower[mid] + upper[mid])
    grow = fail & ~mid
    c[grow] = np.minimum(c[grow] * 10.0, c_max)


def _merge_best(overall: _RunOutcome, run: _RunOutcome, idx=None):
    """Fold one run's per-sample bests into the running overall bests."""
    sel = np.arange(len(run.success)) if idx is None else idx
    better = run.success & (run.best_dist < overall.best_dist[sel])
    tgt = sel[better]
    overall.success[sel] |= run.success
    overall.best_dist[tgt] = run.best_dist[better]
    overall.best_adv[tgt] = run.best_adv[better]
    overall.best_f_grad[tgt] = run.best_f_grad[better]
    closer = run.best_f < overall.best_f[sel]
    tgt = sel[closer]
    overall.best_f[tgt] = run.best_f[closer]
    overall.best_f_adv[tgt] = run.best_f_adv[closer]


def _cw_l2_batch(net, images, targets, spec, mask=None, c_init=None):
    """Binary-search l2 attack; returns (overall _RunOutcome, c_trace lists)."""
    n = images.shape[0]
    c = np.full(n, spec.c_initial) if c_init is None \
        else np.clip(np.asarray(c_init, dtype=np.float64), spec.c_min, spec.c_max)
    lower = np.full(n, spec.c_min)
    upper = np.full(n, spec.c_max)
    upper_found = np.zeros(n, dtype=bool)
    overall = _RunOutcome(n, images.shape[1:])
    c_trace = [[] for _ in range(n)]
    for _ in range(spec.c_steps):
        run = _optimize_fixed_c(net, images, targets, c, spec, mask=mask)
        overall.iterations += run.iterations
        for i in range(n):
            c_trace[i].append((float(c[i]), bool(run.success[i])))
        _merge_best(overall, run)
        _update_c(c, lower, upper, upper_found, run.success, spec.c_max)
    return overall, c_trace


def _freeze_least_useful(mask_flat, delta_flat, grad_flat, fraction=0.2):
    """Zero the free mask entries with the smallest |delta * grad|.

    Freezes at least one pixel whenever any are free, so the outer l0 loop
    always terminates.  Returns the number frozen.
    """
    free = np.flatnonzero(mask_flat > 0)
    if free.size == 0:
        return 0
    importance = np.abs(delta_flat[free] * grad_flat[free])
    k = max(1, int(np.ceil(fraction * free.size)))
    order = np.argsort(importance, kind="stable")
    mask_flat[free[order[:k]]] = 0.0
    return k


def _cw_l0_batch(net, images, targets, spec):
    """l0 via repeated masked l2 runs, freezing least-useful pixels.

    Each round warm-starts the c search at the previous round's winning c,
    so later rounds spend their steps refining rather than re-climbing.
    """
    n = images.shape[0]
    shape = images.shape[1:]
    dim = int(np.prod(shape))
    masks = np.ones((n, dim))
    warm_c = np.full(n, spec.c_initial)
    final = _RunOutcome(n, shape)
    traces = [[] for _ in range(n)]
    active = np.arange(n)
    while active.size:
        run, ctr = _cw_l2_batch(net, images[active], targets[active], spec,
                                mask=masks[active].reshape((-1,) + shape),
                                c_init=warm_c[active])
        final.iterations[active] += run.iterations
        keep = []
        for pos, i in enumerate(active):
            traces[i].extend(ctr[pos])
            if not run.success[pos]:
                if not final.success[i]:     # never succeeded: keep best effort
                    final.best_f[i] = run.best_f[pos]
                    final.best_f_adv[i] = run.best_f_adv[pos]
                continue                     # done; last success stands
            final.success[i] = True
            final.best_adv[i] = run.best_adv[pos]
            warm_c[i] = min(c for c, ok in ctr[pos] if ok)
            delta = (run.best_adv[pos] - images[i]).ravel()
            final.best_dist[i] = float(np.count_nonzero(delta))
            frozen = _freeze_least_useful(masks[i], delta,
                                          run.best_f_grad[pos].ravel())
            if frozen and masks[i].sum() > 0:
                keep.append(i)
        active = np.asarray(keep, dtype=np.int64)
    return final, traces


def _cw_linf_batch(net, images, targets, spec, max_rounds=40):
    """linf via shrinking per-sample bound tau; c doubles on failure."""
    n = images.shape[0]
    shape = images.shape[1:]
    tau = np.ones(n)
    c = np.full(n, spec.c_initial)
    final = _RunOutcome(n, shape)
    traces = [[] for _ in range(n)]
    warm = np.zeros_like(images)     # previous solution's perturbation
    active = np.arange(n)
    rounds = 0
    while active.size and rounds < max_rounds:
        rounds += 1
        xs = images[active]
        start = np.clip(xs + warm[active], _BOX_EPS, 1.0 - _BOX_EPS)
        w0 = np.arctanh(2.0 * np.clip(xs, _BOX_EPS, 1.0 - _BOX_EPS) - 1.0)
        v0 = np.arctanh(2.0 * start - 1.0) - w0
        run = _optimize_fixed_c(net, xs, targets[active], c[active], spec,
                                tau=tau[active], v0=v0)
        final.iterations[active] += run.iterations
        keep = []
        for pos, i in enumerate(active):
            traces[i].append((float(c[i]), bool(run.success[pos])))
            if run.success[pos]:
                if not final.success[i] or run.best_dist[pos] < final.best_dist[i]:
                    final.success[i] = True
                    final.best_dist[i] = run.best_dist[pos]
                    final.best_adv[i] = run.best_adv[pos]
                warm[i] = run.best_adv[pos] - images[i]
                tau[i] = 0.9 * min(tau[i], float(run.best_dist[pos]))
                if tau[i] >= _TAU_FLOOR:
                    keep.append(i)
            else:
                if not final.success[i] and run.best_f[pos] < final.best_f[i]:
                    final.best_f[i] = run.best_f[pos]
                    final.best_f_adv[i] = run.best_f_adv[pos]
                c[i] *= 2.0
                if c[i] <= spec.c_max:
                    keep.append(i)
        active = np.asarray(keep, dtype=np.int64)
    return final, traces


def cw_attack_batch(net, images: np.ndarray, targets: np.ndarray,
                    spec: AttackSpec, true_labels=None, chunk_size: int = 100):
    """Targeted CW attack over a batch; per-sample c search, one norm.

    ``images`` [n, ...] in [0,1]; ``targets`` [n] target classes.  Samples
    already classified as their target with margin >= kappa short-circuit
    to a zero-distortion success.  Memory is bounded by ``chunk_size``; the
    optimizer never couples samples, so chunking changes results only
    through float reassociation in the underlying matrix kernels.
    """
    if spec.family != "cw":
        raise ValueError(f"spec family is {spec.family!r}, expected cw")
    images = L.as_tensor(images)
    targets = np.asarray(targets, dtype=np.int64)
    n = images.shape[0]
    trues = np.full(n, -1, dtype=np.int64) if true_labels is None \
        else np.asarray(true_labels, dtype=np.int64)
    results: list[AdversarialResult | None] = [None] * n

    probs, logits = net.encode_batch(images)
    work = []
    for i in range(n):
        f0 = cw_objective_f(logits[i], int(targets[i]), spec.kappa)
        # already the predicted class with the full kappa margin: delta = 0
        if f0 <= -spec.kappa and int(np.argmax(probs[i])) == targets[i]:
            results[i] = AdversarialResult(
                adversarial_input=images[i].copy(), success=True,
                achieved_class=int(targets[i]),
                distortion_norms=(0.0, 0.0, 0.0), iterations_used=0,
                true_label=int(trues[i]), target=int(targets[i]),
                original_index=i)
        else:
            work.append(i)

    runner = {"l2": _cw_l2_batch, "l0": _cw_l0_batch, "linf": _cw_linf_batch}[spec.norm]
    for start in range(0, len(work), chunk_size):
        idx = np.asarray(work[start:start + chunk_size], dtype=np.int64)
        xs, ts = images[idx], targets[idx]
        out, tr = runner(net, xs, ts, spec)
        for pos, i in enumerate(idx):
            if out.success[pos]:
                adv = out.best_adv[pos]
                if spec.norm == "l0":
                    # drop the tanh-clip residue so the nonzero count is honest
                    residue = np.abs(adv - xs[pos]) <= 2.0 * _BOX_EPS
                    adv = np.where(residue, xs[pos], adv)
            elif np.isfinite(out.best_f[pos]):
                adv = out.best_f_adv[pos]       # best effort, flagged failed
            else:
                adv = xs[pos].copy()
            adv = np.clip(adv, 0.0, 1.0)
            ok = bool(out.success[pos]) and _verify_success(
                net, adv, int(ts[pos]), spec.kappa)
            results[i] = AdversarialResult(
                adversarial_input=adv, success=ok,
                achieved_class=net.decode(adv),
                distortion_norms=distortion_norms(adv - xs[pos]),
                iterations_used=int(out.iterations[pos]),
                true_label=int(trues[i]), target=int(ts[pos]),
                original_index=int(i), c_trace=list(tr[pos]))
    return results


def cw_attack(net, x: np.ndarray, target: int, spec: AttackSpec) -> AdversarialResult:
    """Single-input CW attack.

    Targeted mode: ``target`` is the class to reach.  Non-targeted mode:
    ``target`` is the TRUE label; the attack runs targeted against every
    other class and keeps the smallest-norm success.
    """
    x = L.as_tensor(x)
    if spec.mode == "targeted":
        return cw_attack_batch(net, x[None], np.array([target]), spec)[0]
    label = int(target)
    others = [j for j in range(net.num_classes) if j != label]
    batch = np.repeat(x[None], len(others), axis=0)
    outs = cw_attack_batch(net, batch, np.array(others), spec)
    norm_index = {"l0": 0, "l2": 1, "linf": 2}[spec.norm]
    wins = [r for r in outs if r.success]
    pool = wins if wins else outs
    best = min(pool, key=lambda r: r.distortion_norms[norm_index])
    return AdversarialResult(
        adversarial_input=best.adversarial_input, success=best.success,
        achieved_class=best.achieved_class,
        distortion_norms=best.distortion_norms,
        iterations_used=sum(r.iterations_used for r in outs),
        true_label=label, target=best.target if best.success else -1,
        original_index=-1, c_trace=best.c_trace)


def check_c_monotonicity(c_trace) -> bool:
    """Success indicator must be non-decreasing when ordered by c."""
    ordered = sorted(c_trace, key=lambda cs: (cs[0], cs[1]))
    seen_success = False
    for _, ok in ordered:
        if seen_success and not ok:
            return False
        seen_success = seen_success or ok
    return True


def pick_targets(labels: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-random target != true label, per sample."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.empty_like(labels)
    for i, y in enumerate(labels):
        u = uniform_vector(derive_seed(seed, i), 1)[0]
        j = int(u * (num_classes - 1))
        out[i] = j if j < y else j + 1
    return out


# -- adversarial batch file ---------------------------------------------------

BATCH_MAGIC = b"PADV"
BATCH_VERSION = 1


def save_adversarial_batch(results: list[AdversarialResult], spec: AttackSpec) -> bytes:
    if not results:
        raise ValueError("empty result list")
    shape = results[0].adversarial_input.shape
    buf = io.BytesIO()
    buf.write(BATCH_MAGIC)
    buf.write(struct.pack("<H", BATCH_VERSION))
    buf.write(struct.pack("<I", len(results)))
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    echo = json.dumps(spec.echo(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    for r in results:
        if r.adversarial_input.shape != shape:
            raise ValueError(
                f"inconsistent sample shape {r.adversarial_input.shape} vs {shape}")
        buf.write(struct.pack("<qqqB", r.original_index, r.true_label,
                              r.target, 1 if r.success else 0))
        buf.write(struct.pack("<3d", *(float(v) for v in r.distortion_norms)))
        buf.write(struct.pack("<I", r.iterations_used))
        buf.write(np.ascontiguousarray(r.adversarial_input, dtype="<f8").tobytes())
    return buf.getvalue()


def load_adversarial_batch(data: bytes):
    """Returns (results, AttackSpec rebuilt from the stored echo)."""
    off = 0

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(data):
            raise BatchFormatError(
                f"truncated batch stream: needed {nbytes} bytes at offset {off}, "
                f"have {len(data) - off}")
        chunk = data[off:off + nbytes]
        off += nbytes
        return chunk

    if take(4) != BATCH_MAGIC:
        raise BatchFormatError(f"bad magic at offset 0: expected {BATCH_MAGIC!r}")
    (version,) = struct.unpack("<H", take(2))
    if version != BATCH_VERSION:
        raise BatchFormatError(f"unsupported batch version {version} at offset 4")
    (count,) = struct.unpack("<I", take(4))
    (ndim,) = struct.unpack("<B", take(1))
    shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
    (elen,) = struct.unpack("<I", take(4))
    echo = json.loads(take(elen).decode())
    per = int(np.prod(shape))
    results = []
    for _ in range(count):
        oi, tl, tg, ok = struct.unpack("<qqqB", take(25))
        norms = struct.unpack("<3d", take(24))
        (iters,) = struct.unpack("<I", take(4))
        tensor = np.frombuffer(take(8 * per), dtype="<f8").astype(np.float64)
        results.append(AdversarialResult(
            adversarial_input=tensor.reshape(shape), success=bool(ok),
            achieved_class=-1, distortion_norms=tuple(norms),
            iterations_used=iters, true_label=int(tl), target=int(tg),
            original_index=int(oi)))
    if off != len(data):
        raise BatchFormatError(f"{len(data) - off} trailing bytes at offset {off}")
    try:
        spec = AttackSpec(**echo)
    except (TypeError, ValueError) as exc:
        raise BatchFormatError(f"stored attack spec does not validate: {exc}") from None
    return results, spec


def save_adversarial_batch_file(path, results, spec) -> None:
    with open(path, "wb") as fh:
        fh.write(save_adversarial_batch(results, spec))


def load_adversarial_batch_file(path):
    with open(path, "rb") as fh:
        return load_adversarial_batch(fh.read())
