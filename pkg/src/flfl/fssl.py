"""Pseudo-labelling, adaptive thresholds, sharpness-aware consistency and local training."""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from flfl import counters
from flfl import nn_core as nn
from flfl.data import AugmentConfig, strong_augment, weak_augment


class ClientTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PseudoLabelTable:
    """Global-model predictions on one client's data, fixed for the round."""

    probs: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray

    def __len__(self):
        return self.labels.shape[0]

    @classmethod
    def from_probs(cls, probs):
        probs = np.array(probs, dtype=np.float64)
        # np.argmax returns the lowest index on ties
        labels = probs.argmax(axis=1).astype(np.int64)
        conf = probs[np.arange(len(labels)), labels]
        for a in (probs, labels, conf):
            a.setflags(write=False)
        return cls(probs, labels, conf)


@dataclass(frozen=True)
class ClientThresholds:
    tau: float
    class_dist: np.ndarray
    class_tau: np.ndarray


@dataclass(frozen=True)
class SacrConfig:
    rho: float = 0.1
    tau_f: float = 0.95
    w_a: float = 1.0
    w_cs: float = 1.0
    ell_d: str = "kl"
    mode: str = "sacr"  # sacr | standard_sam | off
    teacher_stopgrad: bool = True
    oracle_correct_only: bool = False
    cs_scope: str = "masked"  # masked | batch

    def __post_init__(self):
        if self.mode not in ("sacr", "standard_sam", "off"):
            raise ValueError(f"unknown SACR mode {self.mode!r}")
        if self.ell_d not in ("kl", "l2"):
            raise ValueError(f"unknown distance {self.ell_d!r}")
        if self.cs_scope not in ("masked", "batch"):
            raise ValueError(f"unknown cs_scope {self.cs_scope!r}")
        if self.rho < 0 or self.w_a < 0 or self.w_cs < 0:
            raise ValueError("rho, w_a and w_cs must be non-negative")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.03
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4


class MomentumSGD:
    """SGD with (Nesterov) momentum and L2 weight decay added to the gradient."""

    def __init__(self, cfg: OptimConfig, lr=None):
        self.cfg = cfg
        self.lr = cfg.lr if lr is None else lr
        self.buf = None

    def step(self, params, grad):
        cfg = self.cfg
        g = grad + cfg.weight_decay * params if cfg.weight_decay else grad
        if cfg.momentum:
            self.buf = g.copy() if self.buf is None else cfg.momentum * self.buf + g
            g = g + cfg.momentum * self.buf if cfg.nesterov else self.buf
        return params - self.lr * g


@dataclass
class ClientTrainReport:
    client_id: int
    params: np.ndarray
    tau: float
    steps: int
    mean_La: float
    mean_Lcs: float
    n_above_adaptive: int
    n_above_fixed: int
    samples_seen: int
    La_trace: list = field(default_factory=list)


# --------------------------------------------------------------------------
# pseudo-labels and thresholds


def generate_pseudo_labels(spec, global_params, bn, features, aug_cfg: AugmentConfig, rng, weak_aug=True):
    """Eval-mode global-model predictions on (weakly augmented) local features."""
    if len(features) == 0:
        raise ValueError("cannot pseudo-label an empty partition")
    nn.check_finite(global_params, "global parameters")
    x = weak_augment(features, aug_cfg, rng) if weak_aug else features
    probs, _ = nn.forward(spec, global_params, bn, x, mode="eval")
    return PseudoLabelTable.from_probs(probs)


def compute_thresholds(table: PseudoLabelTable, C) -> ClientThresholds:
    """Mean confidence as the client threshold, MaxNorm-scaled per class."""
    counters.bump("compute_thresholds")
    if len(table) == 0:
        raise ValueError("empty pseudo-label table")
    if table.probs.shape[1] != C:
        raise ValueError(f"table has {table.probs.shape[1]} classes, expected {C}")
    tau = float(table.confidence.mean())
    class_dist = table.probs.mean(axis=0)
    return ClientThresholds(tau, class_dist, maxnorm_class_thresholds(class_dist, tau))


def maxnorm_class_thresholds(class_dist, tau):
    """Scale ``class_dist`` so its largest entry is 1, then multiply by ``tau``."""
    class_dist = np.asarray(class_dist, dtype=np.float64)
    class_tau = class_dist / class_dist.max() * tau
    # the argmax class gets exactly tau, not tau * (m / m) rounding
    class_tau[int(np.argmax(class_dist))] = tau
    return class_tau


def fixed_thresholds(tau, C) -> ClientThresholds:
    return ClientThresholds(float(tau), np.full(C, 1.0 / C), np.full(C, float(tau)))


def adaptive_mask(confidence, labels, class_tau):
    return confidence > class_tau[labels]


def unsup_loss_La(Q, labels, confidence, thresholds: ClientThresholds):
    """Cross-entropy of strong-view outputs against pseudo-labels passing their class threshold.

    Normalised by the full batch size.
    """
    if Q.shape[0] != len(labels) or len(labels) != len(confidence):
        raise ValueError("batch rows do not align with pseudo-label rows")
    mask = adaptive_mask(confidence, labels, thresholds.class_tau)
    loss, dlogits = nn.cross_entropy_grad(Q, labels, mask)
    return loss, mask, dlogits


# --------------------------------------------------------------------------
# sharpness-aware terms


def _bn_mode(bn):
    # BN normalises with the batch unless fixed statistics are supplied
    return "train" if bn is None else "eval"


@dataclass
class PerturbResult:
    eps: Optional[np.ndarray]
    L_p: float
    mask: np.ndarray


def _fixed_mask(confidence, labels, cfg, oracle_labels):
    mask = confidence > cfg.tau_f
    if cfg.oracle_correct_only:
        if oracle_labels is None:
            raise ValueError("oracle_correct_only needs the metrics label channel")
        mask &= labels == oracle_labels
    return mask


def sam_perturb(grad, rho):
    """``rho * grad / ||grad||``, or None for a zero gradient."""
    norm = nn.param_norm(grad)
    if norm == 0.0:
        return None
    return nn.param_scale(rho / norm, grad)


def sam_gradient(grad_fn, w, rho):
    """Gradient of ``grad_fn``'s loss at the SAM-perturbed point ``w + eps``."""
    eps = sam_perturb(grad_fn(w), rho)
    if eps is None:
        return np.zeros_like(w)
    return grad_fn(w + eps)


def perturbation(spec, params, cache, labels, confidence, cfg: SacrConfig, oracle_labels=None):
    """Weight perturbation of norm rho along the high-confidence pseudo-label loss gradient.

    Returns ``eps=None`` when the mask is empty or the gradient vanishes.
    """
    mask = _fixed_mask(confidence, labels, cfg, oracle_labels)
    if not mask.any():
        return PerturbResult(None, 0.0, mask)
    L_p, dlogits = nn.cross_entropy_grad(cache.probs, labels, mask)
    g = nn.backward_logits(spec, params, cache, dlogits)
    return PerturbResult(sam_perturb(g, cfg.rho), L_p, mask)


def _distance(cfg, target, probs, weights, wrt):
    fn = nn.kl_grad if cfg.ell_d == "kl" else nn.l2_grad
    if wrt == "q":
        return fn(target, probs, weights, wrt="q")
    return fn(probs, target, weights, wrt="p")


def _sacr_terms(spec, params, cache, batch, labels, confidence, cfg, oracle_labels=None, bn=None):
    """Consistency loss, its logit-gradient on the unperturbed pass and any extra
    parameter gradient from the perturbed pass."""
    pert = perturbation(spec, params, cache, labels, confidence, cfg, oracle_labels)
    if pert.eps is None:
        return 0.0, None, None, pert
    w_pert = params + pert.eps
    Q_star, cache_star = nn.forward(spec, w_pert, bn, batch, mode=cache.mode)
    if not np.all(np.isfinite(Q_star)):
        raise nn.NonFiniteError("non-finite perturbed forward")
    weights = pert.mask.astype(np.float64) if cfg.cs_scope == "masked" else None
    L_cs, dlogits_q = _distance(cfg, Q_star, cache.probs, weights, "q")
    extra = None
    if not cfg.teacher_stopgrad:
        _, dlogits_star = _distance(cfg, cache.probs, Q_star, weights, "p")
        extra = nn.backward_logits(spec, w_pert, cache_star, dlogits_star)
    return L_cs, dlogits_q, extra, pert


def sacr_step(spec, params, batch, labels, confidence, cfg: SacrConfig, oracle_labels=None, bn=None):
    """Consistency between the model and its sharpness-perturbed copy on one strong batch.

    Returns ``(L_cs, grad_cs, eps_norm)``; ``eps_norm`` is None when no
    perturbation took place.
    """
    counters.bump("sacr_step")
    _, cache = nn.forward(spec, params, bn, batch, mode=_bn_mode(bn))
    L_cs, dlogits_q, extra, pert = _sacr_terms(spec, params, cache, batch, labels, confidence, cfg, oracle_labels, bn)
    if dlogits_q is None:
        return 0.0, np.zeros_like(params), None
    grad = nn.backward_logits(spec, params, cache, dlogits_q)
    if extra is not None:
        grad += extra
    return L_cs, grad, nn.param_norm(pert.eps)


def standard_sam_step(spec, params, batch, labels, confidence, cfg: SacrConfig, oracle_labels=None, cache=None, bn=None):
    """Gradient of the high-confidence pseudo-label loss at the perturbed weights."""
    counters.bump("standard_sam_step")
    if cache is None:
        _, cache = nn.forward(spec, params, bn, batch, mode=_bn_mode(bn))
    pert = perturbation(spec, params, cache, labels, confidence, cfg, oracle_labels)
    if pert.eps is None:
        return np.zeros_like(params)
    w_pert = params + pert.eps
    probs, cache_star = nn.forward(spec, w_pert, bn, batch, mode=cache.mode)
    _, dlogits = nn.cross_entropy_grad(probs, labels, pert.mask)
    return nn.backward_logits(spec, w_pert, cache_star, dlogits)


# --------------------------------------------------------------------------
# local training


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def client_local_train(
    spec,
    global_params,
    features,
    table: PseudoLabelTable,
    thresholds: ClientThresholds,
    cfg: SacrConfig,
    opt_cfg: OptimConfig,
    epochs,
    rng,
    aug_cfg: AugmentConfig,
    lr=None,
    batch_size=32,
    client_id=-1,
    oracle_labels=None,
    bn=None,
):
    """Train a copy of the global model on one client's unlabeled data.

    Pseudo-labels and thresholds stay fixed for all epochs. ``oracle_labels``
    is read only when ``cfg.oracle_correct_only`` is set. With ``bn`` given,
    batch norm uses those fixed statistics; otherwise the batch's own.
    """
    if len(table) != len(features):
        raise ValueError("pseudo-label table does not match the partition")
    if cfg.oracle_correct_only and oracle_labels is None:
        raise ValueError("oracle_correct_only needs the metrics label channel")
    params = np.array(global_params, dtype=np.float64)
    opt = MomentumSGD(opt_cfg, lr)
    mode = _bn_mode(bn)
    steps = seen = n_adapt = n_fixed = 0
    sum_La = sum_Lcs = 0.0
    trace = []
    for epoch in range(epochs):
        for idx in _batches(len(features), batch_size, rng):
            x = strong_augment(features[idx], aug_cfg, rng)
            labels = table.labels[idx]
            conf = table.confidence[idx]
            oracle = oracle_labels[idx] if cfg.oracle_correct_only else None

            Q, cache = nn.forward(spec, params, bn, x, mode=mode)
            L_a, mask_a, dlogits = unsup_loss_La(Q, labels, conf, thresholds)
            dlogits = cfg.w_a * dlogits
            extra = None
            L_cs = 0.0
            if cfg.mode == "sacr":
                L_cs, d_cs, extra_cs, pert = _sacr_terms(spec, params, cache, x, labels, conf, cfg, oracle, bn)
                n_fixed += int(pert.mask.sum())
                if d_cs is not None:
                    dlogits = dlogits + cfg.w_cs * d_cs
                    if extra_cs is not None:
                        extra = cfg.w_cs * extra_cs
            elif cfg.mode == "standard_sam":
                n_fixed += int(_fixed_mask(conf, labels, cfg, oracle).sum())
                extra = cfg.w_cs * standard_sam_step(spec, params, x, labels, conf, cfg, oracle, cache=cache, bn=bn)

            grad = nn.backward_logits(spec, params, cache, dlogits)
            if extra is not None:
                grad += extra
            params = opt.step(params, grad)
            if not np.all(np.isfinite(params)):
                raise ClientTrainingError(
                    f"client {client_id}: non-finite parameters at epoch {epoch}, step {steps}"
                )
            steps += 1
            seen += len(idx)
            n_adapt += int(mask_a.sum())
            sum_La += L_a
            sum_Lcs += L_cs
            trace.append(L_a)
    return ClientTrainReport(
        client_id=client_id,
        params=params,
        tau=thresholds.tau,
        steps=steps,
        mean_La=sum_La / steps if steps else 0.0,
        mean_Lcs=sum_Lcs / steps if steps else 0.0,
        n_above_adaptive=n_adapt,
        n_above_fixed=n_fixed,
        samples_seen=seen,
        La_trace=trace,
    )


def server_finetune(spec, params, labeled, epochs, opt_cfg: OptimConfig, rng, aug_cfg: AugmentConfig, lr=None, batch_size=10):
    """Supervised cross-entropy epochs on weakly augmented labeled batches."""
    if len(labeled) == 0:
        raise ValueError("server labeled set is empty")
    params = np.array(params, dtype=np.float64)
    opt = MomentumSGD(opt_cfg, lr)
    for _ in range(epochs):
        for idx in _batches(len(labeled), batch_size, rng):
            x = weak_augment(labeled.features[idx], aug_cfg, rng)
            probs, cache = nn.forward(spec, params, None, x, mode="train")
            _, dlogits = nn.cross_entropy_grad(probs, labeled.labels[idx])
            params = opt.step(params, nn.backward_logits(spec, params, cache, dlogits))
    nn.check_finite(params, "server parameters")
    return params
