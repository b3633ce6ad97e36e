"""Round loop: server fine-tune, sBN refresh, client training, aggregation."""
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from flfl import aggregation as agg
from flfl import counters
from flfl import data as D
from flfl import fssl
from flfl import metrics as M
from flfl import nn_core as nn

log = logging.getLogger(__name__)

# RNG stream identifiers; every generator is keyed by (seed, stream, round, client)
_DATA, _SPLIT, _PARTITION, _TEST, _INIT, _SERVER, _SAMPLE, _PSEUDO, _CLIENT = range(9)

PRESETS = {
    "baseline": dict(thresholding="fixed", fixed_tau=0.95, aggregation="uniform", sacr_mode="off"),
    "cat": dict(thresholding="cat", aggregation="uniform", sacr_mode="off"),
    "cat_sacr": dict(thresholding="cat", aggregation="uniform", sacr_mode="sacr"),
    "full": dict(thresholding="cat", aggregation="lsaa", sacr_mode="sacr"),
    "cat_sam": dict(thresholding="cat", aggregation="uniform", sacr_mode="standard_sam"),
}

REQUIRED = ("num_classes", "input_dim", "num_labeled", "num_unlabeled")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    num_classes: int
    input_dim: int
    num_labeled: int
    num_unlabeled: int
    hidden_dims: tuple = (64, 64)
    use_batch_norm: bool = True
    activation: str = "relu"
    spread: float = 0.5
    center_scale: float = 1.0
    n_test_per_class: int = 100
    num_clients: int = 100
    clients_per_round: int = 10
    rounds: int = 800
    local_epochs: int = 5
    server_epochs: int = 5
    client_batch_size: int = 32
    server_batch_size: int = 10
    lr: float = 0.03
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    server_momentum: float = 0.5
    init_std: float = 0.1
    thresholding: str = "cat"
    fixed_tau: float = 0.95
    aggregation: str = "lsaa"
    sacr_mode: str = "sacr"
    rho: float = 0.1
    tau_f: float = 0.95
    w_a: float = 1.0
    w_cs: float = 1.0
    ell_d: str = "kl"
    teacher_stopgrad: bool = True
    oracle_correct_only: bool = False
    cs_scope: str = "masked"
    partition: str = "dirichlet"
    alpha: float = 0.3
    weak_noise_sigma: float = 0.05
    strong_noise_sigma: float = 0.3
    strong_mask_prob: float = 0.2
    pseudo_label_weak_aug: bool = True
    sbn_scope: str = "all"
    client_bn: str = "batch"
    seed: int = 0
    workers: int = 1
    out_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        self.validate()

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        need(self.num_classes >= 2, "num_classes", "must be >= 2")
        need(self.input_dim >= self.num_classes, "input_dim", "must be >= num_classes")
        need(self.num_labeled >= 1, "num_labeled", "must be >= 1")
        need(self.num_unlabeled >= 1, "num_unlabeled", "must be >= 1")
        need((self.num_labeled + self.num_unlabeled) % self.num_classes == 0, "num_unlabeled",
             "num_labeled + num_unlabeled must be divisible by num_classes")
        need(self.num_clients >= 1, "num_clients", "must be >= 1")
        need(1 <= self.clients_per_round <= self.num_clients, "clients_per_round", "must lie in [1, num_clients]")
        need(self.num_unlabeled >= self.num_clients, "num_unlabeled", "must be >= num_clients")
        need(self.rounds >= 1, "rounds", "must be >= 1")
        need(self.local_epochs >= 0, "local_epochs", "must be >= 0")
        need(self.server_epochs >= 0, "server_epochs", "must be >= 0")
        need(self.client_batch_size >= 1, "client_batch_size", "must be >= 1")
        need(self.server_batch_size >= 1, "server_batch_size", "must be >= 1")
        need(self.lr >= 0, "lr", "must be non-negative")
        need(self.weight_decay >= 0, "weight_decay", "must be non-negative")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(0 <= self.server_momentum < 1, "server_momentum", "must lie in [0, 1)")
        need(self.thresholding in ("cat", "fixed"), "thresholding", "must be 'cat' or 'fixed'")
        need(0 < self.fixed_tau <= 1, "fixed_tau", "must lie in (0, 1]")
        need(self.aggregation in ("lsaa", "uniform"), "aggregation", "must be 'lsaa' or 'uniform'")
        need(self.sacr_mode in ("sacr", "standard_sam", "off"), "sacr_mode", "must be sacr, standard_sam or off")
        need(self.ell_d in ("kl", "l2"), "ell_d", "must be 'kl' or 'l2'")
        need(self.cs_scope in ("masked", "batch"), "cs_scope", "must be 'masked' or 'batch'")
        need(self.rho >= 0, "rho", "must be non-negative")
        need(1.0 / self.num_classes < self.tau_f <= 1, "tau_f", "must lie in (1/C, 1]")
        need(self.partition in ("iid", "dirichlet"), "partition", "must be 'iid' or 'dirichlet'")
        need(self.alpha > 0, "alpha", "must be > 0")
        need(self.sbn_scope in ("all", "selected"), "sbn_scope", "must be 'all' or 'selected'")
        need(self.client_bn in ("batch", "global"), "client_bn", "must be 'batch' or 'global'")
        need(self.workers >= 1, "workers", "must be >= 1")
        need(self.activation in ("relu", "tanh"), "activation", "must be 'relu' or 'tanh'")
        try:
            self.aug_config()
        except ValueError as exc:
            raise ConfigError(f"augmentation: {exc}") from None

    def model_spec(self):
        return nn.ModelSpec(self.input_dim, self.hidden_dims, self.num_classes, self.use_batch_norm, self.activation)

    def aug_config(self):
        return D.AugmentConfig(self.weak_noise_sigma, self.strong_noise_sigma, self.strong_mask_prob)

    def sacr_config(self):
        return fssl.SacrConfig(
            rho=self.rho, tau_f=self.tau_f, w_a=self.w_a, w_cs=self.w_cs, ell_d=self.ell_d,
            mode=self.sacr_mode, teacher_stopgrad=self.teacher_stopgrad,
            oracle_correct_only=self.oracle_correct_only, cs_scope=self.cs_scope,
        )

    def optim_config(self):
        return fssl.OptimConfig(self.lr, self.momentum, self.nesterov, self.weight_decay)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def config_from_dict(d):
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for name in REQUIRED:
        if name not in d:
            raise ConfigError(f"{name}: missing required field")
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    with open(path) as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(d)


def apply_preset(cfg, name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return dataclasses.replace(cfg, **PRESETS[name])


# --------------------------------------------------------------------------


def rng_for(seed, stream, round_=0, client=0):
    return np.random.default_rng(np.random.SeedSequence([seed, stream, round_, client]))


def cosine_lr(base_lr, t, T):
    if not 0 <= t < T:
        raise ValueError("round index outside [0, T)")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / T))


def sample_clients(M_, K_, rng):
    """``K_`` distinct client ids, uniform without replacement, ascending."""
    if K_ > M_:
        raise ValueError(f"cannot select {K_} of {M_} clients")
    return sorted(int(k) for k in rng.choice(M_, size=K_, replace=False))


@dataclass
class Assets:
    labeled: D.Dataset
    partitions: list
    test: D.Dataset


def build_assets(cfg: ExperimentConfig):
    n_per_class = (cfg.num_labeled + cfg.num_unlabeled) // cfg.num_classes
    ds = D.make_blobs(cfg.num_classes, cfg.input_dim, n_per_class, cfg.spread,
                      np.random.SeedSequence([cfg.seed, _DATA]), cfg.center_scale)
    labeled, pool = D.split_labels_at_server(ds, cfg.num_labeled, np.random.SeedSequence([cfg.seed, _SPLIT]))
    part_seed = np.random.SeedSequence([cfg.seed, _PARTITION])
    if cfg.partition == "dirichlet":
        parts = D.dirichlet_partition(pool, cfg.num_clients, cfg.alpha, part_seed)
    else:
        parts = D.iid_partition(pool, cfg.num_clients, part_seed)
    test = D.make_blobs(cfg.num_classes, cfg.input_dim, cfg.n_test_per_class, cfg.spread,
                        np.random.SeedSequence([cfg.seed, _TEST]), cfg.center_scale)
    return Assets(labeled, parts, test)


@dataclass
class RoundState:
    t: int
    params: np.ndarray
    bn: nn.BnStats
    server_opt: agg.ServerOptState
    lr: float = 0.0


def init_state(cfg: ExperimentConfig):
    spec = cfg.model_spec()
    params = nn.init_params(spec, rng_for(cfg.seed, _INIT), cfg.init_std)
    return RoundState(0, params, nn.BnStats.identity(spec), agg.ServerOptState.zeros(spec.num_params, cfg.server_momentum))


def _train_one(cfg, spec, params, bn, part, t, lr):
    aug = cfg.aug_config()
    table = fssl.generate_pseudo_labels(
        spec, params, bn, part.features, aug, rng_for(cfg.seed, _PSEUDO, t, part.client_id),
        weak_aug=cfg.pseudo_label_weak_aug,
    )
    if cfg.thresholding == "cat":
        thr = fssl.compute_thresholds(table, cfg.num_classes)
    else:
        thr = fssl.fixed_thresholds(cfg.fixed_tau, cfg.num_classes)
    report = fssl.client_local_train(
        spec, params, part.features, table, thr, cfg.sacr_config(), cfg.optim_config(),
        cfg.local_epochs, rng_for(cfg.seed, _CLIENT, t, part.client_id), aug, lr=lr,
        batch_size=cfg.client_batch_size, client_id=part.client_id,
        oracle_labels=part.hidden_labels if cfg.oracle_correct_only else None,
        bn=bn if cfg.client_bn == "global" else None,
    )
    mask = fssl.adaptive_mask(table.confidence, table.labels, thr.class_tau)
    return table, mask, report


def _sbn_chunks(cfg, assets, selected=None):
    parts = assets.partitions if selected is None or cfg.sbn_scope == "all" else [assets.partitions[k] for k in selected]
    return [p.features for p in parts] + [assets.labeled.features]


def run_round(state: RoundState, cfg: ExperimentConfig, assets: Assets, executor=None):
    """One communication round; returns ``(new_state, RoundMetrics)``."""
    spec = cfg.model_spec()
    t = state.t
    lr = cosine_lr(cfg.lr, t, cfg.rounds)
    opt = cfg.optim_config()
    aug = cfg.aug_config()

    # (1) server update on labeled data
    params = fssl.server_finetune(
        spec, state.params, assets.labeled, cfg.server_epochs, opt, rng_for(cfg.seed, _SERVER, t), aug,
        lr=lr, batch_size=cfg.server_batch_size,
    )
    # (2) sBN statistics, (3) client sampling
    selected = sample_clients(cfg.num_clients, cfg.clients_per_round, rng_for(cfg.seed, _SAMPLE, t))
    bn = agg.sbn_recompute(spec, params, _sbn_chunks(cfg, assets, selected))

    # (4) local training on frozen copies of the broadcast model
    broadcast = params.copy()
    broadcast.setflags(write=False)
    jobs = [assets.partitions[k] for k in selected]
    try:
        if executor is None:
            results = [_train_one(cfg, spec, broadcast, bn, p, t, lr) for p in jobs]
        else:
            results = list(executor.map(lambda p: _train_one(cfg, spec, broadcast, bn, p, t, lr), jobs))
    except Exception as exc:
        raise RuntimeError(f"round {t}: client training failed: {exc}") from exc

    # (5) aggregation and server momentum step
    reports = [r for _, _, r in results]
    taus = [r.tau for r in reports]
    if cfg.aggregation == "lsaa":
        betas = agg.lsaa_weights(taus)
    else:
        betas = agg.uniform_weights(len(reports))
    aggregated = agg.aggregate([r.params for r in reports], betas)
    new_params, server_opt = agg.server_momentum_step(state.server_opt, params, aggregated)
    nn.check_finite(new_params, f"global parameters after round {t}")

    # (6) evaluation with fresh sBN statistics
    eval_bn = agg.sbn_recompute(spec, new_params, _sbn_chunks(cfg, assets, selected))
    acc = M.test_accuracy(spec, new_params, eval_bn, assets.test.features, assets.test.labels)

    # (7) diagnostics
    pl = M.pseudo_label_metrics(
        [tab.labels for tab, _, _ in results], [m for _, m, _ in results], [p.hidden_labels for p in jobs]
    )
    rec = M.RoundMetrics(
        round=t,
        test_accuracy=acc,
        pseudo_label_accuracy=pl.pseudo_label_accuracy,
        label_ratio=pl.label_ratio,
        correct_label_ratio=pl.correct_ratio,
        wrong_label_ratio=pl.wrong_ratio,
        cw_ratio=pl.cw_ratio,
        mean_La=float(np.mean([r.mean_La for r in reports])),
        mean_Lcs=float(np.mean([r.mean_Lcs for r in reports])),
        taus=[float(x) for x in taus],
        betas=[float(b) for b in betas],
        clients=list(selected),
    )
    return RoundState(t + 1, new_params, eval_bn, server_opt, lr), rec


@dataclass
class RunResult:
    records: list
    params: np.ndarray
    bn: nn.BnStats
    counters: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, out_dir=None, assets=None, progress=False):
    """Build data, run every round and (if ``out_dir`` is set) write the
    metrics log, final checkpoint and the resolved config."""
    out_dir = out_dir if out_dir is not None else cfg.out_dir
    assets = assets or build_assets(cfg)
    state = init_state(cfg)
    before = counters.snapshot()
    writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        writer = M.MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    records = []
    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for _ in range(cfg.rounds):
            state, rec = run_round(state, cfg, assets, executor)
            records.append(rec)
            if writer:
                writer.append(rec)
            if progress and (rec.round % 10 == 0 or rec.round == cfg.rounds - 1):
                log.info("round %d acc %.4f plabel_acc %.4f label_ratio %.4f", rec.round,
                         rec.test_accuracy, rec.pseudo_label_accuracy, rec.label_ratio)
    finally:
        if executor:
            executor.shutdown()
        if writer:
            writer.close()
    if out_dir:
        nn.save_checkpoint(os.path.join(out_dir, "final.params"), state.params, state.bn)
    after = counters.snapshot()
    used = {k: after.get(k, 0) - before.get(k, 0) for k in after}
    return RunResult(records, state.params, state.bn, used)
