"""Synthetic blobs, labels-at-server split, Dirichlet partitioning, augmentation."""
from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    features: np.ndarray  # [N, input_dim]
    labels: np.ndarray  # [N] int64

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx):
        return Dataset(self.features[idx], self.labels[idx])


LabeledSet = Dataset


@dataclass
class UnlabeledPool:
    """Features for training plus the labels kept aside for metrics."""

    features: np.ndarray
    hidden_labels: np.ndarray

    def __len__(self):
        return self.features.shape[0]


@dataclass
class ClientPartition:
    client_id: int
    features: np.ndarray
    hidden_labels: np.ndarray  # metrics only

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise_sigma: float = 0.05
    strong_noise_sigma: float = 0.3
    strong_mask_prob: float = 0.2

    def __post_init__(self):
        if self.weak_noise_sigma < 0 or self.strong_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.strong_mask_prob <= 1.0:
            raise ValueError("strong_mask_prob must lie in [0, 1]")
        if self.strong_noise_sigma < self.weak_noise_sigma:
            raise ValueError("strong_noise_sigma must be >= weak_noise_sigma")


def blob_centers(C, input_dim, scale=1.0):
    """Cluster centres at the scaled vertices ``scale * e_c`` of the standard simplex."""
    if input_dim < C:
        raise ValueError("input_dim must be >= number of classes for simplex centres")
    centers = np.zeros((C, input_dim))
    centers[np.arange(C), np.arange(C)] = scale
    return centers


def make_blobs(C, input_dim, n_per_class, spread, seed, scale=1.0):
    """Exactly balanced Gaussian clusters, class-major order."""
    if C < 2:
        raise ValueError("C must be >= 2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = blob_centers(C, input_dim, scale)
    labels = np.repeat(np.arange(C, dtype=np.int64), n_per_class)
    noise = rng.standard_normal((C * n_per_class, input_dim))
    features = centers[labels] + spread * noise
    return Dataset(features, labels)


def split_labels_at_server(dataset: Dataset, n_labeled, seed):
    """Split into a small labeled server set and an unlabeled pool.

    When ``n_labeled >= C`` the labeled set is drawn round-robin over classes,
    otherwise uniformly at random.
    """
    n = len(dataset)
    if n_labeled > n:
        raise ValueError(f"n_labeled={n_labeled} exceeds dataset size {n}")
    if n_labeled < 0:
        raise ValueError("n_labeled must be non-negative")
    rng = np.random.default_rng(seed)
    classes = np.unique(dataset.labels)
    if n_labeled >= len(classes):
        per_class = {c: list(rng.permutation(np.flatnonzero(dataset.labels == c))) for c in classes}
        chosen = []
        while len(chosen) < n_labeled:
            for c in classes:
                if len(chosen) == n_labeled:
                    break
                if per_class[c]:
                    chosen.append(per_class[c].pop())
        chosen = np.array(chosen, dtype=np.int64)
    else:
        chosen = rng.choice(n, size=n_labeled, replace=False).astype(np.int64)
    rest = np.setdiff1d(np.arange(n), chosen)
    labeled = dataset.subset(np.sort(chosen))
    pool = UnlabeledPool(dataset.features[rest], dataset.labels[rest])
    return labeled, pool


def _to_partitions(pool, assignment):
    return [
        ClientPartition(k, pool.features[np.asarray(idx, dtype=np.int64)], pool.hidden_labels[np.asarray(idx, dtype=np.int64)])
        for k, idx in enumerate(assignment)
    ]


def _repair_empty(assignment):
    # move one sample from the largest client into each empty one
    for k, idx in enumerate(assignment):
        if len(idx) == 0:
            donor = max(range(len(assignment)), key=lambda j: (len(assignment[j]), -j))
            idx.append(assignment[donor].pop())
    return assignment


def dirichlet_partition(pool: UnlabeledPool, M, alpha, seed):
    """Per class, split the samples over ``M`` clients with Dir(alpha) proportions."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if len(pool) < M:
        raise ValueError(f"pool of {len(pool)} samples cannot fill {M} clients")
    rng = np.random.default_rng(seed)
    assignment = [[] for _ in range(M)]
    for c in np.unique(pool.hidden_labels):
        idx = rng.permutation(np.flatnonzero(pool.hidden_labels == c))
        props = rng.dirichlet(np.full(M, float(alpha)))
        cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
        for k, part in enumerate(np.split(idx, cuts)):
            assignment[k].extend(part.tolist())
    assignment = [sorted(a) for a in assignment]
    return _to_partitions(pool, _repair_empty(assignment))


def iid_partition(pool: UnlabeledPool, M, seed):
    """Uniform random split into ``M`` near-equal shards."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if len(pool) < M:
        raise ValueError(f"pool of {len(pool)} samples cannot fill {M} clients")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pool))
    return _to_partitions(pool, [sorted(s.tolist()) for s in np.array_split(perm, M)])


def weak_augment(features, cfg: AugmentConfig, rng: np.random.Generator):
    features = np.asarray(features, dtype=np.float64)
    if cfg.weak_noise_sigma == 0:
        return features.copy()
    return features + cfg.weak_noise_sigma * rng.standard_normal(features.shape)


def strong_augment(features, cfg: AugmentConfig, rng: np.random.Generator):
    features = np.asarray(features, dtype=np.float64)
    out = features + cfg.strong_noise_sigma * rng.standard_normal(features.shape)
    keep = rng.random(features.shape) >= cfg.strong_mask_prob
    return out * keep


def class_histograms(partitions, C):
    return np.array([np.bincount(p.hidden_labels, minlength=C) for p in partitions])


def dump_partitions(path, partitions):
    """One line per sample: ``client_id,label,feature_0,...``."""
    with open(path, "w") as fh:
        for part in partitions:
            for x, y in zip(part.features, part.hidden_labels):
                fh.write(f"{part.client_id},{int(y)}," + ",".join(format(v, ".17g") for v in x) + "\n")


def load_partitions(path):
    rows = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            cells = line.rstrip("\n").split(",")
            rows.setdefault(int(cells[0]), []).append((int(cells[1]), [float(v) for v in cells[2:]]))
    out = []
    for k in sorted(rows):
        labels = np.array([r[0] for r in rows[k]], dtype=np.int64)
        feats = np.array([r[1] for r in rows[k]], dtype=np.float64)
        out.append(ClientPartition(k, feats, labels))
    return out
