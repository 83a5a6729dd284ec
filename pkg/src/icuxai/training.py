"""Training: loss, optimizer, schedule, rebalancing, CV, and grid search.

The loss is weighted cross-entropy. For training it is computed on the
tape from logits through a log-softmax composition (never materializing
probabilities, so extreme logits stay finite); :func:`cross_entropy` is
the scalar probability-space form used for reporting and testing.

Positives are up-sampled to class parity on the training split only;
validation and test sets are never resampled. Early stopping watches
validation AUC-ROC with a fixed patience and restores the best weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .blocks import Context, ParamStore
from .metrics import auc_pr, auc_roc
from .records import MODALITIES, MultimodalDataset

#: hyperparameter ranges searched per single-modality model. Discrete
#: tuples are exact choices; 2-tuples tagged "range" are inclusive bounds.
SEARCH_SPACE = {
    "events": {
        "batch_size": (128, 256, 512),
        "learning_rate": ("range", 1e-5, 1e-2),
        "dropout": ("range", 0.1, 0.5),
        "encoder_blocks": ("range", 1, 6),
        "heads": (4, 8, 16, 32),
        "class_weight": ("range", 1.0, 3.0),
    },
    "notes": {
        "batch_size": (8, 16, 32),
        "learning_rate": ("range", 1e-5, 1e-4),
        "dropout": ("range", 0.1, 0.5),
        "encoder_blocks": ("range", 5, 10),
        "heads": (4, 8, 16, 32),
        "class_weight": ("range", 1.0, 3.0),
    },
    "vitals": {
        "batch_size": (8, 16, 32),
        "learning_rate": ("range", 1e-5, 1e-3),
        "dropout": ("range", 0.1, 0.5),
        "encoder_blocks": ("range", 1, 4),
        "heads": (4, 8, 16, 32),
        "class_weight": ("range", 1.0, 3.0),
    },
}


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    dropout: float = 0.1
    encoder_blocks: int = 2
    heads: int = 4
    class_weight: float = 1.0
    epochs: int = 30
    seed: int = 0
    upsample: bool = True
    patience: int = 10      # early-stopping patience, epochs without val improvement
    clip_norm: float = 1.0  # global gradient-norm ceiling

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.encoder_blocks < 1 or self.heads < 1:
            raise ValueError("encoder_blocks and heads must be positive")
        if self.class_weight <= 0:
            raise ValueError("class_weight must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.patience < 1:
            raise ValueError("patience must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def validate_search_config(config: TrainConfig, modality: str) -> None:
    """Check a configuration against the searched ranges for a modality."""
    try:
        space = SEARCH_SPACE[modality]
    except KeyError:
        raise ValueError(f"unknown modality {modality!r}; "
                         f"expected one of {sorted(SEARCH_SPACE)}") from None
    for name, allowed in space.items():
        value = getattr(config, name)
        if allowed[0] == "range":
            lo, hi = allowed[1], allowed[2]
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside the searched "
                                 f"[{lo}, {hi}] range for {modality}")
        elif value not in allowed:
            raise ValueError(f"{name}={value} not among the searched choices "
                             f"{allowed} for {modality}")


# --- loss ----------------------------------------------------------------------

def cross_entropy(y: int, y_hat: float, class_weight: float = 1.0) -> float:
    """Weighted cross-entropy of one probability-space prediction.

    ``y_hat`` is the predicted death probability, clamped to
    [1e-12, 1 - 1e-12] before the logs.
    """
    p = min(max(float(y_hat), 1e-12), 1.0 - 1e-12)
    return -(class_weight * y * math.log(p) + (1 - y) * math.log(1.0 - p))


def weighted_ce_from_logits(logits: Tensor, labels: np.ndarray,
                            class_weight: float = 1.0) -> Tensor:
    """Mean weighted cross-entropy on the tape, from (batch, 2) logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    m = ad.max_over_axis(logits, axis=-1, keepdims=True)
    lse = ad.add(ad.log(ad.sum_over_axis(ad.exp(ad.sub(logits, m)),
                                         axis=-1, keepdims=True)), m)
    logp = ad.sub(logits, lse)
    weights = np.where(labels == 1, class_weight, 1.0)
    picker = np.eye(2)[labels] * weights[:, None]
    picked = ad.sum_over_axis(ad.mul(logp, logits.tape.leaf(picker, param=True)))
    return ad.scale(picked, -1.0 / n)


# --- optimizer -------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam. Parameters absent from a step's gradient dict
    are left untouched (ablated encoders receive no updates)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamStore, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for parameter {name!r}")
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray],
                     max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients down so their joint L2 norm is at most max_norm."""
    total = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0.0:
        factor = max_norm / total
        grads = {k: g * factor for k, g in grads.items()}
    return grads, total


def lr_schedule(lr0: float, epoch: int) -> float:
    """Step decay: multiply by 0.98 every 10 epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * 0.98 ** (epoch // 10)


# --- rebalancing and splits ---------------------------------------------------------

def upsample_positives(labels, rng: np.random.Generator) -> np.ndarray:
    """Index array over ``labels`` with positives re-sampled (with
    replacement) to match the negative count, then shuffled."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if pos.size == 0:
        raise ValueError("cannot upsample: no positive records in the training split")
    idx = np.arange(labels.size)
    if pos.size < neg.size:
        extra = rng.choice(pos, size=neg.size - pos.size, replace=True)
        idx = np.concatenate([idx, extra])
    rng.shuffle(idx)
    return idx


@dataclass
class SplitPlan:
    """Stratified k-fold assignment plus the within-train validation rule."""

    folds: np.ndarray       # fold id per record, values in [0, k)
    k: int
    val_fraction: float = 0.2
    seed: int = 0

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train_indices, test_indices) for one fold."""
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} outside [0, {self.k})")
        test = np.flatnonzero(self.folds == fold)
        train = np.flatnonzero(self.folds != fold)
        return train, test

    def train_val(self, fold: int, labels) -> tuple[np.ndarray, np.ndarray]:
        """Split this fold's training portion into fit/validation parts,
        stratified by label."""
        train, _ = self.split(fold)
        labels = np.asarray(labels)
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, fold)))
        fit, val = [], []
        for cls in (0, 1):
            members = train[labels[train] == cls]
            members = members[rng.permutation(members.size)]
            n_val = int(round(self.val_fraction * members.size))
            if members.size > 1:
                n_val = min(max(n_val, 1), members.size - 1)
            val.append(members[:n_val])
            fit.append(members[n_val:])
        return np.sort(np.concatenate(fit)), np.sort(np.concatenate(val))


def make_split_plan(labels, k: int = 5, val_fraction: float = 0.2,
                    seed: int = 0) -> SplitPlan:
    """Assign every record to one of k folds, stratified by label."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k-fold cross-validation needs k >= 2")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 987654321)))
    folds = np.full(labels.size, -1, dtype=np.int64)
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        if members.size < k:
            raise ValueError(f"class {cls} has {members.size} records, "
                             f"cannot stratify into {k} folds")
        members = members[rng.permutation(members.size)]
        folds[members] = np.arange(members.size) % k
    return SplitPlan(folds=folds, k=k, val_fraction=val_fraction, seed=seed)


# --- the training loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float | None = None
    stopped_early: bool = False


def train_model(model, dataset: MultimodalDataset, config: TrainConfig,
                train_idx=None, val_idx=None,
                active: tuple[str, ...] = MODALITIES,
                log_fn=None) -> TrainResult:
    """Optimize ``model`` in place on the given training indices.

    When ``val_idx`` is provided, validation AUC-ROC drives early
    stopping (patience from the config) and the best-epoch weights are
    restored before returning.
    """
    labels = dataset.labels
    train_idx = np.arange(len(dataset)) if train_idx is None \
        else np.asarray(train_idx, dtype=np.int64)
    val_idx = None if val_idx is None else np.asarray(val_idx, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
    if config.upsample:
        pool = train_idx[upsample_positives(labels[train_idx], rng)]
    else:
        pool = train_idx.copy()

    optimizer = Adam()
    result = TrainResult()
    best_auc = -np.inf
    best_state = None
    bad_epochs = 0
    for epoch in range(config.epochs):
        lr = lr_schedule(config.learning_rate, epoch)
        order = rng.permutation(pool.size)
        losses = []
        for start in range(0, pool.size, config.batch_size):
            batch = pool[order[start:start + config.batch_size]]
            ctx = Context(tape=Tape(), params=model.params, rng=rng)
            logits = model.forward(ctx, dataset.events[batch], dataset.notes[batch],
                                   dataset.vitals[batch], active)
            loss = weighted_ce_from_logits(logits, labels[batch], config.class_weight)
            ad.backward(loss)
            grads, _ = clip_global_norm(ctx.param_grads(), config.clip_norm)
            optimizer.step(model.params, grads, lr)
            losses.append(float(loss.data))
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
        if val_idx is not None and val_idx.size:
            probs = model.predict_proba(dataset.events[val_idx], dataset.notes[val_idx],
                                        dataset.vitals[val_idx], active=active)
            val_auc = auc_roc(labels[val_idx], probs[:, 1])
            entry["val_auc"] = val_auc
            if val_auc > best_auc:
                best_auc = val_auc
                best_state = model.params.snapshot()
                result.best_epoch = epoch
                bad_epochs = 0
            else:
                bad_epochs += 1
        result.history.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if val_idx is not None and bad_epochs >= config.patience:
            result.stopped_early = True
            break
    if best_state is not None:
        model.params.restore(best_state)
        result.best_val_auc = float(best_auc)
    return result


def cross_validate(dataset: MultimodalDataset, build_model, config: TrainConfig,
                   plan: SplitPlan, active: tuple[str, ...] = MODALITIES,
                   log_fn=None) -> list[dict]:
    """Train one fresh model per fold; report test-fold metrics.

    ``build_model()`` must return a newly initialized model compatible
    with the dataset. Returns one row per fold with both curve metrics.
    """
    rows = []
    for fold in range(plan.k):
        _, test_idx = plan.split(fold)
        fit_idx, val_idx = plan.train_val(fold, dataset.labels)
        model = build_model()
        train_model(model, dataset, config, fit_idx, val_idx, active, log_fn)
        probs = model.predict_proba(dataset.events[test_idx], dataset.notes[test_idx],
                                    dataset.vitals[test_idx], active=active)
        rows.append({
            "fold": fold,
            "auc_roc": auc_roc(dataset.labels[test_idx], probs[:, 1]),
            "auc_pr": auc_pr(dataset.labels[test_idx], probs[:, 1]),
            "n_test": int(test_idx.size),
        })
    return rows


def grid_search(dataset: MultimodalDataset, configs, build_model, plan: SplitPlan,
                modality: str | None = None,
                active: tuple[str, ...] = MODALITIES,
                csv_path=None, log_fn=None) -> tuple[TrainConfig, list[dict]]:
    """Evaluate every configuration by mean validation AUC-ROC over folds.

    ``build_model(cfg)`` receives the candidate TrainConfig (structural
    fields like encoder_blocks/heads/dropout feed the model). When
    ``modality`` is given, every candidate is checked against that
    modality's searched ranges first. Returns the winning config and the
    full per-(config, fold) results table, optionally also written as CSV.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("empty hyperparameter grid")
    if modality is not None:
        for cfg in configs:
            validate_search_config(cfg, modality)
    rows = []
    scores = []
    for ci, cfg in enumerate(configs):
        fold_aucs = []
        for fold in range(plan.k):
            fit_idx, val_idx = plan.train_val(fold, dataset.labels)
            model = build_model(cfg)
            train_model(model, dataset, cfg, fit_idx, val_idx, active, log_fn)
            probs = model.predict_proba(dataset.events[val_idx], dataset.notes[val_idx],
                                        dataset.vitals[val_idx], active=active)
            roc = auc_roc(dataset.labels[val_idx], probs[:, 1])
            pr = auc_pr(dataset.labels[val_idx], probs[:, 1])
            fold_aucs.append(roc)
            rows.append({"config_index": ci, **cfg.to_dict(),
                         "fold": fold, "auc_roc": roc, "auc_pr": pr})
        scores.append(float(np.mean(fold_aucs)))
    best = int(np.argmax(scores))  # ties resolve to the earliest config
    if csv_path is not None:
        write_results_csv(rows, csv_path)
    return configs[best], rows


def write_results_csv(rows: list[dict], path) -> None:
    """Persist result rows as CSV (full float precision via repr)."""
    if not rows:
        raise ValueError("no result rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in (row[f] for f in fields)])
