"""Training orchestration: splits, pair sampling, both training phases.

The self-supervised phase trains on K-means pseudo-labels over the
model's own fused features, re-clustered at epoch 1 and on every
refinement period. The supervised phase fine-tunes on true labels. In
both, the pairwise confusion loss is reweighted each epoch by the
normalized confusion matrix computed on the held-out update split at the
end of the previous epoch (cold start: all-ones weights).
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import losses
from .clustering import assign_to_centroids, kmeans, should_refine
from .confusion import (
    ConfusionMatrix,
    argmax_pair,
    build_confusion_matrix,
    confusion_stats,
    normalize_confusion,
)
from .dataio import EmbeddingTable
from .exceptions import ConfigError, SamplingError, StratificationError
from .model import AdamState, FusionModel, adam_step
from .numeric import make_rng


@dataclass
class TrainConfig:
    """All hyperparameters, ablation switches, and seeds.

    Defaults follow the documented large-scale recipe (Adam at 1e-4,
    batch 32, 20 K-means restarts, refinement every 10 epochs); desk-scale
    runs override sizes and learning rate in the config file.
    """

    seed: int = 0
    selfsup_epochs: int = 0
    supervised_epochs: int = 30
    batch_size: int = 32
    pair_batch_size: int = 32
    kmeans_k: int = 16  # bump for large corpora; desk scale uses 16
    kmeans_restarts: int = 20
    refinement_period: int = 10
    update_fraction: float = 0.2
    eval_fraction: float = 0.2
    coef_classification: float = 1.0
    coef_infonce: float = 1.0
    coef_confusion: float = 1.0
    no_confusion_loss: bool = False
    no_dynamic_weighting: bool = False
    no_infonce: bool = False
    no_refinement: bool = False
    no_cluster_guidance: bool = False
    pair_temperature: float = 0.5
    infonce_temperature: float = 0.07
    positive_fraction: float = 0.5
    lr: float = 1e-4
    lr_decay: float = 0.97
    embed_dim: int = 64
    encoder_hidden: int = 64
    fusion_hidden: int = 64
    coverage: float = 0.95
    histogram_bins: int = 40

    def validate(self):
        for name in ("batch_size", "pair_batch_size", "kmeans_k",
                     "kmeans_restarts", "refinement_period", "embed_dim",
                     "encoder_hidden", "fusion_hidden", "histogram_bins"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("update_fraction", "eval_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0,1), got {v}")
        if not 0 <= self.positive_fraction <= 1:
            raise ConfigError("positive_fraction must lie in [0,1]")
        for name in ("selfsup_epochs", "supervised_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_config(text: str) -> TrainConfig:
    """Flat ``key = value`` format, ``#`` comments; unknown keys are a
    hard error naming the key."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown config key: {key}")
        ftype = _CONFIG_FIELDS[key].type
        try:
            if ftype == "bool":
                if val.lower() not in ("true", "false"):
                    raise ValueError(val)
                values[key] = val.lower() == "true"
            elif ftype == "int":
                values[key] = int(val)
            else:
                values[key] = float(val)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {val!r}") from None
    return TrainConfig(**values).validate()


def format_config(config: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}"
             for f in dataclasses.fields(TrainConfig)]
    return "\n".join(lines) + "\n"


@dataclass
class MultimodalDataset:
    """Paired audio/video features with shared labels (-1 = unlabeled)."""

    audio: np.ndarray  # (n, d_a)
    video: np.ndarray  # (n, d_v)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.video = np.asarray(self.video, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.audio.shape[0]

    def subset(self, idx) -> "MultimodalDataset":
        return MultimodalDataset(self.audio[idx], self.video[idx], self.labels[idx])

    @classmethod
    def from_tables(cls, audio: EmbeddingTable, video: EmbeddingTable):
        if audio.n != video.n or not np.array_equal(audio.labels, video.labels):
            raise SamplingError("audio and video tables must share labels")
        return cls(audio.features, video.features, audio.labels)


def split_update_set(dataset: MultimodalDataset, fraction: float,
                     rng: np.random.Generator, eval_fraction: float | None = None):
    """Stratified (train, update, eval) partition; every labeled class must
    land in every split. A fully unlabeled dataset splits uniformly."""
    if eval_fraction is None:
        eval_fraction = fraction
    n = dataset.n
    labels = dataset.labels
    train_idx, update_idx, eval_idx = [], [], []
    groups = ([(-1, np.arange(n))] if (labels < 0).all()
              else [(int(c), np.flatnonzero(labels == c)) for c in np.unique(labels)])
    for cls_id, idx in groups:
        idx = idx[rng.permutation(idx.size)]
        n_upd = round(fraction * idx.size)
        n_ev = round(eval_fraction * idx.size)
        if n_upd < 1 or n_ev < 1 or idx.size - n_upd - n_ev < 1:
            raise StratificationError(
                f"class {cls_id} has {idx.size} samples, too few to stratify")
        update_idx.append(idx[:n_upd])
        eval_idx.append(idx[n_upd:n_upd + n_ev])
        train_idx.append(idx[n_upd + n_ev:])
    order = lambda parts: np.sort(np.concatenate(parts))
    return order(train_idx), order(update_idx), order(eval_idx)


def sample_pair_batch(labels: np.ndarray, batch_size: int,
                      rng: np.random.Generator, positive_fraction: float = 0.5):
    """Index pairs for the pairwise losses.

    Returns (idx_a, idx_b, same_class, class_pair). Class pairs are drawn
    uniformly over the available classes; roughly ``positive_fraction`` of
    the batch is same-class.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    by_class = {int(c): np.flatnonzero(labels == c) for c in classes}
    multi = [c for c in classes if by_class[int(c)].size >= 2]
    if positive_fraction > 0 and not multi:
        raise SamplingError("no class has 2+ samples for positive pairs")
    if positive_fraction < 1 and classes.size < 2:
        raise SamplingError("need 2+ classes for negative pairs")
    idx_a = np.empty(batch_size, dtype=np.int64)
    idx_b = np.empty(batch_size, dtype=np.int64)
    pair = np.empty((batch_size, 2), dtype=np.int64)
    positive = rng.random(batch_size) < positive_fraction
    for k in range(batch_size):
        if positive[k]:
            c = int(multi[rng.integers(len(multi))])
            a, b = rng.choice(by_class[c], size=2, replace=False)
            pair[k] = (c, c)
        else:
            ci, cj = rng.choice(classes.size, size=2, replace=False)
            ci, cj = int(classes[ci]), int(classes[cj])
            a = rng.choice(by_class[ci])
            b = rng.choice(by_class[cj])
            pair[k] = (ci, cj)
        idx_a[k], idx_b[k] = a, b
    return idx_a, idx_b, pair[:, 0] == pair[:, 1], pair


@dataclass
class EpochReport:
    epoch: int
    phase: str  # "selfsup" | "supervised"
    loss_total: float
    loss_classification: float
    loss_infonce: float
    loss_confusion: float
    confusion_mean: float
    confusion_variance: float
    churn: float
    top_pair_raw: tuple
    top_pair_weight: tuple
    wall_seconds: float = 0.0


EPOCH_CSV_COLUMNS = [
    "epoch", "phase", "loss_total", "loss_classification", "loss_infonce",
    "loss_confusion", "confusion_mean", "confusion_variance", "churn",
    "top_pair_raw_i", "top_pair_raw_j", "top_pair_weight_i", "top_pair_weight_j",
]


def _align_labels(old: np.ndarray, new: np.ndarray, k: int) -> np.ndarray:
    """Relabel ``new`` cluster ids to maximize overlap with ``old`` so the
    churn fraction ignores arbitrary cluster numbering."""
    contingency = np.zeros((k, k))
    for o, n in zip(old, new):
        contingency[n, o] += 1
    rows, cols = linear_sum_assignment(-contingency)
    mapping = np.arange(k)
    mapping[rows] = cols
    return mapping[new]


class Trainer:
    """Owns the model, optimizer, splits, and the per-epoch weight matrix."""

    def __init__(self, config: TrainConfig, dataset: MultimodalDataset,
                 model: FusionModel | None = None):
        config.validate()
        self.config = config
        self.dataset = dataset
        self.rng = make_rng(config.seed)
        split_rng = make_rng(config.seed + 1)
        self.train_idx, self.update_idx, self.eval_idx = split_update_set(
            dataset, config.update_fraction, split_rng, config.eval_fraction)
        self.model = model
        self.reports: list[EpochReport] = []

    # -- helpers -----------------------------------------------------------

    def _ensure_model(self, num_classes: int):
        cfg = self.config
        if self.model is None:
            self.model = FusionModel(
                audio_dim=self.dataset.audio.shape[1],
                video_dim=self.dataset.video.shape[1],
                embed_dim=cfg.embed_dim, encoder_hidden=cfg.encoder_hidden,
                fusion_hidden=cfg.fusion_hidden, num_classes=num_classes,
                seed=cfg.seed + 2)
        elif self.model.num_classes != num_classes:
            self.model.reset_classifier(num_classes, seed=cfg.seed + 3)
        return self.model

    def _fused(self, idx) -> np.ndarray:
        cache = self.model.forward(self.dataset.audio[idx], self.dataset.video[idx])
        return cache.fused

    def _new_adam(self) -> AdamState:
        return AdamState(shapes=[p.shape for p in self.model.parameters()],
                         lr=self.config.lr)

    def _coefficients(self, phase: str) -> dict:
        cfg = self.config
        coefs = {
            "classification": cfg.coef_classification,
            "info_nce": 0.0 if cfg.no_infonce else cfg.coef_infonce,
            "confusion": 0.0 if cfg.no_confusion_loss else cfg.coef_confusion,
        }
        if phase == "selfsup" and cfg.no_cluster_guidance:
            coefs["classification"] = 0.0
            coefs["confusion"] = 0.0
        return coefs

    def _train_step(self, labels_for_cls: np.ndarray, m_hat: np.ndarray,
                    adam: AdamState, coefs: dict, step_rng: np.random.Generator):
        """One optimizer step over a fresh batch of the train split."""
        cfg = self.config
        n = self.train_idx.size
        base = step_rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        use_pairs = coefs["confusion"] > 0
        if use_pairs:
            pa, pb, same, pair = sample_pair_batch(
                labels_for_cls, min(cfg.pair_batch_size, n), step_rng,
                cfg.positive_fraction)
            union = np.unique(np.concatenate([base, pa, pb]))
        else:
            union = np.unique(base)
        pos = {int(g): k for k, g in enumerate(union)}
        rows = self.train_idx[union]
        cache = self.model.forward(self.dataset.audio[rows], self.dataset.video[rows])
        base_rows = np.array([pos[int(g)] for g in base])

        components = {}
        d_logits = np.zeros_like(cache.logits)
        d_fused = np.zeros_like(cache.fused)
        d_aemb = np.zeros_like(cache.audio_emb)
        d_vemb = np.zeros_like(cache.video_emb)

        if coefs["classification"] > 0:
            ce = losses.cross_entropy(cache.logits[base_rows], labels_for_cls[base])
            components["classification"] = ce
            np.add.at(d_logits, base_rows,
                      coefs["classification"] * ce.gradients["logits"])
        if coefs["info_nce"] > 0 and base_rows.size >= 2:
            nce = losses.info_nce(cache.audio_emb[base_rows],
                                  cache.video_emb[base_rows],
                                  cfg.infonce_temperature)
            components["info_nce"] = nce
            np.add.at(d_aemb, base_rows, coefs["info_nce"] * nce.gradients["anchors"])
            np.add.at(d_vemb, base_rows, coefs["info_nce"] * nce.gradients["positives"])
        if use_pairs:
            rows_a = np.array([pos[int(g)] for g in pa])
            rows_b = np.array([pos[int(g)] for g in pb])
            batch = losses.PairBatch(
                features_a=cache.fused[rows_a], features_b=cache.fused[rows_b],
                same_class=same, class_pair=pair)
            conf = losses.dynamic_confusion_loss(batch, m_hat, cfg.pair_temperature)
            components["confusion"] = conf
            np.add.at(d_fused, rows_a, coefs["confusion"] * conf.gradients["features_a"])
            np.add.at(d_fused, rows_b, coefs["confusion"] * conf.gradients["features_b"])

        grads, _, _ = self.model.backward(
            cache, d_logits, d_fused=d_fused, d_audio_emb=d_aemb, d_video_emb=d_vemb)
        adam_step(self.model.parameters(), grads, adam)
        self.model.version += 1
        return {name: lv.value for name, lv in components.items()}

    def _update_split_matrix(self, labels_update: np.ndarray):
        """Confusion matrix over fused features of the update split."""
        fused = self._fused(self.update_idx)
        table = EmbeddingTable(labels=labels_update, features=fused)
        matrix = build_confusion_matrix(table, self.config.coverage)
        matrix.normalized = normalize_confusion(matrix.raw)
        return matrix

    def _run_epochs(self, phase: str, epochs: int, labels_provider,
                    update_labels_provider, adam: AdamState):
        """Shared epoch loop.

        labels_provider(epoch) -> (labels over train split, churn, C);
        update_labels_provider() -> labels over update split (or None when
        no labels exist, which skips the confusion matrix).
        """
        cfg = self.config
        c_weights = None  # normalized matrix applied next epoch
        raw_top = (0, 1)
        for epoch in range(1, epochs + 1):
            start = time.monotonic()
            adam.lr = cfg.lr * cfg.lr_decay ** (epoch - 1)
            labels_train, churn, num_classes = labels_provider(epoch)
            coefs = self._coefficients(phase)
            if labels_train is None:
                coefs["classification"] = 0.0
                coefs["confusion"] = 0.0
            m_hat = (np.ones((num_classes, num_classes))
                     if c_weights is None or c_weights.shape[0] != num_classes
                     else c_weights)
            applied_top = argmax_pair(m_hat) if num_classes >= 2 else (0, 1)
            steps = max(1, math.ceil(self.train_idx.size / cfg.batch_size))
            sums = {"classification": 0.0, "info_nce": 0.0, "confusion": 0.0}
            step_rng = make_rng(cfg.seed + 1000 * (1 if phase == "selfsup" else 2)
                                + epoch)
            for _ in range(steps):
                vals = self._train_step(labels_train, m_hat, adam, coefs, step_rng)
                for k, v in vals.items():
                    sums[k] += v
            means = {k: v / steps for k, v in sums.items()}

            labels_update = update_labels_provider()
            if labels_update is not None and np.unique(labels_update).size >= 2:
                matrix = self._update_split_matrix(labels_update)
                stats = confusion_stats(matrix, cfg.histogram_bins)
                raw_top = argmax_pair(matrix.raw)
                if not cfg.no_dynamic_weighting:
                    c_weights = matrix.normalized
                conf_mean, conf_var = stats.mean, stats.variance
            else:
                conf_mean = conf_var = float("nan")
            self.reports.append(EpochReport(
                epoch=epoch, phase=phase,
                loss_total=sum(coefs[k] * means[k] for k in means),
                loss_classification=means["classification"],
                loss_infonce=means["info_nce"],
                loss_confusion=means["confusion"],
                confusion_mean=conf_mean, confusion_variance=conf_var,
                churn=churn,
                top_pair_raw=raw_top, top_pair_weight=applied_top,
                wall_seconds=time.monotonic() - start,
            ))

    # -- phases ------------------------------------------------------------

    def run_selfsupervised_phase(self):
        """Pseudo-label pretraining; refines clusters at epoch 1 and on
        every refinement period unless disabled."""
        cfg = self.config
        state = {"pseudo": None, "centroids": None, "churn": 0.0}
        self._ensure_model(cfg.kmeans_k)
        adam = self._new_adam()

        def labels_provider(epoch):
            state["churn"] = 0.0
            if cfg.no_cluster_guidance:
                return None, 0.0, cfg.kmeans_k
            refresh = epoch == 1 or (not cfg.no_refinement
                                     and should_refine(epoch, cfg.refinement_period))
            if refresh:
                fused = self._fused(self.train_idx)
                result = kmeans(fused, cfg.kmeans_k, cfg.kmeans_restarts,
                                seed=cfg.seed + 100 + epoch)
                new = result.assignments
                if state["pseudo"] is None:
                    state["churn"] = 1.0
                else:
                    aligned = _align_labels(state["pseudo"], new, cfg.kmeans_k)
                    state["churn"] = float(np.mean(aligned != state["pseudo"]))
                    new = aligned
                state["pseudo"] = new
                state["centroids"] = result.centroids
            return state["pseudo"], state["churn"], cfg.kmeans_k

        def update_labels_provider():
            if state["centroids"] is None:
                return None
            fused = self._fused(self.update_idx)
            return assign_to_centroids(fused, state["centroids"])

        self._run_epochs("selfsup", cfg.selfsup_epochs, labels_provider,
                         update_labels_provider, adam)
        return self.model, self.reports

    def run_supervised_phase(self):
        """Fine-tuning on true labels with per-epoch weight refresh."""
        cfg = self.config
        labels = self.dataset.labels
        if (labels < 0).any():
            raise SamplingError("supervised phase requires fully labeled data")
        classes = np.unique(labels)
        remap = {int(c): k for k, c in enumerate(classes)}
        dense = np.array([remap[int(v)] for v in labels], dtype=np.int64)
        self._ensure_model(classes.size)
        adam = self._new_adam()
        dense_train = dense[self.train_idx]
        dense_update = dense[self.update_idx]
        self._run_epochs(
            "supervised", cfg.supervised_epochs,
            lambda epoch: (dense_train, 0.0, classes.size),
            lambda: dense_update, adam)
        return self.model, self.reports

    def evaluate(self):
        """Top-1 accuracy and per-class prediction counts on the eval split."""
        labels = self.dataset.labels[self.eval_idx]
        classes = np.unique(self.dataset.labels[self.dataset.labels >= 0])
        remap = {int(c): k for k, c in enumerate(classes)}
        dense = np.array([remap[int(v)] for v in labels], dtype=np.int64)
        cache = self.model.forward(self.dataset.audio[self.eval_idx],
                                   self.dataset.video[self.eval_idx])
        pred = np.argmax(cache.logits, axis=1)
        counts = np.zeros((classes.size, self.model.num_classes), dtype=np.int64)
        for t, p in zip(dense, pred):
            counts[t, p] += 1
        stats = None
        if classes.size >= 2:
            table = EmbeddingTable(labels=dense, features=cache.fused)
            matrix = build_confusion_matrix(table, self.config.coverage)
            stats = confusion_stats(matrix, self.config.histogram_bins)
        return float(np.mean(pred == dense)), counts, stats


def run_training(config: TrainConfig, dataset: MultimodalDataset):
    """Both phases in sequence per the config; returns (trainer, reports)."""
    trainer = Trainer(config, dataset)
    if config.selfsup_epochs > 0:
        trainer.run_selfsupervised_phase()
    if config.supervised_epochs > 0:
        trainer.run_supervised_phase()
    return trainer, trainer.reports
