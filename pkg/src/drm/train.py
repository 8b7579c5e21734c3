"""Task loss plus soft-martingale penalty, trained with Adam after an ERM warm start."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tg
from .conformal import CONCEPT, DetectionSequence, MartingaleTrace, detect
from .data import LabeledSequence
from .models import Adam, Model
from .soft import SoftConfig, soft_martingale
from .tensor import Node

log = logging.getLogger(__name__)

# stream offsets under the training seed
_SHUFFLE, _SUBSEQ, _XI = 11, 12, 13


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, report=None):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch, self.step, self.report = epoch, step, report


@dataclass
class TrainConfig:
    T: int = 2000
    batch_size: int = 64
    detect_seq_len: int = 1000
    num_detect_seqs: int = 1
    lam: float = 5e5
    sigma: float = 1e-3
    lr: float = 5e-3
    erm_epochs: int = 0
    total_epochs: int = 2
    seed: int = 0
    mode: str = CONCEPT
    gamma: float = 1.0
    sigma_min: float | None = None  # defaults to sigma
    sigma_rank: float | None = None  # defaults to sigma
    redraw: str = "step"  # detection subsequences drawn per "step" or per "epoch"
    alpha: float = 0.01  # level of the post-hoc hard detector

    def __post_init__(self):
        if self.detect_seq_len > self.T:
            raise ValueError(f"detect_seq_len {self.detect_seq_len} exceeds T {self.T}")
        if self.erm_epochs > self.total_epochs:
            raise ValueError("erm_epochs cannot exceed total_epochs")
        if self.redraw not in ("step", "epoch"):
            raise ValueError(f"redraw must be 'step' or 'epoch', got {self.redraw!r}")

    def soft(self) -> SoftConfig:
        return SoftConfig(self.sigma_min or self.sigma, self.sigma_rank or self.sigma,
                          self.gamma, self.mode)


@dataclass
class EpochRecord:
    epoch: int
    lam: float
    task_loss: float
    penalty: float | None
    train_accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    final_trace: MartingaleTrace | None = None
    warm_start_trace: MartingaleTrace | None = None

    def to_dict(self) -> dict:
        def trace(t):
            if t is None:
                return None
            return {"threshold": t.threshold, "triggered_at": t.triggered_at,
                    "max": float(np.max(t.values))}
        return {"epochs": [asdict(e) for e in self.epochs], "train_accuracy": self.train_accuracy,
                "test_accuracy": self.test_accuracy, "final_trace": trace(self.final_trace),
                "warm_start_trace": trace(self.warm_start_trace)}


def _rng(seed: int, offset: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), offset])


def subsample_detection_sequences(T: int, length: int, count: int, rng: np.random.Generator,
                                  labels=None, min_per_class: int = 2,
                                  max_tries: int = 1000) -> list[np.ndarray]:
    """``count`` sorted index arrays of ``length`` distinct indices out of ``range(T)``.

    With ``labels`` given, a draw leaving any class of ``labels`` with fewer
    than ``min_per_class`` members is redrawn.
    """
    if length > T:
        raise ValueError(f"detection length {length} exceeds sequence length {T}")
    if labels is not None:
        labels = np.asarray(labels)
        classes = np.unique(labels)
    out = []
    for _ in range(count):
        for _ in range(max_tries):
            idx = np.sort(rng.choice(T, size=length, replace=False))
            if labels is None:
                break
            counts = (labels[idx][:, None] == classes).sum(axis=0)
            if counts.min() >= min_per_class:
                break
        else:
            raise ValueError("could not draw a subsequence with enough members per class")
        out.append(idx)
    return out


def penalty(model: Model, data: LabeledSequence, subseqs, cfg: TrainConfig) -> Node:
    """Mean over subsequences of the mean soft martingale of their features."""
    soft_cfg = cfg.soft()
    terms = []
    for idx in subseqs:
        phi = model.features(data.inputs[idx])
        labels = data.labels[idx] if cfg.mode == CONCEPT else None
        terms.append(soft_martingale(phi, labels, soft_cfg).mean_penalty)
    return tg.sum_(tg.stack(terms)) * (1.0 / len(terms))


def drm_loss(model: Model, batch_x, batch_y, data: LabeledSequence, subseqs,
             cfg: TrainConfig, lam: float | None = None) -> tuple[Node, Node, Node | None]:
    """Cross-entropy on the batch plus ``lam`` times the martingale penalty.

    Returns (total, task loss, penalty). With ``lam == 0`` the penalty is not
    evaluated at all.
    """
    lam = cfg.lam if lam is None else lam
    ce = tg.softmax_cross_entropy(model(batch_x), batch_y)
    if lam == 0 or not subseqs:
        return ce, ce, None
    pen = penalty(model, data, subseqs, cfg)
    return ce + pen * lam, ce, pen


def evaluate(model: Model, data: LabeledSequence) -> float:
    """Accuracy of argmax predictions; ties go to the lower class index."""
    logits = model.predict_logits(data.inputs)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def training_trace(model: Model, data: LabeledSequence, cfg: TrainConfig) -> MartingaleTrace:
    """Hard detector on the model's features of the whole training sequence."""
    feats = model.feature_values(data.inputs)
    labels = data.labels if cfg.mode == CONCEPT else None
    return detect(DetectionSequence(feats, labels), cfg.alpha, cfg.mode, cfg.gamma,
                  rng=_rng(cfg.seed, _XI))


def train(model: Model, data: LabeledSequence, cfg: TrainConfig,
          test_data: LabeledSequence | None = None, with_traces: bool = True) -> TrainReport:
    """ERM for ``erm_epochs`` epochs, then the full objective until ``total_epochs``.

    Minibatches for the task loss are reshuffled each epoch; detection
    subsequences keep the original order and come from a separate stream, so
    a run with ``lam == 0`` never touches the penalty code.
    """
    T = len(data)
    if cfg.T != T:
        log.debug("config T=%d but data has %d examples; using the data length", cfg.T, T)
    opt = Adam(model.nodes(), lr=cfg.lr)
    shuffle_rng, subseq_rng = _rng(cfg.seed, _SHUFFLE), _rng(cfg.seed, _SUBSEQ)
    concept_labels = data.labels if cfg.mode == CONCEPT else None
    report = TrainReport()
    for epoch in range(cfg.total_epochs):
        lam = 0.0 if epoch < cfg.erm_epochs else cfg.lam
        if epoch == cfg.erm_epochs and with_traces and cfg.lam > 0:
            report.warm_start_trace = training_trace(model, data, cfg)
        order = shuffle_rng.permutation(T)
        subseqs = None
        if lam > 0 and cfg.redraw == "epoch":
            subseqs = subsample_detection_sequences(T, cfg.detect_seq_len, cfg.num_detect_seqs,
                                                    subseq_rng, concept_labels)
        losses, pens = [], []
        for step, start in enumerate(range(0, T, cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            if lam > 0 and cfg.redraw == "step":
                subseqs = subsample_detection_sequences(T, cfg.detect_seq_len, cfg.num_detect_seqs,
                                                        subseq_rng, concept_labels)
            opt.zero_grad()
            try:
                total, ce, pen = drm_loss(model, data.inputs[batch], data.labels[batch],
                                          data, subseqs, cfg, lam)
                total.backward()
            except FloatingPointError:
                raise TrainingDiverged(epoch + 1, step + 1, report) from None
            if not all(np.all(np.isfinite(n.grad)) for n in opt.nodes if n.grad is not None):
                raise TrainingDiverged(epoch + 1, step + 1, report)
            opt.step()
            losses.append(ce.item())
            if pen is not None:
                pens.append(pen.item())
        rec = EpochRecord(epoch + 1, lam, float(np.mean(losses)),
                          float(np.mean(pens)) if pens else None, evaluate(model, data))
        log.info("epoch %d: loss %.4f penalty %s train acc %.3f", rec.epoch, rec.task_loss,
                 rec.penalty, rec.train_accuracy)
        report.epochs.append(rec)
    report.train_accuracy = evaluate(model, data)
    if test_data is not None:
        report.test_accuracy = evaluate(model, test_data)
    if with_traces:
        report.final_trace = training_trace(model, data, cfg)
    return report
