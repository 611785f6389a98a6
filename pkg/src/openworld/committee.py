"""Committee training and the separate stacking model (multinomial logistic regression).

Members are CNNs trained on disjoint splits; the stacker is fit on a held-out
stacking split over the concatenation of all members' per-class scores, every
member entering with identical feature treatment. Certainty is the max of the
stacker's softmax posterior.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .architectures import NetworkBlueprint, blueprint, build_cnn
from .data import CropStore, LabelSet, split_members
from .nn import Network, TrainingError

log = logging.getLogger(__name__)

META_MAGIC = b"OWLR"


class MetaFitError(TrainingError):
    """Stacking-model fit cannot proceed (e.g. a class missing from the split)."""


@dataclass
class CommitteeConfig:
    n_members: int
    architecture: str = "C"
    epochs: int = 10
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    stack_fraction: float = 0.2
    meta_l2: float = 1e-4
    output_activation: str = "sigmoid"
    input_shape: tuple = (64, 64, 3)
    conv_filters: tuple = None
    dense_width: int = 250

    def __post_init__(self):
        if self.n_members < 2:
            raise nn.ParameterError(f"committee needs >= 2 members, got {self.n_members}")
        if self.epochs < 1:
            raise nn.ParameterError(f"epochs must be >= 1, got {self.epochs}")

    def make_blueprint(self, num_classes: int) -> NetworkBlueprint:
        return blueprint(self.architecture, num_classes,
                         input_shape=self.input_shape,
                         conv_filters=self.conv_filters,
                         dense_width=self.dense_width,
                         output_activation=self.output_activation)


@dataclass
class Committee:
    members: list
    label_set: LabelSet
    histories: list          # per-member, per-epoch training accuracy
    member_splits: list      # the CropStores each member trained on
    stacking_split: CropStore

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes


@dataclass(frozen=True)
class Prediction:
    label_id: int
    certainty: float
    meta_posteriors: np.ndarray  # (K,)
    member_scores: np.ndarray    # (N, K)


# ---------------------------------------------------------------------------
# member training

def _as_xy(split: CropStore, num_classes: int):
    x = split.pixels_array(dtype=np.float32)
    t = split.one_hot(num_classes)
    return x, t


def _eval_scores(member: Network, x: np.ndarray, chunk: int = 32) -> np.ndarray:
    outs = [member.predict_scores(x[i:i + chunk]) for i in range(0, len(x), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0, member.num_classes), np.float32)


def fine_tune(net: Network, x: np.ndarray, t: np.ndarray, config: CommitteeConfig,
              rng) -> list:
    """Seeded mini-batch SGD on an existing network; returns per-epoch accuracy
    (fit-history style: running over the epoch's training batches)."""
    labels = t.argmax(axis=1)
    opt = nn.SGD(lr=config.lr, momentum=config.momentum)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        correct = 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            scores = net.forward(x[idx], train=True, rng=rng)
            if net.head.activation == "sigmoid":
                loss, dlogits = nn.bce_loss_batch(scores, t[idx])
            else:
                loss, dlogits = nn.softmax_ce_loss_batch(scores, t[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} "
                                    f"batch {start // config.batch_size}")
            grads = net.backward(dlogits)
            opt.step(net, grads)
            correct += int((scores.argmax(axis=1) == labels[idx]).sum())
        history.append(correct / len(x))
    return history


def train_member(bp: NetworkBlueprint, split: CropStore, config: CommitteeConfig,
                 seed=None):
    """Seeded mini-batch SGD with BCE loss; returns (network, per-epoch accuracy)."""
    if len(split) == 0:
        raise TrainingError("cannot train a member on an empty split")
    labels = split.labels_array()
    if labels.max(initial=0) >= bp.num_classes:
        raise TrainingError(f"split contains label id {labels.max()} outside "
                            f"the {bp.num_classes}-class head")
    rng = np.random.default_rng(seed)
    net = build_cnn(bp, bp.num_classes, seed=rng)
    x, t = _as_xy(split, bp.num_classes)
    history = fine_tune(net, x, t, config, rng)
    return net, history


def derive_splits(store: CropStore, config: CommitteeConfig):
    """The deterministic member/stacking partition train_committee uses.

    Re-running with the same store and config reproduces the exact splits,
    which lets a saved bundle recover its training provenance.
    """
    root = np.random.SeedSequence(config.seed)
    split_seq, *member_seqs = root.spawn(config.n_members + 1)
    member_splits, stacking_split = split_members(
        store, config.n_members, config.stack_fraction, seed=split_seq)
    return member_splits, stacking_split, member_seqs


def train_committee(store: CropStore, config: CommitteeConfig) -> Committee:
    """Split the store, train each member on its share, fit the stacker."""
    member_splits, stacking_split, member_seqs = derive_splits(store, config)
    bp = config.make_blueprint(len(store.label_set))
    members, histories = [], []
    for i, (split, seq) in enumerate(zip(member_splits, member_seqs)):
        net, history = train_member(bp, split, config, seed=seq)
        log.info("member %d/%d trained: final training accuracy %.3f",
                 i + 1, config.n_members, history[-1])
        members.append(net)
        histories.append(history)
    return Committee(members=members, label_set=store.label_set.copy(),
                     histories=histories, member_splits=member_splits,
                     stacking_split=stacking_split)


# ---------------------------------------------------------------------------
# member scores and stacked features

def member_scores(member: Network, sample) -> np.ndarray:
    """Deterministic eval-mode scores (dropout off) for one sample."""
    pixels = sample.pixels if hasattr(sample, "pixels") else np.asarray(sample)
    return member.predict_scores(pixels[None].astype(np.float32))[0]


def committee_features(committee_members, x: np.ndarray) -> np.ndarray:
    """Concatenate every member's eval-mode score vector: (M, N*K)."""
    per_member = [_eval_scores(m, x) for m in committee_members]
    return np.concatenate(per_member, axis=1).astype(np.float64)


# ---------------------------------------------------------------------------
# stacking meta-model

class MetaModel:
    """Multinomial logistic regression over stacked member scores.

    weights has shape (K, N*K + 1); the last column is the bias.
    """

    def __init__(self, weights: np.ndarray, n_members: int):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.n_members = n_members
        k = self.weights.shape[0]
        if self.weights.shape[1] != n_members * k + 1:
            raise nn.DimensionError(
                f"meta weights {self.weights.shape} inconsistent with "
                f"{n_members} members x {k} classes + bias")
        if not np.all(np.isfinite(self.weights)):
            raise TrainingError("non-finite meta-model weights")
        self.loss_history: list = []

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def posteriors(self, features: np.ndarray) -> np.ndarray:
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        z = f @ self.weights[:, :-1].T + self.weights[:, -1]
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def save(self, path):
        k = self.num_classes
        out = bytearray()
        out += META_MAGIC
        out += struct.pack("<HH", k, self.n_members)
        out += np.ascontiguousarray(self.weights, dtype="<f8").tobytes()
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path) -> "MetaModel":
        buf = Path(path).read_bytes()
        if buf[:4] != META_MAGIC:
            raise nn.FormatError(f"bad magic {buf[:4]!r} in {path}")
        k, n = struct.unpack_from("<HH", buf, 4)
        width = n * k + 1
        expected = 8 + k * width * 8
        if len(buf) != expected:
            raise nn.FormatError(f"{path}: expected {expected} bytes, got {len(buf)}")
        weights = np.frombuffer(buf, dtype="<f8", offset=8).reshape(k, width).copy()
        return cls(weights, n)


def _meta_objective(weights, features1, targets, l2):
    """Penalized NLL and gradient; features1 already carries the bias column."""
    m = features1.shape[0]
    z = features1 @ weights.T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    ll = np.log(np.maximum((p * targets).sum(axis=1), nn.LOG_FLOOR))
    loss = -ll.mean() + 0.5 * l2 * float((weights ** 2).sum())
    grad = (p - targets).T @ features1 / m + l2 * weights
    return loss, grad


def fit_logistic(features: np.ndarray, targets: np.ndarray, l2: float = 1e-4,
                 max_iter: int = 500, grad_tol: float = 1e-6):
    """Full-batch gradient descent with Armijo backtracking on the penalized
    softmax likelihood; returns (weights (K, D+1), loss history).

    The objective is convex, so the line search makes the history strictly
    non-increasing and the optimum unique.
    """
    features1 = np.concatenate([np.asarray(features, dtype=np.float64),
                                np.ones((len(features), 1))], axis=1)
    targets = np.asarray(targets, dtype=np.float64)
    k = targets.shape[1]
    weights = np.zeros((k, features1.shape[1]))
    loss, grad = _meta_objective(weights, features1, targets, l2)
    history = [loss]
    step = 1.0
    for _ in range(max_iter):
        gnorm = float(np.sqrt((grad ** 2).sum()))
        if gnorm < grad_tol:
            break
        step = min(step * 2.0, 1e6)
        while True:
            trial = weights - step * grad
            trial_loss, trial_grad = _meta_objective(trial, features1, targets, l2)
            if trial_loss <= loss - 1e-4 * step * gnorm ** 2:
                break
            step *= 0.5
            if step < 1e-18:
                break
        if step < 1e-18:
            break
        weights, loss, grad = trial, trial_loss, trial_grad
        history.append(loss)
    return weights, history


def fit_meta(committee: Committee, stacking_split: CropStore, l2: float = 1e-4,
             max_iter: int = 500, grad_tol: float = 1e-6) -> MetaModel:
    """Fit the stacker on held-out member scores (identical treatment per member)."""
    k = committee.num_classes
    labels = stacking_split.labels_array()
    counts = np.bincount(labels, minlength=k) if len(labels) else np.zeros(k, int)
    for class_id in range(k):
        if class_id < len(committee.label_set):
            name = committee.label_set.name(class_id)
        else:
            name = f"class {class_id}"
        if counts[class_id] == 0:
            raise MetaFitError(f"stacking split has no samples of class {name!r}")
        if counts[class_id] < 5:
            log.warning("stacking split has only %d samples of %r",
                        counts[class_id], name)
    x = stacking_split.pixels_array(dtype=np.float32)
    features = committee_features(committee.members, x)
    targets = stacking_split.one_hot(k).astype(np.float64)
    weights, history = fit_logistic(features, targets, l2, max_iter, grad_tol)
    model = MetaModel(weights, committee.n_members)
    model.loss_history = history
    return model


# ---------------------------------------------------------------------------
# stacked inference and evaluation

def stacked_posteriors(committee: Committee, meta: MetaModel, x: np.ndarray):
    """(posteriors (M,K), member score tensor (M,N,K)) for a pixel batch."""
    features = committee_features(committee.members, x)
    post = meta.posteriors(features)
    scores = features.reshape(len(x), committee.n_members, committee.num_classes)
    return post, scores


def stacked_predict(committee: Committee, meta: MetaModel, sample) -> Prediction:
    pixels = sample.pixels if hasattr(sample, "pixels") else np.asarray(sample)
    post, scores = stacked_posteriors(committee, meta, pixels[None].astype(np.float32))
    label_id = int(post[0].argmax())  # argmax breaks ties at the lowest index
    return Prediction(label_id=label_id, certainty=float(post[0][label_id]),
                      meta_posteriors=post[0], member_scores=scores[0])


@dataclass(frozen=True)
class EvalResult:
    member_accuracies: tuple
    stacked_accuracy: float
    n_samples: int

    def as_row(self, run_id) -> dict:
        row = {"run": run_id}
        row.update({f"m_{i + 1}": acc for i, acc in enumerate(self.member_accuracies)})
        row["stacked"] = self.stacked_accuracy
        return row


def evaluate(committee: Committee, meta: MetaModel, test: CropStore) -> EvalResult:
    if len(test) == 0:
        raise nn.ParameterError("cannot evaluate on an empty store")
    x = test.pixels_array(dtype=np.float32)
    labels = test.labels_array()
    member_accs = []
    for member in committee.members:
        scores = _eval_scores(member, x)
        member_accs.append(float((scores.argmax(axis=1) == labels).mean()))
    post, _ = stacked_posteriors(committee, meta, x)
    stacked_acc = float((post.argmax(axis=1) == labels).mean())
    return EvalResult(tuple(member_accs), stacked_acc, len(test))


# ---------------------------------------------------------------------------
# committee bundle on disk

def save_bundle(directory, committee: Committee, meta: MetaModel, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, member in enumerate(committee.members):
        nn.save_network(member, directory / f"member_{i}.ownn")
    meta.save(directory / "meta.owlr")
    manifest = {
        "classes": list(committee.label_set),
        "n_members": committee.n_members,
        "histories": committee.histories,
        "member_split_sizes": [len(s) for s in committee.member_splits],
        "stacking_split_size": len(committee.stacking_split),
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_bundle(directory):
    """Returns (committee, meta); split stores are not persisted in bundles."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text("utf-8"))
    label_set = LabelSet(manifest["classes"])
    members = [nn.load_network(directory / f"member_{i}.ownn")
               for i in range(manifest["n_members"])]
    meta = MetaModel.load(directory / "meta.owlr")
    committee = Committee(members=members, label_set=label_set,
                          histories=manifest.get("histories", []),
                          member_splits=[], stacking_split=CropStore(label_set))
    return committee, meta, manifest
