"""The open-world cycle: flag low-certainty predictions as unknown, route them
to an oracle, stage confirmed new classes, grow every member's output head,
fine-tune, and refit the stacker.

Unknown is never a trained output unit: a prediction is Unknown exactly when
the stacked certainty falls below the alpha threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .architectures import expand_output
from .committee import (Committee, CommitteeConfig, MetaModel, committee_features,
                        evaluate, fine_tune, fit_meta, stacked_posteriors,
                        train_committee)
from .data import CropStore, DataError, LabelSet, Sample

DEFAULT_ALPHA = 0.5
DEFAULT_MIN_NEW = 20

ORACLE_MODES = ("simulated", "external", "none")


class OpenWorldError(RuntimeError):
    """Contract violation in the oracle loop (bad verdict, bad state transition)."""


@dataclass(frozen=True)
class OpenWorldConfig:
    alpha: float = DEFAULT_ALPHA
    min_new_class_samples: int = DEFAULT_MIN_NEW
    oracle_mode: str = "simulated"
    noise_rate: float = 0.0
    # 'fixed' uses alpha as given; 'percentile' recalibrates after every
    # (re)fit by flagging the bottom tail of known certainty on the stacking split
    alpha_mode: str = "fixed"
    calibration_percentile: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DataError(f"alpha must be in (0,1), got {self.alpha}")
        if self.min_new_class_samples < 1:
            raise DataError("min_new_class_samples must be >= 1")
        if self.oracle_mode not in ORACLE_MODES:
            raise DataError(f"oracle mode must be one of {ORACLE_MODES}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise DataError(f"noise_rate must be in [0,1], got {self.noise_rate}")
        if self.alpha_mode not in ("fixed", "percentile"):
            raise DataError(f"alpha_mode must be 'fixed' or 'percentile'")
        if not 0.0 < self.calibration_percentile < 100.0:
            raise DataError("calibration_percentile must be in (0,100)")


@dataclass(frozen=True)
class Verdict:
    """Known(label_id, certainty) or Unknown(certainty, member_scores)."""

    known: bool
    label_id: int          # argmax class either way (the suggestion when unknown)
    certainty: float
    member_scores: np.ndarray


def classify_or_flag(committee: Committee, meta: MetaModel, sample,
                     alpha: float) -> Verdict:
    post, scores = stacked_posteriors(
        committee, meta,
        (sample.pixels if hasattr(sample, "pixels") else np.asarray(sample))
        [None].astype(np.float32))
    label_id = int(post[0].argmax())
    certainty = float(post[0][label_id])
    return Verdict(known=certainty >= alpha, label_id=label_id,
                   certainty=certainty, member_scores=scores[0])


def classify_stream(committee: Committee, meta: MetaModel, pixels: np.ndarray,
                    alpha: float):
    """Batched verdicts: (pred_ids, certainties, flagged_mask, member_scores)."""
    post, scores = stacked_posteriors(committee, meta, pixels)
    pred = post.argmax(axis=1)
    certs = post[np.arange(len(post)), pred]
    return pred, certs, certs < alpha, scores


# ---------------------------------------------------------------------------
# oracle queue

@dataclass
class OracleItem:
    item_id: int
    sample: Sample
    certainty: float
    member_scores: np.ndarray
    suggested_label: str
    true_label: str = None      # ground truth, retained for simulation only
    enqueued_at: float = 0.0
    status: str = "pending"     # pending -> labeled | discarded
    assigned_label: str = None


class OracleQueue:
    """Serialized mutation point for flagged unknowns; ids are unique forever."""

    def __init__(self):
        self._items: dict[int, OracleItem] = {}
        self._next_id = 1

    def __len__(self):
        return len(self._items)

    def enqueue(self, sample: Sample, verdict: Verdict, suggested_label: str,
                true_label: str = None) -> OracleItem:
        if verdict.known:
            raise OpenWorldError("only Unknown verdicts may be enqueued")
        item = OracleItem(item_id=self._next_id, sample=sample,
                          certainty=verdict.certainty,
                          member_scores=verdict.member_scores,
                          suggested_label=suggested_label,
                          true_label=true_label, enqueued_at=time.time())
        self._items[item.item_id] = item
        self._next_id += 1
        return item

    def get(self, item_id: int) -> OracleItem:
        return self._items.get(item_id)

    def pending(self) -> list:
        return [it for it in self._items.values() if it.status == "pending"]

    def label_item(self, item_id: int, label: str) -> OracleItem:
        item = self._items.get(item_id)
        if item is None:
            raise KeyError(item_id)
        if item.status != "pending":
            raise OpenWorldError(f"item {item_id} already {item.status}")
        if not label:
            raise DataError("empty label")
        item.status = "labeled"
        item.assigned_label = label
        return item

    def discard(self, item_id: int) -> OracleItem:
        item = self._items.get(item_id)
        if item is None:
            raise KeyError(item_id)
        if item.status != "pending":
            raise OpenWorldError(f"item {item_id} already {item.status}")
        item.status = "discarded"
        return item


def simulated_oracle(item: OracleItem, noise_rate: float, rng, label_universe) -> str:
    """Answer with ground truth w.p. 1-noise_rate, else a uniform other label;
    marks the item labeled in place."""
    if item.status != "pending":
        raise OpenWorldError(f"item {item.item_id} already {item.status}")
    if item.true_label is None:
        raise OpenWorldError(f"item {item.item_id} has no ground truth to simulate")
    label = item.true_label
    if noise_rate > 0 and rng.random() < noise_rate:
        others = [n for n in label_universe if n != item.true_label]
        if others:
            label = others[int(rng.integers(len(others)))]
    item.status = "labeled"
    item.assigned_label = label
    return label


# ---------------------------------------------------------------------------
# retraining pool and label integration

@dataclass
class PoolEntry:
    sample: Sample
    label: str
    consumed: bool = False


class RetrainPool:
    """Oracle-labeled samples awaiting the next retrain cycle.

    Known-label samples join immediately; new-class samples are staged until
    the class crosses the confirmation threshold. Entries are deduplicated by
    (provenance, label) so repeat sightings cannot break split disjointness.
    """

    def __init__(self):
        self.entries: list[PoolEntry] = []
        self.staged: dict[str, list[Sample]] = {}
        self._seen: set = set()

    def _key(self, sample: Sample, label: str):
        return (sample.provenance, label)

    def add(self, sample: Sample, label: str):
        key = self._key(sample, label)
        if key in self._seen:
            return
        self._seen.add(key)
        self.entries.append(PoolEntry(sample, label))

    def stage(self, sample: Sample, label: str):
        key = self._key(sample, label)
        if key in self._seen:
            return
        self._seen.add(key)
        self.staged.setdefault(label, []).append(sample)

    def staged_count(self, label: str) -> int:
        return len(self.staged.get(label, []))

    def promote(self, label: str):
        for sample in self.staged.pop(label, []):
            self.entries.append(PoolEntry(sample, label))

    def unconsumed(self) -> list:
        return [e for e in self.entries if not e.consumed]


def integrate_labels(pool: RetrainPool, items, label_set: LabelSet,
                     min_new_class_samples: int = DEFAULT_MIN_NEW):
    """Fold labeled oracle items into the pool; confirm new classes that cross
    the threshold. Returns (retrain_needed, newly_confirmed_class_names)."""
    confirmed = []
    for item in items:
        if item.status != "labeled":
            raise OpenWorldError(f"item {item.item_id} is {item.status}, not labeled")
        if item.assigned_label in label_set:
            pool.add(item.sample, item.assigned_label)
            continue
        pool.stage(item.sample, item.assigned_label)
        if pool.staged_count(item.assigned_label) >= min_new_class_samples:
            label_set.add(item.assigned_label)
            pool.promote(item.assigned_label)
            confirmed.append(item.assigned_label)
    return bool(confirmed), confirmed


# ---------------------------------------------------------------------------
# retrain cycle

def _pool_to_store(entries, label_set: LabelSet) -> CropStore:
    store = CropStore(label_set)
    for e in entries:
        store.add(Sample(e.sample.pixels_u8, label_set.index(e.label),
                         e.sample.provenance))
    return store


def _withhold_stack(entries, fraction, rng, new_names):
    """Per-class withholding so every new class reaches the stacking split."""
    by_label: dict[str, list] = {}
    for e in entries:
        by_label.setdefault(e.label, []).append(e)
    stack, rest = [], []
    for label in sorted(by_label):
        group = by_label[label]
        order = rng.permutation(len(group))
        n_stack = int(round(len(group) * fraction))
        if label in new_names:
            n_stack = max(1, n_stack)
        stack.extend(group[i] for i in order[:n_stack])
        rest.extend(group[i] for i in order[n_stack:])
    return stack, rest


def retrain_cycle(committee: Committee, meta: MetaModel, pool: RetrainPool,
                  label_set: LabelSet, config: CommitteeConfig, seed=None):
    """Grow every member to |label_set| outputs, fine-tune on original split plus
    a 1/N share of the pooled samples, refit the stacker from scratch."""
    old_k = committee.num_classes
    new_k = len(label_set)
    new_names = set(label_set.names[old_k:])
    entries = pool.unconsumed()
    for name in sorted(new_names):
        if not any(e.label == name for e in entries):
            raise OpenWorldError(f"new class {name!r} has no pooled samples")

    n = committee.n_members
    root = np.random.SeedSequence(seed)
    stack_seq, deal_seq, *member_seqs = root.spawn(n + 2)
    stack_entries, rest = _withhold_stack(entries, config.stack_fraction,
                                          np.random.default_rng(stack_seq), new_names)
    deal_rng = np.random.default_rng(deal_seq)
    order = deal_rng.permutation(len(rest))
    shares = [[rest[i] for i in order[j::n]] for j in range(n)]

    new_members, new_histories, new_splits = [], [], []
    for i, member in enumerate(committee.members):
        rng = np.random.default_rng(member_seqs[i])
        if new_k > old_k:
            net = expand_output(member, new_k, seed=rng)
        else:
            net = member.copy()
        split = committee.member_splits[i].relabel(label_set)
        share_store = _pool_to_store(shares[i], label_set)
        combined = split.merged_with(share_store)
        x = combined.pixels_array(dtype=np.float32)
        t = combined.one_hot(new_k)
        history = fine_tune(net, x, t, config, rng)
        new_members.append(net)
        new_histories.append(history)
        new_splits.append(combined)

    new_stacking = committee.stacking_split.relabel(label_set).merged_with(
        _pool_to_store(stack_entries, label_set))
    grown = Committee(members=new_members, label_set=label_set.copy(),
                      histories=new_histories, member_splits=new_splits,
                      stacking_split=new_stacking)
    new_meta = fit_meta(grown, new_stacking, l2=config.meta_l2)
    for e in entries:
        e.consumed = True
    return grown, new_meta


# ---------------------------------------------------------------------------
# alpha calibration

def calibrate_alpha(known_certainties, unknown_certainties) -> float:
    """Threshold maximizing known-vs-unknown separation (Youden's J for the
    'flag when certainty < alpha' rule)."""
    known = np.asarray(known_certainties, dtype=np.float64)
    unknown = np.asarray(unknown_certainties, dtype=np.float64)
    if known.size == 0 or unknown.size == 0:
        raise DataError("calibration needs both known and unknown certainties")
    values = np.unique(np.concatenate([known, unknown]))
    mids = (values[:-1] + values[1:]) / 2.0
    candidates = np.concatenate([[values[0] - 1e-9], mids, [values[-1] + 1e-9]])
    best_alpha, best_j = None, -np.inf
    for alpha in candidates:
        j = (unknown < alpha).mean() - (known < alpha).mean()
        if j > best_j:
            best_j, best_alpha = j, alpha
    return float(np.clip(best_alpha, 1e-6, 1.0 - 1e-6))


def alpha_from_known_percentile(known_certainties, percentile: float = 10.0) -> float:
    """Fallback when no unknown exemplars exist: flag the lowest-certainty tail."""
    known = np.asarray(known_certainties, dtype=np.float64)
    if known.size == 0:
        raise DataError("calibration needs known certainties")
    return float(np.clip(np.percentile(known, percentile), 1e-6, 1.0 - 1e-6))


# ---------------------------------------------------------------------------
# schedule runner

def _seq_int(seq: np.random.SeedSequence) -> int:
    """Distinct deterministic integer per spawned child (entropy is shared)."""
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass
class CycleReport:
    cycle: int
    known_classes: tuple
    injected_class: str
    closed_accuracy: float
    open_accuracy: float
    unknowns_flagged: int
    false_unknowns: int
    oracle_queries: int
    post_retrain_accuracy: float = None  # None when no retraining happened


@dataclass
class ScheduleResult:
    reports: list
    committee: Committee
    meta: MetaModel
    label_set: LabelSet
    queue: OracleQueue
    pool: RetrainPool
    alpha: float
    initial_histories: list = field(default_factory=list)


def _names_accuracy(committee, meta, stream: CropStore) -> tuple:
    """Accuracy by class-NAME comparison (stream may contain unlearned classes),
    plus (pred_ids, certainties, member_scores)."""
    pred, certs, flagged, scores = classify_stream(
        committee, meta, stream.pixels_array(dtype=np.float32), alpha=2.0)
    truth = [stream.label_set.name(s.label_id) for s in stream]
    predicted = [committee.label_set.name(i) for i in pred]
    acc = float(np.mean([p == t for p, t in zip(predicted, truth)]))
    return acc, pred, certs, scores


def run_schedule(train_store: CropStore, test_store: CropStore, initial_known,
                 schedule, committee_config: CommitteeConfig,
                 ow_config: OpenWorldConfig, seed=None) -> ScheduleResult:
    """Train on the initial known classes, then inject the schedule's classes
    into the test stream one cycle at a time, flagging, oracling, and
    retraining per the configuration.

    oracle_mode 'simulated': flagged items are labeled by the ground-truth
    oracle and confirmed classes trigger a retrain within the cycle.
    oracle_mode 'none': pure degradation measurement; the known set stays
    fixed and injected classes accumulate in the stream.
    """
    available = set(train_store.label_set.names) & set(test_store.label_set.names)
    for cls in tuple(initial_known) + tuple(schedule):
        if cls not in available:
            raise DataError(f"schedule class {cls!r} missing from the dataset")

    root = np.random.SeedSequence(seed if seed is not None else committee_config.seed)
    train_seq, oracle_seq, *cycle_seqs = root.spawn(2 + len(schedule))
    label_set = LabelSet(initial_known)
    known_train = train_store.filter_labels(list(label_set))
    cc = replace(committee_config, seed=_seq_int(train_seq))
    committee = train_committee(known_train, cc)
    meta = fit_meta(committee, committee.stacking_split, l2=cc.meta_l2)
    initial_histories = [list(h) for h in committee.histories]

    def current_alpha():
        if ow_config.alpha_mode == "fixed":
            return ow_config.alpha
        _, certs, _, _ = classify_stream(
            committee, meta, committee.stacking_split.pixels_array(dtype=np.float32),
            alpha=ow_config.alpha)
        return alpha_from_known_percentile(certs, ow_config.calibration_percentile)

    alpha = current_alpha()
    queue = OracleQueue()
    pool = RetrainPool()
    oracle_rng = np.random.default_rng(oracle_seq)
    label_universe = tuple(train_store.label_set.names)
    reports = []
    stream_classes = list(initial_known)

    for cycle_i, injected in enumerate(schedule):
        known_at_start = tuple(label_set.names)
        closed_store = test_store.filter_labels(list(label_set))
        closed_acc = evaluate(committee, meta, closed_store).stacked_accuracy

        stream_classes.append(injected)
        stream = test_store.filter_labels(stream_classes)
        open_acc, pred, certs, scores = _names_accuracy(committee, meta, stream)
        flagged = certs < alpha
        truth_names = [stream.label_set.name(s.label_id) for s in stream]
        false_unknowns = int(sum(1 for i, t in enumerate(truth_names)
                                 if flagged[i] and t in label_set))
        oracle_queries = 0
        post_acc = None

        if ow_config.oracle_mode == "simulated":
            labeled_items = []
            for i in np.flatnonzero(flagged):
                verdict = Verdict(known=False, label_id=int(pred[i]),
                                  certainty=float(certs[i]), member_scores=scores[i])
                item = queue.enqueue(stream[i], verdict,
                                     suggested_label=committee.label_set.name(int(pred[i])),
                                     true_label=truth_names[i])
                simulated_oracle(item, ow_config.noise_rate, oracle_rng,
                                 label_universe)
                labeled_items.append(item)
                oracle_queries += 1
            retrain_needed, confirmed = integrate_labels(
                pool, labeled_items, label_set, ow_config.min_new_class_samples)
            if retrain_needed:
                committee, meta = retrain_cycle(
                    committee, meta, pool, label_set, cc,
                    seed=_seq_int(cycle_seqs[cycle_i]))
                alpha = current_alpha()
            post_acc, _, _, _ = _names_accuracy(committee, meta, stream)

        reports.append(CycleReport(
            cycle=cycle_i + 1, known_classes=known_at_start,
            injected_class=injected, closed_accuracy=closed_acc,
            open_accuracy=open_acc, unknowns_flagged=int(flagged.sum()),
            false_unknowns=false_unknowns, oracle_queries=oracle_queries,
            post_retrain_accuracy=post_acc))

    if not schedule:
        # degenerate run: the report is a single closed-set evaluation
        closed_store = test_store.filter_labels(list(label_set))
        closed_acc = evaluate(committee, meta, closed_store).stacked_accuracy
        _, certs, flagged, _ = classify_stream(
            committee, meta, closed_store.pixels_array(dtype=np.float32), alpha)
        reports.append(CycleReport(
            cycle=1, known_classes=tuple(label_set.names), injected_class="",
            closed_accuracy=closed_acc, open_accuracy=closed_acc,
            unknowns_flagged=int(flagged.sum()),
            false_unknowns=int(flagged.sum()), oracle_queries=0,
            post_retrain_accuracy=None))
    return ScheduleResult(reports=reports, committee=committee, meta=meta,
                          label_set=label_set, queue=queue, pool=pool,
                          alpha=alpha, initial_histories=initial_histories)
