"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Everything runs on synthetic data; published table values serve as trend
references only. The closed-set trend (criterion 3) trains fifteen committees
of 64x64 CNNs at full defaults, minutes per run on one CPU core, so the whole
module takes on the order of an hour: run it with
    pytest tests/test_acceptance.py -v -s
"""

import time

import numpy as np
import numpy.testing as npt
import pytest

from openworld import data, nn, synth
from openworld.architectures import build_cnn
from openworld.committee import (CommitteeConfig, MetaModel, evaluate, fit_meta,
                                 train_committee)
from openworld.data import CropStore, LabeledPolygon, parse_annotation
from openworld.gradcheck import check_layer_kind, check_network_gradients
from openworld.loop import (OpenWorldConfig, OracleQueue, RetrainPool, Verdict,
                            _names_accuracy, alpha_from_known_percentile,
                            classify_stream, integrate_labels, retrain_cycle,
                            run_schedule, simulated_oracle)

SIX_CLASSES = ("car", "person", "traffic_sign", "traffic_light", "building",
               "vegetation")
KNOWN = ["car", "person"]
SCHEDULE = ["traffic_sign", "traffic_light", "building", "vegetation"]


def _verdict(num, ok, detail):
    print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


def _make_dataset(tmp_factory, classes, per_class, seed, n_test_cities):
    root = tmp_factory.mktemp(f"ds_{seed}")
    synth.generate(synth.SynthConfig(classes=classes, per_class=per_class,
                                     seed=seed), root)
    store = data.ingest(root)
    cities = sorted({s.provenance[0] for s in store})
    part = data.partition_cities(cities, len(cities) - n_test_cities,
                                 n_test_cities, seed=seed)
    return store.partition_by_city(part)


@pytest.fixture(scope="session")
def bench2(tmp_path_factory):
    """2-class benchmark, 500/class, 40 train / 10 test cities."""
    return _make_dataset(tmp_path_factory, ("car", "person"), 500, 101, 10)


@pytest.fixture(scope="session")
def bench6(tmp_path_factory):
    """6-class benchmark, 200/class, 15 train / 5 test cities."""
    return _make_dataset(tmp_path_factory, SIX_CLASSES, 200, 202, 5)


@pytest.fixture(scope="session")
def known_committee(bench6):
    """Architecture-C committee trained on car+person with a held-out
    validation split (last 3 train cities); shared by criteria 6 and 7."""
    train_all, test_all = bench6
    known_train = train_all.filter_labels(KNOWN)
    cities = sorted({s.provenance[0] for s in known_train})
    val_cities = set(cities[-3:])
    fit_store = known_train.subset(
        [i for i, s in enumerate(known_train) if s.provenance[0] not in val_cities])
    val_store = known_train.subset(
        [i for i, s in enumerate(known_train) if s.provenance[0] in val_cities])
    cfg = CommitteeConfig(n_members=5, architecture="C", epochs=10, seed=42)
    committee = train_committee(fit_store, cfg)
    meta = fit_meta(committee, committee.stacking_split)
    _, val_certs, _, _ = classify_stream(committee, meta,
                                         val_store.pixels_array(), 0.5)
    alpha = alpha_from_known_percentile(val_certs, 5.0)
    return committee, meta, alpha, cfg


# ---------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.time()
    details = []
    for kind in nn.KINDS:
        worst = check_layer_kind(kind, n_cases=100, seed=nn.KINDS.index(kind),
                                 tol=1e-4)
        details.append(f"{kind}={worst:.1e}")
    rng = np.random.default_rng(11)
    for arch in ("A", "B", "C"):
        for trial in range(3):
            net = build_cnn(arch, 3, seed=50 + trial, input_shape=(16, 16, 3),
                            dtype=np.float64)
            x = rng.random((2, 16, 16, 3))
            target = np.zeros((2, 3))
            target[0, trial % 3] = target[1, (trial + 1) % 3] = 1
            worst = check_network_gradients(net, x, target, tol=1e-4,
                                            samples_per_param=25,
                                            rng_seed=trial)
            details.append(f"net{arch}.{trial}={worst:.1e}")
    elapsed = time.time() - t0
    _verdict(1, elapsed < 60.0,
             f"all layers and A/B/C nets < 1e-4 rel err, {elapsed:.1f}s "
             f"(budget 60s); worst cases: {' '.join(details[:7])}")


def test_criterion_2_oracle_equivalence():
    from test_data import bilinear_oracle
    from test_nn import conv_oracle, pool_oracle

    rng = np.random.default_rng(2024)
    for _ in range(200):
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 4))
        h, w = (int(rng.integers(k, 13)) for _ in range(2))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.normal(size=(h, w, cin))
        kernels = rng.normal(size=(k, k, cin, cout))
        bias = rng.normal(size=cout)
        npt.assert_allclose(nn.conv2d_forward(x, kernels, bias, stride),
                            conv_oracle(x, kernels, bias, stride),
                            rtol=1e-12, atol=1e-13)
    for _ in range(200):
        win = int(rng.integers(1, 5))
        h, w = (int(rng.integers(win, 13)) for _ in range(2))
        x = rng.normal(size=(h, w, int(rng.integers(1, 4))))
        npt.assert_array_equal(nn.maxpool_forward(x, win), pool_oracle(x, win))
    img = rng.random((60, 70, 3))
    for _ in range(200):
        n = int(rng.integers(3, 10))
        pts = tuple((int(rng.integers(0, 70)), int(rng.integers(0, 60)))
                    for _ in range(n))
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        if max(xs) - min(xs) < 1 or max(ys) - min(ys) < 1:
            continue
        crop = data.min_area_crop(img, LabeledPolygon("x", pts))
        npt.assert_array_equal(
            crop, img[min(ys):max(ys) + 1, min(xs):max(xs) + 1, :])
    for _ in range(200):
        h, w = int(rng.integers(2, 40)), int(rng.integers(2, 40))
        crop = rng.random((h, w, 3))
        npt.assert_allclose(data.resize_64(crop), bilinear_oracle(crop, 64),
                            atol=1e-6)
    _verdict(2, True, "conv2d 1e-12 / maxpool exact / min_area_crop exact / "
                      "resize_64 1e-6, 200 instances each")


@pytest.fixture(scope="session")
def closed_set_runs(bench2):
    """15 committee trainings: sizes 2/3/5 x 5 runs, architecture C, defaults."""
    train, test = bench2
    results = {}
    for size in (2, 3, 5):
        for run in range(5):
            seed = 1000 + size * 100 + run
            cfg = CommitteeConfig(n_members=size, architecture="C", epochs=10,
                                  seed=seed)
            t0 = time.time()
            committee = train_committee(train, cfg)
            meta = fit_meta(committee, committee.stacking_split)
            res = evaluate(committee, meta, test)
            results[(size, run)] = res
            members = " ".join(f"{a:.3f}" for a in res.member_accuracies)
            print(f"  size {size} run {run}: members [{members}] "
                  f"stacked {res.stacked_accuracy:.3f} "
                  f"({time.time() - t0:.0f}s)")
    return results


def test_criterion_3_closed_set_trend(closed_set_runs):
    results = closed_set_runs
    all_ge_090 = all(r.stacked_accuracy >= 0.90 for r in results.values())
    beats_best = sum(
        r.stacked_accuracy >= max(r.member_accuracies) - 0.02
        for r in results.values())
    ok = all_ge_090 and beats_best >= 13
    lo = min(r.stacked_accuracy for r in results.values())
    _verdict(3, ok, f"stacked >= best member - 0.02 in {beats_best}/15 runs "
                    f"(need >= 13); min stacked {lo:.3f} (need >= 0.90 in all; "
                    f"paper trend 0.972-0.992)")


def test_criterion_4_architecture_comparison(bench2, closed_set_runs):
    train, test = bench2
    stacked = {"C": closed_set_runs[(5, 0)].stacked_accuracy}
    for arch in ("A", "B"):
        cfg = CommitteeConfig(n_members=5, architecture=arch, epochs=10,
                              seed=4000 + ord(arch))
        committee = train_committee(train, cfg)
        meta = fit_meta(committee, committee.stacking_split)
        stacked[arch] = evaluate(committee, meta, test).stacked_accuracy
    ok = all(v >= 0.90 for v in stacked.values())
    detail = " ".join(f"{a}={v:.3f}" for a, v in sorted(stacked.items()))
    _verdict(4, ok, f"stacked {detail} (need >= 0.90 each; "
                    f"paper reference A=0.99 B=0.976 C=0.94)")


def test_criterion_5_unknown_injection_degradation(bench6):
    train, test = bench6
    cfg_ow = OpenWorldConfig(alpha=0.5, alpha_mode="percentile",
                             calibration_percentile=10.0, oracle_mode="none")
    seq_ok = 0
    drops = []
    for seed in range(5):
        cfg = CommitteeConfig(n_members=5, architecture="C", epochs=10,
                              seed=5000 + seed)
        result = run_schedule(train, test, KNOWN, SCHEDULE, cfg, cfg_ow,
                              seed=5000 + seed)
        opens = [r.open_accuracy for r in result.reports]
        closed = result.reports[0].closed_accuracy
        seq = [closed] + opens
        non_increasing = sum(b <= a + 1e-9 for a, b in zip(seq, seq[1:]))
        drops.append(closed - opens[0])
        if non_increasing >= 3:
            seq_ok += 1
        print(f"  seed {seed}: sequence {[f'{v:.3f}' for v in seq]} "
              f"non-increasing steps {non_increasing}/4")
    ok = all(d >= 0.15 for d in drops) and seq_ok == 5
    _verdict(5, ok, f"first-injection drop min {min(drops):.3f} (need >= 0.15; "
                    f"paper 0.99->0.639); monotone in >= 3/4 steps for "
                    f"{seq_ok}/5 seeds (paper Tables 4-7 decay)")


def test_criterion_6_unknown_detection(bench6, known_committee):
    _, test_all = bench6
    committee, meta, alpha, _ = known_committee
    known_test = test_all.filter_labels(KNOWN)
    unseen_test = test_all.filter_labels([c for c in SIX_CLASSES if c not in KNOWN])
    _, _, known_flagged, _ = classify_stream(
        committee, meta, known_test.pixels_array(), alpha)
    _, _, unseen_flagged, _ = classify_stream(
        committee, meta, unseen_test.pixels_array(), alpha)
    ur, kr = float(unseen_flagged.mean()), float(known_flagged.mean())
    ok = ur >= 0.70 and kr <= 0.20
    _verdict(6, ok, f"alpha={alpha:.4f} calibrated on a validation split: "
                    f"unseen flagged {ur:.3f} (need >= 0.70), "
                    f"known flagged {kr:.3f} (need <= 0.20)")


def test_criterion_7_oracle_loop_learning(bench6, known_committee):
    train_all, test_all = bench6
    committee, meta, alpha, cfg = known_committee
    target_class = "traffic_sign"
    sightings = train_all.filter_labels([target_class])
    pred, certs, flagged, scores = classify_stream(
        committee, meta, sightings.pixels_array(), alpha)

    queue, pool = OracleQueue(), RetrainPool()
    rng = np.random.default_rng(7)
    items = []
    for i in np.flatnonzero(flagged):
        verdict = Verdict(False, int(pred[i]), float(certs[i]), scores[i])
        item = queue.enqueue(sightings[i], verdict,
                             committee.label_set.name(int(pred[i])),
                             true_label=target_class)
        simulated_oracle(item, 0.0, rng, SIX_CLASSES)
        items.append(item)
    label_set = committee.label_set.copy()
    retrain_needed, confirmed = integrate_labels(pool, items, label_set, 20)
    assert retrain_needed and confirmed == [target_class]

    sign_test = test_all.filter_labels([target_class])
    known_test = test_all.filter_labels(KNOWN)
    before, _, _, _ = _names_accuracy(committee, meta, sign_test)
    known_before, _, _, _ = _names_accuracy(committee, meta, known_test)
    new_committee, new_meta = retrain_cycle(committee, meta, pool, label_set,
                                            cfg, seed=99)
    after, _, _, _ = _names_accuracy(new_committee, new_meta, sign_test)
    known_after, _, _, _ = _names_accuracy(new_committee, new_meta, known_test)
    ok = (len(items) >= 20 and before < 0.2 and after >= 0.7
          and known_before - known_after < 0.1)
    _verdict(7, ok, f"{len(items)} oracle labels (noise 0, need >= 20); "
                    f"new-class accuracy {before:.3f} -> {after:.3f} "
                    f"(need < 0.2 -> >= 0.7); original classes "
                    f"{known_before:.3f} -> {known_after:.3f} (drop < 0.1)")


def test_criterion_8_determinism(tmp_path_factory):
    from openworld.cli import main

    root = tmp_path_factory.mktemp("det")
    assert main(["synth", "--classes", "car,person,traffic_sign",
                 "--per-class", "40", "--seed", "88",
                 "--out", str(root / "ds")]) == 0
    assert main(["ingest", "--data", str(root / "ds"),
                 "--train-out", str(root / "train.owc"),
                 "--test-out", str(root / "test.owc"),
                 "--train-cities", "3", "--test-cities", "1",
                 "--seed", "88"]) == 0
    args = ["openworld", "--train-store", str(root / "train.owc"),
            "--test-store", str(root / "test.owc"),
            "--known", "car,person", "--schedule", "traffic_sign",
            "--members", "2", "--arch", "C", "--epochs", "3",
            "--calibrate", "--min-new", "10", "--seed", "88"]
    assert main(args + ["--out", str(root / "a")]) == 0
    assert main(args + ["--out", str(root / "b")]) == 0
    files = ["open_world.csv", "manifest.json", "epochs_member_0.csv",
             "epochs_member_1.csv"]
    identical = {f: (root / "a" / f).read_bytes() == (root / "b" / f).read_bytes()
                 for f in files}
    _verdict(8, all(identical.values()),
             f"two cmd_openworld runs byte-identical: {identical}")


def test_criterion_9_formats(tmp_path, caplog):
    # network round-trip
    net = build_cnn("C", 6, seed=9)
    p1, p2 = tmp_path / "n1.ownn", tmp_path / "n2.ownn"
    nn.save_network(net, p1)
    nn.save_network(nn.load_network(p1), p2)
    net_ok = p1.read_bytes() == p2.read_bytes()
    # meta-model round-trip
    meta = MetaModel(np.random.default_rng(0).normal(size=(6, 5 * 6 + 1)), 5)
    m1, m2 = tmp_path / "m1.owlr", tmp_path / "m2.owlr"
    meta.save(m1)
    MetaModel.load(m1).save(m2)
    meta_ok = m1.read_bytes() == m2.read_bytes()
    # crop-store round-trip
    store = CropStore(data.LabelSet(["a", "b"]))
    rng = np.random.default_rng(1)
    for i in range(20):
        store.add(data.Sample(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8),
                              i % 2, ("city", f"img{i}", i)))
    s1, s2 = tmp_path / "s1.owc", tmp_path / "s2.owc"
    store.save(s1)
    CropStore.load(s1).save(s2)
    store_ok = s1.read_bytes() == s2.read_bytes()
    # malformed annotations: located errors, never crashes
    located = 0
    for doc in ('{"bad": ', '[]', '{"imgHeight": -2, "imgWidth": 5, "objects": []}',
                '{"imgHeight": 8, "imgWidth": 8, "objects": [{"label": "x"}]}',
                '{"imgHeight": 8, "imgWidth": 8, "objects": [{"label": "",'
                ' "polygon": [[0,0],[1,1],[2,2]]}]}'):
        try:
            parse_annotation(doc, source="doc.json")
        except data.AnnotationError as e:
            located += ("doc.json" in str(e))
    ok = net_ok and meta_ok and store_ok and located == 5
    _verdict(9, ok, f"bit-exact round-trips: network={net_ok} meta={meta_ok} "
                    f"store={store_ok}; located parse errors {located}/5")
