"""HTTP surface for the oracle queue and run state.

Readers are unrestricted; every queue mutation happens under one lock, so no
interleaving can label an item twice or lose a label. The training loop swaps
in retrained committees atomically: requests see the old stack or the new one,
never a mix. Ground-truth labels of simulated data never leave the process.
"""

from __future__ import annotations

import base64
import io
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .committee import (CommitteeConfig, derive_splits, evaluate, fit_meta,
                        load_bundle, stacked_posteriors, train_committee)
from .data import CropStore, DataError, LabelSet
from .loop import (OpenWorldConfig, OracleQueue, RetrainPool, Verdict,
                   alpha_from_known_percentile, classify_stream,
                   integrate_labels, retrain_cycle)


def _png_base64(pixels_u8: np.ndarray) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(pixels_u8, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@dataclass
class ServeState:
    committee: object
    meta: object
    label_set: LabelSet
    queue: OracleQueue
    pool: RetrainPool
    stream: CropStore
    config: CommitteeConfig
    ow_config: OpenWorldConfig
    alpha: float
    known_counts: dict
    last_accuracy: float = None
    cycle: int = 0
    retraining: bool = False
    retrain_in_background: bool = True
    seed: int = 0
    registered: set = field(default_factory=set)
    lock: threading.RLock = field(default_factory=threading.RLock)

    # -- construction --------------------------------------------------------

    @classmethod
    def prepare(cls, train_store_path, test_store_path, known=None, schedule=None,
                bundle=None, config: CommitteeConfig = None,
                ow_config: OpenWorldConfig = None, seed=0,
                retrain_in_background=True) -> "ServeState":
        ow_config = ow_config or OpenWorldConfig(oracle_mode="external")
        train_store = CropStore.load(train_store_path)
        test_store = CropStore.load(test_store_path)
        known = list(known) if known else list(train_store.label_set)
        known_train = train_store.filter_labels(known)

        if bundle:
            committee, meta, manifest = load_bundle(bundle)
            if list(committee.label_set) != known:
                raise DataError(
                    f"bundle classes {list(committee.label_set)} != known {known}")
            cfg = config or CommitteeConfig(**_config_from(manifest))
            member_splits, stacking, _ = derive_splits(known_train, cfg)
            committee.member_splits = member_splits
            committee.stacking_split = stacking
        else:
            cfg = config or CommitteeConfig(n_members=2, seed=seed)
            committee = train_committee(known_train, cfg)
            meta = fit_meta(committee, committee.stacking_split, l2=cfg.meta_l2)

        stream_classes = known + [c for c in (schedule or [])
                                  if c in test_store.label_set and c not in known]
        if schedule is None:
            stream_classes = list(test_store.label_set)
        stream = test_store.filter_labels(stream_classes)

        state = cls(committee=committee, meta=meta,
                    label_set=committee.label_set, queue=OracleQueue(),
                    pool=RetrainPool(), stream=stream, config=cfg,
                    ow_config=ow_config, alpha=ow_config.alpha,
                    known_counts=known_train.counts_by_label(), seed=seed,
                    retrain_in_background=retrain_in_background)
        state._recalibrate()
        state._evaluate_known()
        state.rescan()
        return state

    # -- internals (call under lock unless noted) -----------------------------

    def _recalibrate(self):
        if self.ow_config.alpha_mode == "percentile":
            _, certs, _, _ = classify_stream(
                self.committee, self.meta,
                self.committee.stacking_split.pixels_array(dtype=np.float32),
                self.alpha)
            self.alpha = alpha_from_known_percentile(
                certs, self.ow_config.calibration_percentile)

    def _evaluate_known(self):
        known_stream = self.stream.filter_labels(
            [c for c in self.label_set if c in self.stream.label_set])
        if len(known_stream):
            self.last_accuracy = evaluate(self.committee, self.meta,
                                          known_stream).stacked_accuracy

    def rescan(self):
        """Discard stale pending items and re-flag the stream with the current stack."""
        with self.lock:
            for item in self.queue.pending():
                self.queue.discard(item.item_id)
            pred, certs, flagged, scores = classify_stream(
                self.committee, self.meta,
                self.stream.pixels_array(dtype=np.float32), self.alpha)
            for i in np.flatnonzero(flagged):
                verdict = Verdict(known=False, label_id=int(pred[i]),
                                  certainty=float(certs[i]),
                                  member_scores=scores[i])
                true = self.stream.label_set.name(self.stream[i].label_id)
                self.queue.enqueue(self.stream[i], verdict,
                                   suggested_label=self.committee.label_set.name(int(pred[i])),
                                   true_label=true)

    def _retrain_worker(self):
        try:
            new_committee, new_meta = retrain_cycle(
                self.committee, self.meta, self.pool, self.label_set,
                self.config, seed=self.seed + self.cycle + 1)
            with self.lock:
                self.committee = new_committee
                self.meta = new_meta
                self.label_set = new_committee.label_set
                self.cycle += 1
                self._recalibrate()
                self._evaluate_known()
            self.rescan()
        finally:
            self.retraining = False

    def label(self, item_id: int, label: str):
        """Resolve one queue item; returns (response dict, http status)."""
        with self.lock:
            item = self.queue.get(item_id)
            if item is None:
                return {"error": f"unknown item {item_id}", "code": 404}, 404
            if self.ow_config.oracle_mode == "simulated":
                return {"error": "labeling is simulated in this run", "code": 409}, 409
            if item.status != "pending":
                return {"error": f"item {item_id} already {item.status}",
                        "code": 409}, 409
            if not label or not label.strip():
                return {"error": "label must be non-empty", "code": 400}, 400
            label = label.strip()
            self.queue.label_item(item_id, label)
            retrain_needed, confirmed = integrate_labels(
                self.pool, [item], self.label_set,
                self.ow_config.min_new_class_samples)
            triggered = False
            if retrain_needed and not self.retraining:
                self.retraining = True
                triggered = True
                if self.retrain_in_background:
                    threading.Thread(target=self._retrain_worker,
                                     daemon=True).start()
            body = {"status": "labeled", "label": label,
                    "retrain_triggered": triggered,
                    "new_classes": confirmed,
                    "staged_count": self.pool.staged_count(label),
                    "queue_depth": len(self.queue.pending())}
        if triggered and not self.retrain_in_background:
            self._retrain_worker()
        return body, 200

    def queue_view(self) -> list:
        with self.lock:
            items = sorted(self.queue.pending(), key=lambda it: it.item_id)
            return [{
                "id": it.item_id,
                "image": _png_base64(it.sample.pixels_u8),
                "certainty": it.certainty,
                "member_top_scores": [float(s.max()) for s in it.member_scores],
                "suggested_label": it.suggested_label,
                "enqueued_at": it.enqueued_at,
            } for it in items]

    def classes_view(self) -> list:
        with self.lock:
            out = []
            for name in self.label_set:
                count = self.known_counts.get(name, 0) + sum(
                    1 for e in self.pool.entries if e.label == name)
                out.append({"name": name, "count": count, "known": True})
            for name in sorted(self.registered - set(self.label_set.names)):
                out.append({"name": name, "count": self.pool.staged_count(name),
                            "known": False})
            return out

    def register_class(self, name: str):
        with self.lock:
            if name in self.label_set or name in self.registered:
                return {"error": f"class {name!r} already exists", "code": 409}, 409
            self.registered.add(name)
            return {"name": name, "registered": True}, 200

    def status_view(self) -> dict:
        with self.lock:
            return {
                "cycle": self.cycle,
                "alpha": self.alpha,
                "queue_depth": len(self.queue.pending()),
                "last_stacked_accuracy": self.last_accuracy,
                "known_classes": list(self.label_set),
                "retraining": self.retraining,
                "oracle_mode": self.ow_config.oracle_mode,
            }


def _config_from(manifest: dict) -> dict:
    cfg = dict(manifest.get("config", {}))
    cfg["input_shape"] = tuple(cfg.get("input_shape", (64, 64, 3)))
    if cfg.get("conv_filters") is not None:
        cfg["conv_filters"] = tuple(cfg["conv_filters"])
    return cfg


def create_app(state: ServeState, console_dir=None) -> FastAPI:
    app = FastAPI(title="openworld oracle console API")
    app.state.serve_state = state

    @app.get("/api/queue")
    def get_queue():
        return state.queue_view()

    @app.post("/api/queue/{item_id}/label")
    async def post_label(item_id: int, request: Request):
        try:
            payload = await request.json()
        except Exception:
            return JSONResponse({"error": "body must be JSON", "code": 400},
                                status_code=400)
        label = payload.get("label", "") if isinstance(payload, dict) else ""
        if not isinstance(label, str):
            return JSONResponse({"error": "label must be a string", "code": 400},
                                status_code=400)
        body, status = state.label(item_id, label)
        return JSONResponse(body, status_code=status)

    @app.get("/api/classes")
    def get_classes():
        return state.classes_view()

    @app.post("/api/classes")
    async def post_class(request: Request):
        try:
            payload = await request.json()
        except Exception:
            return JSONResponse({"error": "body must be JSON", "code": 400},
                                status_code=400)
        name = payload.get("name", "") if isinstance(payload, dict) else ""
        if not isinstance(name, str) or not name.strip():
            return JSONResponse({"error": "name must be non-empty", "code": 400},
                                status_code=400)
        body, status = state.register_class(name.strip())
        return JSONResponse(body, status_code=status)

    @app.get("/api/status")
    def get_status():
        return state.status_view()

    if console_dir is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        console_dir = candidate if candidate.is_dir() else None
    if console_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(console_dir), html=True),
                  name="console")
    return app
