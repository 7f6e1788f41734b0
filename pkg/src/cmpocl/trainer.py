"""Strategy dispatch and the single-pass online training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import losses as L
from . import tensor as T
from .checkpoint import save_checkpoint
from .datastream import AugmentConfig, Dataset, MiniBatch, build_stream, multipatch, two_view
from .models import EncoderState, NetworkSpec, OptimizerState, bind, ema_update, encode, predict, sgd_step
from .replay import assemble_er_batch, make_buffer

log = logging.getLogger(__name__)

METHODS = ("finetune", "er-reservoir", "er-fifo", "cmp", "emp-ssl")
BASE_SSL = ("simsiam", "byol")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class StrategyConfig:
    method: str
    base_ssl: str = "byol"
    hyper: L.CmpHyperParams = field(default_factory=L.CmpHyperParams)
    buffer_size: int = 0
    replay_k: int = 90
    batch_size: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_tau: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.base_ssl not in BASE_SSL:
            raise ValueError(f"base_ssl must be one of {BASE_SSL}")
        if self.method.startswith("er-"):
            if self.buffer_size < 1:
                raise ValueError(f"{self.method} needs a positive buffer_size")
        elif self.buffer_size:
            raise ValueError(f"{self.method} does not use a replay buffer")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def uses_target(self) -> bool:
        return self.base_ssl == "byol" and self.method != "emp-ssl"

    @property
    def uses_predictor(self) -> bool:
        return self.method != "emp-ssl"

    @property
    def multipatch(self) -> bool:
        return self.method in ("cmp", "emp-ssl")


@dataclass
class StepReport:
    step: int
    loss: float
    ssl: float
    tcr: float
    buffer: int
    views: int
    ms: float = 0.0

    def to_json(self, with_time: bool = False) -> str:
        d = asdict(self)
        if not with_time:
            d.pop("ms")
        return json.dumps(d)


class OnlineTrainer:
    """Holds the encoder, optimiser and (for ER) the replay buffer.

    Only :class:`MiniBatch` objects reach :meth:`train_step`, so labels and
    split boundaries are invisible to learning.
    """

    def __init__(self, strategy: StrategyConfig, spec: NetworkSpec, augment: AugmentConfig,
                 state: Optional[EncoderState] = None):
        self.strategy = strategy
        self.spec = spec
        if strategy.multipatch and augment.n_patches != strategy.hyper.n_patches:
            raise ValueError("augment.n_patches must equal hyper.n_patches")
        self.augment = augment
        self.state = state or EncoderState.create(spec, strategy.seed, with_target=strategy.uses_target,
                                                  with_predictor=strategy.uses_predictor,
                                                  ema_tau=strategy.ema_tau)
        self.opt = OptimizerState(strategy.lr, strategy.momentum, strategy.weight_decay)
        self.buffer = None
        if strategy.method.startswith("er-"):
            policy = "reservoir" if strategy.method == "er-reservoir" else "fifo"
            self.buffer = make_buffer(policy, strategy.buffer_size, seed=strategy.seed + 1)

    # -- batch assembly -----------------------------------------------------

    def _items(self, batch: MiniBatch) -> list:
        items = list(zip(batch.sample_ids.tolist(), batch.inputs))
        if self.buffer is not None:
            replay = self.buffer.sample(self.strategy.replay_k)
            items = assemble_er_batch(items, replay)
        return items

    def _views(self, items, step: int) -> tuple[np.ndarray, int]:
        """Rows ordered view-major: all samples' view 0, then view 1, ..."""
        make = multipatch if self.strategy.multipatch else two_view
        per_sample = np.stack([make(x, self.augment, sid, draw=step) for sid, x in items])
        n_views = per_sample.shape[1]
        return per_sample.transpose(1, 0, 2).reshape(n_views * len(items), -1), n_views

    # -- loss ---------------------------------------------------------------

    def _loss(self, graph: T.Graph, x: np.ndarray, n_views: int):
        st, s = self.strategy, self.state
        online = bind(graph, s.online)
        pred = bind(graph, s.predictor) if st.uses_predictor else {}
        xin = graph.constant(x)
        z_all = encode(self.spec, online, xin)
        b = x.shape[0] // n_views
        zs = [T.row_slice(z_all, i * b, (i + 1) * b) for i in range(n_views)]
        ps = targets = None
        if st.uses_predictor:
            p_all = predict(self.spec, pred, z_all)
            ps = [T.row_slice(p_all, i * b, (i + 1) * b) for i in range(n_views)]
        if st.uses_target:
            t_all = encode(self.spec, bind(graph, s.target, trainable=False), xin)
            targets = [T.row_slice(t_all, i * b, (i + 1) * b) for i in range(n_views)]

        if st.multipatch:
            patches = L.PatchEmbeddings(zs, ps, targets)
            terms = {"emp-ssl": L.empssl_terms,
                     "cmp": L.byol_cmp_terms if st.base_ssl == "byol" else L.simsiam_cmp_terms}[st.method]
            ssl, reg = terms(patches, st.hyper)
            ssl_part, reg_part = T.scale(ssl, st.hyper.alpha), T.scale(reg, st.hyper.beta)
            loss = T.add(ssl_part, reg_part)
        else:
            if st.base_ssl == "byol":
                loss = L.byol_loss(targets[0], targets[1], ps[0], ps[1], st.hyper.mse_form)
            else:
                loss = L.simsiam_loss(zs[0], zs[1], ps[0], ps[1])
            ssl_part, reg_part = loss, None
        return loss, ssl_part, reg_part, {**online, **pred}

    # -- step ---------------------------------------------------------------

    def train_step(self, batch: MiniBatch) -> StepReport:
        t0 = time.perf_counter()
        items = self._items(batch)
        x, n_views = self._views(items, batch.step)
        graph = T.Graph()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, ssl_part, reg_part, leaves = self._loss(graph, x, n_views)
        except T.NumericError as exc:
            raise TrainingAborted(f"step {batch.step}: {exc}", {"step": batch.step, "error": str(exc)}) from exc
        except T.ContractError as exc:
            raise T.ContractError(f"step {batch.step}: {exc}") from exc
        loss_v = loss.item()
        ssl_v = ssl_part.item()
        reg_v = reg_part.item() if reg_part is not None else 0.0
        if not np.isfinite(loss_v):
            raise TrainingAborted(f"non-finite loss at step {batch.step}",
                                  {"step": batch.step, "loss": loss_v, "ssl": ssl_v, "tcr": reg_v})
        T.backward(graph, loss)
        grads = {name: node.grad for name, node in leaves.items()}
        norms = {name: float(np.linalg.norm(g)) for name, g in grads.items()}
        if not all(np.isfinite(v) for v in norms.values()):
            raise TrainingAborted(f"non-finite gradient at step {batch.step}",
                                  {"step": batch.step, "loss": loss_v, "ssl": ssl_v, "tcr": reg_v,
                                   "grad_norms": norms})
        s = self.state
        s.online = sgd_step(self.opt, s.online, grads)
        if s.predictor is not None:
            s.predictor = sgd_step(self.opt, s.predictor, grads)
        if self.strategy.uses_target:
            ema_update(s)
        if self.buffer is not None:
            for item in zip(batch.sample_ids.tolist(), batch.inputs):
                self.buffer.insert(item)
        return StepReport(
            step=batch.step, loss=loss_v, ssl=ssl_v, tcr=reg_v,
            buffer=len(self.buffer) if self.buffer is not None else 0,
            views=x.shape[0], ms=(time.perf_counter() - t0) * 1e3,
        )

    def run(self, batches: Iterable[MiniBatch]) -> list[StepReport]:
        return [self.train_step(b) for b in batches]

    def buffer_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        if self.buffer is None:
            return {}, {}
        slots = self.buffer.slots
        extra = {}
        if slots:
            extra["buffer.ids"] = np.array([[sid for sid, _ in slots]], dtype=np.float64)
            extra["buffer.inputs"] = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for _, x in slots])
        return extra, {"buffer": self.buffer.state()}


def train_step(trainer: OnlineTrainer, batch: MiniBatch) -> StepReport:
    return trainer.train_step(batch)


def run_stream(strategy: StrategyConfig, dataset: Dataset, spec: NetworkSpec, augment: AugmentConfig,
               split_count: int = 20, stream_seed: int = 0,
               out_dir=None) -> tuple[EncoderState, list[StepReport]]:
    """Train once over the class-incremental stream built from ``dataset``.

    With ``out_dir`` set, step metrics go to ``steps.jsonl`` (deterministic
    fields only), wall-clock times to ``timings.jsonl`` and the final state
    to ``checkpoint.cmpc``.
    """
    _, batches = build_stream(dataset, split_count, strategy.batch_size, stream_seed)
    trainer = OnlineTrainer(strategy, spec, augment)
    out = Path(out_dir) if out_dir is not None else None
    reports: list[StepReport] = []
    try:
        for batch in batches:
            reports.append(trainer.train_step(batch))
    except TrainingAborted as exc:
        log.error("aborting: %s", exc)
        if out is not None:
            (out / "abort.json").write_text(json.dumps(exc.diagnostics, indent=2))
        raise
    finally:
        if out is not None:
            (out / "steps.jsonl").write_text("".join(r.to_json() + "\n" for r in reports))
            (out / "timings.jsonl").write_text(
                "".join(json.dumps({"step": r.step, "ms": round(r.ms, 3)}) + "\n" for r in reports))
    if out is not None:
        extra, meta = trainer.buffer_arrays()
        save_checkpoint(out / "checkpoint.cmpc", trainer.state, extra,
                        {**meta, "steps": len(reports), "method": strategy.method,
                         "base_ssl": strategy.base_ssl})
    return trainer.state, reports
