"""Run orchestration shared by the CLI and the experiment tests."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .datastream import Dataset, hold_out_validation, load_dataset, synth_gaussian_stream
from .models import EncoderState
from .probe import ProbeResult, extract_features, representation_diagnostics, train_probe
from .trainer import StepReport, run_stream


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(stream data, probe test data) as described by the config."""
    if cfg["data.source"] == "synth":
        ds = synth_gaussian_stream(cfg["data.classes"], cfg["data.dim"], cfg["data.samples_per_class"],
                                   cfg["data.class_sep"], cfg["data.seed"])
    else:
        ds = load_dataset(cfg["data.path"], cfg["data.format"])
    return hold_out_validation(ds, cfg["data.test_fraction"], cfg["data.seed"])


def network_for(cfg: ExperimentConfig, ds: Dataset):
    if ds.is_image:
        return cfg.network(ds.input_dim, ds.samples.shape[1:])
    return cfg.network(ds.input_dim)


def probe_state(cfg: ExperimentConfig, state: EncoderState, train: Dataset, test: Dataset,
                seed: Optional[int] = None) -> tuple[ProbeResult, float]:
    pcfg = cfg.probe(seed)
    ftr, ytr = extract_features(state, train, pcfg.features)
    fte, yte = extract_features(state, test, pcfg.features)
    result = train_probe(ftr, ytr, fte, yte, pcfg, n_classes=train.class_count)
    return result, representation_diagnostics(fte).effective_rank


@dataclass
class RunOutcome:
    state: EncoderState
    reports: list[StepReport]
    probe: Optional[ProbeResult]
    effective_rank: Optional[float]
    seconds: float


def execute(cfg: ExperimentConfig, seed: Optional[int] = None, out_dir=None, probe: bool = True) -> RunOutcome:
    seed = cfg["seed"] if seed is None else seed
    t0 = time.perf_counter()
    train, test = load_data(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(cfg.replace(seed=seed).to_text())
    state, reports = run_stream(cfg.strategy(seed), train, network_for(cfg, train), cfg.augment(seed),
                                split_count=cfg["stream.splits"], stream_seed=seed, out_dir=out)
    result = erank = None
    if probe and cfg["probe.enabled"]:
        result, erank = probe_state(cfg, state, train, test, seed)
    seconds = time.perf_counter() - t0
    if out is not None:
        if result is not None:
            (out / "probe.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
        summary = {
            "config_hash": cfg.config_hash(),
            "seed": seed,
            "method": cfg["strategy.method"],
            "base_ssl": cfg["strategy.base_ssl"],
            "buffer_size": cfg["strategy.buffer_size"],
            "steps": len(reports),
            "accuracy": None if result is None else result.accuracy,
            "effective_rank": erank,
            "final_loss": reports[-1].loss if reports else None,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        (out / "wallclock.json").write_text(json.dumps({"seconds": seconds}) + "\n")
    return RunOutcome(state, reports, result, erank, seconds)


STRATEGY_LABELS = {
    "finetune": "finetuning",
    "er-reservoir": "Reservoir ER",
    "er-fifo": "FIFO ER",
    "cmp": "CMP",
    "emp-ssl": "-",
}


def aggregate(summaries: list[dict]) -> list[dict]:
    """One row per config hash: method labels and accuracy mean/std in percent."""
    groups: dict[str, list[dict]] = {}
    for s in summaries:
        groups.setdefault(s["config_hash"], []).append(s)
    rows = []
    for key, runs in groups.items():
        first = runs[0]
        accs = np.array([r["accuracy"] for r in runs if r.get("accuracy") is not None], dtype=np.float64) * 100
        rows.append({
            "config_hash": key,
            "ssl": "EMP-SSL" if first["method"] == "emp-ssl" else {"byol": "BYOL", "simsiam": "SimSiam"}[first["base_ssl"]],
            "strategy": STRATEGY_LABELS[first["method"]],
            "memory": first["buffer_size"],
            "runs": len(runs),
            "mean": float(accs.mean()) if accs.size else None,
            "std": float(accs.std(ddof=1)) if accs.size > 1 else None,
        })
    order = {"EMP-SSL": 0, "SimSiam": 1, "BYOL": 2}
    strat = {v: i for i, v in enumerate(["-", "finetuning", "Reservoir ER", "FIFO ER", "CMP"])}
    rows.sort(key=lambda r: (order[r["ssl"]], strat[r["strategy"]], r["memory"], r["config_hash"]))
    return rows
