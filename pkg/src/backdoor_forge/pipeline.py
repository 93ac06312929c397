"""Experiment orchestration: dataset -> noise -> poison -> train -> defend -> report.

Every grid cell is one (attack, noise variant, defense) triple.  The clean
baseline is trained once per noise variant and the backdoored model once per
(attack, variant); all defense cells of that pair reuse it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import defenses as F
from . import metrics as R
from . import models as M
from . import noise as N
from . import poison as P
from ._util import derive_seed, rng_for, round_half_up
from .config import NO_DEFENSE, ConfigError, ExperimentConfig, attack_slug

log = logging.getLogger(__name__)

OUT_ENV = "BACKDOOR_FORGE_OUT"
DONE = "DONE"
STRIP_STREAM = 200


def output_root(cfg: ExperimentConfig, override=None) -> Path:
    return Path(override or cfg.out or os.environ.get(OUT_ENV) or "runs")


# ---------------------------------------------------------------------------
# seeds


def _s31(*parts) -> int:
    return derive_seed(*parts) % 2**31


def cell_seed(cfg: ExperimentConfig, attack: str, defense: str, variant: str) -> int:
    return derive_seed(cfg.seed, attack, defense, variant)


def model_seeds(cfg: ExperimentConfig, variant: str) -> tuple[int, int]:
    """(init seed, shuffle seed); shared by the clean and backdoored models of a variant."""
    return _s31(cfg.seed, "model", variant), _s31(cfg.seed, "train", variant)


def cell_id(attack: str, variant: str, defense: str) -> str:
    return f"{attack}-{variant}-{defense}"


# ---------------------------------------------------------------------------
# stages


class StageLog:
    """Ordered record of the stages that produced a cell's artefacts."""

    def __init__(self, lines=None):
        self.lines = list(lines or [])

    def add(self, stage: str, detail: str = "") -> None:
        self.lines.append((stage, detail))

    def copy(self) -> "StageLog":
        return StageLog(self.lines)

    def text(self) -> str:
        return "".join(f"{i} {s} {d}".rstrip() + "\n" for i, (s, d) in enumerate(self.lines))


def read_stages(path) -> list[str]:
    return [line.split(" ", 2)[1] for line in Path(path).read_text().splitlines() if line.strip()]


def build_datasets(cfg: ExperimentConfig) -> tuple[D.Dataset, D.Dataset]:
    spec = cfg.dataset
    seed = cfg.seed if spec.seed is None else spec.seed
    if spec.kind == "synth_image":
        ds = D.synth_image_dataset(spec.classes, spec.per_class, spec.side, seed)
    elif spec.kind == "synth_text":
        ds, _ = D.synth_text_dataset(spec.classes, spec.per_class, seed)
    elif spec.kind == "synth_audio":
        ds = D.synth_audio_dataset(spec.classes, spec.per_class, spec.duration_s, seed=seed)
    elif spec.kind == "idx":
        ds = D.load_idx_images(spec.images, spec.labels, spec.classes)
    else:
        ds, _ = D.load_tsv_text(spec.path, class_count=spec.classes)
    split_seed = cfg.seed + 1 if spec.split_seed is None else spec.split_seed
    train, test = D.split(P.canonical_float32(ds), spec.train_fraction, split_seed)
    return train, test


def noised(cfg: ExperimentConfig, train: D.Dataset, variant: str) -> D.Dataset:
    return N.apply_noise(train, cfg.noise, variant)


def noise_record(cfg: ExperimentConfig, variant: str) -> dict | None:
    if variant == "normal" or cfg.noise is None:
        return None
    return {"variant": variant, **cfg.noise.to_json()}


def train_model(cfg: ExperimentConfig, dataset: D.Dataset, variant: str, epochs: int | None = None):
    init, shuffle = model_seeds(cfg, variant)
    tc = dataclasses.replace(cfg.training, seed=shuffle, batch_size=min(cfg.training.batch_size, len(dataset)))
    if epochs is not None:
        tc = dataclasses.replace(tc, epochs=epochs)
    model = M.model_for(dataset, seed=init)
    _, hist = M.train(model, dataset, tc)
    return model, hist


def evaluate(model, test: D.Dataset, curated: D.Dataset, target: int, cac: float | None) -> R.MetricsReport:
    bac = R.accuracy(M.predict_batch(model, test), test.labels)
    preds = M.predict_batch(model, curated)
    return R.MetricsReport(cac=cac, bac=bac, asr=R.asr(preds, target, curated.original_labels),
                           rac=R.rac(preds, curated.original_labels),
                           counts={"test": len(test), "curated": len(curated)})


def clean_subset(poisoned: D.Dataset, fraction: float, seed: int) -> D.Dataset:
    """Defender's label-verified clean data: never poisoned, never mislabelled."""
    pool = [s.id for s in poisoned if not s.is_poisoned and not s.is_label_corrupted]
    k = min(len(pool), max(1, round_half_up(fraction * len(poisoned))))
    chosen = np.sort(rng_for("clean-subset", seed).choice(pool, size=k, replace=False))
    return poisoned.subset(chosen.tolist(), "clean-subset")


@dataclass
class Baseline:
    variant: str
    train: D.Dataset            # noised, not poisoned
    model: M.Model
    history: M.History
    cac: float


@dataclass
class Backdoor:
    attack: P.AttackConfig
    variant: str
    poisoned: D.Dataset
    manifest: P.PoisonManifest
    model: M.Model
    history: M.History
    curated: D.Dataset
    before: R.MetricsReport
    stages: StageLog = field(default_factory=StageLog)
    timing: dict = field(default_factory=dict)


def make_baseline(cfg, train, test, variant, stages: StageLog) -> Baseline:
    data = noised(cfg, train, variant)
    stages.add("noise", f"variant={variant} modified={len(N.modified_ids(train, data))}")
    model, hist = train_model(cfg, data, variant)
    stages.add("train-clean", f"epochs={cfg.training.epochs}")
    cac = R.accuracy(M.predict_batch(model, test), test.labels)
    return Baseline(variant, data, model, hist, cac)


def make_backdoor(cfg, attack: P.AttackConfig, base: Baseline, test, stages: StageLog,
                  poisoned=None, manifest=None, model=None) -> Backdoor:
    t0 = time.perf_counter()
    if poisoned is None:
        poisoned, manifest = P.poison_dataset(base.train, attack, noise_record(cfg, base.variant))
        stages.add("poison", f"attack={attack.label} poisoned={len(manifest.poison_indices)} of {len(poisoned)}")
    else:
        stages.add("poison", f"attack={attack.label} loaded store poisoned={len(manifest.poison_indices)}")
    t1 = time.perf_counter()
    if model is None:
        model, hist = train_model(cfg, poisoned, base.variant)
        stages.add("train-backdoor", f"epochs={cfg.training.epochs}")
    else:
        hist = M.History()
        stages.add("train-backdoor", "loaded checkpoint")
    t2 = time.perf_counter()
    curated = P.build_curated_test(test, attack, poisoned.vocab)
    before = evaluate(model, test, curated, attack.target_label, base.cac)
    stages.add("evaluate", "backdoor model")
    return Backdoor(attack, base.variant, poisoned, manifest, model, hist, curated, before, stages,
                    {"poison_s": t1 - t0, "train_s": t2 - t1})


# ---------------------------------------------------------------------------
# defenses


def _seeded(dc: F.DefenseConfig, seed: int) -> F.DefenseConfig:
    s = seed % 2**31
    out = F.DefenseConfig.from_dict(dc.to_json())
    for sub in (out.strip, out.ac, out.ft, out.fp, out.nc):
        sub.seed = s
    return out


def _strip_stream(bd: Backdoor, test: D.Dataset, seed: int):
    rng = rng_for("strip-stream", seed)
    clean = [test[int(i)] for i in np.sort(rng.choice(len(test), size=min(STRIP_STREAM, len(test)), replace=False))]
    trig = [bd.curated[int(i)] for i in
            np.sort(rng.choice(len(bd.curated), size=min(STRIP_STREAM, len(bd.curated)), replace=False))]
    return clean + trig, np.array([False] * len(clean) + [True] * len(trig))


def run_defense(name: str, cfg: ExperimentConfig, bd: Backdoor, test: D.Dataset, seed: int,
                cell_dir: Path, stages: StageLog) -> tuple[dict, dict]:
    """Returns (fields for CellResult, models to checkpoint)."""
    dc = _seeded(cfg.defense_config, seed)
    target = bd.attack.target_label
    after = detection = None
    extra, models = {}, {}
    stages.add("defense", name)
    if name == "ft":
        clean = clean_subset(bd.poisoned, dc.ft.clean_fraction, seed)
        out = F.ft_defend(bd.model, clean, dc.ft)
        extra["clean_subset"] = len(clean)
    elif name == "fp":
        clean = clean_subset(bd.poisoned, dc.fp.clean_fraction, seed)
        out, pruned = F.fp_defend(bd.model, clean, dc.fp)
        extra.update(clean_subset=len(clean), pruned_units=pruned.tolist())
    elif name == "clp":
        out, pruned = F.clp_defend(bd.model, dc.clp)
        extra["pruned_units"] = {k: v.tolist() for k, v in pruned.items()}
    elif name == "abl":
        init, shuffle = model_seeds(cfg, bd.variant)
        tc = dataclasses.replace(cfg.training, seed=shuffle,
                                 batch_size=min(cfg.training.batch_size, len(bd.poisoned)))
        out, isolated, _ = F.abl_train(bd.poisoned, tc, dc.abl, model_seed=init)
        flags = np.zeros(len(bd.poisoned), bool)
        flags[isolated] = True
        det = R.detection_metrics(flags, bd.poisoned.poison_flags)
        detection = det.to_json()
        extra["isolated"] = len(isolated)
    elif name == "strip":
        inputs, truth = _strip_stream(bd, test, seed)
        pool = clean_subset(bd.poisoned, 0.1, seed)
        v = F.strip_detect(bd.model, inputs, list(pool), dc.strip)
        detection = R.detection_metrics(v.flags, truth).to_json()
        extra["threshold"] = v.threshold
        out = None
    elif name == "ac":
        v = F.ac_detect(bd.model, bd.poisoned, dc.ac)
        detection = R.detection_metrics(v.flags, bd.poisoned.poison_flags).to_json()
        extra["flagged"] = int(v.flags.sum())
        out = None
        if dc.ac.retrain:
            kept = F.sanitize(bd.poisoned, v)
            out, _ = train_model(cfg, kept, bd.variant)
    elif name == "nc":
        clean = clean_subset(bd.poisoned, dc.nc.clean_fraction, seed)
        outcome = F.nc_scan(bd.model, clean, dc.nc)
        extra.update(mask_norms=outcome.mask_norms.tolist(), anomaly_index=outcome.anomaly_index.tolist(),
                     flagged=outcome.flagged, target_flagged=target in outcome.flagged)
        write_nc_masks(cell_dir / "nc_masks.jsonl", outcome)
        out = F.nc_mitigate(bd.model, outcome, clean, dc.nc) if outcome.flagged else None
    else:
        raise ConfigError("defense.names", f"unknown defense {name!r}")
    if out is not None:
        stages.add("evaluate", f"after {name}")
        after = evaluate(out, test, bd.curated, target, bd.before.cac).to_json()
        models["defended"] = out
    return {"after": after, "detection": detection, "extra": extra}, models


def write_nc_masks(path: Path, outcome) -> None:
    lines = []
    for k in sorted(outcome.reversals):
        rev = outcome.reversals[k]
        rec = {"label": k, "mask_norm": rev.mask_norm, "anomaly_index": float(outcome.anomaly_index[k]),
               "flagged": k in outcome.flagged,
               "mask": P.sample_record(D.Sample(0, D.IMAGE, rev.mask[:, :, None], k, k))["payload"],
               "pattern": P.sample_record(D.Sample(0, D.IMAGE, rev.pattern, k, k))["payload"]}
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# cells


@dataclass
class CellTask:
    attack_index: int
    variant: str
    defense: str

    def id(self, cfg) -> str:
        return cell_id(attack_slug(cfg.attacks[self.attack_index]), self.variant, self.defense)


def grid_tasks(cfg: ExperimentConfig, defenses=None) -> list[CellTask]:
    defenses = cfg.defenses if defenses is None else defenses
    return [CellTask(i, v, d) for i in range(len(cfg.attacks)) for v in cfg.variants for d in defenses]


def _write_cell(cell_dir: Path, exp_id: str, seeds: dict, configs: dict, cell: R.CellResult,
                bd: Backdoor | None, stages: StageLog, models: dict, baseline: Baseline | None) -> None:
    cell_dir.mkdir(parents=True, exist_ok=True)
    ck = cell_dir / "checkpoints"
    ck.mkdir(exist_ok=True)
    if baseline is not None:
        M.save_checkpoint(baseline.model, ck / "clean.bfck", baseline.history)
    if bd is not None:
        M.save_checkpoint(bd.model, ck / "backdoor.bfck", bd.history)
        (cell_dir / "manifest.json").write_text(R.canonical_json(bd.manifest.to_json()))
    for name, m in models.items():
        M.save_checkpoint(m, ck / f"{name}.bfck")
    (cell_dir / "stages.log").write_text(stages.text())
    R.emit_report(R.RunRecord(exp_id, __version__, seeds, configs, [cell]), cell_dir)
    if cell.status != "failed":
        (cell_dir / DONE).write_text("ok\n")


def run_group(cfg: ExperimentConfig, attack_index: int, variant: str, defenses: list, exp_dir: str,
              baseline: Baseline, test: D.Dataset, base_stages: StageLog, store=None) -> tuple[list, dict]:
    """Train one backdoored model and run every requested defense on it."""
    exp_dir = Path(exp_dir)
    attack = cfg.attacks[attack_index]
    slug = attack_slug(attack)
    modality = attack.trigger.modality
    seeds = {"global": cfg.seed}
    configs = cfg.to_json()
    timing = {}
    stages = base_stages.copy()
    cells = []
    try:
        poisoned, manifest, model = store if store is not None else (None, None, None)
        bd = make_backdoor(cfg, attack, baseline, test, stages, poisoned, manifest, model)
        timing[f"{slug}-{variant}"] = bd.timing
    except Exception as e:  # every cell of the pair fails with the same cause
        log.exception("backdoor training failed for %s/%s", slug, variant)
        for d in defenses:
            cid = cell_id(slug, variant, d)
            cell = R.CellResult(cid, slug, d, variant, modality, "failed", note=f"{type(e).__name__}: {e}")
            _write_cell(exp_dir / cid, cfg.experiment_id, seeds, configs, cell, None, stages, {}, None)
            cells.append(cell)
        return cells, timing
    for d in defenses:
        cid = cell_id(slug, variant, d)
        seed = cell_seed(cfg, slug, d, variant)
        cseeds = {"global": cfg.seed, "cell": seed}
        cdir = exp_dir / cid
        if cdir.exists():
            shutil.rmtree(cdir)
        cdir.mkdir(parents=True)
        cstages = stages.copy()
        base = dict(cell_id=cid, attack=slug, defense=d, variant=variant, modality=modality,
                    before=bd.before.to_json())
        models = {}
        t0 = time.perf_counter()
        if d == NO_DEFENSE:
            cell = R.CellResult(**base)
        elif not F.applicable(d, modality):
            cell = R.CellResult(**base, status="skipped", note="skipped: inapplicable")
            cstages.add("defense", f"{d} skipped")
        else:
            try:
                fields, models = run_defense(d, cfg, bd, test, seed, cdir, cstages)
                cell = R.CellResult(**base, **fields)
            except Exception as e:
                log.exception("defense %s failed in %s", d, cid)
                cell = R.CellResult(**base, status="failed", note=f"{type(e).__name__}: {e}")
        timing[cid] = {"defense_s": time.perf_counter() - t0}
        _write_cell(cdir, cfg.experiment_id, cseeds, configs, cell, bd, cstages, models, baseline)
        cells.append(cell)
    return cells, timing


def _group_job(args):
    return run_group(*args)


def _load_done(cell_dir: Path) -> R.CellResult | None:
    if not (cell_dir / DONE).exists():
        return None
    try:
        rec = R.load_report(cell_dir / "report.json")
    except (OSError, ValueError, R.ReportVersionError):
        return None
    return rec.cells[0] if rec.cells else None


@dataclass
class RunSummary:
    cells: list
    resumed: int
    exp_dir: Path

    def count(self, status) -> int:
        return sum(c.status == status for c in self.cells)


def run_cells(cfg: ExperimentConfig, tasks: list[CellTask], out_root: Path, workers: int = 1,
              resume: bool = False, store=None) -> RunSummary:
    exp_dir = Path(out_root) / cfg.experiment_id
    exp_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    done, pending = {}, []
    for t in tasks:
        prior = _load_done(exp_dir / t.id(cfg)) if resume else None
        if prior is not None:
            done[t.id(cfg)] = prior
        else:
            pending.append(t)
    groups: dict[tuple, list] = {}
    for t in pending:
        groups.setdefault((t.attack_index, t.variant), []).append(t.defense)

    timing = {}
    results = dict(done)
    if groups:
        stages = StageLog()
        train, test = build_datasets(cfg)
        stages.add("dataset", f"kind={cfg.dataset.kind} train={len(train)} test={len(test)}")
        baselines = {}
        for v in sorted({v for _, v in groups}, key=cfg.variants.index):
            st = stages.copy()
            t0 = time.perf_counter()
            baselines[v] = (make_baseline(cfg, train, test, v, st), st)
            timing[f"baseline-{v}"] = time.perf_counter() - t0
        jobs = [(cfg, ai, v, ds, str(exp_dir), baselines[v][0], test, baselines[v][1], store)
                for (ai, v), ds in groups.items()]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outs = list(pool.map(_group_job, jobs))
        else:
            outs = [_group_job(j) for j in jobs]
        for cells, tm in outs:
            timing.update(tm)
            for c in cells:
                results[c.cell_id] = c
    ordered = [results[t.id(cfg)] for t in tasks]
    record = R.RunRecord(cfg.experiment_id, __version__,
                         {"global": cfg.seed,
                          "cells": {t.id(cfg): cell_seed(cfg, attack_slug(cfg.attacks[t.attack_index]),
                                                         t.defense, t.variant) for t in tasks}},
                         cfg.to_json(), ordered)
    R.emit_report(record, exp_dir)
    # wall-clock data stays out of report.json so reruns are byte-identical
    timing["total_s"] = time.perf_counter() - t_start
    timing["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    (exp_dir / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    return RunSummary(ordered, len(done), exp_dir)


# ---------------------------------------------------------------------------
# generate / sweep


def generate(cfg: ExperimentConfig, out_root: Path) -> list[tuple[str, int, int, Path]]:
    """Write one poisoned store per (attack, variant); returns (name, k, n, path)."""
    train, _ = build_datasets(cfg)
    out = []
    for v in cfg.variants:
        data = noised(cfg, train, v)
        for a in cfg.attacks:
            poisoned, manifest = P.poison_dataset(data, a, noise_record(cfg, v))
            path = Path(out_root) / cfg.experiment_id / "stores" / f"{attack_slug(a)}-{v}"
            P.save_store(path, poisoned, manifest)
            log_path = path / "stages.log"
            st = StageLog()
            st.add("dataset", f"kind={cfg.dataset.kind} train={len(train)}")
            st.add("noise", f"variant={v} modified={len(N.modified_ids(train, data))}")
            st.add("poison", f"attack={a.label} poisoned={len(manifest.poison_indices)} of {len(poisoned)}")
            log_path.write_text(st.text())
            out.append((f"{attack_slug(a)}-{v}", len(manifest.poison_indices), len(poisoned), path))
    return out


def load_store_for(cfg: ExperimentConfig):
    """(attack, variant, (dataset, manifest, model or None)) for ``cfg.store`` and
    the optional ``cfg.checkpoint``."""
    path = Path(cfg.store)
    if not (path / "manifest.json").exists():
        raise ConfigError("store", f"no poisoned store at {path}")
    ds, manifest = P.load_store(path)
    if manifest is None:
        raise ConfigError("store", f"{path} has no poisoning manifest")
    variant = (manifest.noise or {}).get("variant", "normal")
    model = None
    if cfg.checkpoint:
        if not Path(cfg.checkpoint).exists():
            raise ConfigError("checkpoint", f"no checkpoint at {cfg.checkpoint}")
        model, _ = M.load_checkpoint(cfg.checkpoint, expect_class_count=ds.class_count)
    return manifest.attack, variant, (ds, manifest, model)


SWEEP_COLUMNS = {"poison_ratio": ["poison_ratio", "CAC", "BAC", "ASR", "RAC"],
                 "epochs": ["epochs", "CAC", "BAC", "ASR", "RAC"],
                 "noise_level": ["mean", "variance", "CAC", "BAC", "ASR", "RAC"]}


def _sweep_point(cfg: ExperimentConfig, axis: str, value) -> dict:
    train, test = build_datasets(cfg)
    attack = cfg.attacks[0]
    variant = "normal"
    if axis == "poison_ratio":
        attack = dataclasses.replace(attack, poison_ratio=float(value))
        row = {"poison_ratio": value}
    elif axis == "epochs":
        cfg = cfg.replace(training=dataclasses.replace(cfg.training, epochs=int(value)))
        row = {"epochs": value}
    else:
        mean, var = value
        base = cfg.noise or N.NoiseConfig(seed=_s31(cfg.seed, "noise"))
        cfg = cfg.replace(noise=dataclasses.replace(base, gaussian_mean=float(mean), gaussian_variance=float(var)))
        variant = "noise"
        row = {"mean": mean, "variance": var}
    stages = StageLog()
    b = make_baseline(cfg, train, test, variant, stages)
    bd = make_backdoor(cfg, attack, b, test, stages)
    r = bd.before
    row.update(CAC=R.pct(r.cac), BAC=R.pct(r.bac), ASR=R.pct(r.asr), RAC=R.pct(r.rac))
    return row


def _sweep_job(args):
    return _sweep_point(*args)


def sweep(cfg: ExperimentConfig, out_root: Path, axis: str | None = None, workers: int = 1) -> Path:
    spec = cfg.sweep
    if spec is None:
        raise ConfigError("sweep", "the sweep command needs a [sweep] block")
    axis = axis or spec.axis
    if axis != spec.axis:
        raise ConfigError("sweep.axis", f"config sweeps {spec.axis!r}, not {axis!r}")
    if axis == "noise_level":
        points = [(m, v) for m in spec.means for v in spec.variances]
    else:
        points = list(spec.values)
    jobs = [(cfg, axis, p) for p in points]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    exp_dir = Path(out_root) / cfg.experiment_id
    exp_dir.mkdir(parents=True, exist_ok=True)
    path = exp_dir / f"sweep-{axis}.csv"
    R.write_csv(path, SWEEP_COLUMNS[axis], rows)
    return path
