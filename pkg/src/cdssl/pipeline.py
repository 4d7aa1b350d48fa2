"""End-to-end orchestration: prepare -> pretrain stages -> fine-tune folds -> evaluate -> report.

Every step has a content hash built from the config fields it reads and the
hashes of the steps it consumes. A step writes its artifacts first and a
stamp (or checkpoint metadata) carrying that hash last; on ``resume`` a step
whose stamp matches is skipped, and an upstream artifact whose hash does not
match is refused rather than silently reused.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .cohort import (
    DatasetManifest,
    FilterReport,
    SplitAssignment,
    StudyRoles,
    SubjectRecord,
    build_splits,
    filter_cohort,
    load_manifest,
    manifest_stats,
    save_manifest,
)
from .config import ExperimentConfig, save_config
from .generic import GenericCorpusParams, generic_corpus
from .imaging import (
    SLICE_OFFSETS,
    PhantomParams,
    crop_or_pad,
    extract_slices,
    preprocess_volume,
    save_heatmap,
    save_volume,
    synthesize_volume,
)
from .regress import (
    FinetuneConfig,
    InitScheme,
    RegressorModel,
    finetune_regressor,
    init_backbone,
    predict,
    predictions_csv,
    read_predictions_csv,
)
from .saliency import grad_cam, render_overlay, save_overlay
from .ssl import Checkpoint, CheckpointError, SslConfig, load_checkpoint, pretrain, read_metadata, save_checkpoint
from .ssl.pretrain import stage_name

log = logging.getLogger(__name__)

FIVE = SLICE_OFFSETS["five"]
CENTER_COLUMN = FIVE.index(0)
TEST_AGGREGATION_NOTE = (
    "test metrics are reported per fold model and as their mean; whether a single-fold "
    "model or a fold ensemble is the reference is unspecified, so the fold-mean "
    "prediction metrics are listed separately"
)


class PipelineError(RuntimeError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def step_hash(*parts) -> str:
    doc = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(doc.encode()).hexdigest()


def configure_torch(threads: int = 1) -> None:
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path: Path, doc) -> None:
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


class RunLayout:
    """Directory layout of one run; ``data_dir`` may point at a shared prepared-data directory."""

    def __init__(self, root: str | Path, data_dir: str | Path | None = None):
        self.root = Path(root)
        self.data = Path(data_dir) if data_dir is not None else self.root / "data"
        self.checkpoints = self.root / "checkpoints"
        self.models = self.root / "models"
        self.reports = self.root / "reports"
        self.saliency = self.root / "saliency"

    def ensure(self) -> None:
        for d in (self.root, self.data, self.checkpoints, self.models, self.reports, self.saliency):
            d.mkdir(parents=True, exist_ok=True)


# ----------------------------------------------------------------------------
# prepared data


class PreparedData:
    """Read-only view of a prepared data directory (slices memory-mapped)."""

    def __init__(self, data_dir: Path):
        self.dir = data_dir
        self.manifest = load_manifest(data_dir / "manifest.jsonl")
        index = json.loads((data_dir / "slice_index.json").read_text())
        self.row = {sid: i for i, sid in enumerate(index["ids"])}
        self.slices = np.load(data_dir / "slices.npy", mmap_mode="r")
        self.labels = {r.subject_id: r.cdr_sb_month12 for r in self.manifest.records}

    def images(self, ids: list[str], mode: str) -> tuple[torch.Tensor, np.ndarray]:
        """Slices of ``ids`` as ``(n_images, 1, H, W)`` float16 plus the subject index of each image."""
        rows = np.array([self.row[s] for s in ids], dtype=np.int64)
        if mode == "five":
            block = np.asarray(self.slices[rows])
            x = block.reshape(-1, 1, *block.shape[2:])
            owner = np.repeat(np.arange(len(ids)), len(FIVE))
        else:
            x = np.asarray(self.slices[rows, CENTER_COLUMN : CENTER_COLUMN + 1])
            owner = np.arange(len(ids))
        return torch.from_numpy(np.ascontiguousarray(x)), owner

    def targets(self, ids: list[str]) -> np.ndarray:
        return np.array([self.labels[s] for s in ids], dtype=np.float64)

    def generic(self) -> tuple[np.ndarray, np.ndarray]:
        return np.load(self.dir / "generic_images.npy", mmap_mode="r"), np.load(self.dir / "generic_labels.npy")


def _subject_covariates(rng: np.random.Generator, label: float | None, ineligible: int | None) -> dict:
    """Baseline covariates; ``ineligible`` selects which inclusion rule the subject breaks."""
    cov = {
        "cdr_sb_baseline": float(np.clip(np.round(2 * (label if label is not None else 2.0) * rng.uniform(0.4, 0.8)) / 2, 0, 18)),
        "mmse": int(rng.integers(21, 31)),
        "amyloid_positive": True,
        "stage": "prodromal" if rng.random() < 0.5 else "mild",
    }
    if ineligible == 0:
        cov["mmse"] = int(rng.integers(15, 21))
    elif ineligible == 1:
        cov["amyloid_positive"] = False
    elif ineligible == 2:
        cov["stage"] = "other"
    return cov


def prepare_data(cfg: ExperimentConfig, data_dir: Path, config_hash: str = "") -> None:
    """Synthesize the cohort, store raw volumes, standardized five-slice stacks and the generic corpus."""
    dc = cfg.data
    data_dir.mkdir(parents=True, exist_ok=True)
    (data_dir / "volumes").mkdir(exist_ok=True)
    records, roles, ids = [], {}, []
    n_total = sum(s.subjects for s in dc.studies)
    first_shape = None
    slices = None
    row = 0
    for si, study in enumerate(dc.studies):
        roles[study.name] = StudyRoles(**{r: True for r in study.roles})
        labelled = any(r in study.roles for r in ("finetune", "in_study_test", "out_study_test"))
        pick = np.random.default_rng([dc.seed, si, 7])
        n_bad = int(round(dc.ineligible_fraction * study.subjects)) if labelled else 0
        bad = set(pick.choice(study.subjects, size=n_bad, replace=False).tolist()) if n_bad else set()
        params = PhantomParams(
            shape=tuple(dc.phantom.shape),
            spacing_mm=tuple(study.spacing_mm),
            signal_coef=dc.phantom.signal_coef,
            label_noise=dc.phantom.label_noise,
            image_noise=dc.phantom.image_noise,
            texture_amplitude=dc.phantom.texture_amplitude,
            label_offset=study.label_offset,
            orientations=tuple(study.orientations),
        )
        for j in range(study.subjects):
            sid = f"{study.name}-{j:04d}"
            seed = int(np.random.SeedSequence([dc.seed, si, j]).generate_state(1)[0])
            vol, label, _ = synthesize_volume(params, seed)
            save_volume(vol, data_dir / "volumes" / f"{sid}.vol")
            std = preprocess_volume(vol)
            stack = np.stack([crop_or_pad(s.data) for s in extract_slices(std, "five", sid).slices]).astype(np.float16)
            if slices is None:
                first_shape = stack.shape
                slices = np.lib.format.open_memmap(
                    data_dir / "slices.npy.tmp", mode="w+", dtype=np.float16, shape=(n_total, *first_shape)
                )
            slices[row] = stack
            row += 1
            cov_rng = np.random.default_rng([dc.seed, si, j, 1])
            if labelled:
                kind = (j % 3) if j in bad else None
                cov = _subject_covariates(cov_rng, label, kind)
                records.append(SubjectRecord(sid, study.name, f"volumes/{sid}.vol", cdr_sb_month12=label, **cov))
            else:
                baseline = _subject_covariates(cov_rng, label, None)["cdr_sb_baseline"]
                records.append(SubjectRecord(sid, study.name, f"volumes/{sid}.vol", cdr_sb_baseline=baseline))
            ids.append(sid)
    if slices is None:
        raise ValueError("configured cohort has no subjects")
    slices.flush()
    del slices
    (data_dir / "slices.npy.tmp").replace(data_dir / "slices.npy")
    manifest = DatasetManifest(records, roles)
    save_manifest(manifest, data_dir / "manifest.jsonl")
    _write_json(data_dir / "slice_index.json", {"ids": ids, "offsets": list(FIVE)})

    gp = GenericCorpusParams(n_images=dc.generic.images, size=dc.generic.size)
    g_img, g_lab = generic_corpus(gp, dc.seed)
    np.save(data_dir / "generic_images.npy", g_img)
    np.save(data_dir / "generic_labels.npy", g_lab)
    _write_json(data_dir / "stats.json", manifest_stats(manifest))


# ----------------------------------------------------------------------------
# pipeline


class Pipeline:
    def __init__(
        self,
        cfg: ExperimentConfig,
        out: str | Path | None = None,
        resume: bool = False,
        data_dir: str | Path | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.config_hash = cfg.config_hash()
        self.layout = RunLayout(out if out is not None else cfg.output_dir, data_dir)
        self.resume = resume
        self._data: PreparedData | None = None
        self._splits: SplitAssignment | None = None

    # -- hashes -------------------------------------------------------------

    @property
    def data_hash(self) -> str:
        # the slicing modes only pick which stored slices a step reads; they enter the step hashes instead
        d = dataclasses.asdict(self.cfg.data)
        d.pop("ssl_slicing")
        d.pop("finetune_slicing")
        return step_hash("data", d)

    @property
    def splits_hash(self) -> str:
        ev = self.cfg.eval
        return step_hash("splits", self.data_hash, self.cfg.seed, ev.folds, ev.test_fraction, ev.ssl_train_fraction)

    def stage_hashes(self) -> list[str]:
        out, prev = [], self.splits_hash
        for i, st in enumerate(self.cfg.ssl.stages):
            prev = step_hash(
                "stage", i, prev, dataclasses.asdict(st), dataclasses.asdict(self.cfg.model), self.cfg.seed, self.cfg.data.ssl_slicing
            )
            out.append(prev)
        return out

    def finetune_hash(self, fold: int) -> str:
        stages = self.stage_hashes()
        return step_hash(
            "finetune",
            stages[-1] if stages else self.splits_hash,
            dataclasses.asdict(self.cfg.finetune),
            dataclasses.asdict(self.cfg.model),
            self.cfg.init_kind(),
            self.cfg.seed,
            self.cfg.data.finetune_slicing,
            fold,
        )

    @property
    def eval_hash(self) -> str:
        return step_hash("evaluate", [self.finetune_hash(k) for k in range(self.cfg.eval.folds)], dataclasses.asdict(self.cfg.eval))

    @property
    def saliency_hash(self) -> str:
        return step_hash("saliency", self.finetune_hash(0), dataclasses.asdict(self.cfg.saliency))

    # -- stamps -------------------------------------------------------------

    def _stamp_path(self, directory: Path, name: str) -> Path:
        return directory / f"{name}.stamp.json"

    def _stamp(self, directory: Path, name: str, h: str) -> None:
        _write_json(self._stamp_path(directory, name), {"step": name, "step_hash": h, "config_hash": self.config_hash, "seed": self.cfg.seed})

    def _stamp_matches(self, directory: Path, name: str, h: str) -> bool:
        p = self._stamp_path(directory, name)
        return p.exists() and json.loads(p.read_text()).get("step_hash") == h

    def _require(self, directory: Path, name: str, h: str, stage: str) -> None:
        p = self._stamp_path(directory, name)
        if not p.exists():
            raise PipelineError(stage, f"missing upstream artifact {p}; run that step first")
        if json.loads(p.read_text()).get("step_hash") != h:
            raise PipelineError(stage, f"upstream artifact {p} was produced from a different configuration")

    def _skip(self, done: bool, name: str) -> bool:
        if done and self.resume:
            log.info("%s: up to date, skipped", name)
            return True
        return False

    # -- steps --------------------------------------------------------------

    def _run_step(self, stage: str, fn):
        t0 = time.time()
        try:
            out = fn()
        except PipelineError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
        log.info("%s finished in %.1fs", stage, time.time() - t0)
        return out

    def prepare(self) -> None:
        def go():
            self.layout.ensure()
            save_config(self.cfg, self.layout.root / "config.yaml")
            if not self._skip(self._stamp_matches(self.layout.data, "data", self.data_hash), "prepare/data"):
                prepare_data(self.cfg, self.layout.data, self.config_hash)
                self._stamp(self.layout.data, "data", self.data_hash)
            split_path = self.layout.data / "splits" / f"{self.splits_hash[:16]}.json"
            if not (self.resume and split_path.exists()):
                manifest = load_manifest(self.layout.data / "manifest.jsonl")
                ev = self.cfg.eval
                splits = build_splits(manifest, self.cfg.seed, ev.folds, ev.test_fraction, ev.ssl_train_fraction)
                _write_text(split_path, splits.to_json())
            self._stamp(self.layout.root, "prepare", self.splits_hash)

        self._run_step("prepare", go)

    def data(self) -> PreparedData:
        if self._data is None:
            self._require(self.layout.data, "data", self.data_hash, "prepare")
            self._data = PreparedData(self.layout.data)
        return self._data

    def splits(self) -> SplitAssignment:
        if self._splits is None:
            self._require(self.layout.root, "prepare", self.splits_hash, "prepare")
            p = self.layout.data / "splits" / f"{self.splits_hash[:16]}.json"
            self._splits = SplitAssignment.from_json(p.read_text())
        return self._splits

    def stage_paths(self) -> list[Path]:
        return [
            self.layout.checkpoints / f"stage{i + 1}-{stage_name(st.dataset, st.method)}.ckpt"
            for i, st in enumerate(self.cfg.ssl.stages)
        ]

    def _load_step_checkpoint(self, path: Path, h: str, stage: str) -> Checkpoint:
        if not path.exists():
            raise PipelineError(stage, f"missing checkpoint {path}; run that step first")
        if read_metadata(path).get("meta", {}).get("step_hash") != h:
            raise CheckpointError(f"{path}: step hash mismatch; produced from a different configuration")
        return load_checkpoint(path)

    def _checkpoint_done(self, path: Path, h: str) -> bool:
        return path.exists() and read_metadata(path).get("meta", {}).get("step_hash") == h

    def _stage_data(self, i: int, st) -> tuple:
        if st.dataset == "generic":
            images, labels = self.data().generic()
            n = images.shape[0]
            perm = np.random.default_rng([self.cfg.seed, i, 11]).permutation(n)
            n_val = max(2, n // 10)
            val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
            x_tr, x_va = torch.from_numpy(np.asarray(images[tr])), torch.from_numpy(np.asarray(images[val]))
            y_tr, y_va = torch.from_numpy(labels[tr]).long(), torch.from_numpy(labels[val]).long()
            return x_tr, x_va, y_tr, y_va
        sp = self.splits()
        mode = self.cfg.data.ssl_slicing
        x_tr, _ = self.data().images(sp.ssl_train, mode)
        x_va, _ = self.data().images(sp.ssl_val, mode)
        return x_tr, x_va, None, None

    def pretrain_stages(self) -> Checkpoint | None:
        def go():
            ck = None
            for i, (st, h, path) in enumerate(zip(self.cfg.ssl.stages, self.stage_hashes(), self.stage_paths())):
                if self._skip(self._checkpoint_done(path, h), path.name):
                    ck = load_checkpoint(path)
                    continue
                if i > 0 and ck is None:
                    ck = self._load_step_checkpoint(self.stage_paths()[i - 1], self.stage_hashes()[i - 1], "pretrain")
                x_tr, x_va, y_tr, y_va = self._stage_data(i, st)
                ck = pretrain(
                    ck,
                    x_tr,
                    x_va,
                    SslConfig(**st.ssl_kwargs()),
                    seed=self.cfg.seed * 1000 + i,
                    dataset_tag=st.dataset,
                    encoder_spec=self.cfg.model.encoder_spec(),
                    train_labels=y_tr,
                    val_labels=y_va,
                    config_hash=self.config_hash,
                )
                ck.meta["step_hash"] = h
                save_checkpoint(ck, path)
                log.info("pretrain stage %s: val loss %.4f (best epoch %d)", path.stem, ck.val_loss, ck.provenance[-1]["best_epoch"])
            return ck

        return self._run_step("pretrain", go)

    def fold_path(self, k: int) -> Path:
        return self.layout.models / f"fold{k}.ckpt"

    def finetune(self) -> list[RegressorModel]:
        def go():
            kind = self.cfg.init_kind()
            init = None
            if self.cfg.ssl.stages:
                init = self._load_step_checkpoint(self.stage_paths()[-1], self.stage_hashes()[-1], "finetune")
            scheme = InitScheme(kind, init)
            sp, data = self.splits(), self.data()
            mode = self.cfg.data.finetune_slicing
            fc = self.cfg.finetune
            ft_cfg = FinetuneConfig(
                fc.epochs, fc.batch_size, fc.learning_rate, fc.weight_decay, encoder_lr_scale=fc.encoder_lr_scale
            )
            models = []
            for k, (train_ids, val_ids) in enumerate(sp.ft_folds):
                path, h = self.fold_path(k), self.finetune_hash(k)
                if self._skip(self._checkpoint_done(path, h), path.name):
                    models.append(RegressorModel.from_checkpoint(load_checkpoint(path)))
                    continue
                x_tr, own_tr = data.images(train_ids, mode)
                y_tr = torch.tensor(data.targets(train_ids)[own_tr], dtype=torch.float32)
                x_va, own_va = data.images(val_ids, mode)
                y_va = torch.tensor(data.targets(val_ids)[own_va], dtype=torch.float32)
                seed = self.cfg.seed * 1000 + 100 + k
                enc, chain = init_backbone(scheme, self.cfg.model.encoder_spec(), 1, seed)
                model = finetune_regressor(enc, x_tr, y_tr, x_va, y_va, ft_cfg, seed, chain, own_va)
                ck = model.to_checkpoint(self.config_hash)
                ck.meta["step_hash"] = h
                ck.meta["fold"] = k
                save_checkpoint(ck, path)
                log.info("fold %d: best epoch %d, val MSE %.4f", k, model.best_epoch, model.training_log[model.best_epoch]["val_mse"])
                models.append(model)
            return models

        return self._run_step("finetune", go)

    def _subject_predictions(self, model: RegressorModel, ids: list[str]) -> list[tuple[str, float, float]]:
        data = self.data()
        x, owner = data.images(ids, self.cfg.data.finetune_slicing)
        preds = np.array(predict(model, x))
        sums = np.bincount(owner, weights=preds, minlength=len(ids))
        counts = np.bincount(owner, minlength=len(ids))
        y = data.targets(ids)
        return [(sid, float(y[i]), float(sums[i] / counts[i])) for i, sid in enumerate(ids)]

    def test_sets(self) -> dict[str, list[str]]:
        sp = self.splits()
        sets = {}
        if "in_study" in self.cfg.eval.test_sets and sp.ft_test_in_study:
            sets["in_study"] = sp.ft_test_in_study
        if "out_study" in self.cfg.eval.test_sets:
            for study, ids in sorted(sp.ft_test_out_study.items()):
                if ids:
                    sets[f"out_{study}"] = ids
        return sets

    def evaluate(self) -> dict:
        def go():
            if self._skip(self._stamp_matches(self.layout.reports, "evaluate", self.eval_hash), "evaluate"):
                return json.loads((self.layout.reports / "metrics.json").read_text())
            models = []
            for k in range(self.cfg.eval.folds):
                models.append(
                    RegressorModel.from_checkpoint(self._load_step_checkpoint(self.fold_path(k), self.finetune_hash(k), "evaluate"))
                )
            sp = self.splits()
            rep = self.layout.reports
            for k, (_, val_ids) in enumerate(sp.ft_folds):
                _write_text(rep / f"predictions_val_fold{k}.csv", predictions_csv(self._subject_predictions(models[k], val_ids)))
            for tag, ids in self.test_sets().items():
                per_fold = [self._subject_predictions(m, ids) for m in models]
                for k, rows in enumerate(per_fold):
                    _write_text(rep / f"predictions_{tag}_fold{k}.csv", predictions_csv(rows))
                mean_rows = [(sid, yt, float(np.mean([pf[i][2] for pf in per_fold]))) for i, (sid, yt, _) in enumerate(per_fold[0])]
                _write_text(rep / f"predictions_{tag}.csv", predictions_csv(mean_rows))
            logs = {f"fold{k}": {"best_epoch": m.best_epoch, "log": m.training_log} for k, m in enumerate(models)}
            _write_json(rep / "training_log.json", logs)
            _write_json(
                rep / "run_info.json",
                {
                    "config_hash": self.config_hash,
                    "seed": self.cfg.seed,
                    "folds": self.cfg.eval.folds,
                    "test_sets": sorted(self.test_sets()),
                    "provenance": [p["stage_name"] for p in models[0].provenance],
                    "init_scheme": self.cfg.init_kind(),
                    "residual_bins": self.cfg.eval.residual_bins,
                },
            )
            out = emit_report(self.layout.root)
            self._stamp(rep, "evaluate", self.eval_hash)
            return out

        return self._run_step("evaluate", go)

    def saliency(self) -> list[Path]:
        def go():
            sc = self.cfg.saliency
            if sc.images <= 0:
                return []
            if self._skip(self._stamp_matches(self.layout.saliency, "saliency", self.saliency_hash), "saliency"):
                return sorted(self.layout.saliency.glob("*.png"))
            model = RegressorModel.from_checkpoint(self._load_step_checkpoint(self.fold_path(0), self.finetune_hash(0), "saliency"))
            ids = self.splits().ft_test_in_study[: sc.images] or self.splits().ft_folds[0][1][: sc.images]
            x, _ = self.data().images(ids, "center")
            written = []
            for sid, img in zip(ids, x):
                arr = img[0].float().numpy()
                hm = grad_cam(model, arr, sc.layer)
                save_heatmap(hm.data.astype(np.float32), self.layout.saliency / f"{sid}.heat")
                path = self.layout.saliency / f"{sid}.png"
                save_overlay(render_overlay(arr, hm), path)
                written.append(path)
            self._stamp(self.layout.saliency, "saliency", self.saliency_hash)
            return written

        return self._run_step("saliency", go)

    def run(self) -> dict:
        self.prepare()
        self.pretrain_stages()
        self.finetune()
        report = self.evaluate()
        self.saliency()
        return report


def run_pipeline(cfg: ExperimentConfig, out=None, resume: bool = False, data_dir=None) -> Path:
    p = Pipeline(cfg, out, resume, data_dir)
    p.run()
    return p.layout.root


# ----------------------------------------------------------------------------
# reports and comparisons


def _read_rows(path: Path) -> list[tuple[str, float, float]]:
    return read_predictions_csv(path.read_text())


def emit_report(run_dir: str | Path) -> dict:
    """Write metrics.json, residuals.csv and summary.txt from the stored predictions."""
    rep = Path(run_dir) / "reports"
    info_path = rep / "run_info.json"
    if not info_path.exists():
        raise PipelineError("report", f"incomplete run: missing {info_path}")
    info = json.loads(info_path.read_text())
    folds = info["folds"]
    needed = [rep / f"predictions_val_fold{k}.csv" for k in range(folds)]
    for tag in info["test_sets"]:
        needed += [rep / f"predictions_{tag}.csv"] + [rep / f"predictions_{tag}_fold{k}.csv" for k in range(folds)]
    missing = [p.name for p in needed if not p.exists()]
    if missing:
        raise PipelineError("report", f"incomplete run: missing {', '.join(missing)}")

    val_folds = [_read_rows(rep / f"predictions_val_fold{k}.csv") for k in range(folds)]
    val_report = M.aggregate_folds([M.fold_metrics([r[1] for r in rows], [r[2] for r in rows]) for rows in val_folds])
    pooled = sorted(r for rows in val_folds for r in rows)
    _write_text(rep / "predictions_val.csv", predictions_csv(pooled))
    val_report.residual_hist = M.residual_stats([r[1] for r in pooled], [r[2] for r in pooled], info["residual_bins"])

    tests = {}
    for tag in info["test_sets"]:
        per = [_read_rows(rep / f"predictions_{tag}_fold{k}.csv") for k in range(folds)]
        fold_rep = M.aggregate_folds([M.fold_metrics([r[1] for r in rows], [r[2] for r in rows]) for rows in per])
        mean_rows = _read_rows(rep / f"predictions_{tag}.csv")
        fold_rep.residual_hist = M.residual_stats([r[1] for r in mean_rows], [r[2] for r in mean_rows], info["residual_bins"])
        tests[tag] = {
            "per_fold_models": fold_rep.to_dict(),
            "fold_mean_prediction": M.fold_metrics([r[1] for r in mean_rows], [r[2] for r in mean_rows]),
            "n_subjects": len(mean_rows),
        }

    doc = {
        "config_hash": info["config_hash"],
        "seed": info["seed"],
        "init_scheme": info["init_scheme"],
        "provenance": info["provenance"],
        "validation": val_report.to_dict(),
        "tests": tests,
        "notes": [TEST_AGGREGATION_NOTE],
    }
    _write_json(rep / "metrics.json", doc)

    hist = val_report.residual_hist
    lines = ["bin_left,bin_right,count"]
    lines += [f"{lo!r},{hi!r},{c}" for lo, hi, c in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts)]
    _write_text(rep / "residuals.csv", "\n".join(lines) + "\n")

    chain = " -> ".join(info["provenance"])
    text = [
        f"run {info['config_hash'][:12]} seed {info['seed']}",
        f"provenance: {chain}",
        "",
        "set               R2 (sd) / r (sd) / MSE (sd)",
        f"{'validation':<17} {val_report.summary_line()}",
    ]
    for tag, t in tests.items():
        fr = M.MetricsReport(t["per_fold_models"]["per_fold"], t["per_fold_models"]["mean"], t["per_fold_models"]["sd"])
        text.append(f"{tag:<17} {fr.summary_line()}")
    text += ["", f"residual mean {hist.mean:.3f}, sd {hist.sd:.3f}", f"note: {TEST_AGGREGATION_NOTE}"]
    _write_text(rep / "summary.txt", "\n".join(text) + "\n")
    return doc


def compare_runs(run_a: str | Path, run_b: str | Path, test_set: str = "in_study") -> M.SteigerResult:
    """Steiger's Z1 between two runs' predictions on the same subjects (truth shared)."""
    run_a, run_b = Path(run_a), Path(run_b)
    name = "val" if test_set == "val" else test_set
    pa, pb = run_a / "reports" / f"predictions_{name}.csv", run_b / "reports" / f"predictions_{name}.csv"
    for p in (pa, pb):
        if not p.exists():
            raise PipelineError("compare", f"missing predictions {p}")
    a = {s: (y, p) for s, y, p in _read_rows(pa)}
    b = {s: (y, p) for s, y, p in _read_rows(pb)}
    if set(a) != set(b):
        diff = sorted(set(a) ^ set(b))
        raise PipelineError("compare", f"subject lists differ; symmetric difference: {diff[:20]}{' ...' if len(diff) > 20 else ''}")
    ids = sorted(a)
    y = np.array([a[s][0] for s in ids])
    if not np.allclose(y, [b[s][0] for s in ids]):
        raise PipelineError("compare", "runs disagree on the true labels")
    ya = np.array([a[s][1] for s in ids])
    yb = np.array([b[s][1] for s in ids])
    r12, r13 = M.pearson_r(y, ya), M.pearson_r(y, yb)
    if np.array_equal(ya, yb):
        # identical predictions: r23 = 1 lies outside the test's domain, the difference is exactly 0
        return M.SteigerResult(run_a.name, run_b.name, r12, r13, 1.0, len(ids), 0.0, 1.0)
    r23 = M.pearson_r(ya, yb)
    return M.steiger_z1(r12, r13, r23, len(ids), model_a=run_a.name, model_b=run_b.name)
