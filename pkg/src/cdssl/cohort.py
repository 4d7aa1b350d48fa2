"""Subject manifests, inclusion filters and SSL / fine-tune / test splits."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CDR_SB_MAX = 18.0
STAGES = ("prodromal", "mild", "other")
ROLE_FLAGS = ("ssl", "finetune", "in_study_test", "out_study_test")


class ManifestError(ValueError):
    pass


@dataclass
class SubjectRecord:
    subject_id: str
    study: str
    image_ref: str
    cdr_sb_baseline: float
    cdr_sb_month12: float | None = None
    mmse: int | None = None
    amyloid_positive: bool | None = None
    stage: str | None = None

    def __post_init__(self):
        for name in ("cdr_sb_baseline", "cdr_sb_month12"):
            val = getattr(self, name)
            if val is None and name == "cdr_sb_month12":
                continue
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ManifestError(f"{name}: expected a number, got {val!r}")
            if not (0.0 <= val <= CDR_SB_MAX):
                raise ManifestError(f"{name}: {val} outside [0, {CDR_SB_MAX:g}]")
        if self.mmse is not None:
            if isinstance(self.mmse, bool) or not isinstance(self.mmse, int):
                raise ManifestError(f"mmse: expected an integer, got {self.mmse!r}")
            if not 0 <= self.mmse <= 30:
                raise ManifestError(f"mmse: {self.mmse} outside [0, 30]")
        if self.amyloid_positive is not None and not isinstance(self.amyloid_positive, bool):
            raise ManifestError(f"amyloid_positive: expected a boolean, got {self.amyloid_positive!r}")
        if self.stage is not None and self.stage not in STAGES:
            raise ManifestError(f"stage: {self.stage!r} not in {STAGES}")
        for name in ("subject_id", "study", "image_ref"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise ManifestError(f"{name}: expected a non-empty string")


_RECORD_FIELDS = tuple(f.name for f in fields(SubjectRecord))


@dataclass
class StudyRoles:
    ssl: bool = False
    finetune: bool = False
    in_study_test: bool = False
    out_study_test: bool = False


@dataclass
class DatasetManifest:
    records: list[SubjectRecord]
    study_roles: dict[str, StudyRoles] = field(default_factory=dict)

    def __post_init__(self):
        dup = [sid for sid, c in Counter(r.subject_id for r in self.records).items() if c > 1]
        if dup:
            raise ManifestError(f"duplicate subject_id: {', '.join(sorted(dup))}")
        for study, roles in self.study_roles.items():
            if roles.out_study_test and (roles.ssl or roles.finetune):
                raise ManifestError(
                    f"study {study!r}: out-study test sets cannot carry ssl/finetune roles"
                )

    def by_id(self) -> dict[str, SubjectRecord]:
        return {r.subject_id: r for r in self.records}

    def studies_with(self, role: str) -> list[str]:
        return sorted(s for s, r in self.study_roles.items() if getattr(r, role))

    def subset(self, keep) -> DatasetManifest:
        return DatasetManifest([r for r in self.records if keep(r)], dict(self.study_roles))


def roles_path(manifest_path: str | Path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.stem + ".roles.json")


def load_manifest(path: str | Path, study_roles: dict | None = None) -> DatasetManifest:
    """Parse a JSON-lines manifest.

    Study roles come from ``study_roles`` or, if omitted, from the sidecar
    ``<stem>.roles.json`` next to the manifest (when present).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            unknown = set(obj) - set(_RECORD_FIELDS)
            missing = {"subject_id", "study", "image_ref", "cdr_sb_baseline"} - set(obj)
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown field(s) {sorted(unknown)}")
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing field(s) {sorted(missing)}")
            try:
                records.append(SubjectRecord(**obj))
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None

    if study_roles is None and roles_path(path).exists():
        study_roles = json.loads(roles_path(path).read_text())
    roles = {k: v if isinstance(v, StudyRoles) else StudyRoles(**v) for k, v in (study_roles or {}).items()}
    return DatasetManifest(records, roles)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    roles = {k: asdict(v) for k, v in sorted(manifest.study_roles.items())}
    roles_path(path).write_text(json.dumps(roles, indent=2, sort_keys=True) + "\n")


@dataclass
class FilterReport:
    kept: int = 0
    excluded_missing: int = 0
    excluded_criteria: int = 0


def passes_filter(rec: SubjectRecord) -> bool | None:
    """True/False for the inclusion rule, None when a filter field is absent."""
    if rec.amyloid_positive is None or rec.mmse is None or rec.stage is None:
        return None
    return bool(rec.amyloid_positive) and rec.mmse > 20 and rec.stage in ("prodromal", "mild")


def filter_cohort(
    manifest: DatasetManifest, report: FilterReport | None = None
) -> DatasetManifest:
    """Keep amyloid-positive, MMSE > 20, prodromal/mild subjects."""
    report = report if report is not None else FilterReport()
    kept = []
    for rec in manifest.records:
        ok = passes_filter(rec)
        if ok is None:
            report.excluded_missing += 1
        elif ok:
            kept.append(rec)
        else:
            report.excluded_criteria += 1
    report.kept = len(kept)
    if not kept:
        log.warning("cohort filter removed every record")
    return DatasetManifest(kept, dict(manifest.study_roles))


@dataclass
class SplitAssignment:
    ssl_train: list[str]
    ssl_val: list[str]
    ft_folds: list[tuple[list[str], list[str]]]
    ft_test_in_study: list[str]
    ft_test_out_study: dict[str, list[str]]
    seed: int
    stratification: str = "study+quartile"

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "stratification": self.stratification,
            "ssl": {"train": self.ssl_train, "val": self.ssl_val},
            "finetune": {
                "folds": [{"train": t, "val": v} for t, v in self.ft_folds],
                "test_in_study": self.ft_test_in_study,
                "test_out_study": self.ft_test_out_study,
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> SplitAssignment:
        doc = json.loads(text)
        ft = doc["finetune"]
        return cls(
            ssl_train=doc["ssl"]["train"],
            ssl_val=doc["ssl"]["val"],
            ft_folds=[(f["train"], f["val"]) for f in ft["folds"]],
            ft_test_in_study=ft["test_in_study"],
            ft_test_out_study=ft["test_out_study"],
            seed=doc["seed"],
            stratification=doc.get("stratification", "study+quartile"),
        )

    def finetune_pool(self) -> list[str]:
        ids = set(self.ft_test_in_study)
        for _, val in self.ft_folds:
            ids.update(val)
        return sorted(ids)


def _quartile_bins(labels: np.ndarray) -> np.ndarray:
    edges = np.quantile(labels, [0.25, 0.5, 0.75])
    return np.searchsorted(edges, labels, side="right")


def _stratified_order(
    recs: list[SubjectRecord], folds: int, rng: np.random.Generator
) -> tuple[list[SubjectRecord], str]:
    """Concatenate shuffled strata; dealing this order round-robin stratifies."""
    labels = np.array([r.cdr_sb_month12 for r in recs], dtype=np.float64)
    bins = _quartile_bins(labels) if len(recs) else np.zeros(0, dtype=int)
    strata: dict[tuple, list[SubjectRecord]] = defaultdict(list)
    for rec, b in zip(recs, bins):
        strata[(rec.study, int(b))].append(rec)
    mode = "study+quartile"
    if any(len(v) < folds for v in strata.values()):
        log.warning("stratum smaller than %d folds; stratifying by study only", folds)
        mode = "study"
        strata = defaultdict(list)
        for rec in recs:
            strata[(rec.study,)].append(rec)
    order = []
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda r: r.subject_id)
        idx = rng.permutation(len(members))
        order.extend(members[i] for i in idx)
    return order, mode


def _spread_pick(n: int, m: int) -> list[int]:
    """m indices spread evenly over range(n)."""
    return sorted({int(math.floor((i + 0.5) * n / m)) for i in range(m)}) if m else []


def build_splits(
    manifest: DatasetManifest,
    seed: int,
    folds: int = 3,
    test_fraction: float = 0.3,
    ssl_train_fraction: float = 0.9,
    exclude_finetune_from_ssl: bool = True,
) -> SplitAssignment:
    """Deterministic split assignment for a (filtered-where-needed) manifest.

    The fine-tune pool is the subset of finetune-role studies that pass the
    inclusion filter and carry a month-12 label; ``floor(test_fraction * n)``
    of it is held out as the in-study test set and the rest is dealt into
    ``folds`` stratified folds.
    """
    rng = np.random.default_rng(seed)
    ft_studies = set(manifest.studies_with("finetune"))
    ssl_studies = set(manifest.studies_with("ssl"))
    out_studies = manifest.studies_with("out_study_test")
    if not ft_studies:
        raise ManifestError("no study carries the finetune role")
    if not ssl_studies:
        raise ManifestError("no study carries the ssl role")

    ft_pool = [
        r
        for r in filter_cohort(manifest.subset(lambda r: r.study in ft_studies)).records
        if r.cdr_sb_month12 is not None
    ]
    if not ft_pool:
        raise ManifestError("fine-tune pool is empty after filtering")

    order, mode = _stratified_order(ft_pool, folds, rng)
    n_test = int(math.floor(test_fraction * len(order)))
    test_idx = set(_spread_pick(len(order), n_test))
    test = [r.subject_id for i, r in enumerate(order) if i in test_idx]
    rest = [r for i, r in enumerate(order) if i not in test_idx]
    fold_members: list[list[str]] = [[] for _ in range(folds)]
    for i, r in enumerate(rest):
        fold_members[i % folds].append(r.subject_id)
    ft_folds = []
    for k in range(folds):
        train = sorted(sid for j, fm in enumerate(fold_members) if j != k for sid in fm)
        ft_folds.append((train, sorted(fold_members[k])))

    ft_ids = {r.subject_id for r in ft_pool}
    ssl_pool = sorted(
        r.subject_id
        for r in manifest.records
        if r.study in ssl_studies and not (exclude_finetune_from_ssl and r.subject_id in ft_ids)
    )
    if not ssl_pool:
        raise ManifestError("SSL pool is empty")
    perm = rng.permutation(len(ssl_pool))
    n_train = int(math.floor(ssl_train_fraction * len(ssl_pool) + 0.5))
    if len(ssl_pool) >= 2:
        n_train = min(n_train, len(ssl_pool) - 1)
    ssl_train = sorted(ssl_pool[i] for i in perm[:n_train])
    ssl_val = sorted(ssl_pool[i] for i in perm[n_train:])

    out = {
        s: sorted(
            r.subject_id
            for r in filter_cohort(manifest.subset(lambda r, s=s: r.study == s)).records
            if r.cdr_sb_month12 is not None
        )
        for s in out_studies
    }
    return SplitAssignment(
        ssl_train=ssl_train,
        ssl_val=ssl_val,
        ft_folds=ft_folds,
        ft_test_in_study=sorted(test),
        ft_test_out_study=out,
        seed=seed,
        stratification=mode,
    )


SLICES_PER_MODE = {"center": 1, "five": 5}


def manifest_stats(manifest: DatasetManifest) -> dict:
    per_study = Counter(r.study for r in manifest.records)
    total = sum(per_study.values())
    return {
        "per_study": dict(sorted(per_study.items())),
        "total_subjects": total,
        "slices": {mode: k * total for mode, k in SLICES_PER_MODE.items()},
    }
