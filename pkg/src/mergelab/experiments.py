"""End-to-end study recipes over a config-defined benchmark.

A `Workspace` owns the output directory: it materializes datasets, caches
the base, fine-tuned and joint checkpoints (keyed by a hash of the inputs
each stage depends on), and writes result tables. Recipes reuse cached
checkpoints, so rerunning one rewrites byte-identical tables.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import corpus as C
from . import evaluation as E
from . import merging as M
from . import training as T
from .config import ExperimentConfig, MergeSettings, _jsonable
from .errors import InputError, MergeLabError
from .recmodel import ParamSet
from .reporting import (
    Manifest,
    Record,
    fmt_value,
    format_table,
    manifest_header,
    version_string,
    write_records,
    write_text,
    write_trajectory,
)

log = logging.getLogger(__name__)

RECIPES = ("overall", "scarcity", "unseen", "domain_count_sweep", "group_analysis", "lambda_sweep", "dynamics")
MERGE_METHODS = ("average", "task_arithmetic", "ties", "adamerging", "mergerec")
MODE_SUFFIX = {M.DOMAINWISE: "dw", M.LAYERWISE: "lw"}

DISPLAY = {
    "fine_tuned": "Fine-tuned",
    "zero_shot": "Zero-shot",
    "joint": "Joint Learning",
    "average": "Weight Averaging",
    "task_arithmetic": "Task Arithmetic",
    "ties": "TIES",
    "adamerging_dw": "AdaMerging (domain-wise)",
    "adamerging_lw": "AdaMerging (layer-wise)",
    "mergerec_dw": "MergeRec (domain-wise)",
    "mergerec_lw": "MergeRec (layer-wise)",
}


def method_key(method: str, mode: str = M.DOMAINWISE) -> str:
    return f"{method}_{MODE_SUFFIX[mode]}" if method in ("adamerging", "mergerec") else method


def _digest(obj) -> str:
    blob = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------- merge dispatch


@dataclass
class MergeOutcome:
    params: ParamSet
    adaptive: M.AdaptiveResult | None = None


def dispatch_merge(
    method: str,
    mode: str,
    base: ParamSet,
    teachers: Sequence[ParamSet],
    catalogs: Sequence[C.Catalog],
    settings: MergeSettings,
    seed: int,
    gamma: float,
    overrides: dict | None = None,
    callback: Callable[[int, ParamSet], None] | None = None,
    pseudo_sets: Sequence[C.PseudoUserSet] | None = None,
) -> MergeOutcome:
    """Run one merging method from checkpoints and catalogs only."""
    if method not in MERGE_METHODS:
        raise InputError(f"unknown merge method {method!r}; expected one of {', '.join(MERGE_METHODS)}")
    if mode not in M.MODES:
        raise InputError(f"unknown merge mode {mode!r}; expected one of {', '.join(M.MODES)}")
    if overrides:
        settings = dataclasses.replace(settings, **overrides)
    for t in teachers:
        base.check_compatible(t, f"fine-tuned model {t.domain_id}")
    taus = [M.task_vector(t, base) for t in teachers]
    if method == "average":
        return MergeOutcome(M.weight_averaging(teachers, base))
    if method == "task_arithmetic":
        return MergeOutcome(M.task_arithmetic(base, taus, settings.task_arithmetic_weight))
    if method == "ties":
        return MergeOutcome(
            M.ties_merge(base, taus, settings.ties_density, settings.ties_weight, settings.ties_per_layer)
        )
    cfg = settings.adaptive(seed, gamma)
    pseudo = list(pseudo_sets) if pseudo_sets is not None else [C.build_pseudo_users(c) for c in catalogs]
    if method == "adamerging":
        res = M.adamerging(base, taus, pseudo, catalogs, mode, cfg, callback)
    else:
        res = M.mergerec(base, taus, teachers, pseudo, catalogs, mode, cfg, callback)
    return MergeOutcome(res.params, res)


# ---------------------------------------------------------------- workspace


class Workspace:
    def __init__(self, cfg: ExperimentConfig, out: Path | None = None):
        self.cfg = cfg
        self.out = Path(out) if out is not None else cfg.out
        self.manifest = Manifest(self.out / "manifest.tsv")
        self._datasets: dict[str, C.DomainDataset] = {}
        self._pretrain: list[C.DomainDataset] | None = None
        self._base: ParamSet | None = None
        self._cache: dict[str, ParamSet] = {}

    # stage keys: hashes of everything a cached checkpoint depends on
    @property
    def base_key(self) -> str:
        c = self.cfg
        return _digest([c.features, c.pretrain_corpus, c.model, c.pretrain, c.eval.k])

    def finetune_key(self, domain: str, fraction: float = 1.0) -> str:
        c = self.cfg
        source = next(d for d in c.corpus.domains if d.id == domain)
        return _digest([self.base_key, c.corpus.seed, source, c.finetune, fraction])

    @property
    def joint_key(self) -> str:
        return _digest([self.base_key, self.cfg.corpus, self.cfg.finetune, "joint"])

    def header(self, seed) -> str:
        return manifest_header(self.cfg.digest, seed)

    # ------------------------------------------------------------ data
    def _load_domain(self, source, corpus_seed: int, subdir: str) -> C.DomainDataset:
        f = self.cfg.features
        overrides = None
        if source.synthetic is not None:
            interactions = C.synthesize_domain(source.synthetic, corpus_seed, f)
            path = self.out / subdir / f"{source.id}.tsv"
            C.write_tsv(interactions, path, self.header(corpus_seed))
        else:
            if not source.path.is_file():
                raise InputError(f"interaction file not found: {source.path}")
            interactions = C.ingest_tsv(source.path)
            if source.features is not None:
                if not source.features.is_file():
                    raise InputError(f"feature file not found: {source.features}")
                overrides = C.read_features(source.features)
        return C.build_dataset(interactions, source.id, f.dim, f.active, f.seed, overrides)

    def datasets(self, domains: Sequence[str] | None = None) -> list[C.DomainDataset]:
        ids = list(domains) if domains is not None else self.cfg.corpus.ids
        for d in ids:
            if d not in self.cfg.corpus.ids:
                raise InputError(f"unknown domain {d!r}; configured domains: {', '.join(self.cfg.corpus.ids)}")
            if d not in self._datasets:
                source = next(s for s in self.cfg.corpus.domains if s.id == d)
                ds = self._load_domain(source, self.cfg.corpus.seed, "data")
                self._datasets[d] = ds
                self.write_catalog(ds.catalog)
        return [self._datasets[d] for d in ids]

    def pretrain_datasets(self) -> list[C.DomainDataset]:
        if self._pretrain is None:
            pc = self.cfg.pretrain_corpus
            self._pretrain = [self._load_domain(s, pc.seed, "data/pretrain") for s in pc.domains]
        return self._pretrain

    def catalog_path(self, domain: str) -> Path:
        return self.out / "catalogs" / f"{domain}.tsv"

    def write_catalog(self, catalog: C.Catalog) -> Path:
        path = self.catalog_path(catalog.domain_id)
        C.write_catalog(catalog, path, self.header("none"))
        return path

    # ------------------------------------------------------------ checkpoints
    def base_path(self) -> Path:
        return self.out / "base.ckpt"

    def finetuned_path(self, domain: str, seed: int, fraction: float = 1.0) -> Path:
        tag = "" if fraction == 1.0 else f".frac{fraction:g}"
        return self.out / "finetuned" / f"{domain}{tag}.seed{seed}.ckpt"

    def joint_path(self, seed: int) -> Path:
        return self.out / "joint" / f"joint.seed{seed}.ckpt"

    def _cached(self, path: Path, key: str) -> ParamSet | None:
        if str(path) in self._cache:
            return self._cache[str(path)]
        if path.exists():
            params = ckpt.load(path)
            if params.extra.get("inputs") == key:
                self._cache[str(path)] = params
                return params
            log.info("%s is stale (inputs changed); retraining", path)
        return None

    def _store(self, params: ParamSet, path: Path, key: str, stage: str, seed: int) -> ParamSet:
        params.extra.update(
            {"inputs": key, "config": self.cfg.digest, "version": version_string(), "stage": stage}
        )
        ckpt.save(params, path)
        self._cache[str(path)] = params
        self.manifest.record(
            path.relative_to(self.out).as_posix(),
            stage=stage, seed=seed, dims="x".join(str(d) for d in params.dims), config=self.cfg.digest,
        )
        return params

    def base(self, train: bool = True) -> ParamSet:
        if self._base is not None:
            return self._base
        path = self.base_path()
        cached = self._cached(path, self.base_key)
        if cached is None:
            if not train:
                raise InputError(f"base checkpoint not found or out of date: {path} (run `mergelab pretrain` first)")
            c = self.cfg
            tcfg = c.train_config("pretrain", c.pretrain.seed)
            data = self.pretrain_datasets()
            res = T.pretrain_base(data, tcfg, c.model.hidden, c.model.output, c.model.layers)
            records = list(res.records)
            for d in data:
                records.append((0, "valid", f"popularity_recall@{c.eval.k}:{d.domain_id}", E.popularity_recall(d, c.eval.k)))
            T.write_log(records, self.out / "logs" / "pretrain.tsv", self.header(tcfg.seed))
            cached = self._store(res.params, path, self.base_key, "pretrain", tcfg.seed)
        self._base = cached
        return cached

    def finetuned(
        self, dataset: C.DomainDataset, seed: int, fraction: float = 1.0, train: bool = True
    ) -> ParamSet:
        """Fine-tuned model for `dataset`; pass the subsampled dataset together with its `fraction`."""
        domain = dataset.domain_id
        path = self.finetuned_path(domain, seed, fraction)
        key = self.finetune_key(domain, fraction)
        cached = self._cached(path, key)
        if cached is not None:
            return cached
        if not train:
            raise InputError(f"fine-tuned checkpoint not found or out of date: {path}")
        tcfg = self.cfg.train_config("finetune", seed)
        res = T.finetune(self.base(), dataset, tcfg)
        tag = "" if fraction == 1.0 else f".frac{fraction:g}"
        T.write_log(res.records, self.out / "logs" / f"finetune.{domain}{tag}.seed{seed}.tsv", self.header(seed))
        return self._store(res.params, path, key, "finetune", seed)

    def joint(self, seed: int) -> ParamSet:
        path = self.joint_path(seed)
        cached = self._cached(path, self.joint_key)
        if cached is not None:
            return cached
        tcfg = self.cfg.train_config("finetune", seed)
        res = T.joint_train(self.base(), self.datasets(), tcfg)
        T.write_log(res.records, self.out / "logs" / f"joint.seed{seed}.tsv", self.header(seed))
        return self._store(res.params, path, self.joint_key, "joint", seed)

    def merge(
        self,
        method: str,
        mode: str,
        teachers: Sequence[ParamSet],
        catalogs: Sequence[C.Catalog],
        seed: int,
        overrides: dict | None = None,
        callback=None,
        pseudo_sets=None,
    ) -> MergeOutcome:
        return dispatch_merge(
            method, mode, self.base(), teachers, catalogs, self.cfg.merge, seed, self.cfg.model.gamma,
            overrides, callback, pseudo_sets,
        )

    # ------------------------------------------------------------ evaluation
    def evaluate(self, params: ParamSet, datasets: Sequence[C.DomainDataset]) -> dict[tuple[str, str], float]:
        k, gamma = self.cfg.eval.k, self.cfg.model.gamma
        out = {}
        for d in datasets:
            r, n = E.recall_ndcg_at_k(params, d, k, gamma)
            out[(d.domain_id, f"recall@{k}")] = r
            out[(d.domain_id, f"ndcg@{k}")] = n
        return out


# ---------------------------------------------------------------- recipe plumbing


@dataclass
class RecipeResult:
    name: str
    records: list[Record]
    table: str
    summary: dict = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def _pm(values: Sequence[float], digits: int = 2) -> str:
    m, s = _mean_std(values)
    if np.isnan(m):
        return "NA"
    return f"{m:.{digits}f} ± {s:.{digits}f}" if len(values) > 1 else f"{m:.{digits}f}"


def _norm_records(
    method: str, seed: int, absolute: dict, reference: dict, k: int
) -> tuple[list[Record], dict[str, float | None]]:
    rep = E.normalize(absolute, reference)
    recs = [Record(d, method, m, str(seed), v) for (d, m), v in sorted(absolute.items())]
    recs += [Record(d, method, f"norm_{m}", str(seed), v) for (d, m), v in sorted(rep.values.items())]
    recs += [Record("avg", method, f"norm_{m}", str(seed), v) for m, v in sorted(rep.averages.items())]
    return recs, rep.averages


def _slice(values: dict, domains: Sequence[str]) -> dict:
    return {key: v for key, v in values.items() if key[0] in domains}


@dataclass
class _SeedBench:
    datasets: list[C.DomainDataset]
    finetuned: list[ParamSet]
    catalogs: list[C.Catalog]
    reference: dict[tuple[str, str], float]


def _bench(ws: Workspace, seed: int, domains: Sequence[str] | None = None) -> _SeedBench:
    datasets = ws.datasets(domains)
    fts = [ws.finetuned(d, seed) for d in datasets]
    ref = {}
    for d, f in zip(datasets, fts):
        ref.update(ws.evaluate(f, [d]))
    return _SeedBench(datasets, fts, [d.catalog for d in datasets], ref)


def _emit(ws: Workspace, name: str, records: list[Record], table: str, seeds, echo, summary=None) -> RecipeResult:
    header = ws.header(list(seeds))
    files = [
        write_records(ws.out / "results" / f"{name}.tsv", records, header),
        write_text(ws.out / "results" / f"{name}.txt", table, header),
    ]
    if echo:
        echo(table)
    return RecipeResult(name, records, table, summary or {}, files)


# ---------------------------------------------------------------- recipes


OVERALL_METHODS = (
    ("zero_shot", None, None),
    ("joint", None, None),
    ("average", "average", M.DOMAINWISE),
    ("task_arithmetic", "task_arithmetic", M.DOMAINWISE),
    ("ties", "ties", M.DOMAINWISE),
    ("adamerging_dw", "adamerging", M.DOMAINWISE),
    ("adamerging_lw", "adamerging", M.LAYERWISE),
    ("mergerec_dw", "mergerec", M.DOMAINWISE),
    ("mergerec_lw", "mergerec", M.LAYERWISE),
)
MERGING_BASELINES = ("average", "task_arithmetic", "ties", "adamerging_dw", "adamerging_lw")


def recipe_overall(ws: Workspace, seeds: Sequence[int], echo=print) -> RecipeResult:
    k = ws.cfg.eval.k
    domains = ws.cfg.corpus.ids
    records: list[Record] = []
    avg_r: dict[str, list[float]] = {}
    avg_n: dict[str, list[float]] = {}
    cells: dict[tuple[str, str], list[float]] = {}
    for seed in seeds:
        bench = _bench(ws, seed)
        models: list[tuple[str, ParamSet]] = [("fine_tuned", None), ("zero_shot", ws.base()), ("joint", ws.joint(seed))]
        for key, method, mode in OVERALL_METHODS[2:]:
            outcome = ws.merge(method, mode, bench.finetuned, bench.catalogs, seed)
            models.append((key, outcome.params))
            if outcome.adaptive is not None:
                write_trajectory(
                    ws.out / "trajectories" / f"overall.{key}.seed{seed}.tsv",
                    outcome.adaptive.trajectory_records(), ws.header(seed),
                )
        for key, params in models:
            absolute = bench.reference if params is None else ws.evaluate(params, bench.datasets)
            recs, averages = _norm_records(key, seed, absolute, bench.reference, k)
            records += recs
            avg_r.setdefault(key, []).append(averages[f"recall@{k}"])
            avg_n.setdefault(key, []).append(averages[f"ndcg@{k}"])
            for r in recs:
                if r.metric == f"norm_recall@{k}" and r.domain != "avg":
                    cells.setdefault((key, r.domain), []).append(r.value)

    best = max(MERGING_BASELINES, key=lambda m: _mean_std(avg_r[m])[0])
    tests: dict[str, E.TTestResult] = {}
    if len(seeds) >= 2:
        for key in ("mergerec_dw", "mergerec_lw"):
            tests[key] = E.one_tailed_welch_t(avg_r[key], avg_r[best])
            records.append(Record("avg", key, f"welch_p_vs_{best}", "all", tests[key].p_value))

    headers = ["Method"] + list(domains) + [f"Avg R@{k}", f"Avg N@{k}", "p"]
    rows = []
    for key, _, _ in [("fine_tuned", None, None)] + list(OVERALL_METHODS):
        p = fmt_value(tests[key].p_value, 4) if key in tests else ""
        rows.append(
            [DISPLAY[key]] + [_pm(cells[(key, d)], 1) for d in domains] + [_pm(avg_r[key]), _pm(avg_n[key]), p]
        )
    title = (
        f"Overall: normalized R@{k} (% of fine-tuned) per domain, mean ± std over seeds {list(seeds)}\n"
        f"p: one-tailed Welch t-test of Avg R@{k} vs best merging baseline ({DISPLAY[best]})"
    )
    table = format_table(headers, rows, title)
    summary = {
        "avg_norm_recall": {key: _mean_std(v)[0] for key, v in avg_r.items()},
        "avg_norm_recall_per_seed": avg_r,
        "best_baseline": best,
        "tests": tests,
        "n_method_rows": len(rows),
    }
    return _emit(ws, "overall", records, table, seeds, echo, summary)


SCARCITY_METHODS = (
    ("task_arithmetic", "task_arithmetic", M.DOMAINWISE),
    ("ties", "ties", M.DOMAINWISE),
    ("adamerging_dw", "adamerging", M.DOMAINWISE),
    ("mergerec_dw", "mergerec", M.DOMAINWISE),
)


def recipe_scarcity(ws: Workspace, seeds: Sequence[int], echo=print) -> RecipeResult:
    cfg = ws.cfg
    k = cfg.eval.k
    targets = list(cfg.experiments.scarcity_targets) or [cfg.corpus.ids[-1]]
    fractions = list(cfg.experiments.scarcity_fractions)
    records: list[Record] = []
    cells: dict[tuple[str, str, float], list[float]] = {}
    for seed in seeds:
        bench = _bench(ws, seed)
        for target in targets:
            t_idx = cfg.corpus.ids.index(target)
            full = bench.datasets[t_idx]
            for frac in fractions:
                sub = C.subsample_users(full, frac, seed)
                scarce_ft = ws.finetuned(sub, seed, frac)
                teachers = list(bench.finetuned)
                teachers[t_idx] = scarce_ft
                models = [("fine_tuned", scarce_ft)]
                for key, method, mode in SCARCITY_METHODS:
                    models.append((key, ws.merge(method, mode, teachers, bench.catalogs, seed).params))
                for key, params in models:
                    metrics = ws.evaluate(params, [full])
                    for (d, m), v in sorted(metrics.items()):
                        records.append(Record(d, key, f"{m}@users{frac:g}", str(seed), v))
                    cells.setdefault((target, key, frac), []).append(metrics[(target, f"recall@{k}")])
    headers = ["Target", "Method"] + [f"{100 * f:g}% users" for f in fractions]
    rows = []
    for target in targets:
        for key in ["fine_tuned"] + [m[0] for m in SCARCITY_METHODS]:
            rows.append([target, DISPLAY[key]] + [_pm(cells[(target, key, f)], 4) for f in fractions])
    title = (
        f"Scarcity: absolute R@{k} on the target's full test users after fine-tuning the target on "
        f"a user subsample, mean ± std over seeds {list(seeds)}"
    )
    summary = {"recall": {key: _mean_std(v)[0] for key, v in cells.items()}}
    return _emit(ws, "scarcity", records, format_table(headers, rows, title), seeds, echo, summary)


UNSEEN_METHODS = (
    ("average", "average", M.DOMAINWISE),
    ("task_arithmetic", "task_arithmetic", M.DOMAINWISE),
    ("ties", "ties", M.DOMAINWISE),
    ("adamerging_dw", "adamerging", M.DOMAINWISE),
    ("mergerec_dw", "mergerec", M.DOMAINWISE),
)


def recipe_unseen(ws: Workspace, seeds: Sequence[int], echo=print) -> RecipeResult:
    cfg = ws.cfg
    k = cfg.eval.k
    targets = list(cfg.experiments.unseen_targets) or [cfg.corpus.ids[-1]]
    sources = [d for d in cfg.corpus.ids if d not in targets]
    if not sources:
        raise InputError("unseen recipe needs at least one source domain outside experiments.unseen_targets")
    records: list[Record] = []
    cells: dict[tuple[str, str], list[float]] = {}
    for seed in seeds:
        src = _bench(ws, seed, sources)
        tgt = ws.datasets(targets)
        tgt_ref = {}
        for d in tgt:
            tgt_ref.update(ws.evaluate(ws.finetuned(d, seed), [d]))
        models = [("zero_shot", ws.base())]
        for key, method, mode in UNSEEN_METHODS:
            merged = ws.merge(method, mode, src.finetuned, src.catalogs, seed).params
            path = ws.out / "merged" / f"unseen.{key}.seed{seed}.ckpt"
            merged.extra.update({"method": key, "config": cfg.digest, "version": version_string()})
            ckpt.save(merged, path)
            ws.manifest.record(
                path.relative_to(ws.out).as_posix(), stage="merge", seed=seed,
                dims="x".join(str(x) for x in merged.dims), config=cfg.digest, domains=merged.extra["domains"],
            )
            loaded = ckpt.load(path)
            merged_from = set(filter(None, loaded.extra.get("domains", "").split(",")))
            leaked = merged_from & set(targets)
            if leaked or not merged_from:
                raise MergeLabError(f"unseen recipe: {path} lists merged inputs {sorted(merged_from)}")
            models.append((key, loaded))
        for key, params in models:
            absolute = ws.evaluate(params, tgt)
            recs, _ = _norm_records(key, seed, absolute, tgt_ref, k)
            records += [r for r in recs if r.domain != "avg"]
            for d in targets:
                cells.setdefault((key, d), []).append(absolute[(d, f"recall@{k}")])
    headers = ["Method"] + [f"{d} R@{k}" for d in targets]
    rows = [[DISPLAY[key]] + [_pm(cells[(key, d)], 4) for d in targets] for key in ["zero_shot"] + [m[0] for m in UNSEEN_METHODS]]
    title = f"Unseen domains: merge of {sources} evaluated on never-merged {targets}; absolute R@{k}, seeds {list(seeds)}"
    summary = {"recall": {key: _mean_std(v)[0] for key, v in cells.items()}, "sources": sources, "targets": targets}
    return _emit(ws, "unseen", records, format_table(headers, rows, title), seeds, echo, summary)


SWEEP_METHODS = SCARCITY_METHODS


def recipe_domain_count_sweep(ws: Workspace, seeds: Sequence[int], echo=print) -> RecipeResult:
    k = ws.cfg.eval.k
    ids = ws.cfg.corpus.ids
    if len(ids) < 2:
        raise InputError("domain_count_sweep needs at least two domains")
    counts = list(range(2, len(ids) + 1))
    records: list[Record] = []
    cells: dict[tuple[str, int], list[float]] = {}
    for seed in seeds:
        bench = _bench(ws, seed)
        for m in counts:
            chosen = ids[:m]
            ref = _slice(bench.reference, chosen)
            for key, method, mode in SWEEP_METHODS:
                merged = ws.merge(method, mode, bench.finetuned[:m], bench.catalogs[:m], seed).params
                rep = E.normalize(ws.evaluate(merged, bench.datasets[:m]), ref)
                value = rep.averages[f"recall@{k}"]
                records.append(Record(f"first{m}", key, f"avg_norm_recall@{k}", str(seed), value))
                cells.setdefault((key, m), []).append(value)
    headers = ["Method"] + [f"{m} domains" for m in counts]
    rows = [[DISPLAY[key]] + [_pm(cells[(key, m)], 1) for m in counts] for key, _, _ in SWEEP_METHODS]
    title = f"Merged-domain count: avg normalized R@{k} over the merged domains (first m of {ids}), seeds {list(seeds)}"
    summary = {"avg_norm_recall": {key: _mean_std(v)[0] for key, v in cells.items()}}
    return _emit(ws, "domain_count_sweep", records, format_table(headers, rows, title), seeds, echo, summary)


GROUP_METHODS = (
    ("task_arithmetic", "task_arithmetic", M.DOMAINWISE),
    ("adamerging_dw", "adamerging", M.DOMAINWISE),
    ("mergerec_dw", "mergerec", M.DOMAINWISE),
)


def recipe_group_analysis(ws: Workspace, seeds: Sequence[int], echo=print) -> RecipeResult:
    cfg = ws.cfg
    k, gamma = cfg.eval.k, cfg.model.gamma
    records: list[Record] = []
    cells: dict[tuple[str, str], list[float]] = {}
    group_order: list[str] = []
    for seed in seeds:
        bench = _bench(ws, seed)
        for key, method, mode in GROUP_METHODS:
            merged = ws.merge(method, mode, bench.finetuned, bench.catalogs, seed).params
            for d, ft in zip(bench.datasets, bench.finetuned):
                lengths = np.array([len(d.splits[u].history) for u in d.users])
                report = E.group_analysis(
                    merged, d, ft, k, E.length_edges(lengths, cfg.eval.length_bins),
                    cfg.eval.popularity_edges, gamma,
                )
                groups = [(f"length_q{i + 1}", g) for i, g in enumerate(report.length_groups)]
                groups += [(f"pop_{g.label}", g) for g in report.popularity_groups]
                for name, g in groups:
                    if name not in group_order:
                        group_order.append(name)
                    records.append(Record(d.domain_id, key, f"{name}:count", str(seed), float(g.count)))
                    records.append(Record(d.domain_id, key, f"{name}:recall@{k}", str(seed), g.recall))
                    records.append(Record(d.domain_id, key, f"{name}:norm_recall@{k}", str(seed), g.normalized_recall))
                    if g.normalized_recall is not None:
                        cells.setdefault((key, name), []).append(g.normalized_recall)
    headers = ["Method"] + group_order
    rows = [[DISPLAY[key]] + [_pm(cells.get((key, g), []), 1) for g in group_order] for key, _, _ in GROUP_METHODS]
    title = (
        f"Groups: normalized R@{k} within each history-length quantile and train-popularity range "
        f"(mean ± std over domains and seeds {list(seeds)}; groups with a zero reference are skipped)"
    )
    summary = {"norm_recall": {key: _mean_std(v)[0] for key, v in cells.items()}}
    return _emit(ws, "group_analysis", records, format_table(headers, rows, title), seeds, echo, summary)


def recipe_lambda_sweep(ws: Workspace, seeds: Sequence[int], echo=print) -> RecipeResult:
    k = ws.cfg.eval.k
    grid = list(ws.cfg.experiments.lambda_grid)
    records: list[Record] = []
    cells: dict[tuple[float, str], list[float]] = {}
    for seed in seeds:
        bench = _bench(ws, seed)
        for lam in grid:
            for mode in M.MODES:
                key = method_key("mergerec", mode)
                merged = ws.merge("mergerec", mode, bench.finetuned, bench.catalogs, seed, {"lam": lam}).params
                rep = E.normalize(ws.evaluate(merged, bench.datasets), bench.reference)
                value = rep.averages[f"recall@{k}"]
                records.append(Record("avg", key, f"norm_recall@{k}@lambda{lam:g}", str(seed), value))
                cells.setdefault((lam, mode), []).append(value)
    headers = ["lambda"] + [DISPLAY[method_key("mergerec", m)] for m in M.MODES]
    rows = [[f"{lam:g}"] + [_pm(cells[(lam, m)], 1) for m in M.MODES] for lam in grid]
    title = f"KD weight sweep: avg normalized R@{k} of MergeRec, seeds {list(seeds)}"
    summary = {"avg_norm_recall": {key: _mean_std(v)[0] for key, v in cells.items()}}
    return _emit(ws, "lambda_sweep", records, format_table(headers, rows, title), seeds, echo, summary)


def probe_split(
    catalogs: Sequence[C.Catalog], per_domain: int, seed: int
) -> tuple[list[np.ndarray], list[C.PseudoUserSet]]:
    """Hold out `per_domain` items per domain as fixed probes; the rest remain pseudo-users for optimization."""
    probe_items, train_sets = [], []
    for cat in catalogs:
        if len(cat) < 2:
            raise InputError(f"domain {cat.domain_id} is too small to hold out probe pseudo-users")
        n = min(per_domain, len(cat) - 1)
        rng = np.random.default_rng([seed, zlib.crc32(f"probe:{cat.domain_id}".encode("utf-8"))])
        perm = rng.permutation(len(cat))
        held = np.sort(perm[:n])
        rest = np.sort(perm[n:])
        probe_items.append(held)
        train_sets.append(C.PseudoUserSet(cat.domain_id, tuple((int(i),) for i in rest)))
    return probe_items, train_sets


def recipe_dynamics(ws: Workspace, seeds: Sequence[int], echo=print) -> RecipeResult:
    cfg = ws.cfg
    steps, every = cfg.merge.steps, cfg.experiments.probe_every
    temperature = cfg.merge.temperature
    methods = (("adamerging_dw", "adamerging"), ("mergerec_dw", "mergerec"))
    records: list[Record] = []
    per_seed: dict[str, dict[str, list[float]]] = {key: {} for key, _ in methods}
    for seed in seeds:
        bench = _bench(ws, seed)
        held, train_sets = probe_split(bench.catalogs, cfg.experiments.probe_per_domain, seed)
        probe_sets = [C.PseudoUserSet(c.domain_id, tuple((int(i),) for i in h)) for c, h in zip(bench.catalogs, held)]
        labels = M.teacher_pass(
            bench.finetuned, probe_sets, bench.catalogs, temperature, cfg.merge.label_excludes_input, cfg.model.gamma
        ).labels
        probes = [E.ProbeSet(c.features, h, lab) for c, h, lab in zip(bench.catalogs, held, labels)]
        rows: list[tuple[int, str, float]] = []
        for key, method in methods:
            stream: list[tuple[int, ParamSet]] = []

            def keep(step, merged, stream=stream):
                if step % every == 0 or step == steps:
                    stream.append((step, merged))

            ws.merge(method, M.DOMAINWISE, bench.finetuned, bench.catalogs, seed, callback=keep, pseudo_sets=train_sets)
            trace = E.dynamics_probe(stream, probes, temperature)
            for step, ce, ent in trace:
                rows.append((step, f"{method}.ce", ce))
                rows.append((step, f"{method}.entropy", ent))
            first, last = trace[0], trace[-1]
            for name, value in (("ce_step0", first[1]), ("ce_final", last[1]),
                                ("entropy_step0", first[2]), ("entropy_final", last[2])):
                records.append(Record("probe", key, name, str(seed), value))
                per_seed[key].setdefault(name, []).append(value)
        write_trajectory(ws.out / "trajectories" / f"dynamics.seed{seed}.tsv", rows, ws.header(seed))
    headers = ["Method", "CE step 0", f"CE step {steps}", "Entropy step 0", f"Entropy step {steps}"]
    table_rows = [
        [DISPLAY[key]] + [_pm(per_seed[key][n], 4) for n in ("ce_step0", "ce_final", "entropy_step0", "entropy_final")]
        for key, _ in methods
    ]
    title = (
        f"Dynamics: probe cross-entropy against teacher top-1 labels and prediction entropy on held-out "
        f"pseudo-users, seeds {list(seeds)} (traces in trajectories/dynamics.seed*.tsv)"
    )
    summary = {key: {n: _mean_std(v)[0] for n, v in vals.items()} for key, vals in per_seed.items()}
    return _emit(ws, "dynamics", records, format_table(headers, table_rows, title), seeds, echo, summary)


_RUNNERS = {
    "overall": recipe_overall,
    "scarcity": recipe_scarcity,
    "unseen": recipe_unseen,
    "domain_count_sweep": recipe_domain_count_sweep,
    "group_analysis": recipe_group_analysis,
    "lambda_sweep": recipe_lambda_sweep,
    "dynamics": recipe_dynamics,
}


def run_recipe(
    cfg: ExperimentConfig, name: str, seeds: Sequence[int] | None = None, out: Path | None = None, echo=print
) -> RecipeResult:
    if name not in _RUNNERS:
        raise InputError(f"unknown recipe {name!r}; expected one of {', '.join(RECIPES)}")
    ws = Workspace(cfg, out)
    seeds = list(seeds) if seeds is not None else list(cfg.seeds)
    try:
        return _RUNNERS[name](ws, seeds, echo)
    except MergeLabError as exc:
        exc.args = (f"recipe {name}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise
