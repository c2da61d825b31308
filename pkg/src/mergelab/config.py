"""Experiment configuration: TOML file -> validated dataclasses.

Unknown keys anywhere are rejected. Relative paths resolve against the
directory holding the config file. The full schema is documented in the
README; `configs/benchmark.toml` is the shipped default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from . import recmodel as rm
from .corpus import FeatureSpec, SyntheticDomainSpec
from .errors import InputError
from .merging import TASK_ARITHMETIC_WEIGHT, TIES_DENSITY, TIES_WEIGHT, MergeRecConfig
from .training import TrainConfig

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class DomainSource:
    """One domain: either a synthetic spec or an interaction TSV (plus optional feature override)."""

    id: str
    synthetic: SyntheticDomainSpec | None = None
    path: Path | None = None
    features: Path | None = None


@dataclass(frozen=True)
class CorpusConfig:
    seed: int
    domains: tuple[DomainSource, ...]

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self.domains]


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = rm.DEFAULT_HIDDEN
    output: int = rm.DEFAULT_OUTPUT
    layers: int = rm.DEFAULT_LAYERS
    gamma: float = rm.DEFAULT_GAMMA


@dataclass(frozen=True)
class MergeSettings:
    lam: float = 1000.0
    steps: int = 500
    lr: float = 0.001
    batch: int = 16
    temperature: float = 1.0
    init: float = 0.2
    sampling: str = "round_robin"
    label_excludes_input: bool = True
    task_arithmetic_weight: float = TASK_ARITHMETIC_WEIGHT
    ties_density: float = TIES_DENSITY
    ties_weight: float = TIES_WEIGHT
    ties_per_layer: bool = False

    def adaptive(self, seed: int, gamma: float, **overrides) -> MergeRecConfig:
        values = dict(
            lam=self.lam, steps=self.steps, lr=self.lr, batch=self.batch, temperature=self.temperature,
            init=self.init, seed=seed, sampling=self.sampling,
            label_excludes_input=self.label_excludes_input, gamma=gamma,
        )
        values.update(overrides)
        return MergeRecConfig(**values)


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    popularity_edges: tuple[int, ...] = (10, 30, 100, 300)
    length_bins: int = 5


@dataclass(frozen=True)
class StudyConfig:
    lambda_grid: tuple[float, ...] = (0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0)
    scarcity_fractions: tuple[float, ...] = (0.01, 0.05, 0.10)
    scarcity_targets: tuple[str, ...] = ()
    unseen_targets: tuple[str, ...] = ()
    probe_per_domain: int = 32
    probe_every: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    source: Path
    seeds: tuple[int, ...]
    out: Path
    features: FeatureSpec
    corpus: CorpusConfig
    pretrain_corpus: CorpusConfig
    model: ModelConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    merge: MergeSettings
    eval: EvalConfig
    experiments: StudyConfig
    digest: str = field(default="", compare=False)

    def train_config(self, stage: str, seed: int) -> TrainConfig:
        base = self.pretrain if stage == "pretrain" else self.finetune
        return dataclasses.replace(base, seed=seed, gamma=self.model.gamma, eval_k=self.eval.k)


# ---------------------------------------------------------------- parsing helpers


def _take(table: dict, allowed: dict[str, type | tuple], where: str) -> dict[str, Any]:
    """Check keys and scalar types of one table; returns a plain dict of present keys."""
    if not isinstance(table, dict):
        raise InputError(f"config: [{where}] must be a table")
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise InputError(f"config: unknown key(s) in [{where}]: {', '.join(unknown)}")
    out = {}
    for key, value in table.items():
        expected = allowed[key]
        ok = isinstance(value, expected) and not (isinstance(value, bool) and bool not in _as_tuple(expected))
        if not ok:
            raise InputError(f"config: {where}.{key} has invalid type {type(value).__name__}")
        out[key] = value
    return out


def _as_tuple(t) -> tuple:
    return t if isinstance(t, tuple) else (t,)


_NUM = (int, float)


def _list_of(value, kind, where: str) -> tuple:
    if not isinstance(value, list) or not all(isinstance(v, kind) and not isinstance(v, bool) for v in value):
        raise InputError(f"config: {where} must be a list of {getattr(kind, '__name__', 'numbers')}")
    return tuple(value)


def _resolve(root: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else (root / p).resolve()


def _corpus(table: dict, root: Path, where: str, features: FeatureSpec) -> CorpusConfig:
    t = _take(table, {"seed": int, "domains": list}, where)
    if not t.get("domains"):
        raise InputError(f"config: [{where}] needs at least one [[{where}.domains]] entry")
    domains = []
    for n, d in enumerate(t["domains"]):
        dw = f"{where}.domains[{n}]"
        entry = _take(
            d,
            {
                "id": str, "path": str, "features": str, "users": int, "items": int,
                "mean_length": _NUM, "latent_dim": int, "popularity_skew": _NUM,
                "user_strength": _NUM, "sequence_strength": _NUM, "feature_alignment": _NUM,
            },
            dw,
        )
        if "id" not in entry:
            raise InputError(f"config: {dw} is missing 'id'")
        if "path" in entry:
            synth_keys = set(entry) - {"id", "path", "features"}
            if synth_keys:
                raise InputError(f"config: {dw} mixes a TSV path with synthetic keys {sorted(synth_keys)}")
            feat = _resolve(root, entry["features"]) if "features" in entry else None
            domains.append(DomainSource(entry["id"], None, _resolve(root, entry["path"]), feat))
        else:
            if "users" not in entry or "items" not in entry:
                raise InputError(f"config: {dw} needs either 'path' or both 'users' and 'items'")
            if "features" in entry:
                raise InputError(f"config: {dw} feature overrides apply to TSV domains only")
            spec_args = {k: v for k, v in entry.items() if k != "id"}
            domains.append(DomainSource(entry["id"], SyntheticDomainSpec(entry["id"], **spec_args)))
    ids = [d.id for d in domains]
    if len(set(ids)) != len(ids):
        raise InputError(f"config: duplicate domain ids in [{where}]: {ids}")
    return CorpusConfig(t.get("seed", 0), tuple(domains))


def _train(table: dict, where: str, defaults: TrainConfig) -> TrainConfig:
    t = _take(
        table,
        {"epochs": int, "batch_size": int, "lr": _NUM, "seed": int, "negatives": str,
         "patience": int, "temperature": _NUM},
        where,
    )
    return dataclasses.replace(defaults, **t)


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name != "digest"}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


def config_hash(cfg: ExperimentConfig) -> str:
    """Short digest over every setting that influences results (not the output directory).

    TSV sources enter by path, not content, so the digest stays stable when
    interaction files are removed after fine-tuning.
    """
    payload = _jsonable(cfg)
    payload.pop("out", None)
    payload.pop("source", None)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------- entry points


def parse_config(data: dict, root: Path, source: Path | None = None) -> ExperimentConfig:
    top = _take(
        data,
        {
            "seeds": list, "out": str, "features": dict, "corpus": dict, "pretrain_corpus": dict,
            "model": dict, "pretrain": dict, "finetune": dict, "merge": dict, "eval": dict,
            "experiments": dict,
        },
        "top level",
    )
    seeds = _list_of(top["seeds"], int, "seeds") if "seeds" in top else DEFAULT_SEEDS
    if not seeds:
        raise InputError("config: seeds must be nonempty")
    if len(set(seeds)) != len(seeds):
        raise InputError(f"config: duplicate seeds {list(seeds)}")

    f = _take(top.get("features", {}), {"dim": int, "active": int, "seed": int, "semantic_seed": int}, "features")
    features = FeatureSpec(**f)
    if not 0 < features.active <= features.dim:
        raise InputError(f"config: features.active must be in 1..{features.dim}")

    for required in ("corpus", "pretrain_corpus"):
        if required not in top:
            raise InputError(f"config: missing [{required}] section")
    corpus = _corpus(top["corpus"], root, "corpus", features)
    pre = _corpus(top["pretrain_corpus"], root, "pretrain_corpus", features)
    clash = set(corpus.ids) & set(pre.ids)
    if clash:
        raise InputError(f"config: pre-training domains reuse benchmark ids {sorted(clash)}")

    m = _take(top.get("model", {}), {"hidden": int, "output": int, "layers": int, "gamma": _NUM}, "model")
    model = ModelConfig(**m)
    if model.layers < 1 or model.hidden < 1 or model.output < 1 or not 0 < model.gamma <= 1:
        raise InputError(f"config: invalid [model] {model}")

    pretrain = _train(top.get("pretrain", {}), "pretrain", TrainConfig(epochs=20))
    finetune = _train(top.get("finetune", {}), "finetune", TrainConfig())

    mg = _take(
        top.get("merge", {}),
        {"lam": _NUM, "steps": int, "lr": _NUM, "batch": int, "temperature": _NUM, "init": _NUM,
         "sampling": str, "label_excludes_input": bool, "task_arithmetic_weight": _NUM,
         "ties_density": _NUM, "ties_weight": _NUM, "ties_per_layer": bool},
        "merge",
    )
    merge = MergeSettings(**mg)
    merge.adaptive(0, model.gamma)  # validates ranges
    if not 0 < merge.ties_density <= 1:
        raise InputError(f"config: merge.ties_density must be in (0, 1], got {merge.ties_density}")

    ev = _take(top.get("eval", {}), {"k": int, "popularity_edges": list, "length_bins": int}, "eval")
    if "popularity_edges" in ev:
        ev["popularity_edges"] = _list_of(ev["popularity_edges"], int, "eval.popularity_edges")
        if list(ev["popularity_edges"]) != sorted(set(ev["popularity_edges"])):
            raise InputError("config: eval.popularity_edges must be strictly increasing")
    evaluation = EvalConfig(**ev)
    if evaluation.k < 1 or evaluation.length_bins < 1:
        raise InputError(f"config: invalid [eval] {evaluation}")

    ex = _take(
        top.get("experiments", {}),
        {"lambda_grid": list, "scarcity_fractions": list, "scarcity_targets": list,
         "unseen_targets": list, "probe_per_domain": int, "probe_every": int},
        "experiments",
    )
    for key, kind in (("lambda_grid", _NUM), ("scarcity_fractions", _NUM), ("scarcity_targets", str),
                      ("unseen_targets", str)):
        if key in ex:
            ex[key] = _list_of(ex[key], kind, f"experiments.{key}")
    study = StudyConfig(**ex)
    for key in ("scarcity_targets", "unseen_targets"):
        missing = [t for t in getattr(study, key) if t not in corpus.ids]
        if missing:
            raise InputError(f"config: experiments.{key} names unknown domains {missing}")
    if any(not 0 < f <= 1 for f in study.scarcity_fractions):
        raise InputError("config: experiments.scarcity_fractions must lie in (0, 1]")
    if study.probe_per_domain < 1 or study.probe_every < 1:
        raise InputError("config: probe_per_domain and probe_every must be >= 1")

    out = _resolve(root, top.get("out", "runs"))
    cfg = ExperimentConfig(
        source or root, seeds, out, features, corpus, pre, model, pretrain, finetune, merge, evaluation, study
    )
    return dataclasses.replace(cfg, digest=config_hash(cfg))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return parse_config(data, path.resolve().parent, path)
