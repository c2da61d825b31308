"""`mergelab` command line: pretrain, finetune, merge, eval and experiment stages.

Exit codes: 0 success, 2 configuration or input error, 3 incompatible
checkpoints or catalogs, 4 numerical failure during optimization.
"""

from __future__ import annotations

import dataclasses
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import click

from . import __version__
from . import checkpoint as ckpt
from . import corpus as C
from . import evaluation as E
from .config import ExperimentConfig, MergeSettings, _take, config_hash, load_config
from .errors import IncompatibleError, InputError, MergeLabError
from .experiments import MERGE_METHODS, RECIPES, Workspace, dispatch_merge, method_key, run_recipe
from .merging import DOMAINWISE, MODES
from .reporting import Record, fmt_value, format_table, version_string, write_records, write_trajectory

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("mergelab")


def _setup(config: str, out: str | None, seed: int | None) -> tuple[ExperimentConfig, Workspace, list[int]]:
    cfg = load_config(config)
    ws = Workspace(cfg, Path(out) if out else None)
    seeds = [seed] if seed is not None else list(cfg.seeds)
    return cfg, ws, seeds


def _dims(params) -> str:
    return "x".join(str(d) for d in params.dims)


# ---------------------------------------------------------------- merge recipes


@dataclass
class MergeRecipe:
    method: str
    mode: str
    name: str
    base: str
    checkpoints: list[str] | None
    catalogs: list[str] | None
    hyper: dict


_HYPER_TYPES = {
    f.name: ((int, float) if f.type in ("float", float) else bool if f.type in ("bool", bool)
             else int if f.type in ("int", int) else str)
    for f in dataclasses.fields(MergeSettings)
}


def load_merge_recipe(path: str | Path) -> MergeRecipe:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"merge recipe not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    t = _take(
        data,
        {"method": str, "mode": str, "name": str, "base": str, "checkpoints": list, "catalogs": list, "hyper": dict},
        "merge recipe",
    )
    if "method" not in t:
        raise InputError(f"{path}: merge recipe needs a 'method' ({', '.join(MERGE_METHODS)})")
    if t["method"] not in MERGE_METHODS:
        raise InputError(f"{path}: unknown merge method {t['method']!r}; expected one of {', '.join(MERGE_METHODS)}")
    mode = t.get("mode", DOMAINWISE)
    if mode not in MODES:
        raise InputError(f"{path}: unknown merge mode {mode!r}; expected one of {', '.join(MODES)}")
    hyper = _take(t.get("hyper", {}), _HYPER_TYPES, "merge recipe hyper")
    for key in ("checkpoints", "catalogs"):
        if key in t and not all(isinstance(p, str) for p in t[key]):
            raise InputError(f"{path}: '{key}' must be a list of paths")
    if "checkpoints" in t and "catalogs" in t and len(t["checkpoints"]) != len(t["catalogs"]):
        raise InputError(f"{path}: {len(t['checkpoints'])} checkpoints but {len(t['catalogs'])} catalogs")
    return MergeRecipe(
        t["method"], mode, t.get("name", method_key(t["method"], mode)), t.get("base", "base.ckpt"),
        t.get("checkpoints"), t.get("catalogs"), hyper,
    )


def _expand(template: str, root: Path, seed: int) -> Path:
    """Fill in `{seed}`; relative paths resolve against the output directory, else the working directory."""
    p = Path(template.replace("{seed}", str(seed)))
    if p.is_absolute() or (root / p).exists() or not p.exists():
        return p if p.is_absolute() else root / p
    return p


def merge_stage(ws: Workspace, recipe: MergeRecipe, seed: int) -> tuple[Path, object]:
    """Merge from checkpoints and catalog files only; interaction logs are never opened."""
    cfg = ws.cfg
    ckpt_paths = (
        [_expand(p, ws.out, seed) for p in recipe.checkpoints]
        if recipe.checkpoints is not None
        else [ws.finetuned_path(d, seed) for d in cfg.corpus.ids]
    )
    if not ckpt_paths:
        raise InputError("merge recipe lists no checkpoints")
    base_path = _expand(recipe.base, ws.out, seed)
    loaded = ckpt.load_compatible([base_path] + ckpt_paths)
    base, teachers = loaded[0], loaded[1:]
    domains = [t.domain_id for t in teachers]
    if len(set(domains)) != len(domains) or not all(domains):
        raise InputError(f"checkpoints must come from distinct, named domains; got {domains}")
    cat_paths = (
        [_expand(p, ws.out, seed) for p in recipe.catalogs]
        if recipe.catalogs is not None
        else [ws.catalog_path(d) for d in domains]
    )
    catalogs = []
    for d, p in zip(domains, cat_paths):
        if not p.is_file():
            raise InputError(f"catalog file not found: {p}")
        cat = C.read_catalog(p, d)
        if cat.dim != base.input_dim:
            raise IncompatibleError(f"catalog {p} has {cat.dim} features; checkpoints expect {base.input_dim}")
        catalogs.append(cat)
    outcome = dispatch_merge(
        recipe.method, recipe.mode, base, teachers, catalogs, cfg.merge, seed, cfg.model.gamma, recipe.hyper
    )
    merged = outcome.params
    merged.seed = seed
    merged.extra.update(
        {
            "method": recipe.method, "mode": recipe.mode, "domains": ",".join(domains),
            "config": cfg.digest, "version": version_string(), "stage": "merge",
        }
    )
    merged.extra.pop("inputs", None)
    path = ws.out / "merged" / f"{recipe.name}.seed{seed}.ckpt"
    ckpt.save(merged, path)
    ws.manifest.record(
        path.relative_to(ws.out).as_posix(), stage="merge", seed=seed, dims=_dims(merged),
        config=cfg.digest, domains=",".join(domains),
    )
    if outcome.adaptive is not None:
        write_trajectory(
            ws.out / "trajectories" / f"{recipe.name}.seed{seed}.tsv",
            outcome.adaptive.trajectory_records(), ws.header(seed),
        )
    return path, merged


# ---------------------------------------------------------------- evaluation


def eval_stage(
    ws: Workspace, checkpoint_template: str, name: str, domains: Sequence[str], seeds: Sequence[int]
) -> tuple[list[Record], str]:
    k = ws.cfg.eval.k
    datasets = ws.datasets(domains)
    records: list[Record] = []
    rows = []
    metrics = [f"recall@{k}", f"ndcg@{k}"]
    for seed in seeds:
        path = _expand(checkpoint_template, ws.out, seed)
        params = ckpt.load(path)
        absolute = ws.evaluate(params, datasets)
        reference = {}
        for d in datasets:
            ref_path = ws.finetuned_path(d.domain_id, seed)
            if ref_path.exists():
                reference.update(ws.evaluate(ckpt.load(ref_path), [d]))
            else:
                log.warning("no fine-tuned reference for %s seed %d at %s", d.domain_id, seed, ref_path)
        normalized = E.normalize(absolute, reference).values
        for d in datasets:
            row = [d.domain_id, str(seed)]
            for m in metrics:
                records.append(Record(d.domain_id, name, m, str(seed), absolute[(d.domain_id, m)]))
                row.append(fmt_value(absolute[(d.domain_id, m)], 4))
            for m in metrics:
                value = normalized.get((d.domain_id, m))
                records.append(Record(d.domain_id, name, f"norm_{m}", str(seed), value))
                row.append(fmt_value(value, 2))
            rows.append(row)
    headers = ["Domain", "Seed"] + [f"R@{k}", f"N@{k}", f"norm R@{k}", f"norm N@{k}"]
    table = format_table(headers, rows, f"Evaluation of {name} (normalized by fine-tuned models; NA = no reference)")
    return records, table


# ---------------------------------------------------------------- click commands


_common = [
    click.option("--config", "config", required=True, type=click.Path(dir_okay=False), help="Experiment config (TOML)."),
    click.option("--out", "out", default=None, type=click.Path(file_okay=False), help="Output directory override."),
    click.option("--seed", "seed", default=None, type=int, help="Run a single seed instead of the configured list."),
]


def common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__, prog_name="mergelab")
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def cli(verbose: int):
    """Merge per-domain sequential recommenders through task vectors."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command()
@common
@click.option("--recipe", default=None, hidden=True)
def pretrain(config, out, seed, recipe):
    """Pre-train the shared base encoder on the pre-training corpus."""
    cfg = load_config(config)
    if seed is not None:
        cfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, seed=seed))
        cfg = dataclasses.replace(cfg, digest=config_hash(cfg))
    ws = Workspace(cfg, Path(out) if out else None)
    base = ws.base(train=True)
    click.echo(f"{ws.base_path()}\tseed={base.seed}\tdims={_dims(base)}\tconfig={cfg.digest}")


@cli.command()
@common
@click.option("--recipe", default=None, hidden=True)
@click.option("--domain", "domains", multiple=True, help="Restrict to these domains (repeatable).")
def finetune(config, out, seed, recipe, domains):
    """Fine-tune one model per domain and seed, starting from the base checkpoint."""
    cfg, ws, seeds = _setup(config, out, seed)
    ws.base(train=False)
    datasets = ws.datasets(list(domains) or None)
    for s in seeds:
        for d in datasets:
            params = ws.finetuned(d, s)
            click.echo(f"{ws.finetuned_path(d.domain_id, s)}\tseed={s}\tdims={_dims(params)}\tconfig={cfg.digest}")
    click.echo(f"# {len(datasets) * len(seeds)} checkpoints over seeds {seeds}")


@cli.command()
@common
@click.option("--recipe", required=True, type=click.Path(dir_okay=False), help="Merge recipe (TOML).")
def merge(config, out, seed, recipe):
    """Merge fine-tuned checkpoints (checkpoints and catalogs only)."""
    cfg, ws, seeds = _setup(config, out, seed)
    r = load_merge_recipe(recipe)
    for s in seeds:
        path, merged = merge_stage(ws, r, s)
        click.echo(f"{path}\tmethod={r.method}\tmode={r.mode}\tseed={s}\tdomains={merged.extra['domains']}")


@cli.command(name="eval")
@common
@click.option("--recipe", default=None, type=click.Path(dir_okay=False), help="Evaluate the output of this merge recipe.")
@click.option("--checkpoint", default=None, help="Checkpoint to evaluate; '{seed}' expands per seed.")
@click.option("--domain", "domains", multiple=True, help="Restrict to these domains (repeatable).")
def eval_cmd(config, out, seed, recipe, checkpoint, domains):
    """Absolute and fine-tune-normalized R@k / N@k of a checkpoint."""
    cfg, ws, seeds = _setup(config, out, seed)
    if (recipe is None) == (checkpoint is None):
        raise InputError("eval needs exactly one of --recipe or --checkpoint")
    if recipe is not None:
        name = load_merge_recipe(recipe).name
        template = f"merged/{name}.seed{{seed}}.ckpt"
    else:
        template = checkpoint
        name = re.sub(r"\.seed(\{seed\}|\d+)$", "", Path(checkpoint).name.removesuffix(".ckpt"))
    records, table = eval_stage(ws, template, name, list(domains) or cfg.corpus.ids, seeds)
    header = ws.header(seeds)
    write_records(ws.out / "results" / f"eval.{name}.tsv", records, header)
    click.echo(table)


@cli.command()
@common
@click.option("--recipe", required=True, type=click.Choice(RECIPES), help="Study to run.")
def experiment(config, out, seed, recipe):
    """Run a named study over all configured seeds."""
    cfg, ws, seeds = _setup(config, out, seed)
    run_recipe(cfg, recipe, seeds, ws.out, echo=click.echo)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="mergelab", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2 if exc.exit_code == 2 else exc.exit_code
    except MergeLabError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
