import pytest

from mergelab.config import config_hash, load_config
from mergelab.errors import InputError

from conftest import BENCHMARK, REPO, TINY_CONFIG


def test_benchmark_configs_load():
    cfg = load_config(BENCHMARK)
    assert cfg.seeds == (0, 1, 2, 3, 4)
    assert cfg.corpus.ids == ["arts", "beauty", "office", "toys"]
    assert cfg.merge.lam == 1000 and cfg.merge.steps == 500 and cfg.merge.batch == 16
    assert cfg.model.gamma == 0.8 and cfg.eval.k == 10
    assert len(load_config(REPO / "configs" / "eight_domains.toml").corpus.ids) == 8


def test_defaults_fill_missing_sections(tiny_config):
    cfg = load_config(tiny_config())
    assert cfg.merge.task_arithmetic_weight == 0.4
    assert cfg.merge.ties_density == 0.2 and cfg.merge.ties_weight == 1.0
    assert cfg.eval.popularity_edges == (10, 30, 100, 300)
    assert cfg.pretrain.epochs == 2 and cfg.finetune.epochs == 3
    assert cfg.out == (tiny_config().parent / "out").resolve()


def test_unknown_top_level_section(tiny_config):
    with pytest.raises(InputError, match="unknown key"):
        load_config(tiny_config("[tuning]\nx = 1\n"))


@pytest.mark.parametrize(
    "old,new,message",
    [
        ("steps = 12", "steps = 12\nstepz = 3", "stepz"),
        ("steps = 12", 'steps = "many"', "merge.steps"),
        ("hidden = 8", "hidden = 8.5", "model.hidden"),
        ('scarcity_targets = ["c"]', 'scarcity_targets = ["zzz"]', "zzz"),
        ('id = "b"', 'id = "a"', "duplicate"),
        ('id = "p0"', 'id = "a"', "reuse"),
        ("seeds = [0, 1]", "seeds = [0, 0]", "duplicate seeds"),
        ("scarcity_fractions = [0.5, 1.0]", "scarcity_fractions = [0.5, 1.5]", "scarcity_fractions"),
        ("[merge]\nsteps = 12", "[merge]\nsteps = 12\nties_density = 0.0", "ties_density"),
        ("[merge]\nsteps = 12", "[merge]\nsteps = 12\nlabel_excludes_input = 1", "label_excludes_input"),
    ],
)
def test_invalid_values_rejected(tiny_config, old, new, message):
    assert old in TINY_CONFIG
    with pytest.raises(InputError, match=message):
        load_config(tiny_config(body=TINY_CONFIG.replace(old, new, 1)))


def test_domain_with_path_and_synthetic_keys_rejected(tiny_config):
    body = TINY_CONFIG.replace('id = "c"\n', 'id = "c"\npath = "c.tsv"\n')
    with pytest.raises(InputError, match="mixes"):
        load_config(tiny_config(body=body))


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(InputError, match="not found"):
        load_config(tmp_path / "none.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("seeds = [0,\n")
    with pytest.raises(InputError, match="bad.toml"):
        load_config(bad)


def test_hash_is_stable_and_sensitive(tiny_config):
    a = load_config(tiny_config())
    assert a.digest == load_config(tiny_config()).digest == config_hash(a)
    assert len(a.digest) == 12
    changed = load_config(tiny_config(body=TINY_CONFIG.replace("steps = 12", "steps = 13")))
    assert changed.digest != a.digest
    moved = load_config(tiny_config(body=TINY_CONFIG.replace('out = "out"', 'out = "elsewhere"')))
    assert moved.digest == a.digest
