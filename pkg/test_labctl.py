import hashlib
import json
import sys

import pytest
from loguru import logger
from pydantic import ValidationError

from labctl import (
    RECIPES,
    ConfigError,
    ExperimentConfig,
    Lab,
    RunLockedError,
    StageError,
    StaleArtifactError,
    derive_seed,
    load_config,
    run_recipe,
    stage_fingerprint,
)
from labctl_cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, LabCLI, parse_layers
from worldgen import read_world, world_paths

TINY_TOML = """
seed = 3

[world]
n_personas = 24
labels_per_attribute = 8
n_bios = 1
n_interviews = 0
background_personas = 8
background_docs = 1
extended_personas = 6
extended_train = 4

[models.base]
n_layers = 2
d_model = 32
n_heads = 2
context_len = 160

[models.foreign]
n_layers = 1
d_model = 16
n_heads = 2
context_len = 160

[train.base]
learning_rate = 0.001
batch_size = 4
max_steps = 2

[train.target]
learning_rate = 0.001
batch_size = 4
max_steps = 2
"""


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("LABCTL_SEED", "LABCTL_OUT_DIR", "LABCTL_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    yield
    # the CLI replaces loguru sinks with one bound to the captured stderr
    logger.remove()
    logger.add(sys.__stderr__)


@pytest.fixture
def tiny_toml(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return path


def test_derive_seed():
    digest = hashlib.sha256(b"world").digest()
    assert derive_seed(0, "world") == int.from_bytes(digest[:8], "big")
    assert derive_seed(1, "world") == (derive_seed(0, "world") + 1) % 2**64
    assert derive_seed(2**64 - 1, "world") < 2**64
    assert derive_seed(0, "world") != derive_seed(0, "base")


def test_fingerprints_ignore_order_and_output_dir():
    assert stage_fingerprint("s", {"a": 1, "b": [1, 2]}, ["x"]) == stage_fingerprint("s", {"b": [1, 2], "a": 1}, ["x"])
    assert stage_fingerprint("s", {"a": 1}, ["x"]) != stage_fingerprint("s", {"a": 1}, ["y"])
    assert stage_fingerprint("s", {}, [], seed=1) != stage_fingerprint("s", {}, [], seed=2)
    assert ExperimentConfig(out_dir="a").fingerprint() == ExperimentConfig(out_dir="b").fingerprint()
    assert ExperimentConfig(seed=1).fingerprint() != ExperimentConfig(seed=2).fingerprint()


def test_config_defaults():
    config = ExperimentConfig()
    assert config.source_layers() == [1, 2, 3, 4]
    assert config.lit_layer() == 4
    assert config.world.extended_personas == 200 and config.world.extended_train == 160
    assert config.models.foreign.n_layers == 6


def test_config_validation():
    with pytest.raises(ValidationError):
        ExperimentConfig(eval={"source_layers": [0, 1]})
    with pytest.raises(ValidationError):
        ExperimentConfig(eval={"tasks": ["fav_color"]})
    with pytest.raises(ValidationError):
        ExperimentConfig(world={"extended_personas": 10, "extended_train": 10})
    with pytest.raises(ValidationError):
        ExperimentConfig(recipe="kf9")
    with pytest.raises(ValidationError):
        ExperimentConfig(unknown_key=1)
    with pytest.raises(ValidationError, match="Missing required variants: A2"):
        ExperimentConfig(eval={"sensitivity_variants": ["S0", "S1", "S2", "S3", "S4", "A1"]})


def test_load_config_precedence(monkeypatch, tiny_toml):
    monkeypatch.setenv("LABCTL_SEED", "5")
    monkeypatch.setenv("LABCTL_OUT_DIR", "from-env")
    assert load_config().seed == 5
    config = load_config(str(tiny_toml))
    assert config.seed == 3
    assert config.out_dir == "from-env"
    assert config.world.n_personas == 24
    config = load_config(str(tiny_toml), seed=11, out_dir="explicit", source_layers=[2, 1])
    assert config.seed == 11 and config.out_dir == "explicit"
    assert config.source_layers() == [1, 2]


def test_partial_tables_keep_section_defaults(tmp_path):
    path = tmp_path / "partial.toml"
    path.write_text("[train.lit]\nepochs = 3\n\n[models.foreign]\nn_layers = 2\n", encoding="utf-8")
    config = load_config(str(path))
    assert config.train.lit.epochs == 3
    assert config.train.lit.loss_mask_mode == "answer_only"
    assert config.models.foreign.n_layers == 2 and config.models.foreign.d_model == 96
    assert config.train.base.epochs == 30


def test_load_config_errors(monkeypatch, tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.toml"))
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 3\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="Invalid TOML"):
        load_config(str(bad))
    monkeypatch.setenv("LABCTL_SEED", "abc")
    with pytest.raises(ConfigError):
        load_config()


def _writer(path, calls):
    def build(seed):
        calls.append(seed)
        path.write_text("artifact\n", encoding="utf-8")

    return build


def test_stage_cache_and_staleness(tmp_path):
    config = ExperimentConfig(out_dir=str(tmp_path), seed=4)
    path = tmp_path / "artifact.txt"
    calls = []
    fingerprint = Lab(config).stage("demo", {"k": 1}, [], [path], _writer(path, calls))
    assert calls == [derive_seed(4, "demo")]
    assert (tmp_path / "artifact.txt.fingerprint").read_text(encoding="utf-8").strip() == fingerprint

    assert Lab(config).stage("demo", {"k": 1}, [], [path], _writer(path, calls)) == fingerprint
    assert len(calls) == 1

    with pytest.raises(StaleArtifactError, match="--force"):
        Lab(config).stage("demo", {"k": 2}, [], [path], _writer(path, calls))
    assert len(calls) == 1

    rebuilt = Lab(config, force=True).stage("demo", {"k": 2}, [], [path], _writer(path, calls))
    assert rebuilt != fingerprint and len(calls) == 2


def test_stage_failures_name_stage_and_seed(tmp_path):
    config = ExperimentConfig(out_dir=str(tmp_path), seed=4)

    def broken(seed):
        raise RuntimeError("boom")

    with pytest.raises(StageError, match=f"Stage demo failed \\(seed {derive_seed(4, 'demo')}\\): boom"):
        Lab(config).stage("demo", {}, [], [tmp_path / "never.txt"], broken)
    assert not (tmp_path / "never.txt.fingerprint").exists()


def test_run_directory_lock(tmp_path):
    lab = Lab(ExperimentConfig(out_dir=str(tmp_path)))
    with lab.locked():
        assert (tmp_path / "run.lock").exists()
        with pytest.raises(RunLockedError):
            with Lab(ExperimentConfig(out_dir=str(tmp_path))).locked():
                pass
    assert not (tmp_path / "run.lock").exists()


def test_knowledge_check_recipe_end_to_end(tmp_path, tiny_toml):
    run_dir = tmp_path / "run"
    config = load_config(str(tiny_toml), out_dir=str(run_dir), recipe="knowledge_check")
    report = run_recipe(config)
    assert report.recipe == "knowledge_check"
    assert report.fingerprint == config.fingerprint()
    assert set(report.acceptance) == {"base_scores_zero", "target_at_least_half"}
    assert {"world", "tokenizer", "base", "target_fantasy", "eval_knowledge_check"} <= set(report.stage_fingerprints)
    assert len(report.tables["knowledge"]) == 2 * 6

    out = run_dir / "knowledge_check"
    for name in ("knowledge.csv", "results.json", "report.json", "timings.json"):
        assert (out / name).exists()
    assert (run_dir / "models" / "base.ckpt.fingerprint").exists()
    assert (out / "knowledge.csv").read_text(encoding="utf-8").startswith("# schema_version=1 fingerprint=")
    assert "total" in json.loads((out / "timings.json").read_text(encoding="utf-8"))

    _, personas, _ = read_world(run_dir / "world", "fantasy")
    assert len(personas) == 24
    _, extended, _ = read_world(run_dir / "world", "extended")
    assert len(extended) == 6

    first = (out / "report.json").read_text(encoding="utf-8")
    assert run_recipe(config).stage_fingerprints == report.stage_fingerprints
    assert (out / "report.json").read_text(encoding="utf-8") == first

    reseeded = config.model_copy(update={"seed": 4})
    with pytest.raises(StaleArtifactError):
        run_recipe(reseeded)
    assert not (run_dir / "run.lock").exists()
    assert run_recipe(reseeded, force=True).stage_fingerprints["world"] != report.stage_fingerprints["world"]


def test_parse_layers():
    assert parse_layers("1,2,3") == [1, 2, 3]
    assert parse_layers(" 4 , 2") == [4, 2]


def test_cli_gen_world(tmp_path, tiny_toml, capsys):
    code = LabCLI().run(["gen-world", "--config", str(tiny_toml), "--mode", "fantasy", "--seed", "7", "--out", str(tmp_path)])
    assert code == EXIT_OK
    paths = world_paths(tmp_path / "world", "fantasy")
    assert all(p.exists() for p in paths)
    assert capsys.readouterr().out.split() == [str(p) for p in paths]
    world, personas, documents = read_world(tmp_path / "world", "fantasy")
    assert world.seed == 7 and world.mode == "fantasy"
    assert len(personas) == 24 and len(documents) == 24


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-world", "--bogus"],
        ["recipe", "kf9"],
        ["train", "nothing"],
        ["gen-world", "--layers", "1,x"],
        ["gen-world", "--mode", "extended"],
        [],
    ],
)
def test_cli_usage_errors(argv):
    assert LabCLI().run(argv) == EXIT_VALIDATION


def test_cli_configuration_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[world\n", encoding="utf-8")
    assert LabCLI().run(["gen-world", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert LabCLI().run(["gen-world", "--config", str(tmp_path / "missing.toml")]) == EXIT_VALIDATION
    invalid = tmp_path / "invalid.toml"
    invalid.write_text("[world]\nn_personas = 1\n", encoding="utf-8")
    assert LabCLI().run(["gen-world", "--config", str(invalid), "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_cli_report_needs_results(tmp_path):
    assert LabCLI().run(["report", "knowledge_check", "--out", str(tmp_path)]) == EXIT_RUNTIME


SMOKE_TOML = TINY_TOML.replace("extended_personas = 6\nextended_train = 4", "extended_personas = 30\nextended_train = 20") + """
[train.lit]
learning_rate = 0.001
batch_size = 4
max_steps = 2
loss_mask_mode = "answer_only"

[train.inverter]
learning_rate = 0.001
batch_size = 4
max_steps = 2

[train.foreign]
learning_rate = 0.001
batch_size = 4
max_steps = 2

[eval]
max_items_per_task = 3
"""

RECIPE_SHAPES = {
    "kf1_zero_shot_parity": ({"accuracy"}, {"zero_shot_within_0.05_of_lit", "no_significant_zero_shot_deficit"}),
    "kf2_inversion": ({"accuracy", "bleu"}, {"multi_bleu_at_least_70", "multi_bleu_above_single", "inversion_half_of_lit_on_half_tasks"}),
    "kf3_personaqa": (
        {"accuracy_plain", "accuracy_shuffled", "accuracy_fantasy"},
        {"every_regime_reported", "fantasy_patchscope_at_most_chance", "fantasy_lit_at_most_chance", "fantasy_probe_above_chance"},
    ),
    "probe_vs_verbalizer": ({"accuracy"}, {"patchscope_at_most_chance", "lit_at_most_chance", "probe_above_chance"}),
    "sensitivity": ({"sensitivity"}, {"original_delta_zero", "adversarial_below_original"}),
    "swap_label": ({"swap_label"}, {"original_beats_shuffled_on_most_attributes"}),
    "cross_model": ({"accuracy"}, {"maps_finite"}),
    "patchscope_sanity": ({"accuracy", "identity"}, {"base_reads_its_own_states", "patchscope_within_zero_shot_ensemble_margin"}),
}


@pytest.fixture(scope="module")
def smoke_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    path = root / "smoke.toml"
    path.write_text(SMOKE_TOML, encoding="utf-8")
    return path, root / "run"


def test_every_recipe_has_a_smoke_shape():
    assert set(RECIPE_SHAPES) | {"knowledge_check"} == set(RECIPES)


@pytest.mark.parametrize("recipe", sorted(RECIPE_SHAPES))
def test_recipe_smoke(smoke_setup, recipe):
    path, run_dir = smoke_setup
    config = load_config(str(path), out_dir=str(run_dir), recipe=recipe)
    report = run_recipe(config)
    tables, checks = RECIPE_SHAPES[recipe]
    assert report.recipe == recipe
    assert set(report.tables) == tables
    assert all(report.tables[name] for name in tables)
    assert set(report.acceptance) == checks
    assert all(isinstance(v, bool) for v in report.acceptance.values())
    assert report.summary
    assert f"eval_{recipe}" in report.stage_fingerprints
    for relative in report.artifacts.values():
        assert (run_dir / relative).exists()
    assert (run_dir / recipe / "report.json").exists()


def test_kf3_reports_every_method_per_regime(smoke_setup):
    path, run_dir = smoke_setup
    report = run_recipe(load_config(str(path), out_dir=str(run_dir), recipe="kf3_personaqa"))
    for regime in ("plain", "shuffled", "fantasy"):
        methods = {row["method"] for row in report.tables[f"accuracy_{regime}"]}
        assert methods == {"zero_shot", "patchscope_single", "lit_multi", "probe"}
        assert set(report.summary["mean_accuracy"][regime]) == methods
    assert len(report.significance) == 3 * 6


def test_patchscope_sanity_reads_base_states_exactly(smoke_setup):
    path, run_dir = smoke_setup
    report = run_recipe(load_config(str(path), out_dir=str(run_dir), recipe="patchscope_sanity"))
    assert report.acceptance["base_reads_its_own_states"]
    assert report.summary["min_identity_rate"] == 1.0
    assert report.summary["ensemble_outputs"] == 3
    methods = {row["method"] for row in report.tables["accuracy"]}
    assert methods == {"patchscope_single", "zero_shot_ensemble"}


def test_world_defaults_are_the_desk_scale_preset(tmp_path):
    assert (ExperimentConfig().world.n_bios, ExperimentConfig().world.n_interviews) == (3, 3)
    path = tmp_path / "full.toml"
    path.write_text("[world]\nn_bios = 250\nn_interviews = 250\n", encoding="utf-8")
    world = load_config(str(path)).world
    assert (world.n_bios, world.n_interviews, world.n_personas) == (250, 250, 72)
