"""
Experiment orchestration: configuration, cached stages, recipes and run reports.

A run directory holds every artifact of one configuration:

    world/      world manifests, persona files and document corpora
    models/     tokenizer, checkpoints, probes and affine maps
    logs/       per-stage training curves
    <recipe>/   results.json, CSV tables, trial dumps, report.json, timings.json

Each artifact has a ``.fingerprint`` sidecar holding the hash of the config
sections and upstream fingerprints it was built from.
"""

import hashlib
import json
import os
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple, get_args

import numpy as np
from dotenv import load_dotenv
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tenacity import RetryError, retry, retry_if_exception_type, stop_after_attempt, wait_fixed

from evalstats import (
    REQUIRED_VARIANTS,
    TrialResult,
    accuracy_rows,
    binomial_p_above_chance,
    chance_margin,
    knowledge_report,
    mcnemar,
    score_run,
    sensitivity_suite,
    swap_label_eval,
    write_accuracy_csv,
    write_sensitivity_csv,
    write_significance_csv,
    write_swap_label_csv,
    write_table,
)
from inversion import dump_reconstructions, invert_multi, invert_single, invert_then_interpret, reconstruction_bleu
from model_core import (
    ModelConfig,
    ModelHandle,
    Tokenizer,
    capture_layer,
    load_checkpoint,
    read_blob_container,
    save_checkpoint,
    write_blob_container,
)
from probe import ProbeConfig, Probe, classification_report, probe_predict, save_probe, stratified_split, train_probe
from trainer import (
    FINETUNE_LEARNING_RATE,
    AffineMap,
    TrainConfig,
    activation_pairs,
    context_tokens,
    finetune_decoder,
    fit_affine,
    train_lm,
)
from verbalize import (
    capture_final_token,
    capture_input,
    cross_model_verbalize,
    dump_trials,
    identity_readout,
    lit_verbalize,
    patchscope_single,
    zero_shot,
)
from worldgen import (
    ATTRIBUTES,
    CLOZE_TEMPLATES,
    DECODER_QUESTIONS,
    DEFAULT_INPUT_TEMPLATE,
    MAX_LABELS,
    SENSITIVITY_VARIANTS,
    Document,
    EvalItem,
    Persona,
    World,
    build_world,
    make_decoder_dataset,
    make_eval_items,
    make_inversion_dataset,
    make_reading_corpus,
    make_triples,
    read_world,
    registered_templates,
    render_corpus,
    split_personas,
    world_paths,
    write_world,
)

SCHEMA_VERSION = 1
LOCK_ATTEMPTS = 5
LOCK_WAIT_SECONDS = 0.5

RecipeName = Literal[
    "kf1_zero_shot_parity",
    "kf2_inversion",
    "kf3_personaqa",
    "probe_vs_verbalizer",
    "sensitivity",
    "swap_label",
    "knowledge_check",
    "cross_model",
    "patchscope_sanity",
]
RECIPES: List[str] = list(get_args(RecipeName))
WORLD_NAMES = ["plain", "shuffled", "fantasy", "extended", "background"]
REGIMES = ["plain", "shuffled", "fantasy"]


class ConfigError(ValueError):
    """Raised for unreadable or inconsistent experiment configuration."""


class StaleArtifactError(RuntimeError):
    """Raised when an artifact on disk was built from a different configuration."""


class StageError(RuntimeError):
    """Wraps any failure inside a stage with the stage name and its seed."""


class RunLockedError(RuntimeError):
    """Raised when another process owns the run directory."""


def env_defaults() -> Dict[str, Any]:
    """Process-level defaults from the environment (and a .env file)."""
    load_dotenv()
    try:
        seed = int(os.getenv("LABCTL_SEED", "0"))
    except ValueError:
        raise ConfigError(f"LABCTL_SEED must be an integer, got {os.getenv('LABCTL_SEED')!r}")
    return {
        "out_dir": os.getenv("LABCTL_OUT_DIR", "runs"),
        "seed": seed,
        "log_level": os.getenv("LABCTL_LOG_LEVEL", "INFO"),
    }


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def derive_seed(master: int, stage: str) -> int:
    """Sub-seed of a stage: master seed plus the first 8 bytes of sha256(stage), mod 2^64."""
    digest = hashlib.sha256(stage.encode("utf-8")).digest()
    return (master + int.from_bytes(digest[:8], "big")) % 2**64


def stage_fingerprint(stage: str, sections: Dict[str, Any], upstream: Sequence[str], seed: Optional[int] = None) -> str:
    payload = {
        "schema_version": SCHEMA_VERSION, "stage": stage, "seed": seed, "sections": sections, "upstream": list(upstream),
    }
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def _overlay_defaults(model_cls: type, data: Any) -> Any:
    """Lay a partial TOML table over the field's default model instead of replacing it."""
    if not isinstance(data, dict):
        return data
    merged = dict(data)
    for name, field in model_cls.model_fields.items():
        value = data.get(name)
        if isinstance(value, dict) and isinstance(field.default, BaseModel):
            merged[name] = {**field.default.model_dump(), **value}
    return merged


class WorldSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_personas: int = Field(72, ge=2)
    labels_per_attribute: int = Field(MAX_LABELS, ge=2, le=MAX_LABELS)
    # desk-scale corpus; a full-size run sets 250 biographies and 250 interviews
    n_bios: int = Field(3, ge=0)
    n_interviews: int = Field(3, ge=0)
    background_personas: int = Field(120, ge=2)
    background_docs: int = Field(2, ge=1)
    extended_personas: int = Field(200, ge=2)
    extended_train: int = Field(160, ge=1)
    triples_per_relation: Optional[int] = Field(None, ge=1)
    questions_per_document: int = Field(3, ge=1)
    inversion_holdout: float = Field(0.1, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_sizes(self) -> "WorldSection":
        if self.n_bios + self.n_interviews < 1:
            raise ValueError("Each persona needs at least one document")
        if self.extended_train >= self.extended_personas:
            raise ValueError("extended_train must leave held-out personas")
        return self


class ModelsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base: ModelConfig = ModelConfig()
    foreign: ModelConfig = ModelConfig(n_layers=6, d_model=96, n_heads=4)

    @model_validator(mode="before")
    @classmethod
    def _partial_tables(cls, data: Any) -> Any:
        return _overlay_defaults(cls, data)


class TrainSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base: TrainConfig = TrainConfig(learning_rate=3e-4, epochs=30, warmup_steps=50)
    target: TrainConfig = TrainConfig(learning_rate=FINETUNE_LEARNING_RATE, epochs=40)
    lit: TrainConfig = TrainConfig(learning_rate=FINETUNE_LEARNING_RATE, epochs=10, loss_mask_mode="answer_only")
    inverter: TrainConfig = TrainConfig(learning_rate=FINETUNE_LEARNING_RATE, epochs=10)
    foreign: TrainConfig = TrainConfig(learning_rate=3e-4, epochs=30, warmup_steps=50)

    @model_validator(mode="before")
    @classmethod
    def _partial_tables(cls, data: Any) -> Any:
        return _overlay_defaults(cls, data)


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source_layers: Optional[List[int]] = None
    lit_layer: Optional[int] = Field(None, ge=1)
    tasks: List[str] = list(ATTRIBUTES)
    max_items_per_task: Optional[int] = Field(None, ge=1)
    sensitivity_variants: List[str] = ["S0", "S1", "S2", "S3", "S4", "A1", "A2"]
    probe_test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    affine_docs: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _check_tasks(self) -> "EvalSection":
        unknown = [t for t in self.tasks if t not in ATTRIBUTES]
        if unknown:
            raise ValueError(f"Invalid attribute: {', '.join(unknown)}")
        if not self.tasks:
            raise ValueError("At least one task is required")
        missing = [v for v in ("S0", *REQUIRED_VARIANTS) if v not in self.sensitivity_variants]
        if missing:
            raise ValueError(f"Missing required variants: {', '.join(missing)}")
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    recipe: RecipeName = "kf1_zero_shot_parity"
    seed: int = Field(0, ge=0, lt=2**64)
    out_dir: str = "runs"
    world: WorldSection = WorldSection()
    models: ModelsSection = ModelsSection()
    train: TrainSection = TrainSection()
    probe: ProbeConfig = ProbeConfig()
    eval: EvalSection = EvalSection()

    @model_validator(mode="after")
    def _check_layers(self) -> "ExperimentConfig":
        n_layers = self.models.base.n_layers
        bad = [layer for layer in self.eval.source_layers or [] if not 1 <= layer <= n_layers]
        if bad:
            raise ValueError(f"Source layers outside [1, {n_layers}]: {bad}")
        if self.eval.lit_layer is not None and self.eval.lit_layer > n_layers:
            raise ValueError(f"lit_layer {self.eval.lit_layer} outside [1, {n_layers}]")
        return self

    def fingerprint(self) -> str:
        """Hash of the semantic content; the output directory is excluded."""
        data = self.model_dump(mode="json", exclude={"out_dir"})
        return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()

    def source_layers(self) -> List[int]:
        if self.eval.source_layers:
            return sorted(set(self.eval.source_layers))
        return list(range(1, max(1, self.models.base.n_layers // 2) + 1))

    def lit_layer(self) -> int:
        return self.eval.lit_layer or max(1, self.models.base.n_layers // 2)


def load_config(path: Optional[str] = None, **overrides) -> ExperimentConfig:
    """
    Build a config: environment defaults, then the TOML file, then explicit overrides.

    Raises:
        ConfigError: If the file is missing or is not valid TOML.
        pydantic.ValidationError: If a value violates a field constraint.
    """
    env = env_defaults()
    data: Dict[str, Any] = {"seed": env["seed"], "out_dir": env["out_dir"]}
    if path:
        try:
            with open(path, "rb") as handle:
                data.update(tomllib.load(handle))
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid TOML in {path}: {e}")
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "source_layers":
            data.setdefault("eval", {})["source_layers"] = value
        else:
            data[key] = value
    return ExperimentConfig(**data)


class RunReport(BaseModel):
    schema_version: int = SCHEMA_VERSION
    recipe: str
    fingerprint: str
    seed: int
    stage_fingerprints: Dict[str, str]
    tables: Dict[str, List[Dict[str, Any]]]
    significance: List[Dict[str, Any]] = []
    summary: Dict[str, Any] = {}
    acceptance: Dict[str, bool] = {}
    artifacts: Dict[str, str]
    timings_path: str


@retry(stop=stop_after_attempt(LOCK_ATTEMPTS), wait=wait_fixed(LOCK_WAIT_SECONDS), retry=retry_if_exception_type(FileExistsError))
def _acquire_lock(path: Path) -> int:
    fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    os.write(fd, str(os.getpid()).encode("utf-8"))
    return fd


def _rows_as_dicts(columns: Sequence[str], rows: Sequence[Sequence]) -> List[Dict[str, Any]]:
    return [dict(zip(columns, row)) for row in rows]


ACCURACY_COLUMNS = ["method", "task", "source_layer", "accuracy", "n_items"]


def run_zero_shot(model: ModelHandle, items: Sequence[EvalItem]) -> List[TrialResult]:
    return [zero_shot(model, item).to_trial(item.answer) for item in items]


def run_patchscope(target: ModelHandle, verbalizer: ModelHandle, items: Sequence[EvalItem], layers: Sequence[int]) -> List[TrialResult]:
    return [
        output.to_trial(item.answer)
        for item in items
        for layer in layers
        for output in patchscope_single(target, verbalizer, item, layer)
    ]


def run_lit(target: ModelHandle, verbalizer: ModelHandle, items: Sequence[EvalItem], layers: Sequence[int]) -> List[TrialResult]:
    return [lit_verbalize(target, verbalizer, item, layer).to_trial(item.answer) for item in items for layer in layers]


def run_zero_shot_ensemble(model: ModelHandle, items: Sequence[EvalItem], n_outputs: int) -> List[TrialResult]:
    """
    Zero-shot answers under ``n_outputs`` semantic rewrites of each prompt, one
    output per rewrite, so the any-output rule matches the patchscope ensemble.
    Decoding is greedy; the rewrites are what makes the outputs differ.
    """
    trials = []
    for item in items:
        rewrites = [t for name, t in SENSITIVITY_VARIANTS[item.task].items() if name.startswith("S")]
        if n_outputs > len(rewrites):
            logger.warning("only {} prompt rewrites for {}; ensembling {} outputs", len(rewrites), item.task, len(rewrites))
        for index, template in enumerate(rewrites[:n_outputs], start=1):
            output = zero_shot(model, item.with_template(template))
            trials.append(
                TrialResult.scored("zero_shot_ensemble", item.task, item.item_id, 0, index, output.text, item.answer)
            )
    return trials


def probe_trials(
    target: ModelHandle,
    train: Sequence[Persona],
    test: Sequence[Persona],
    task: str,
    layer: int,
    cfg: ProbeConfig,
) -> Tuple[Probe, List[TrialResult]]:
    """Train a probe on "My name is <name>" final-token states of ``train`` and score it on ``test``."""
    def acts(personas):
        return [capture_final_token(target, DEFAULT_INPUT_TEMPLATE.format(x=p.name), layer) for p in personas]

    fitted = train_probe(acts(train), [p.attributes[task] for p in train], cfg, layer=layer)
    trials = [
        TrialResult.scored("probe", task, f"{task}:{p.name}", layer, 0, probe_predict(fitted, a), p.attributes[task])
        for p, a in zip(test, acts(test))
    ]
    return fitted, trials


class Lab:
    """Stage runner for one run directory; models are built on demand and cached on disk."""

    def __init__(self, config: ExperimentConfig, force: bool = False):
        self.config = config
        self.force = force
        self.run_dir = Path(config.out_dir)
        self.world_dir = self.run_dir / "world"
        self.models_dir = self.run_dir / "models"
        self.stage_fingerprints: Dict[str, str] = {}
        self.timings: Dict[str, float] = {}
        self._models: Dict[str, ModelHandle] = {}
        self._worlds: Dict[str, Tuple[World, List[Persona], List[Document]]] = {}
        self._tokenizer: Optional[Tokenizer] = None

    @contextmanager
    def locked(self) -> Iterator[None]:
        """Own the run directory exclusively for the duration of the block."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "run.lock"
        try:
            fd = _acquire_lock(path)
        except RetryError as e:
            raise RunLockedError(f"Run directory {self.run_dir} is locked by another process ({path})") from e
        try:
            yield
        finally:
            os.close(fd)
            path.unlink(missing_ok=True)

    def stage(
        self,
        name: str,
        sections: Dict[str, Any],
        upstream: Sequence[str],
        outputs: Sequence[Path],
        build: Callable[[int], None],
    ) -> str:
        """
        Run ``build(seed)`` unless every output exists with a matching fingerprint.

        Raises:
            StaleArtifactError: If an output exists with another fingerprint and force is off.
            StageError: If the build fails.
        """
        seed = derive_seed(self.config.seed, name)
        fingerprint = stage_fingerprint(name, sections, [self.stage_fingerprints[u] for u in upstream], seed)
        self.stage_fingerprints[name] = fingerprint
        sidecars = [Path(f"{p}.fingerprint") for p in outputs]
        recorded = [s.read_text(encoding="utf-8").strip() if s.exists() else None for s in sidecars]
        if all(p.exists() for p in outputs) and all(r == fingerprint for r in recorded):
            logger.info("stage {} cached ({})", name, fingerprint[:12])
            return fingerprint
        stale = [str(p) for p, r in zip(outputs, recorded) if p.exists() and r is not None and r != fingerprint]
        if stale and not self.force:
            raise StaleArtifactError(
                f"Stage {name}: artifacts were built from a different configuration ({', '.join(stale)}); rerun with --force"
            )
        logger.info("stage {} running (seed {})", name, seed)
        start = time.perf_counter()
        try:
            build(seed)
        except Exception as e:
            raise StageError(f"Stage {name} failed (seed {seed}): {e}") from e
        for sidecar in sidecars:
            sidecar.parent.mkdir(parents=True, exist_ok=True)
            sidecar.write_text(fingerprint + "\n", encoding="utf-8")
        self.timings[name] = round(time.perf_counter() - start, 3)
        return fingerprint

    # worlds and tokenizer

    def worlds(self) -> str:
        cfg = self.config.world
        outputs = [p for name in WORLD_NAMES for p in world_paths(self.world_dir, name)]

        def build(seed: int) -> None:
            n, k = cfg.n_personas, cfg.labels_per_attribute
            regime_seed = derive_seed(seed, "plain")
            worlds = {
                "plain": build_world(regime_seed, "plain", n, k),
                "shuffled": build_world(regime_seed, "shuffled", n, k),
                "fantasy": build_world(derive_seed(seed, "fantasy"), "fantasy", n, k),
                "extended": build_world(derive_seed(seed, "extended"), "fantasy", cfg.extended_personas, MAX_LABELS),
            }
            worlds["background"] = build_world(
                derive_seed(seed, "background"), "plain", cfg.background_personas, k,
                exclude_names=[p.name for p in worlds["plain"][1]],
            )
            for name, (world, personas) in worlds.items():
                if name == "background":
                    documents = render_corpus(personas, cfg.background_docs, cfg.background_docs, seed)
                else:
                    documents = render_corpus(personas, cfg.n_bios, cfg.n_interviews, seed)
                write_world(self.world_dir, world, personas, documents, name=name)
                logger.info("world {}: {} personas, {} documents", name, len(personas), len(documents))

        return self.stage("world", {"world": cfg.model_dump(mode="json")}, [], outputs, build)

    def world(self, name: str) -> Tuple[World, List[Persona], List[Document]]:
        if name not in self._worlds:
            self.worlds()
            self._worlds[name] = read_world(self.world_dir, name)
        return self._worlds[name]

    def tokenizer(self) -> Tokenizer:
        if self._tokenizer is not None:
            return self._tokenizer
        self.worlds()
        path = self.models_dir / "tokenizer.json"

        def build(seed: int) -> None:
            texts: List[str] = []
            for name in WORLD_NAMES:
                world, personas, documents = self.world(name)
                texts += [d.text for d in documents]
                texts += make_reading_corpus(personas)
            texts += [t.format(x="", distractor="") for t in registered_templates()]
            texts += list(DECODER_QUESTIONS.values())
            texts += [t.format(x="") for t in list(CLOZE_TEMPLATES.values()) + [DEFAULT_INPUT_TEMPLATE]]
            tokenizer = Tokenizer.fit(texts)
            path.parent.mkdir(parents=True, exist_ok=True)
            tokenizer.save(path)
            logger.info("tokenizer: {} ids", tokenizer.vocab_size)

        self.stage("tokenizer", {}, ["world"], [path], build)
        self._tokenizer = Tokenizer.load(path)
        return self._tokenizer

    # models

    def _train_cfg(self, section: TrainConfig, stage: str, seed: int) -> TrainConfig:
        return section.model_copy(update={"seed": seed, "log_path": str(self.run_dir / "logs" / f"{stage}.csv")})

    def _model(
        self,
        name: str,
        sections: Dict[str, Any],
        upstream: Sequence[str],
        build: Callable[[int], ModelHandle],
    ) -> ModelHandle:
        if name in self._models:
            return self._models[name]
        path = self.models_dir / f"{name}.ckpt"

        def run(seed: int) -> None:
            model = build(seed)
            if not model.is_finite():
                raise ValueError(f"model {name} has non-finite weights")
            save_checkpoint(model, path)

        self.stage(name, sections, upstream, [path], run)
        self._models[name] = load_checkpoint(path)
        return self._models[name]

    def base(self) -> ModelHandle:
        """The verbalizer family: trained from scratch on the background world and the reading corpus."""
        tokenizer = self.tokenizer()
        _, personas, documents = self.world("background")
        section = self.config.train.base

        def build(seed: int) -> ModelHandle:
            config = self.config.models.base.model_copy(update={"seed": seed})
            model = ModelHandle.create(config, tokenizer, "verbalizer", f"base model initialized from seed {seed}")
            corpus = [d.text for d in documents] + make_reading_corpus(personas)
            return train_lm(model, corpus, self._train_cfg(section, "base", seed)).model

        sections = {"model": self.config.models.base.model_dump(mode="json"), "train": section.model_dump(mode="json")}
        return self._model("base", sections, ["world", "tokenizer"], build)

    def target(self, regime: str) -> ModelHandle:
        """The base model finetuned on one regime's documents."""
        base = self.base()
        _, _, documents = self.world(regime)
        section = self.config.train.target
        name = f"target_{regime}"

        def build(seed: int) -> ModelHandle:
            start = base.clone(role="target", provenance=f"{base.provenance} -> {name}")
            return train_lm(start, [d.text for d in documents], self._train_cfg(section, name, seed)).model

        return self._model(name, {"train": section.model_dump(mode="json")}, ["world", "base"], build)

    def lit(self) -> ModelHandle:
        """Multi-activation decoder finetuned once at the default layer on background QA records."""
        base = self.base()
        world, personas, documents = self.world("background")
        section = self.config.train.lit
        layer = self.config.lit_layer()

        def build(seed: int) -> ModelHandle:
            data = make_decoder_dataset(world, personas, documents, seed, self.config.world.questions_per_document)
            return finetune_decoder(base.clone(role="verbalizer"), base, data, layer, "lit", self._train_cfg(section, "lit", seed))

        sections = {"train": section.model_dump(mode="json"), "layer": layer}
        return self._model("lit", sections, ["world", "base"], build)

    def extended_split(self) -> Tuple[List[Persona], List[Persona]]:
        _, personas, _ = self.world("extended")
        return split_personas(personas, self.config.world.extended_train, derive_seed(self.config.seed, "extended-split"))

    def extended_verbalizer(self) -> ModelHandle:
        """Base model that has read the training personas of the extended fantasy world."""
        base = self.base()
        _, _, documents = self.world("extended")
        train, _ = self.extended_split()
        names = {p.name for p in train}
        section = self.config.train.target

        def build(seed: int) -> ModelHandle:
            texts = [d.text for d in documents if d.entity in names]
            return train_lm(base.clone(role="verbalizer"), texts, self._train_cfg(section, "extended_verbalizer", seed)).model

        sections = {"train": section.model_dump(mode="json"), "n_train": len(train)}
        return self._model("extended_verbalizer", sections, ["world", "base"], build)

    def extended_lit(self) -> ModelHandle:
        target = self.target("extended")
        verbalizer = self.extended_verbalizer()
        world, _, documents = self.world("extended")
        train, _ = self.extended_split()
        names = {p.name for p in train}
        section = self.config.train.lit
        layer = self.config.lit_layer()

        def build(seed: int) -> ModelHandle:
            docs = [d for d in documents if d.entity in names]
            data = make_decoder_dataset(world, train, docs, seed, self.config.world.questions_per_document)
            return finetune_decoder(verbalizer, target, data, layer, "lit", self._train_cfg(section, "extended_lit", seed))

        sections = {"train": section.model_dump(mode="json"), "layer": layer}
        return self._model("extended_lit", sections, ["world", "target_extended", "extended_verbalizer"], build)

    def inversion_split(self) -> Tuple[List[Document], List[Document]]:
        """Background documents split into inverter training and held-out sets."""
        _, _, documents = self.world("background")
        rng = np.random.default_rng(derive_seed(self.config.seed, "inversion-split"))
        order = rng.permutation(len(documents))
        n_holdout = max(1, int(round(len(documents) * self.config.world.inversion_holdout)))
        held = set(int(i) for i in order[:n_holdout])
        train = [d for i, d in enumerate(documents) if i not in held]
        holdout = [d for i, d in enumerate(documents) if i in held]
        return train, holdout

    def inverter(self, kind: Literal["multi", "single"]) -> ModelHandle:
        base = self.base()
        train, _ = self.inversion_split()
        section = self.config.train.inverter
        layer = self.config.lit_layer()
        name = f"inverter_{kind}"

        def build(seed: int) -> ModelHandle:
            data = make_inversion_dataset(train)
            return finetune_decoder(base.clone(role="inverter"), base, data, layer, name, self._train_cfg(section, name, seed))

        sections = {"train": section.model_dump(mode="json"), "layer": layer, "holdout": self.config.world.inversion_holdout}
        return self._model(name, sections, ["world", "base"], build)

    def foreign(self) -> ModelHandle:
        """A second model family with its own shape, trained on the same background corpus."""
        tokenizer = self.tokenizer()
        _, personas, documents = self.world("background")
        section = self.config.train.foreign

        def build(seed: int) -> ModelHandle:
            config = self.config.models.foreign.model_copy(update={"seed": seed})
            model = ModelHandle.create(config, tokenizer, "target", f"foreign model initialized from seed {seed}")
            corpus = [d.text for d in documents] + make_reading_corpus(personas)
            return train_lm(model, corpus, self._train_cfg(section, "foreign", seed)).model

        sections = {"model": self.config.models.foreign.model_dump(mode="json"), "train": section.model_dump(mode="json")}
        return self._model("foreign", sections, ["world", "tokenizer"], build)

    def affine(self, source_layer: int) -> AffineMap:
        """Map from the foreign model's layer ``source_layer`` to the base model's decoder layer."""
        foreign = self.foreign()
        base = self.base()
        _, _, documents = self.world("background")
        dest_layer = self.config.lit_layer()
        name = f"affine_{source_layer}"
        path = self.models_dir / f"{name}.blob"

        def build(seed: int) -> None:
            texts = [d.text for d in documents[: self.config.eval.affine_docs]]
            fitted = fit_affine(activation_pairs(foreign, base, texts, source_layer, dest_layer))
            header = {"format": "labctl-affine", "version": 1, "residual_mse": fitted.residual_mse}
            write_blob_container(path, header, {"matrix": fitted.matrix, "bias": fitted.bias})

        sections = {"source_layer": source_layer, "dest_layer": dest_layer, "docs": self.config.eval.affine_docs}
        self.stage(name, sections, ["world", "foreign", "base"], [path], build)
        header, arrays = read_blob_container(path)
        return AffineMap(matrix=arrays["matrix"], bias=arrays["bias"], residual_mse=header["residual_mse"])

    # evaluation building blocks

    def _cap(self, items: Sequence) -> List:
        cap = self.config.eval.max_items_per_task
        return list(items if cap is None else items[:cap])

    def evaluate_regime(self, regime: str, layers: Sequence[int]) -> Tuple[List[Tuple], List[TrialResult]]:
        """Zero-shot, patchscope and LIT accuracy rows on one regime's eval items at ``layers``."""
        target = self.target(regime)
        base = self.base()
        lit = self.lit()
        _, personas, _ = self.world(regime)
        rows: List[Tuple] = []
        trials: List[TrialResult] = []
        for task in self.config.eval.tasks:
            items = self._cap(make_eval_items(personas, task))
            runs = {
                "zero_shot": (run_zero_shot(base, items), "single_output"),
                "patchscope_single": (run_patchscope(target, base, items, layers), "any_target_layer"),
                "lit_multi": (run_lit(target, lit, items, layers), "single_output"),
            }
            for method, (method_trials, mode) in runs.items():
                rows += accuracy_rows(method, task, score_run(method_trials, mode))
                trials += method_trials
            logger.info("evaluated {} / {}", regime, task)
        return rows, trials

    def probe_regime(self, regime: str, layer: int, report_dir: Optional[Path] = None) -> Tuple[List[Tuple], List[TrialResult]]:
        """Per-task probes on a stratified split of the regime's personas."""
        target = self.target(regime)
        _, personas, _ = self.world(regime)
        rows: List[Tuple] = []
        trials: List[TrialResult] = []
        for task in self.config.eval.tasks:
            seed = derive_seed(self.config.seed, f"probe:{regime}:{task}")
            train_idx, test_idx = stratified_split([p.attributes[task] for p in personas], self.config.eval.probe_test_fraction, seed)
            cfg = self.config.probe.model_copy(update={"seed": seed})
            train = [personas[i] for i in train_idx]
            test = [personas[i] for i in test_idx]
            fitted, task_trials = probe_trials(target, train, test, task, layer, cfg)
            if report_dir is not None:
                save_probe(fitted, report_dir / f"probe_{regime}_{task}.blob")
            rows += accuracy_rows("probe", task, score_run(task_trials, "single_output"))
            trials += task_trials
        return rows, trials

    def inversion_holdout(self, out_dir: Path) -> Dict[str, float]:
        """Reconstruct held-out excerpts with both inverters and return corpus BLEU per kind."""
        base = self.base()
        inverters = {"multi": self.inverter("multi"), "single": self.inverter("single")}
        _, holdout = self.inversion_split()
        records = self._cap(make_inversion_dataset(holdout).records)
        layer = self.config.lit_layer()
        recs: Dict[str, List] = {"multi": [], "single": []}
        for record in records:
            acts = capture_layer(base, context_tokens(base, record.context_text), layer)
            recs["multi"].append(invert_multi(inverters["multi"], acts))
            recs["single"].append(invert_single(inverters["single"], acts.row(len(acts) - 1)))
        references = [r.context_text for r in records]
        ids = [f"holdout:{i}" for i in range(len(records))]
        scores = {}
        for kind, reconstructions in recs.items():
            dump_reconstructions(out_dir / f"reconstructions_{kind}.jsonl", ids, references, reconstructions)
            scores[kind] = reconstruction_bleu(reconstructions, references)
            logger.info("held-out BLEU ({}): {:.2f}", kind, scores[kind])
        return scores

    # recipes

    def _recipe_outputs(self, recipe: str) -> List[str]:
        tasks = self.config.eval.tasks
        outputs = {
            "kf1_zero_shot_parity": ["accuracy.csv", "significance.csv", "trials.jsonl"],
            "kf2_inversion": ["accuracy.csv", "bleu.csv", "reconstructions_multi.jsonl", "reconstructions_single.jsonl", "trials.jsonl"],
            "kf3_personaqa": [f"accuracy_{r}.csv" for r in REGIMES] + ["significance.csv", "trials.jsonl"],
            "probe_vs_verbalizer": ["accuracy.csv", "trials.jsonl"] + [f"probe_report_{t}.csv" for t in tasks],
            "sensitivity": ["sensitivity.csv"],
            "swap_label": ["swap_label.csv", "trials.jsonl"],
            "knowledge_check": ["knowledge.csv"],
            "cross_model": ["accuracy.csv", "trials.jsonl"],
            "patchscope_sanity": ["accuracy.csv", "identity.csv", "trials.jsonl"],
        }[recipe]
        return ["results.json"] + outputs

    def _requirements(self, recipe: str) -> List[str]:
        """Build (or find cached) every model a recipe reads, returning their stage names."""
        if recipe in ("kf1_zero_shot_parity",):
            self.lit()
            return ["world", "base", "lit"]
        if recipe == "kf2_inversion":
            self.lit()
            self.inverter("multi")
            self.inverter("single")
            return ["world", "base", "lit", "inverter_multi", "inverter_single"]
        if recipe == "kf3_personaqa":
            for regime in REGIMES:
                self.target(regime)
            self.lit()
            return ["world", "base", "lit"] + [f"target_{r}" for r in REGIMES]
        if recipe == "probe_vs_verbalizer":
            self.extended_lit()
            return ["world", "target_extended", "extended_verbalizer", "extended_lit"]
        if recipe == "sensitivity":
            self.target("plain")
            self.lit()
            return ["world", "target_plain", "lit"]
        if recipe == "swap_label":
            self.target("shuffled")
            self.lit()
            return ["world", "base", "target_shuffled", "lit"]
        if recipe == "knowledge_check":
            self.target("fantasy")
            return ["world", "base", "target_fantasy"]
        if recipe == "cross_model":
            self.lit()
            names = ["world", "base", "lit", "foreign"]
            for layer in self._foreign_layers():
                self.affine(layer)
                names.append(f"affine_{layer}")
            return names
        if recipe == "patchscope_sanity":
            self.target("shuffled")
            return ["world", "base", "target_shuffled"]
        raise ConfigError(f"Invalid recipe: {recipe}")

    def _foreign_layers(self) -> List[int]:
        layers = [l for l in self.config.source_layers() if l <= self.config.models.foreign.n_layers]
        if not layers:
            raise ConfigError("No source layer fits the foreign model")
        return layers

    def _triple_items(self, seed: int) -> Dict[str, List[EvalItem]]:
        world, personas, _ = self.world("plain")
        triples = make_triples(world, personas, seed, self.config.world.triples_per_relation)
        return {task: self._cap([t.to_eval_item() for t in triples if t.relation == task]) for task in self.config.eval.tasks}

    def _kf1(self, out: Path, seed: int) -> Dict[str, Any]:
        base, lit = self.base(), self.lit()
        layers = self.config.source_layers()
        lit_layer = self.config.lit_layer()
        items_by_task = self._triple_items(seed)
        rows: List[Tuple] = []
        trials: List[TrialResult] = []
        significance = []
        averages: Dict[str, List[float]] = {"zero_shot": [], "patchscope_single": [], "lit_multi": []}
        n_tasks = len(items_by_task)
        for task, items in items_by_task.items():
            scores = {}
            for method, method_trials, mode in (
                ("zero_shot", run_zero_shot(base, items), "single_output"),
                ("patchscope_single", run_patchscope(base, base, items, layers), "any_target_layer"),
                ("lit_multi", run_lit(base, lit, items, layers), "single_output"),
            ):
                scores[method] = score_run(method_trials, mode)
                rows += accuracy_rows(method, task, scores[method])
                averages[method].append(scores[method].average)
                trials += method_trials
            ids = [item.item_id for item in items]
            paired_layer = lit_layer if lit_layer in layers else layers[0]
            zero = [scores["zero_shot"].correctness[0][i] for i in ids]
            for other in ("lit_multi", "patchscope_single"):
                flags = [scores[other].correctness[paired_layer][i] for i in ids]
                significance.append(mcnemar(zero, flags, n_tasks, "zero_shot", other, task))

        write_accuracy_csv(out / "accuracy.csv", rows, self.config.fingerprint(), self.config.seed)
        write_significance_csv(out / "significance.csv", significance, self.config.fingerprint(), self.config.seed)
        dump_trials(out / "trials.jsonl", trials)
        means = {method: float(np.mean(values)) for method, values in averages.items()}
        deficit = [r.task for r in significance if r.method_b == "lit_multi" and r.significant and r.effect < 0]
        return {
            "tables": {"accuracy": _rows_as_dicts(ACCURACY_COLUMNS, rows)},
            "significance": [r.model_dump() for r in significance],
            "summary": {"mean_accuracy": means, "significant_zero_shot_deficit": deficit},
            "acceptance": {
                "zero_shot_within_0.05_of_lit": means["zero_shot"] >= means["lit_multi"] - 0.05,
                "no_significant_zero_shot_deficit": not deficit,
            },
        }

    def _kf2(self, out: Path, seed: int) -> Dict[str, Any]:
        base, lit = self.base(), self.lit()
        inverters = {"multi": self.inverter("multi"), "single": self.inverter("single")}
        layer = self.config.lit_layer()
        bleu_scores = self.inversion_holdout(out)
        rows: List[Tuple] = []
        trials: List[TrialResult] = []
        comparable = []
        for task, items in self._triple_items(seed).items():
            lit_trials = run_lit(base, lit, items, [layer])
            multi = [
                invert_then_interpret(inverters["multi"], base, capture_input(base, item.x_input, layer), item).to_trial(item.answer)
                for item in items
            ]
            single = [
                invert_then_interpret(inverters["single"], base, capture_final_token(base, item.x_input, layer), item).to_trial(item.answer)
                for item in items
            ]
            scores = {}
            for method, method_trials in (("lit_multi", lit_trials), ("inversion_multi", multi), ("inversion_single", single)):
                scores[method] = score_run(method_trials, "single_output")
                rows += accuracy_rows(method, task, scores[method])
                trials += method_trials
            comparable.append(scores["inversion_multi"].average >= 0.5 * scores["lit_multi"].average)

        fingerprint = self.config.fingerprint()
        write_accuracy_csv(out / "accuracy.csv", rows, fingerprint, self.config.seed)
        bleu_rows = [(kind, score, layer) for kind, score in sorted(bleu_scores.items())]
        write_table(out / "bleu.csv", ["kind", "bleu", "source_layer"], bleu_rows, fingerprint, self.config.seed)
        dump_trials(out / "trials.jsonl", trials)
        return {
            "tables": {
                "accuracy": _rows_as_dicts(ACCURACY_COLUMNS, rows),
                "bleu": _rows_as_dicts(["kind", "bleu", "source_layer"], bleu_rows),
            },
            "summary": {"bleu": bleu_scores, "tasks_with_inversion_at_half_lit": int(sum(comparable))},
            "acceptance": {
                "multi_bleu_at_least_70": bleu_scores["multi"] >= 70.0,
                "multi_bleu_above_single": bleu_scores["multi"] > bleu_scores["single"],
                "inversion_half_of_lit_on_half_tasks": 2 * sum(comparable) >= len(comparable),
            },
        }

    def _kf3(self, out: Path, seed: int) -> Dict[str, Any]:
        layers = self.config.source_layers()
        lit_layer = self.config.lit_layer()
        fingerprint = self.config.fingerprint()
        tables: Dict[str, List[Dict[str, Any]]] = {}
        trials: List[TrialResult] = []
        significance = []
        summary: Dict[str, Dict[str, float]] = {}
        probe_flags: Dict[str, List[bool]] = {}
        paired_layer = lit_layer if lit_layer in layers else layers[0]
        for regime in REGIMES:
            rows, regime_trials = self.evaluate_regime(regime, layers)
            probe_rows, probe_regime_trials = self.probe_regime(regime, lit_layer, out)
            probe_flags[regime] = [t.correct for t in probe_regime_trials]
            rows += probe_rows
            write_accuracy_csv(out / f"accuracy_{regime}.csv", rows, fingerprint, self.config.seed)
            tables[f"accuracy_{regime}"] = _rows_as_dicts(ACCURACY_COLUMNS, rows)
            trials += regime_trials + probe_regime_trials
            averages: Dict[str, List[float]] = {}
            for method, task, layer, acc, _ in rows:
                if layer == "average":
                    averages.setdefault(method, []).append(acc)
            summary[regime] = {method: float(np.mean(values)) for method, values in averages.items()}
            for task in self.config.eval.tasks:
                zero = {t.item_id: t.correct for t in regime_trials if t.method == "zero_shot" and t.task == task}
                decoded = {
                    t.item_id: t.correct
                    for t in regime_trials
                    if t.method == "lit_multi" and t.task == task and t.source_layer == paired_layer
                }
                ids = sorted(zero)
                significance.append(
                    mcnemar(
                        [zero[i] for i in ids], [decoded[i] for i in ids], len(self.config.eval.tasks),
                        "zero_shot", "lit_multi", f"{regime}:{task}",
                    )
                )
        write_significance_csv(out / "significance.csv", significance, fingerprint, self.config.seed)
        dump_trials(out / "trials.jsonl", trials)

        # verbalizers should sit at chance on fantasy personas while the probe does not
        world, personas, _ = self.world("fantasy")
        n_labels = world.labels_per_attribute
        n_items = len(self._cap(personas))
        ceiling = 1.0 / n_labels + chance_margin(n_items, n_labels)
        p_value = binomial_p_above_chance(sum(probe_flags["fantasy"]), len(probe_flags["fantasy"]), n_labels)
        fantasy = summary["fantasy"]
        return {
            "tables": tables,
            "significance": [r.model_dump() for r in significance],
            "summary": {
                "mean_accuracy": summary,
                "fantasy_chance_ceiling": ceiling,
                "fantasy_probe_p_above_chance": p_value,
            },
            "acceptance": {
                "every_regime_reported": all(tables.get(f"accuracy_{r}") for r in REGIMES),
                "fantasy_patchscope_at_most_chance": fantasy["patchscope_single"] <= ceiling,
                "fantasy_lit_at_most_chance": fantasy["lit_multi"] <= ceiling,
                "fantasy_probe_above_chance": p_value < 0.05,
            },
        }

    def _probe_vs_verbalizer(self, out: Path, seed: int) -> Dict[str, Any]:
        target = self.target("extended")
        verbalizer = self.extended_verbalizer()
        lit = self.extended_lit()
        world, _, _ = self.world("extended")
        train, test = self.extended_split()
        held = self._cap(test)
        layers = self.config.source_layers()
        lit_layer = self.config.lit_layer()
        fingerprint = self.config.fingerprint()
        rows: List[Tuple] = []
        trials: List[TrialResult] = []
        pooled: Dict[str, List[float]] = {"patchscope_single": [], "lit_multi": []}
        probe_correct = 0
        probe_total = 0
        for task in self.config.eval.tasks:
            items = make_eval_items(held, task)
            for method, method_trials, mode in (
                ("patchscope_single", run_patchscope(target, verbalizer, items, layers), "any_target_layer"),
                ("lit_multi", run_lit(target, lit, items, layers), "single_output"),
            ):
                score = score_run(method_trials, mode)
                rows += accuracy_rows(method, task, score)
                pooled[method].append(score.average)
                trials += method_trials
            cfg = self.config.probe.model_copy(update={"seed": derive_seed(self.config.seed, f"probe:extended:{task}")})
            fitted, task_trials = probe_trials(target, train, held, task, lit_layer, cfg)
            held_acts = [capture_final_token(target, DEFAULT_INPUT_TEMPLATE.format(x=p.name), lit_layer) for p in held]
            classification_report(
                fitted, held_acts, [p.attributes[task] for p in held], out / f"probe_report_{task}.csv",
                fingerprint, self.config.seed,
            )
            rows += accuracy_rows("probe", task, score_run(task_trials, "single_output"))
            probe_correct += sum(t.correct for t in task_trials)
            probe_total += len(task_trials)
            trials += task_trials

        write_accuracy_csv(out / "accuracy.csv", rows, fingerprint, self.config.seed)
        dump_trials(out / "trials.jsonl", trials)
        n_labels = world.labels_per_attribute
        ceiling = 1.0 / n_labels + chance_margin(len(held), n_labels)
        means = {method: float(np.mean(values)) for method, values in pooled.items()}
        probe_accuracy = probe_correct / probe_total
        p_value = binomial_p_above_chance(probe_correct, probe_total, n_labels)
        return {
            "tables": {"accuracy": _rows_as_dicts(ACCURACY_COLUMNS, rows)},
            "summary": {
                "mean_accuracy": dict(means, probe=probe_accuracy),
                "chance": 1.0 / n_labels,
                "chance_ceiling": ceiling,
                "probe_p_above_chance": p_value,
            },
            "acceptance": {
                "patchscope_at_most_chance": means["patchscope_single"] <= ceiling,
                "lit_at_most_chance": means["lit_multi"] <= ceiling,
                "probe_above_chance": p_value < 0.05,
            },
        }

    def _sensitivity(self, out: Path, seed: int) -> Dict[str, Any]:
        target = self.target("plain")
        lit = self.lit()
        world, personas, _ = self.world("plain")
        layer = self.config.lit_layer()
        results = []
        for task in self.config.eval.tasks:
            variants = SENSITIVITY_VARIANTS[task]
            missing = [v for v in self.config.eval.sensitivity_variants if v not in variants]
            if missing:
                raise ValueError(f"Missing required variants: {', '.join(missing)} for {task}")
            chosen = {v: variants[v] for v in self.config.eval.sensitivity_variants}
            items = self._cap(make_eval_items(personas, task))
            results += sensitivity_suite(
                items, lambda item: [lit_verbalize(target, lit, item, layer).text], chosen, world.attribute_schemas[task], seed
            )
        write_sensitivity_csv(out / "sensitivity.csv", results, self.config.fingerprint(), self.config.seed)
        original = [r.accuracy for r in results if r.variant == "S0"]
        adversarial = [r.accuracy for r in results if r.variant.startswith("A")]
        summary = {
            "original_accuracy": float(np.mean(original)) if original else None,
            "adversarial_accuracy": float(np.mean(adversarial)) if adversarial else None,
        }
        acceptance = {"original_delta_zero": all(r.delta == 0.0 for r in results if r.variant == "S0")}
        if original and adversarial:
            acceptance["adversarial_below_original"] = summary["adversarial_accuracy"] < summary["original_accuracy"]
        return {
            "tables": {"sensitivity": [r.model_dump() for r in results]},
            "summary": summary,
            "acceptance": acceptance,
        }

    def _swap_label(self, out: Path, seed: int) -> Dict[str, Any]:
        target = self.target("shuffled")
        base, lit = self.base(), self.lit()
        _, personas, _ = self.world("shuffled")
        layer = self.config.lit_layer()
        results = []
        trials: List[TrialResult] = []
        for task in self.config.eval.tasks:
            items = self._cap(make_eval_items(personas, task))
            by_id = {f"{task}:{p.name}": p for p in personas}
            original = {item.item_id: by_id[item.item_id].plain_attributes[task] for item in items}
            shuffled = {item.item_id: item.answer for item in items}
            task_trials = run_lit(target, lit, items, [layer])
            results += [r.model_copy(update={"task": f"lit_multi:{r.task}"}) for r in swap_label_eval(task_trials, original, shuffled)]
            patch_trials = run_patchscope(target, base, items, [layer])
            results += [r.model_copy(update={"task": f"patchscope_single:{r.task}"}) for r in swap_label_eval(patch_trials, original, shuffled)]
            trials += task_trials + patch_trials
        write_swap_label_csv(out / "swap_label.csv", results, self.config.fingerprint(), self.config.seed)
        dump_trials(out / "trials.jsonl", trials)
        lit_wins = sum(r.original_accuracy > r.shuffled_accuracy for r in results if r.task.startswith("lit_multi:"))
        needed = min(4, len(self.config.eval.tasks))
        return {
            "tables": {"swap_label": [r.model_dump() for r in results]},
            "summary": {"lit_attributes_favoring_original": lit_wins},
            "acceptance": {"original_beats_shuffled_on_most_attributes": lit_wins >= needed},
        }

    def _knowledge_check(self, out: Path, seed: int) -> Dict[str, Any]:
        _, personas, _ = self.world("fantasy")
        reports = {"base": knowledge_report(self.base(), personas), "target_fantasy": knowledge_report(self.target("fantasy"), personas)}
        rows = [
            (model, attribute, reports[model][attribute], len(personas))
            for model in reports
            for attribute in ATTRIBUTES
        ]
        columns = ["model", "attribute", "token_accuracy", "n_items"]
        write_table(out / "knowledge.csv", columns, rows, self.config.fingerprint(), self.config.seed)
        return {
            "tables": {"knowledge": _rows_as_dicts(columns, rows)},
            "summary": reports,
            "acceptance": {
                "base_scores_zero": all(v == 0.0 for v in reports["base"].values()),
                "target_at_least_half": all(v >= 0.5 for v in reports["target_fantasy"].values()),
            },
        }

    def _cross_model(self, out: Path, seed: int) -> Dict[str, Any]:
        foreign, base, lit = self.foreign(), self.base(), self.lit()
        rows: List[Tuple] = []
        trials: List[TrialResult] = []
        residuals = {}
        layers = self._foreign_layers()
        maps = {layer: self.affine(layer) for layer in layers}
        for layer, fitted in maps.items():
            residuals[str(layer)] = fitted.residual_mse
        for task, items in self._triple_items(seed).items():
            crossed = [
                output.to_trial(item.answer)
                for item in items
                for layer in layers
                for output in cross_model_verbalize(foreign, lit, item, layer, maps[layer])
            ]
            same = run_lit(base, lit, items, layers)
            for method, method_trials in (("cross_model", crossed), ("lit_multi", same)):
                rows += accuracy_rows(method, task, score_run(method_trials, "single_output"))
                trials += method_trials
        write_accuracy_csv(out / "accuracy.csv", rows, self.config.fingerprint(), self.config.seed)
        dump_trials(out / "trials.jsonl", trials)
        return {
            "tables": {"accuracy": _rows_as_dicts(ACCURACY_COLUMNS, rows)},
            "summary": {"affine_residual_mse": residuals},
            "acceptance": {"maps_finite": all(np.isfinite(v) for v in residuals.values())},
        }

    def _patchscope_sanity(self, out: Path, seed: int) -> Dict[str, Any]:
        """
        Two checks on patchscope before trusting its ensemble: the base model
        must read its own re-injected states back exactly, and on the shuffled
        world the any-target-layer ensemble is compared with a zero-shot
        ensemble of the same size that sees no activations.
        """
        base = self.base()
        target = self.target("shuffled")
        world, personas, _ = self.world("shuffled")
        layers = self.config.source_layers()
        n_outputs = base.n_layers + 1
        fingerprint = self.config.fingerprint()
        rows: List[Tuple] = []
        identity_rows: List[Tuple] = []
        trials: List[TrialResult] = []
        pooled: Dict[str, List[float]] = {"patchscope_single": [], "zero_shot_ensemble": []}
        n_items = 0
        for task in self.config.eval.tasks:
            items = self._cap(make_eval_items(personas, task))
            n_items = len(items)
            for layer in layers:
                reads = sum(identity_readout(base, item.x_input, layer) for item in items)
                identity_rows.append((task, layer, reads / len(items), len(items)))
            for method, method_trials in (
                ("patchscope_single", run_patchscope(target, base, items, layers)),
                ("zero_shot_ensemble", run_zero_shot_ensemble(base, items, n_outputs)),
            ):
                score = score_run(method_trials, "any_target_layer")
                rows += accuracy_rows(method, task, score)
                pooled[method].append(score.average)
                trials += method_trials

        identity_columns = ["task", "source_layer", "identity_rate", "n_items"]
        write_accuracy_csv(out / "accuracy.csv", rows, fingerprint, self.config.seed)
        write_table(out / "identity.csv", identity_columns, identity_rows, fingerprint, self.config.seed)
        dump_trials(out / "trials.jsonl", trials)
        means = {method: float(np.mean(values)) for method, values in pooled.items()}
        margin = chance_margin(n_items, world.labels_per_attribute)
        return {
            "tables": {
                "accuracy": _rows_as_dicts(ACCURACY_COLUMNS, rows),
                "identity": _rows_as_dicts(identity_columns, identity_rows),
            },
            "summary": {
                "mean_accuracy": means,
                "ensemble_outputs": n_outputs,
                "min_identity_rate": min(rate for _, _, rate, _ in identity_rows),
            },
            "acceptance": {
                "base_reads_its_own_states": all(rate == 1.0 for _, _, rate, _ in identity_rows),
                "patchscope_within_zero_shot_ensemble_margin": means["patchscope_single"] <= means["zero_shot_ensemble"] + margin,
            },
        }

    def evaluate(self, recipe: str) -> Dict[str, Any]:
        """Run (or reuse) the evaluation stage of ``recipe`` and return its results."""
        upstream = self._requirements(recipe)
        out = self.run_dir / recipe
        outputs = [out / name for name in self._recipe_outputs(recipe)]
        compute = {
            "kf1_zero_shot_parity": self._kf1,
            "kf2_inversion": self._kf2,
            "kf3_personaqa": self._kf3,
            "probe_vs_verbalizer": self._probe_vs_verbalizer,
            "sensitivity": self._sensitivity,
            "swap_label": self._swap_label,
            "knowledge_check": self._knowledge_check,
            "cross_model": self._cross_model,
            "patchscope_sanity": self._patchscope_sanity,
        }[recipe]

        def build(seed: int) -> None:
            out.mkdir(parents=True, exist_ok=True)
            results = compute(out, seed)
            (out / "results.json").write_text(json.dumps(results, sort_keys=True, indent=2) + "\n", encoding="utf-8")

        sections = {
            "eval": self.config.eval.model_dump(mode="json"),
            "probe": self.config.probe.model_dump(mode="json"),
            "lit_layer": self.config.lit_layer(),
            "source_layers": self.config.source_layers(),
        }
        self.stage(f"eval_{recipe}", sections, upstream, outputs, build)
        return json.loads((out / "results.json").read_text(encoding="utf-8"))

    def report(self, recipe: str, results: Dict[str, Any]) -> RunReport:
        """Write report.json (deterministic) and timings.json (wall-clock) for a recipe."""
        out = self.run_dir / recipe
        artifacts = {
            name: str((out / name).relative_to(self.run_dir)) for name in self._recipe_outputs(recipe)
        }
        report = RunReport(
            recipe=recipe,
            fingerprint=self.config.fingerprint(),
            seed=self.config.seed,
            stage_fingerprints=dict(sorted(self.stage_fingerprints.items())),
            tables=results.get("tables", {}),
            significance=results.get("significance", []),
            summary=results.get("summary", {}),
            acceptance=results.get("acceptance", {}),
            artifacts=artifacts,
            timings_path=str((out / "timings.json").relative_to(self.run_dir)),
        )
        (out / "report.json").write_text(json.dumps(report.model_dump(mode="json"), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        (out / "timings.json").write_text(json.dumps(self.timings, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        for check, passed in report.acceptance.items():
            logger.info("acceptance {}: {}", check, "pass" if passed else "FAIL")
        return report


def run_recipe(config: ExperimentConfig, force: bool = False) -> RunReport:
    """
    Execute a recipe end to end: world, models, evaluation, report.

    Cached stages with matching fingerprints are skipped.

    Raises:
        StaleArtifactError: On a fingerprint mismatch without ``force``.
        StageError: When a stage fails.
        RunLockedError: When another process owns the run directory.
    """
    lab = Lab(config, force)
    with lab.locked():
        start = time.perf_counter()
        results = lab.evaluate(config.recipe)
        lab.timings["total"] = round(time.perf_counter() - start, 3)
        return lab.report(config.recipe, results)
