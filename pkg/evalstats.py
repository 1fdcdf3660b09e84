"""
Scoring, aggregation and significance for verbalization trials.

The primary correctness rule is a case-insensitive raw substring match of
the gold answer inside the decoded output; ``contains_answer_strict`` is a
secondary word-boundary scorer reported next to it.
"""

import csv
import math
import re
from collections import defaultdict
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sacrebleu.metrics import BLEU
from scipy import stats

from model_core import ModelHandle, generate, split_words
from worldgen import ATTRIBUTES, EvalItem, Persona, cloze_prompt, seeded_rng

SCHEMA_VERSION = 1
ALPHA = 0.05
EXACT_MCNEMAR_MAX_DISCORDANT = 25
ENSEMBLED = "all-ensembled"
# semantic rewrites and distractor-bearing prompts every sensitivity run must cover
REQUIRED_VARIANTS = ("S1", "S2", "S3", "S4", "A1", "A2")

EnsembleMode = Literal["any_target_layer", "single_output"]


class IncompleteRunError(ValueError):
    """Raised when trial records do not cover every (source layer, target layer, item) cell."""


def contains_answer(output: str, answer: str) -> bool:
    """Case-insensitive raw substring test; "Braiseroast" does contain "roast"."""
    if not answer:
        raise ValueError("Answer must be non-empty")
    return answer.lower() in output.lower()


def contains_answer_strict(output: str, answer: str) -> bool:
    """Word-boundary variant of ``contains_answer``."""
    if not answer:
        raise ValueError("Answer must be non-empty")
    pattern = r"(?<!\w)" + re.escape(answer.lower()) + r"(?!\w)"
    return re.search(pattern, output.lower()) is not None


class TrialResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: str
    task: str
    item_id: str
    source_layer: int = Field(ge=0)
    target_layer: Union[int, str]
    output: str
    answer: str = Field(min_length=1)
    correct: bool

    @model_validator(mode="after")
    def _check_correct(self) -> "TrialResult":
        if self.correct != contains_answer(self.output, self.answer):
            raise ValueError(f"correct flag disagrees with the scoring rule for item {self.item_id}")
        return self

    @classmethod
    def scored(cls, method: str, task: str, item_id: str, source_layer: int, target_layer, output: str, answer: str):
        return cls(
            method=method, task=task, item_id=item_id, source_layer=source_layer, target_layer=target_layer,
            output=output, answer=answer, correct=contains_answer(output, answer),
        )

    def rescored(self, answer: str) -> "TrialResult":
        return self.model_copy(update={"answer": answer, "correct": contains_answer(self.output, answer)})


class RunScore(BaseModel):
    per_layer: Dict[int, float]
    average: float
    n_items: int
    # item id -> correct, per source layer
    correctness: Dict[int, Dict[str, bool]]


class SignificanceResult(BaseModel):
    method_a: str
    method_b: str
    task: str
    b01: int
    b10: int
    statistic: float
    p_raw: float = Field(ge=0.0, le=1.0)
    p_adjusted: float = Field(ge=0.0, le=1.0)
    n_comparisons: int = Field(ge=1)
    significant: bool
    exact: bool
    degenerate: bool = False

    @property
    def effect(self) -> int:
        """Positive when method a is right more often on the discordant items."""
        return self.b01 - self.b10


class SensitivityRow(BaseModel):
    task: str
    variant: str
    accuracy: float
    delta: float
    n_items: int


class SwapLabelResult(BaseModel):
    task: str
    original_accuracy: float
    shuffled_accuracy: float
    n_items: int


def score_run(trials: Sequence[TrialResult], ensemble: EnsembleMode = "any_target_layer") -> RunScore:
    """
    Per-source-layer accuracy and its arithmetic mean over source layers.

    Raises:
        IncompleteRunError: If any (source layer, target layer) group misses an
            item, repeats one, or (single_output) a source layer has several outputs.
    """
    if not trials:
        raise IncompleteRunError("No trials to score")
    cells: Dict[int, Dict[Union[int, str], Dict[str, bool]]] = defaultdict(dict)
    for trial in trials:
        group = cells[trial.source_layer].setdefault(trial.target_layer, {})
        if trial.item_id in group:
            raise IncompleteRunError(
                f"Item {trial.item_id} repeated at source layer {trial.source_layer}, target layer {trial.target_layer}"
            )
        group[trial.item_id] = trial.correct

    expected = set(next(iter(next(iter(cells.values())).values())))
    correctness: Dict[int, Dict[str, bool]] = {}
    for source_layer in sorted(cells):
        groups = cells[source_layer]
        if ensemble == "single_output" and len(groups) != 1:
            raise IncompleteRunError(f"Source layer {source_layer} has {len(groups)} outputs per item, expected 1")
        for target_layer, group in groups.items():
            if set(group) != expected:
                missing = sorted(expected - set(group)) or sorted(set(group) - expected)
                raise IncompleteRunError(
                    f"Missing cells at source layer {source_layer}, target layer {target_layer}: {', '.join(missing[:5])}"
                )
        correctness[source_layer] = {item: any(g[item] for g in groups.values()) for item in sorted(expected)}

    per_layer = {layer: sum(flags.values()) / len(flags) for layer, flags in correctness.items()}
    average = sum(per_layer.values()) / len(per_layer)
    return RunScore(per_layer=per_layer, average=average, n_items=len(expected), correctness=correctness)


def bonferroni(p_values: Iterable[float], n_comparisons: Optional[int] = None) -> List[float]:
    p_values = list(p_values)
    n = n_comparisons if n_comparisons is not None else len(p_values)
    return [min(1.0, p * n) for p in p_values]


def mcnemar(
    a: Sequence[bool],
    b: Sequence[bool],
    n_comparisons: int = 1,
    method_a: str = "a",
    method_b: str = "b",
    task: str = "",
) -> SignificanceResult:
    """
    McNemar's test on paired correctness vectors with Bonferroni adjustment.

    Uses the exact two-sided binomial test for up to 25 discordant pairs and
    the continuity-corrected chi-square statistic above that.
    """
    if len(a) != len(b):
        raise ValueError(f"Correctness vectors differ in length: {len(a)} vs {len(b)}")
    if n_comparisons < 1:
        raise ValueError("n_comparisons must be at least 1")
    b01 = sum(1 for x, y in zip(a, b) if x and not y)
    b10 = sum(1 for x, y in zip(a, b) if y and not x)
    n = b01 + b10
    if n == 0:
        logger.warning("no discordant pairs for {} vs {} on {}; p set to 1", method_a, method_b, task or "all tasks")
        return SignificanceResult(
            method_a=method_a, method_b=method_b, task=task, b01=0, b10=0, statistic=0.0, p_raw=1.0,
            p_adjusted=1.0, n_comparisons=n_comparisons, significant=False, exact=True, degenerate=True,
        )
    if n <= EXACT_MCNEMAR_MAX_DISCORDANT:
        statistic = float(min(b01, b10))
        p_raw = min(1.0, 2.0 * float(stats.binom.cdf(min(b01, b10), n, 0.5)))
        exact = True
    else:
        statistic = (abs(b01 - b10) - 1) ** 2 / n
        p_raw = float(stats.chi2.sf(statistic, 1))
        exact = False
    p_adjusted = bonferroni([p_raw], n_comparisons)[0]
    return SignificanceResult(
        method_a=method_a, method_b=method_b, task=task, b01=b01, b10=b10, statistic=statistic, p_raw=p_raw,
        p_adjusted=p_adjusted, n_comparisons=n_comparisons, significant=p_adjusted < ALPHA, exact=exact,
    )


def bleu(candidates: Sequence[str], references: Sequence[str], max_order: int = 4) -> float:
    """
    Corpus-level BLEU in [0, 100] over the tokenizer's word split.

    n-gram statistics and the brevity penalty come from sacrebleu; orders
    with no match are smoothed to 1 / (total + 1).
    """
    if not candidates:
        raise ValueError("Candidate list is empty")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    hypotheses = [" ".join(split_words(c)) for c in candidates]
    refs = [" ".join(split_words(r)) for r in references]
    if not all(refs):
        raise ValueError("References must be non-empty")
    if not any(hypotheses):
        return 0.0
    metric = BLEU(tokenize="none", smooth_method="none", max_ngram_order=max_order, force=True)
    score = metric.corpus_score(hypotheses, [refs])
    log_precision = 0.0
    for matched, total in zip(score.counts, score.totals):
        precision = matched / total if matched > 0 else 1.0 / (total + 1)
        log_precision += math.log(precision) / max_order
    return 100.0 * score.bp * math.exp(log_precision)


def chance_margin(n: int, n_labels: int, confidence: float = 0.95) -> float:
    """Width above 1/n_labels of the one-sided binomial upper bound on chance accuracy over n items."""
    if n < 1 or n_labels < 2:
        raise ValueError("Need at least one item and two labels")
    p = 1.0 / n_labels
    return float(stats.binom.ppf(confidence, n, p)) / n - p


def binomial_p_above_chance(correct: int, n: int, n_labels: int) -> float:
    """One-sided exact binomial p-value for scoring ``correct`` or more out of ``n`` by chance."""
    if not 0 <= correct <= n:
        raise ValueError("correct must be between 0 and n")
    return float(stats.binom.sf(correct - 1, n, 1.0 / n_labels))


def knowledge_check(model: ModelHandle, personas: Sequence[Persona], attribute: str) -> float:
    """
    Cloze token accuracy: greedy one-token completion of "<name> is from" (and
    the other cloze frames) against the first token of the gold label, ignoring case.
    """
    if attribute not in ATTRIBUTES:
        raise ValueError(f"Invalid attribute: {attribute}")
    if not personas:
        raise ValueError("No personas to check")
    tok = model.tokenizer
    correct = 0
    for persona in personas:
        prompt = tok.encode(cloze_prompt(attribute, persona.name), add_bos=True)
        predicted = generate(model, prompt, max_new=1).tokens
        gold = tok.encode(persona.attributes[attribute])[0]
        if predicted and tok.decode(predicted[:1]).lower() == tok.decode([gold]).lower():
            correct += 1
    return correct / len(personas)


def knowledge_report(model: ModelHandle, personas: Sequence[Persona]) -> Dict[str, float]:
    return {attribute: knowledge_check(model, personas, attribute) for attribute in ATTRIBUTES}


def pick_distractor(item: EvalItem, labels: Sequence[str], seed: int, variant: str) -> str:
    """Uniform draw from the schema labels, never the item's own answer."""
    pool = [label for label in labels if label != item.answer]
    if not pool:
        raise ValueError(f"No distractor available for {item.item_id}")
    return pool[int(seeded_rng(seed, "distractor", variant, item.item_id).integers(len(pool)))]


def sensitivity_suite(
    items: Sequence[EvalItem],
    runner: Callable[[EvalItem], Sequence[str]],
    variants: Mapping[str, str],
    labels: Sequence[str],
    seed: int,
    original: str = "S0",
) -> List[SensitivityRow]:
    """
    Re-run one verbalization method under prompt variants.

    Args:
        items: Items of a single task.
        runner: Returns the output texts for an item (any output may match).
        variants: Variant name -> template; must hold the original, S1-S4 and
            A1-A2. "{distractor}" slots get a wrong label.
        labels: The task's label schema, the pool for distractors.
        seed: Distractor sampling seed.
        original: Name of the unmodified prompt variant; its delta is 0.

    Returns:
        One row per variant in the given order, delta relative to the original.
    """
    if not items:
        raise ValueError("No items for the sensitivity suite")
    task = items[0].task
    missing = [v for v in (original, *REQUIRED_VARIANTS) if v not in variants]
    if missing:
        raise ValueError(f"Missing required variants: {', '.join(missing)} for {task}")
    slotless = [v for v in REQUIRED_VARIANTS if v.startswith("A") and "{distractor}" not in variants[v]]
    if slotless:
        raise ValueError(f"Adversarial variants without a distractor slot: {', '.join(slotless)} for {task}")
    accuracies: Dict[str, float] = {}
    for name, template in variants.items():
        correct = 0
        for item in items:
            distractor = pick_distractor(item, labels, seed, name) if "{distractor}" in template else None
            variant_item = item.with_template(template, distractor)
            if any(contains_answer(output, item.answer) for output in runner(variant_item)):
                correct += 1
        accuracies[name] = correct / len(items)
        logger.debug("sensitivity {} {}: {:.3f}", task, name, accuracies[name])
    base = accuracies[original]
    return [
        SensitivityRow(task=task, variant=name, accuracy=acc, delta=acc - base, n_items=len(items))
        for name, acc in accuracies.items()
    ]


def swap_label_eval(
    trials: Sequence[TrialResult],
    original: Mapping[str, str],
    shuffled: Mapping[str, str],
) -> List[SwapLabelResult]:
    """
    Score the same outputs against the original and the shuffled label of each item.

    An item counts as correct if any of its outputs contains the label.
    """
    if set(original) != set(shuffled):
        raise ValueError("Original and shuffled label sets cover different items")
    outputs: Dict[str, List[str]] = defaultdict(list)
    tasks: Dict[str, str] = {}
    for trial in trials:
        outputs[trial.item_id].append(trial.output)
        tasks[trial.item_id] = trial.task
    if set(outputs) != set(original):
        raise ValueError("Trials and label sets cover different items")
    by_task: Dict[str, List[str]] = defaultdict(list)
    for item_id, task in tasks.items():
        by_task[task].append(item_id)
    results = []
    for task in sorted(by_task):
        ids = by_task[task]
        orig = sum(any(contains_answer(o, original[i]) for o in outputs[i]) for i in ids)
        shuf = sum(any(contains_answer(o, shuffled[i]) for o in outputs[i]) for i in ids)
        results.append(SwapLabelResult(task=task, original_accuracy=orig / len(ids), shuffled_accuracy=shuf / len(ids), n_items=len(ids)))
    return results


def _format(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_table(
    path: Union[str, Path],
    columns: Sequence[str],
    rows: Iterable[Sequence],
    fingerprint: str,
    seed: int,
) -> Path:
    """Write a CSV table behind a provenance comment line; floats use fixed 6-digit formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# schema_version={SCHEMA_VERSION} fingerprint={fingerprint} seed={seed}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(v) for v in row])
    return path


def accuracy_rows(method: str, task: str, score: RunScore) -> List[Tuple]:
    rows = [(method, task, layer, acc, score.n_items) for layer, acc in sorted(score.per_layer.items())]
    rows.append((method, task, "average", score.average, score.n_items))
    return rows


def write_accuracy_csv(path, rows: Iterable[Tuple], fingerprint: str, seed: int) -> Path:
    return write_table(path, ["method", "task", "source_layer", "accuracy", "n_items"], rows, fingerprint, seed)


def write_significance_csv(path, results: Iterable[SignificanceResult], fingerprint: str, seed: int) -> Path:
    columns = ["method_a", "method_b", "task", "b01", "b10", "statistic", "p_raw", "p_adjusted", "n_comparisons", "significant", "exact", "degenerate"]
    rows = [[getattr(r, c) for c in columns] for r in results]
    return write_table(path, columns, rows, fingerprint, seed)


def write_sensitivity_csv(path, results: Iterable[SensitivityRow], fingerprint: str, seed: int) -> Path:
    columns = ["task", "variant", "accuracy", "delta", "n_items"]
    return write_table(path, columns, [[getattr(r, c) for c in columns] for r in results], fingerprint, seed)


def write_swap_label_csv(path, results: Iterable[SwapLabelResult], fingerprint: str, seed: int) -> Path:
    columns = ["task", "original_accuracy", "shuffled_accuracy", "n_items"]
    return write_table(path, columns, [[getattr(r, c) for c in columns] for r in results], fingerprint, seed)


def read_table(path: Union[str, Path]) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """Return the provenance fields and the rows of a table written by ``write_table``."""
    with open(path, encoding="utf-8", newline="") as handle:
        header = handle.readline().lstrip("# ").strip()
        provenance = dict(field.split("=", 1) for field in header.split())
        return provenance, list(csv.DictReader(handle))


def rescore(trials: Sequence[TrialResult]) -> List[bool]:
    return [contains_answer(t.output, t.answer) for t in trials]


def accuracy(flags: Sequence[bool]) -> float:
    return float(np.mean(flags)) if len(flags) else 0.0
