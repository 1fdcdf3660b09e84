"""Verbalization methods: single-activation patching, multi-activation decoding, zero-shot and cross-model."""

from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict

from model_core import (
    PLACEHOLDER,
    SEP,
    ActivationMatrix,
    ActivationVector,
    ModelHandle,
    PatchError,
    PatchSpec,
    capture_layer,
    forward,
    generate,
)
from evalstats import TrialResult
from trainer import AffineMap, context_tokens, decoder_prefix, placeholder_positions
from worldgen import EvalItem, fill_template, write_jsonl

MAX_NEW_TOKENS = 20

Method = Literal["patchscope_single", "lit_multi", "zero_shot", "cross_model", "inversion_multi", "inversion_single"]


class VerbalizationOutput(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: Method
    task: str
    item_id: str
    # 0 when no activation is involved
    source_layer: int
    target_layer: Union[int, Literal["all-ensembled"]]
    text: str

    def to_trial(self, answer: str) -> TrialResult:
        return TrialResult.scored(self.method, self.task, self.item_id, self.source_layer, self.target_layer, self.text, answer)


def default_source_layers(model: ModelHandle) -> List[int]:
    """Layers 1 .. floor(L/2), at least layer 1."""
    return list(range(1, max(1, model.n_layers // 2) + 1))


def patch_prompt(template: str, distractor: Optional[str] = None) -> str:
    return fill_template(template, PLACEHOLDER, distractor)


def _placeholder_position(verbalizer: ModelHandle, tokens: Sequence[int]) -> int:
    positions = [i for i, t in enumerate(tokens) if t == verbalizer.tokenizer.placeholder_id]
    if len(positions) != 1:
        raise PatchError(f"interpretation prompt must contain exactly one placeholder, found {len(positions)}")
    return positions[0]


def _check_source_layer(target: ModelHandle, source_layer: int) -> None:
    if not 1 <= source_layer <= target.n_layers:
        raise PatchError(f"source layer {source_layer} outside [1, {target.n_layers}]")


def _check_map(target: ModelHandle, verbalizer: ModelHandle, affine: Optional[AffineMap]) -> None:
    if affine is None:
        if target.config.d_model != verbalizer.config.d_model:
            raise PatchError(
                f"target d_model {target.config.d_model} differs from verbalizer d_model {verbalizer.config.d_model}; an affine map is required"
            )
        return
    if affine.source_dim != target.config.d_model or affine.dest_dim != verbalizer.config.d_model:
        raise PatchError(
            f"affine map {affine.source_dim}->{affine.dest_dim} does not bridge "
            f"{target.config.d_model}->{verbalizer.config.d_model}"
        )


def capture_final_token(
    target: ModelHandle, x_input: str, source_layer: int, token_index: Optional[int] = None
) -> ActivationVector:
    """Capture one token's state of ``x_input`` (default: the final token) at ``source_layer``."""
    _check_source_layer(target, source_layer)
    tokens = context_tokens(target, x_input, budget=target.config.context_len)
    position = len(tokens) - 1 if token_index is None else token_index
    return forward(target, tokens, captures=[(source_layer, position)]).captured[0]


def capture_input(target: ModelHandle, x_input: str, source_layer: int) -> ActivationMatrix:
    """Capture all rows of ``x_input`` at ``source_layer`` within the placeholder budget."""
    _check_source_layer(target, source_layer)
    return capture_layer(target, context_tokens(target, x_input), source_layer)


def patchscope_single(
    target: ModelHandle,
    verbalizer: ModelHandle,
    item: EvalItem,
    source_layer: int,
    token_index: Optional[int] = None,
    affine: Optional[AffineMap] = None,
) -> List[VerbalizationOutput]:
    """
    Patch one captured vector into every verbalizer layer in turn.

    The final-token state of item.x_input at ``source_layer`` replaces the
    placeholder state entering block ℓ* for ℓ* = 1..L'+1 (L'+1 is the input of
    the final norm), giving L'+1 greedy outputs.
    """
    _check_map(target, verbalizer, affine)
    prefix = verbalizer.tokenizer.encode(item.placeholder_prompt(), add_bos=True)
    position = _placeholder_position(verbalizer, prefix)
    vector = capture_final_token(target, item.x_input, source_layer, token_index)
    if affine is not None:
        vector = ActivationVector(
            layer=vector.layer, token_index=vector.token_index, values=affine.apply(vector.values),
            source_model_id=vector.source_model_id,
        )
    method = "patchscope_single" if affine is None else "cross_model"
    outputs = []
    for target_layer in range(1, verbalizer.n_layers + 2):
        patch = PatchSpec(payload=vector, target_layer=target_layer, target_positions=[position])
        text = generate(verbalizer, prefix, MAX_NEW_TOKENS, [patch]).text
        outputs.append(
            VerbalizationOutput(
                method=method, task=item.task, item_id=item.item_id, source_layer=source_layer,
                target_layer=target_layer, text=text,
            )
        )
    return outputs


def identity_readout(model: ModelHandle, x_input: str, source_layer: int) -> bool:
    """
    Re-inject the final-token state of ``x_input`` at ``source_layer`` entering
    block source_layer + 1 at the same position. True when greedy decoding is
    unchanged, i.e. patching reads the model's own states back correctly.
    """
    _check_source_layer(model, source_layer)
    tokens = context_tokens(model, x_input, budget=model.config.context_len - MAX_NEW_TOKENS)
    position = len(tokens) - 1
    vector = forward(model, tokens, captures=[(source_layer, position)]).captured[0]
    patch = PatchSpec(payload=vector, target_layer=source_layer + 1, target_positions=[position])
    return generate(model, tokens, MAX_NEW_TOKENS, [patch]) == generate(model, tokens, MAX_NEW_TOKENS)


def lit_verbalize(
    target: ModelHandle,
    verbalizer: ModelHandle,
    item: EvalItem,
    source_layer: int,
    affine: Optional[AffineMap] = None,
) -> VerbalizationOutput:
    """
    Inject the whole activation matrix of item.x_input entering block 1 of a
    decoder-finetuned verbalizer and decode one answer to item.x_prompt.
    """
    _check_map(target, verbalizer, affine)
    acts = capture_input(target, item.x_input, source_layer)
    rows = acts.rows if affine is None else affine.apply(acts.rows)
    payload = ActivationMatrix(layer=acts.layer, rows=rows, source_model_id=acts.source_model_id)
    prefix = decoder_prefix(verbalizer, len(payload), item.x_prompt)
    patch = PatchSpec(payload=payload, target_layer=1, target_positions=placeholder_positions(len(payload)))
    text = generate(verbalizer, prefix, MAX_NEW_TOKENS, [patch]).text
    return VerbalizationOutput(
        method="lit_multi" if affine is None else "cross_model",
        task=item.task, item_id=item.item_id, source_layer=source_layer, target_layer=1, text=text,
    )


def zero_shot_text(model: ModelHandle, x_input: str, x_prompt: str) -> str:
    """Greedy answer to "<x_input> <sep> <x_prompt>"; an empty input leaves only the separator."""
    text = f"{x_input} {SEP} {x_prompt}" if x_input else f"{SEP} {x_prompt}"
    budget = model.config.context_len - MAX_NEW_TOKENS
    tokens = model.tokenizer.encode(text, add_bos=True)
    if len(tokens) > budget:
        logger.warning("zero-shot prompt of {} tokens truncated from the left to {}", len(tokens), budget)
        tokens = [model.tokenizer.bos_id] + tokens[-(budget - 1) :]
    return generate(model, tokens, MAX_NEW_TOKENS).text


def zero_shot(model: ModelHandle, item: EvalItem) -> VerbalizationOutput:
    """Answer from the input text and the prompt alone; no activations are read."""
    return VerbalizationOutput(
        method="zero_shot", task=item.task, item_id=item.item_id, source_layer=0, target_layer=0,
        text=zero_shot_text(model, item.x_input, item.x_prompt),
    )


def cross_model_verbalize(
    target: ModelHandle,
    verbalizer: ModelHandle,
    item: EvalItem,
    source_layer: int,
    affine: AffineMap,
    multi: bool = True,
) -> List[VerbalizationOutput]:
    """Verbalize through an affine map between the target's and the verbalizer's hidden spaces."""
    if multi:
        return [lit_verbalize(target, verbalizer, item, source_layer, affine)]
    return patchscope_single(target, verbalizer, item, source_layer, affine=affine)


def dump_trials(path: Union[str, Path], trials: Sequence[TrialResult]) -> Path:
    """Line-delimited trial records (method, task, item id, layers, output, correct)."""
    write_jsonl(path, trials)
    logger.info("wrote {} trials to {}", len(trials), path)
    return Path(path)
