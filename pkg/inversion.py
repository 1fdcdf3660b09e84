"""Input reconstruction from activations and the inversion-then-interpret pipeline."""

from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from evalstats import bleu
from model_core import ActivationMatrix, ActivationVector, ModelHandle, PatchError, PatchSpec, generate
from trainer import PLACEHOLDER_BUDGET, decoder_prefix, placeholder_positions
from verbalize import VerbalizationOutput, zero_shot_text
from worldgen import EvalItem, write_jsonl


class Reconstruction(BaseModel):
    model_config = ConfigDict(frozen=True)

    x_rec: str
    layer: int = Field(ge=1)
    kind: Literal["single", "multi"]
    # set only when the true input is known
    bleu_vs_input: Optional[float] = Field(None, ge=0.0, le=100.0)

    def scored_against(self, reference: str) -> "Reconstruction":
        return self.model_copy(update={"bleu_vs_input": bleu([self.x_rec], [reference])})


class ReconstructionRecord(BaseModel):
    item_id: str
    x_input: str
    x_rec: str
    bleu: float


def _decode(inverter: ModelHandle, payload: Union[ActivationVector, ActivationMatrix]) -> str:
    if payload.dim != inverter.config.d_model:
        raise PatchError(f"activation dimension {payload.dim} does not match inverter d_model {inverter.config.d_model}")
    if inverter.source_layer is not None and payload.layer != inverter.source_layer:
        raise PatchError(f"activations from layer {payload.layer}, but the inverter was trained on layer {inverter.source_layer}")
    n_rows = 1 if isinstance(payload, ActivationVector) else len(payload)
    prefix = decoder_prefix(inverter, n_rows)
    patch = PatchSpec(payload=payload, target_layer=1, target_positions=placeholder_positions(n_rows))
    return generate(inverter, prefix, PLACEHOLDER_BUDGET, [patch]).text


def invert_multi(inverter: ModelHandle, acts: ActivationMatrix) -> Reconstruction:
    """Decode the input text from a full activation matrix injected entering block 1."""
    if len(acts) > PLACEHOLDER_BUDGET:
        logger.warning("activation matrix of {} rows truncated from the left to {}", len(acts), PLACEHOLDER_BUDGET)
        acts = acts.tail(PLACEHOLDER_BUDGET)
    return Reconstruction(x_rec=_decode(inverter, acts), layer=acts.layer, kind="multi")


def invert_single(inverter: ModelHandle, act: ActivationVector) -> Reconstruction:
    """Decode the input text from one injected state (the final-token vector)."""
    return Reconstruction(x_rec=_decode(inverter, act), layer=act.layer, kind="single")


def invert_then_interpret(
    inverter: ModelHandle,
    interpreter: ModelHandle,
    acts: Union[ActivationMatrix, ActivationVector],
    item: EvalItem,
) -> VerbalizationOutput:
    """
    Reconstruct the input, then let the interpreter answer item.x_prompt from
    the reconstruction alone; the interpreter never sees activations.
    """
    rec = invert_multi(inverter, acts) if isinstance(acts, ActivationMatrix) else invert_single(inverter, acts)
    text = zero_shot_text(interpreter, rec.x_rec.strip(), item.x_prompt)
    return VerbalizationOutput(
        method="inversion_multi" if rec.kind == "multi" else "inversion_single",
        task=item.task, item_id=item.item_id, source_layer=rec.layer, target_layer=1, text=text,
    )


def reconstruction_bleu(reconstructions: Sequence[Reconstruction], references: Sequence[str]) -> float:
    """Corpus BLEU of reconstructions against the true inputs."""
    return bleu([r.x_rec for r in reconstructions], list(references))


def dump_reconstructions(
    path: Union[str, Path],
    item_ids: Sequence[str],
    inputs: Sequence[str],
    reconstructions: Sequence[Reconstruction],
) -> List[ReconstructionRecord]:
    if not len(item_ids) == len(inputs) == len(reconstructions):
        raise ValueError("item ids, inputs and reconstructions must align")
    records = [
        ReconstructionRecord(item_id=i, x_input=x, x_rec=r.x_rec, bleu=bleu([r.x_rec], [x]))
        for i, x, r in zip(item_ids, inputs, reconstructions)
    ]
    write_jsonl(path, records)
    return records
