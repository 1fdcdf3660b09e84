"""
Deterministic training for every model role.

- ``train_lm``: next-token training (from scratch or as a finetune).
- ``finetune_decoder``: teaches a decoder to read activation rows injected at
  placeholder positions entering block 1 (question answering or inversion);
  ``decoder_loss`` scores a decoder on held-out records the same way.
- ``fit_affine``: least-squares map between two models' hidden spaces.
"""

import csv
from pathlib import Path
from typing import Iterable, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

from model_core import (
    ActivationMatrix,
    ActivationVector,
    ModelHandle,
    PatchError,
    PatchTensor,
    capture_layer,
    save_checkpoint,
)

PLACEHOLDER_BUDGET = 64
FINETUNE_LEARNING_RATE = 1e-4
RIDGE_LAMBDA = 1e-6

DecoderMode = Literal["lit", "inverter_multi", "inverter_single"]


class TrainingError(RuntimeError):
    """Raised when training diverges (non-finite loss)."""


class TrainConfig(BaseModel):
    learning_rate: float = Field(3e-4, ge=0.0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(1, ge=1)
    warmup_steps: int = Field(0, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)
    loss_mask_mode: Literal["full_sequence", "answer_only"] = "full_sequence"
    max_steps: Optional[int] = Field(None, ge=1)
    grad_clip: float = Field(1.0, gt=0.0)
    log_path: Optional[str] = None
    checkpoint_every: Optional[int] = Field(None, ge=1)
    checkpoint_dir: Optional[str] = None


class DecoderRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    context_text: str = Field(min_length=1)
    question_text: str = ""
    answer_text: str = Field(min_length=1)


class DecoderDataset(BaseModel):
    records: List[DecoderRecord]

    def __len__(self) -> int:
        return len(self.records)

    def check_disjoint(self, reserved_prompts: Iterable[str]) -> None:
        """Reject question texts that coincide with evaluation prompts."""
        reserved = {p.strip().lower() for p in reserved_prompts}
        clashes = sorted({r.question_text for r in self.records if r.question_text.strip().lower() in reserved})
        if clashes:
            raise ValueError(f"Question texts overlap evaluation prompts: {', '.join(clashes)}")


class AffineMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    matrix: np.ndarray
    bias: np.ndarray
    residual_mse: float = 0.0

    @field_validator("matrix", "bias")
    @classmethod
    def _finite(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise ValueError("affine map contains NaN or Inf")
        return value

    @property
    def source_dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def dest_dim(self) -> int:
        return int(self.matrix.shape[0])

    def apply(self, values: torch.Tensor) -> torch.Tensor:
        """Map a vector (d_src,) or a matrix of rows (n, d_src) into the destination space."""
        if values.shape[-1] != self.source_dim:
            raise ValueError(f"affine map expects dimension {self.source_dim}, got {values.shape[-1]}")
        mapped = values.detach().cpu().numpy().astype(np.float64) @ self.matrix.T + self.bias
        return torch.from_numpy(mapped.astype(np.float32))


class TrainResult(NamedTuple):
    model: ModelHandle
    loss_curve: List[float]


class _Example(NamedTuple):
    tokens: List[int]
    loss_mask: List[bool]
    rows: Optional[torch.Tensor] = None


def masked_lm_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over positions where ``mask`` is true."""
    # masked targets are zeroed so their values cannot influence the loss
    safe_targets = torch.where(mask, targets, torch.zeros_like(targets))
    per_token = F.cross_entropy(logits.reshape(-1, logits.size(-1)), safe_targets.reshape(-1), reduction="none")
    weights = mask.reshape(-1).to(per_token.dtype)
    return (per_token * weights).sum() / weights.sum().clamp_min(1.0)


def _lm_examples(model: ModelHandle, corpus: Sequence[str], mode: str) -> List[Tuple[int, _Example]]:
    tok = model.tokenizer
    window = model.config.context_len
    examples = []
    for doc_index, text in enumerate(corpus):
        ids = tok.encode(text, add_bos=True, add_eos=True)
        if mode == "answer_only":
            if tok.sep_id not in ids:
                raise ValueError(f"answer_only training needs a separator token in document {doc_index}")
            last_sep = len(ids) - 1 - ids[::-1].index(tok.sep_id)
            # mask[j] covers the prediction of ids[j + 1]
            mask = [j + 1 > last_sep for j in range(len(ids))]
        else:
            mask = [True] * len(ids)
        if len(ids) > window + 1:
            logger.debug("splitting document {} ({} tokens) into windows of {}", doc_index, len(ids), window)
        for start in range(0, len(ids) - 1, window):
            chunk = ids[start : start + window + 1]
            examples.append((doc_index, _Example(chunk, mask[start : start + len(chunk) - 1])))
    return examples


def _collate(examples: Sequence[_Example], pad_id: int, d_model: int):
    width = max(len(e.tokens) - 1 for e in examples)
    batch = len(examples)
    idx = torch.full((batch, width), pad_id, dtype=torch.long)
    targets = torch.zeros((batch, width), dtype=torch.long)
    mask = torch.zeros((batch, width), dtype=torch.bool)
    patch_mask = torch.zeros((batch, width), dtype=torch.bool)
    patch_values = torch.zeros((batch, width, d_model))
    for i, ex in enumerate(examples):
        n = len(ex.tokens) - 1
        idx[i, :n] = torch.tensor(ex.tokens[:-1])
        targets[i, :n] = torch.tensor(ex.tokens[1:])
        mask[i, :n] = torch.tensor(ex.loss_mask[:n])
        if ex.rows is not None:
            k = ex.rows.shape[0]
            patch_mask[i, 1 : 1 + k] = True
            patch_values[i, 1 : 1 + k] = ex.rows
    patches = {1: PatchTensor(patch_mask, patch_values)} if patch_mask.any() else None
    return idx, targets, mask, patches


def _optimize(
    model: ModelHandle,
    examples: Sequence[Tuple[int, _Example]],
    cfg: TrainConfig,
    provenance: str,
) -> TrainResult:
    """Shared Adam loop; trains a clone of ``model`` and returns a new handle."""
    if not examples:
        raise ValueError("Training set is empty")
    trained = model.clone()
    module = trained.module
    module.train()
    optimizer = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    warmup = cfg.warmup_steps
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0
    )
    generator = torch.Generator().manual_seed(cfg.seed % 2**63)

    log_writer = None
    log_handle = None
    if cfg.log_path:
        Path(cfg.log_path).parent.mkdir(parents=True, exist_ok=True)
        log_handle = open(cfg.log_path, "w", newline="", encoding="utf-8")
        log_writer = csv.writer(log_handle)
        log_writer.writerow(["step", "loss", "learning_rate"])

    losses: List[float] = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = torch.randperm(len(examples), generator=generator).tolist()
            for batch_index in range(0, len(order), cfg.batch_size):
                chosen = [examples[i] for i in order[batch_index : batch_index + cfg.batch_size]]
                idx, targets, mask, patches = _collate([ex for _, ex in chosen], model.tokenizer.pad_id, model.config.d_model)
                logits, _ = module(idx, patches)
                loss = masked_lm_loss(logits, targets, mask)
                if not torch.isfinite(loss):
                    doc_ids = sorted({doc for doc, _ in chosen})
                    raise TrainingError(
                        f"Non-finite loss at step {step} (epoch {epoch}, batch {batch_index // cfg.batch_size}, "
                        f"documents {doc_ids})"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(module.parameters(), cfg.grad_clip)
                lr = optimizer.param_groups[0]["lr"]
                if cfg.learning_rate > 0:
                    optimizer.step()
                    scheduler.step()

                value = float(loss.item())
                losses.append(value)
                step += 1
                logger.debug("step {} loss {:.4f} lr {:.2e}", step, value, lr)
                if log_writer:
                    log_writer.writerow([step, f"{value:.6f}", f"{lr:.6e}"])
                if cfg.checkpoint_every and cfg.checkpoint_dir and step % cfg.checkpoint_every == 0:
                    module.eval()
                    snapshot = ModelHandle(trained.config, trained.tokenizer, module, trained.role, provenance)
                    save_checkpoint(snapshot, Path(cfg.checkpoint_dir) / f"step_{step:06d}.ckpt")
                    module.train()
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        if log_handle:
            log_handle.close()

    module.eval()
    result = ModelHandle(trained.config, trained.tokenizer, module, trained.role, provenance)
    logger.info("trained {} for {} steps, final loss {:.4f}", result.role, step, losses[-1])
    return TrainResult(result, losses)


def train_lm(model: ModelHandle, corpus: Sequence[str], cfg: TrainConfig) -> TrainResult:
    """
    Next-token training with Adam and linear warmup.

    Args:
        model: Starting weights (fresh for from-scratch runs, trained for finetunes).
        corpus: Documents; ones longer than context_len are split into windows.
        cfg: Hyperparameters. In answer_only mode only tokens after the last
            separator token of each document are scored.

    Returns:
        The trained model (a new handle) and the per-step loss curve.
    """
    if not corpus:
        raise ValueError("Corpus is empty")
    examples = _lm_examples(model, corpus, cfg.loss_mask_mode)
    provenance = f"{model.provenance} -> train_lm({len(corpus)} docs, lr={cfg.learning_rate}, seed={cfg.seed})"
    return _optimize(model, examples, cfg, provenance)


def decoder_prefix(model: ModelHandle, n_rows: int, question_text: str = "") -> List[int]:
    """Token layout shared by training and inference: <bos>, n_rows placeholders, question."""
    tok = model.tokenizer
    return [tok.bos_id] + [tok.placeholder_id] * n_rows + tok.encode(question_text)


def placeholder_positions(n_rows: int) -> List[int]:
    return list(range(1, 1 + n_rows))


def context_tokens(model: ModelHandle, text: str, budget: int = PLACEHOLDER_BUDGET) -> List[int]:
    """Encode a context for activation capture, truncating from the left to ``budget`` tokens."""
    tok = model.tokenizer
    ids = tok.encode(text, add_bos=True)
    if len(ids) > budget:
        logger.warning("context of {} tokens truncated from the left to {}", len(ids), budget)
        ids = [tok.bos_id] + ids[-(budget - 1) :]
    return ids


def finetune_decoder(
    verbalizer: ModelHandle,
    target: ModelHandle,
    data: DecoderDataset,
    source_layer: int,
    mode: DecoderMode,
    cfg: Optional[TrainConfig] = None,
) -> ModelHandle:
    """
    Train ``verbalizer`` to decode activations of ``target`` captured at ``source_layer``.

    For each record the target runs on context_text; the full activation
    matrix (lit, inverter_multi) or the final-token vector (inverter_single)
    replaces the placeholder states entering block 1 of the verbalizer. The
    loss covers only the label: answer_text for lit, the context tokens and
    end-of-text for the inverters. Target weights are never touched.
    """
    cfg = cfg or TrainConfig(learning_rate=FINETUNE_LEARNING_RATE)
    examples = _decoder_examples(verbalizer, target, data, source_layer, mode)
    provenance = (
        f"{verbalizer.provenance} -> finetune_decoder({mode}, layer={source_layer}, "
        f"{len(data.records)} records, seed={cfg.seed})"
    )
    trained = _optimize(verbalizer, examples, cfg, provenance).model
    trained.source_layer = source_layer
    return trained


@torch.no_grad()
def decoder_loss(
    verbalizer: ModelHandle,
    target: ModelHandle,
    data: DecoderDataset,
    source_layer: int,
    mode: DecoderMode,
) -> float:
    """Mean label-token loss of ``verbalizer`` on ``data``, laid out as in finetune_decoder."""
    examples = _decoder_examples(verbalizer, target, data, source_layer, mode)
    total, count = 0.0, 0
    for _, example in examples:
        idx, targets, mask, patches = _collate([example], verbalizer.tokenizer.pad_id, verbalizer.config.d_model)
        logits, _ = verbalizer.module(idx, patches)
        n = int(mask.sum())
        total += float(masked_lm_loss(logits, targets, mask)) * n
        count += n
    return total / count


def _decoder_examples(
    verbalizer: ModelHandle,
    target: ModelHandle,
    data: DecoderDataset,
    source_layer: int,
    mode: DecoderMode,
) -> List[Tuple[int, _Example]]:
    if not data.records:
        raise ValueError("Decoder dataset is empty")
    if not 1 <= source_layer <= target.n_layers:
        raise PatchError(f"source layer {source_layer} outside [1, {target.n_layers}]")
    if target.config.d_model != verbalizer.config.d_model:
        raise PatchError(
            f"target d_model {target.config.d_model} does not match verbalizer d_model {verbalizer.config.d_model}"
        )
    tok = verbalizer.tokenizer
    examples = []
    for index, record in enumerate(data.records):
        ctx_ids = context_tokens(target, record.context_text)
        acts = capture_layer(target, ctx_ids, source_layer)
        rows = acts.rows if mode != "inverter_single" else acts.rows[-1:]
        prefix = decoder_prefix(verbalizer, rows.shape[0], record.question_text if mode == "lit" else "")
        if mode == "lit":
            label = tok.encode(record.answer_text, add_eos=True)
        else:
            label = ctx_ids[1:] + [tok.eos_id]
        tokens = prefix + label
        if len(tokens) - 1 > verbalizer.config.context_len:
            raise ValueError(f"record {index} needs {len(tokens)} tokens, over context_len")
        loss_mask = [j + 1 >= len(prefix) for j in range(len(tokens) - 1)]
        examples.append((index, _Example(tokens, loss_mask, rows)))
    return examples


def activation_pairs(
    source: ModelHandle,
    dest: ModelHandle,
    texts: Sequence[str],
    source_layer: int,
    dest_layer: int,
) -> List[Tuple[ActivationVector, ActivationVector]]:
    """Align per-token activations of two models over a shared corpus (both share one tokenizer)."""
    pairs = []
    for text in texts:
        ids = context_tokens(source, text, budget=min(source.config.context_len, dest.config.context_len))
        src: ActivationMatrix = capture_layer(source, ids, source_layer)
        dst: ActivationMatrix = capture_layer(dest, ids, dest_layer)
        pairs.extend((src.row(i), dst.row(i)) for i in range(len(src)))
    return pairs


def fit_affine(pairs: Sequence[Tuple[ActivationVector, ActivationVector]]) -> AffineMap:
    """
    Ridge-damped least squares for ``dest ≈ matrix @ source + bias``.

    Raises:
        ValueError: If there are fewer than d_src + 1 pairs.
    """
    if not pairs:
        raise ValueError("No activation pairs given")
    x = np.stack([s.values.numpy() for s, _ in pairs]).astype(np.float64)
    y = np.stack([d.values.numpy() for _, d in pairs]).astype(np.float64)
    n, d_src = x.shape
    if n < d_src + 1:
        raise ValueError(f"Need at least {d_src + 1} pairs to fit an affine map, got {n}")
    design = np.hstack([x, np.ones((n, 1))])
    gram = design.T @ design + RIDGE_LAMBDA * np.eye(d_src + 1)
    solution = np.linalg.solve(gram, design.T @ y)
    residual_mse = float(np.mean((y - design @ solution) ** 2))
    logger.info("fitted affine map {} -> {} on {} pairs, residual mse {:.3e}", d_src, y.shape[1], n, residual_mse)
    return AffineMap(matrix=solution[:d_src].T, bias=solution[d_src], residual_mse=residual_mse)
