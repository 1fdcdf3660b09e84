"""
Tiny deterministic decoder-only transformer with capture and patch hooks.

Hidden state convention: the activation at layer l is the residual-stream
output of block l (post residual add). Layer 0, the raw embedding sum, is never
captured. A patch with ``target_layer=k`` replaces the stream entering block k,
so a state captured at layer l is re-injected "in place" with
``target_layer=l + 1``; ``target_layer=n_layers + 1`` addresses the stream
entering the final norm.

Every inference pass runs one item at a time at a fixed width of
``context_len`` (right padded). Under causal masking this makes the state at a
position depend only on the tokens at or before it, bit for bit.
"""

import hashlib
import json
import re
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

CHECKPOINT_FORMAT = "labctl-checkpoint"
CHECKPOINT_VERSION = 1

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"
PLACEHOLDER = "⟦X⟧"
SPECIAL_TOKENS = [PAD, BOS, EOS, SEP, PLACEHOLDER]

Role = Literal["target", "verbalizer", "inverter", "interpreter"]

_WORD_RE = re.compile("|".join(re.escape(t) for t in SPECIAL_TOKENS) + r"|\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(".,;:!?)")


class PatchError(ValueError):
    """Raised when a capture or patch request does not fit the model or sequence."""


class CheckpointError(ValueError):
    """Raised when a checkpoint is malformed or does not match the expected config."""


def split_words(text: str) -> List[str]:
    """Pre-tokenize text into special tokens, word runs and single punctuation marks."""
    return _WORD_RE.findall(text)


def join_words(words: Sequence[str]) -> str:
    out = ""
    for word in words:
        if not out:
            out = word
        elif word in _NO_SPACE_BEFORE or out.endswith("("):
            out += word
        else:
            out += " " + word
    return out


class Tokenizer:
    """
    Word-level tokenizer with a byte fallback.

    Ids are laid out as: special tokens, fitted words (sorted), 256 word-initial
    byte tokens, 256 continuation byte tokens. An unseen word is encoded as its
    UTF-8 bytes, so fantasy names always tokenize and decode back unchanged.
    """

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.id_to_token = (
            list(SPECIAL_TOKENS)
            + self.words
            + [f"<w{b:02x}>" for b in range(256)]
            + [f"<c{b:02x}>" for b in range(256)]
        )
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token[: len(SPECIAL_TOKENS) + len(self.words)])}
        self._byte_start = len(SPECIAL_TOKENS) + len(self.words)

    @classmethod
    def fit(cls, texts: Sequence[str]) -> "Tokenizer":
        vocab = {w for text in texts for w in split_words(text)}
        vocab.difference_update(SPECIAL_TOKENS)
        return cls(sorted(vocab))

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    @property
    def placeholder_id(self) -> int:
        return self.token_to_id[PLACEHOLDER]

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> List[int]:
        ids = [self.bos_id] if add_bos else []
        for word in split_words(text):
            token_id = self.token_to_id.get(word)
            if token_id is not None:
                ids.append(token_id)
                continue
            data = word.encode("utf-8")
            ids.append(self._byte_start + data[0])
            ids.extend(self._byte_start + 256 + b for b in data[1:])
        if add_eos:
            ids.append(self.eos_id)
        return ids

    def words_of(self, ids: Sequence[int], skip_special: bool = True) -> List[str]:
        """Map ids back to words, reassembling byte-fallback runs."""
        words: List[str] = []
        buf = bytearray()

        def flush() -> None:
            if buf:
                words.append(buf.decode("utf-8", errors="replace"))
                buf.clear()

        for token_id in ids:
            if token_id >= self._byte_start:
                offset = token_id - self._byte_start
                if offset < 256:
                    flush()
                    buf.append(offset)
                else:
                    buf.append(offset - 256)
                continue
            flush()
            token = self.id_to_token[token_id]
            if skip_special and token in (PAD, BOS, EOS):
                continue
            words.append(token)
        flush()
        return words

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        return join_words(self.words_of(ids, skip_special=skip_special))

    def to_dict(self) -> Dict[str, List[str]]:
        return {"words": self.words}

    @classmethod
    def from_dict(cls, data: Dict[str, List[str]]) -> "Tokenizer":
        return cls(data["words"])

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Tokenizer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_layers: int = Field(8, gt=0)
    d_model: int = Field(128, gt=0)
    n_heads: int = Field(4, gt=0)
    ff_mult: int = Field(4, gt=0)
    context_len: int = Field(256, ge=32)
    # 0 until the config is bound to a tokenizer
    vocab_size: int = Field(0, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self


def _as_float_tensor(value, ndim: int, what: str) -> torch.Tensor:
    tensor = value if isinstance(value, torch.Tensor) else torch.as_tensor(np.asarray(value, dtype=np.float32))
    tensor = tensor.detach().to(torch.float32).contiguous()
    if tensor.dim() != ndim:
        raise ValueError(f"{what} must be {ndim}-dimensional, got shape {tuple(tensor.shape)}")
    if not torch.isfinite(tensor).all():
        raise ValueError(f"{what} contains NaN or Inf")
    return tensor


class ActivationVector(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    layer: int = Field(ge=1)
    token_index: int = Field(ge=0)
    values: torch.Tensor
    source_model_id: str

    @field_validator("values", mode="before")
    @classmethod
    def _check_values(cls, value):
        return _as_float_tensor(value, 1, "activation vector")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class ActivationMatrix(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    layer: int = Field(ge=1)
    rows: torch.Tensor
    source_model_id: str

    @field_validator("rows", mode="before")
    @classmethod
    def _check_rows(cls, value):
        tensor = _as_float_tensor(value, 2, "activation matrix")
        if tensor.shape[0] < 1:
            raise ValueError("activation matrix needs at least one row")
        return tensor

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    def row(self, index: int) -> ActivationVector:
        return ActivationVector(
            layer=self.layer, token_index=index, values=self.rows[index], source_model_id=self.source_model_id
        )

    def tail(self, n_rows: int) -> "ActivationMatrix":
        """Keep the last ``n_rows`` rows (left truncation)."""
        return ActivationMatrix(layer=self.layer, rows=self.rows[-n_rows:], source_model_id=self.source_model_id)


class PatchSpec(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    payload: Union[ActivationVector, ActivationMatrix]
    target_layer: int = Field(ge=1)
    target_positions: List[int]
    # rescale each patched row to the norm of the state it replaces
    renormalize: bool = False

    @model_validator(mode="after")
    def _check_positions(self) -> "PatchSpec":
        positions = self.target_positions
        if any(p < 0 for p in positions):
            raise ValueError("target positions must be non-negative")
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ValueError("target positions must be strictly increasing")
        expected = 1 if isinstance(self.payload, ActivationVector) else len(self.payload)
        if len(positions) != expected:
            raise ValueError(f"payload has {expected} row(s) but {len(positions)} target position(s) were given")
        return self

    def values(self) -> torch.Tensor:
        if isinstance(self.payload, ActivationVector):
            return self.payload.values.unsqueeze(0)
        return self.payload.rows


class PatchTensor(NamedTuple):
    mask: torch.Tensor
    values: torch.Tensor
    renormalize: bool = False


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.d_model = config.d_model
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model)
        self.proj = nn.Linear(config.d_model, config.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, c = x.shape
        q, k, v = self.qkv(x).split(self.d_model, dim=2)
        q = q.view(b, t, self.n_heads, c // self.n_heads).transpose(1, 2)
        k = k.view(b, t, self.n_heads, c // self.n_heads).transpose(1, 2)
        v = v.view(b, t, self.n_heads, c // self.n_heads).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) * (1.0 / (k.size(-1) ** 0.5))
        causal = torch.ones(t, t, dtype=torch.bool, device=x.device).tril()
        att = att.masked_fill(~causal, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).contiguous().view(b, t, c)
        return self.proj(y)


class MLP(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.fc = nn.Linear(config.d_model, config.ff_mult * config.d_model)
        self.proj = nn.Linear(config.ff_mult * config.d_model, config.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(F.gelu(self.fc(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln_1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.ln_2 = nn.LayerNorm(config.d_model)
        self.mlp = MLP(config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x))
        x = x + self.mlp(self.ln_2(x))
        return x


class TinyDecoder(nn.Module):
    """Learned positional embeddings, pre-norm blocks, untied unembedding."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.wte = nn.Embedding(config.vocab_size, config.d_model)
        self.wpe = nn.Embedding(config.context_len, config.d_model)
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.n_layers)])
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.apply(self._init_weights)
        for name, param in self.named_parameters():
            if name.endswith("proj.weight"):
                nn.init.normal_(param, mean=0.0, std=0.02 / (2 * config.n_layers) ** 0.5)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def forward(
        self,
        idx: torch.Tensor,
        patches: Optional[Dict[int, PatchTensor]] = None,
        capture_layers: Sequence[int] = (),
    ) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
        """
        Run the stack on ``idx`` of shape (batch, time).

        ``patches`` maps a block index (1-based, or n_layers + 1 for the final
        norm input) to a mask of shape (batch, time) and replacement values of
        shape (batch, time, d_model). Patches and captures are applied in block
        order, so captures downstream of a patch observe it.
        """
        _, t = idx.shape
        pos = torch.arange(t, device=idx.device)
        x = self.wte(idx) + self.wpe(pos)
        states: Dict[int, torch.Tensor] = {}
        wanted = set(capture_layers)
        n_layers = len(self.blocks)
        for layer in range(1, n_layers + 2):
            if patches and layer in patches:
                x = _apply_patch(x, patches[layer])
            if layer == n_layers + 1:
                break
            x = self.blocks[layer - 1](x)
            if layer in wanted:
                states[layer] = x
        logits = self.lm_head(self.ln_f(x))
        return logits, states


def _apply_patch(x: torch.Tensor, patch: PatchTensor) -> torch.Tensor:
    values = patch.values
    if patch.renormalize:
        scale = x.norm(dim=-1, keepdim=True) / values.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        values = values * scale
    return torch.where(patch.mask.unsqueeze(-1), values, x)


class ModelHandle:
    """A tiny decoder plus its tokenizer, role tag and training lineage."""

    def __init__(
        self,
        config: ModelConfig,
        tokenizer: Tokenizer,
        module: TinyDecoder,
        role: Role,
        provenance: str = "",
        source_layer: Optional[int] = None,
    ):
        if config.vocab_size != tokenizer.vocab_size:
            raise ValueError(
                f"config vocab_size {config.vocab_size} does not match tokenizer ({tokenizer.vocab_size})"
            )
        self.config = config
        self.tokenizer = tokenizer
        self.module = module
        self.role = role
        self.provenance = provenance
        # layer of the activations a decoder was finetuned on; None for plain language models
        self.source_layer = source_layer
        self._model_id: Optional[str] = None
        self.module.eval()

    @classmethod
    def create(
        cls, config: ModelConfig, tokenizer: Tokenizer, role: Role, provenance: str = ""
    ) -> "ModelHandle":
        """Build a freshly initialized model; initialization is a pure function of ``config.seed``."""
        config = config.model_copy(update={"vocab_size": tokenizer.vocab_size})
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed % 2**63)
            module = TinyDecoder(config)
        return cls(config, tokenizer, module, role, provenance or f"initialized from seed {config.seed}")

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def model_id(self) -> str:
        # a handle's weights are frozen once shared; training builds a new handle
        if self._model_id is None:
            self._model_id = f"{self.role}-{self.checksum()[:12]}"
        return self._model_id

    @property
    def weights(self) -> Dict[Tuple[int, str], torch.Tensor]:
        """Flat parameter store keyed by (block index, parameter name); index 0 is outside the blocks."""
        store: Dict[Tuple[int, str], torch.Tensor] = {}
        for name, param in self.module.named_parameters():
            if name.startswith("blocks."):
                _, index, rest = name.split(".", 2)
                store[(int(index) + 1, rest)] = param.detach()
            else:
                store[(0, name)] = param.detach()
        return store

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.module.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def is_finite(self) -> bool:
        return all(torch.isfinite(p).all().item() for p in self.module.parameters())

    def clone(self, role: Optional[Role] = None, provenance: Optional[str] = None) -> "ModelHandle":
        module = TinyDecoder(self.config)
        module.load_state_dict(self.module.state_dict())
        return ModelHandle(
            self.config,
            self.tokenizer,
            module,
            role or self.role,
            provenance if provenance is not None else self.provenance,
            self.source_layer,
        )


class ForwardResult(NamedTuple):
    logits: torch.Tensor
    captured: List[ActivationVector]


class Generation(NamedTuple):
    tokens: List[int]
    text: str


def _check_patches(model: ModelHandle, n_tokens: int, patches: Sequence[PatchSpec]) -> None:
    last_layer = model.n_layers + 1
    for patch in patches:
        if not 1 <= patch.target_layer <= last_layer:
            raise PatchError(f"patch target layer {patch.target_layer} outside [1, {last_layer}]")
        if patch.payload.dim != model.config.d_model:
            raise PatchError(f"payload dimension {patch.payload.dim} does not match d_model {model.config.d_model}")
        for position in patch.target_positions:
            if position >= n_tokens:
                raise PatchError(f"patch position {position} outside [0, {n_tokens - 1}]")


def _check_tokens(model: ModelHandle, tokens: Sequence[int]) -> None:
    if not tokens:
        raise PatchError("token sequence is empty")
    if len(tokens) > model.config.context_len:
        raise PatchError(f"sequence of {len(tokens)} tokens exceeds context_len {model.config.context_len}")


def _patch_tensors(model: ModelHandle, width: int, patches: Sequence[PatchSpec]) -> Dict[int, PatchTensor]:
    built: Dict[int, PatchTensor] = {}
    for patch in patches:
        layer = patch.target_layer
        if layer in built:
            mask, values, renorm = built[layer]
        else:
            mask = torch.zeros(1, width, dtype=torch.bool)
            values = torch.zeros(1, width, model.config.d_model)
            renorm = False
        rows = patch.values()
        for row, position in zip(rows, patch.target_positions):
            mask[0, position] = True
            values[0, position] = row
        built[layer] = PatchTensor(mask, values, renorm or patch.renormalize)
    return built


def _run(
    model: ModelHandle,
    tokens: Sequence[int],
    patches: Sequence[PatchSpec],
    capture_layers: Sequence[int],
) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
    width = model.config.context_len
    idx = torch.full((1, width), model.tokenizer.pad_id, dtype=torch.long)
    idx[0, : len(tokens)] = torch.tensor(list(tokens), dtype=torch.long)
    with torch.no_grad():
        logits, states = model.module(idx, _patch_tensors(model, width, patches), capture_layers)
    return logits[0, : len(tokens)], {layer: s[0, : len(tokens)] for layer, s in states.items()}


def forward(
    model: ModelHandle,
    tokens: Sequence[int],
    patches: Sequence[PatchSpec] = (),
    captures: Sequence[Tuple[int, int]] = (),
) -> ForwardResult:
    """
    Single inference pass with optional patches and captures.

    Args:
        model: The model to run; its weights are never modified.
        tokens: Token ids, 1 to context_len long.
        patches: Replacements of the stream entering a block at given positions.
        captures: (layer, position) requests for block outputs.

    Returns:
        Per-position logits of shape (len(tokens), vocab_size) and the captured vectors.
    """
    _check_tokens(model, tokens)
    _check_patches(model, len(tokens), patches)
    for layer, position in captures:
        if not 1 <= layer <= model.n_layers:
            raise PatchError(f"capture layer {layer} outside [1, {model.n_layers}]")
        if not 0 <= position < len(tokens):
            raise PatchError(f"capture position {position} outside [0, {len(tokens) - 1}]")
    logits, states = _run(model, tokens, patches, sorted({layer for layer, _ in captures}))
    model_id = model.model_id if captures else ""
    captured = [
        ActivationVector(layer=layer, token_index=position, values=states[layer][position].clone(), source_model_id=model_id)
        for layer, position in captures
    ]
    return ForwardResult(logits, captured)


def forward_batch(
    model: ModelHandle,
    items: Sequence[Tuple[Sequence[int], Sequence[PatchSpec], Sequence[Tuple[int, int]]]],
) -> List[ForwardResult]:
    """Evaluate (tokens, patches, captures) items; each item gets its own fixed-width pass."""
    return [forward(model, tokens, patches, captures) for tokens, patches, captures in items]


def capture_layer(model: ModelHandle, tokens: Sequence[int], layer: int) -> ActivationMatrix:
    """Capture the full activation matrix (one row per token) at ``layer``."""
    _check_tokens(model, tokens)
    if not 1 <= layer <= model.n_layers:
        raise PatchError(f"capture layer {layer} outside [1, {model.n_layers}]")
    _, states = _run(model, tokens, (), [layer])
    return ActivationMatrix(layer=layer, rows=states[layer].clone(), source_model_id=model.model_id)


def generate(
    model: ModelHandle,
    prefix: Sequence[int],
    max_new: int = 20,
    patches: Sequence[PatchSpec] = (),
) -> Generation:
    """
    Greedy decoding from ``prefix``.

    Patches may only address prompt positions. They are applied at prefill and
    stay in force for every later step; because inference runs at a fixed
    width, the patched prefix states are identical at every step, which is
    the same as reusing a cache of the patched prefill.
    """
    if max_new < 1:
        raise ValueError("max_new must be at least 1")
    _check_tokens(model, prefix)
    for patch in patches:
        if any(p >= len(prefix) for p in patch.target_positions):
            raise PatchError("patches must target prompt positions, not the generated region")
    _check_patches(model, len(prefix), patches)

    sequence = list(prefix)
    generated: List[int] = []
    for _ in range(max_new):
        if len(sequence) >= model.config.context_len:
            logger.warning("generation stopped at context_len {}", model.config.context_len)
            break
        logits, _ = _run(model, sequence, patches, ())
        next_id = int(torch.argmax(logits[-1]).item())
        generated.append(next_id)
        if next_id == model.tokenizer.eos_id:
            break
        sequence.append(next_id)
    return Generation(generated, model.tokenizer.decode(generated))


def write_blob_container(path: Union[str, Path], header: Dict, arrays: Dict[str, np.ndarray]) -> None:
    """Write a JSON header line followed by raw little-endian float32 blobs."""
    table = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    full_header = dict(header, tensors=table)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(json.dumps(full_header, sort_keys=True).encode("utf-8") + b"\n")
        for data in blobs:
            handle.write(data)


def read_blob_container(path: Union[str, Path]) -> Tuple[Dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as handle:
        try:
            header = json.loads(handle.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Unreadable container header in {path}: {e}")
        body = handle.read()
    arrays = {}
    for entry in header.get("tensors", []):
        chunk = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"Truncated blob '{entry['name']}' in {path}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
    return header, arrays


def save_checkpoint(model: ModelHandle, path: Union[str, Path]) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.model_dump(),
        "role": model.role,
        "provenance": model.provenance,
        "tokenizer": model.tokenizer.to_dict(),
        "source_layer": model.source_layer,
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in model.module.state_dict().items()}
    write_blob_container(path, header, arrays)


def load_checkpoint(path: Union[str, Path], expected_config: Optional[ModelConfig] = None) -> ModelHandle:
    """
    Load a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: On a foreign format, an unknown version, or a config
            that differs from ``expected_config`` (vocab_size 0 in the expected
            config matches any vocabulary).
    """
    header, arrays = read_blob_container(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version: {header.get('version')}")
    config = ModelConfig(**header["config"])
    if expected_config is not None:
        expected = expected_config
        if expected.vocab_size == 0:
            expected = expected.model_copy(update={"vocab_size": config.vocab_size})
        if expected != config:
            raise CheckpointError(f"Checkpoint config {config.model_dump()} does not match {expected.model_dump()}")
    tokenizer = Tokenizer.from_dict(header["tokenizer"])
    module = TinyDecoder(config)
    state = {name: torch.from_numpy(array) for name, array in arrays.items()}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"Missing parameters: {', '.join(sorted(missing))}")
    module.load_state_dict(state)
    return ModelHandle(config, tokenizer, module, header["role"], header.get("provenance", ""), header.get("source_layer"))
