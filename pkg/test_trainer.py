import csv
import warnings

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from pydantic import ValidationError

from model_core import ActivationVector, ModelConfig, ModelHandle, PatchError, Tokenizer
from trainer import (
    PLACEHOLDER_BUDGET,
    AffineMap,
    DecoderDataset,
    DecoderRecord,
    TrainConfig,
    activation_pairs,
    context_tokens,
    decoder_loss,
    decoder_prefix,
    finetune_decoder,
    fit_affine,
    masked_lm_loss,
    placeholder_positions,
    train_lm,
)
from worldgen import make_decoder_dataset

QUICK = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=5, max_steps=3, seed=1)


def _records():
    return DecoderDataset(
        records=[
            DecoderRecord(context_text="Yumi Sato is from Japan.", question_text="Which country does the person come from?", answer_text="Japan"),
            DecoderRecord(context_text="Lars Berg likes to play Kubb.", question_text="Which board game does the person play?", answer_text="Kubb"),
            DecoderRecord(context_text="Omar Hassan likes to drink Karkade.", question_text="What does the person like to drink?", answer_text="Karkade"),
        ]
    )


def test_masked_lm_loss_ignores_masked_positions():
    torch.manual_seed(0)
    logits = torch.randn(1, 4, 7)
    targets = torch.tensor([[1, 2, 3, 4]])
    mask = torch.tensor([[False, True, False, True]])
    expected = F.cross_entropy(logits[0, [1, 3]], targets[0, [1, 3]])
    assert torch.allclose(masked_lm_loss(logits, targets, mask), expected)
    assert masked_lm_loss(logits, targets, torch.zeros_like(mask)).item() == 0.0


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    assert TrainConfig(learning_rate=0.0).learning_rate == 0.0


def test_train_lm_is_deterministic(tiny_model, plain_documents):
    corpus = [d.text for d in plain_documents[:6]]
    a = train_lm(tiny_model, corpus, QUICK)
    b = train_lm(tiny_model, corpus, QUICK)
    c = train_lm(tiny_model, corpus, QUICK.model_copy(update={"seed": 2}))
    assert a.model.checksum() == b.model.checksum()
    assert a.loss_curve == b.loss_curve
    assert a.model.checksum() != c.model.checksum()
    assert len(a.loss_curve) == 3


def test_train_lm_reduces_loss(tiny_model, plain_documents):
    corpus = [d.text for d in plain_documents[:4]]
    cfg = TrainConfig(learning_rate=3e-3, batch_size=4, epochs=40, seed=0)
    curve = train_lm(tiny_model, corpus, cfg).loss_curve
    assert np.mean(curve[-5:]) < curve[0]


def test_train_lm_leaves_input_untouched(tiny_model, plain_documents):
    before = tiny_model.checksum()
    result = train_lm(tiny_model, [plain_documents[0].text], QUICK)
    assert tiny_model.checksum() == before
    assert result.model.checksum() != before


def test_zero_learning_rate_keeps_weights(tiny_model, plain_documents):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = train_lm(tiny_model, [plain_documents[0].text], QUICK.model_copy(update={"learning_rate": 0.0}))
    assert result.model.checksum() == tiny_model.checksum()
    assert not [w for w in caught if "lr_scheduler" in str(w.message)]


def test_single_document_is_memorized():
    tokenizer = Tokenizer.fit(["alpha beta gamma"])
    model = ModelHandle.create(ModelConfig(n_layers=2, d_model=32, n_heads=2, context_len=32, seed=1), tokenizer, "target")
    cfg = TrainConfig(learning_rate=3e-3, batch_size=1, epochs=200, seed=0)
    curve = train_lm(model, ["alpha beta gamma"], cfg).loss_curve
    assert len(curve) == 200
    assert curve[-1] < 0.1


def test_train_lm_input_errors(tiny_model):
    with pytest.raises(ValueError):
        train_lm(tiny_model, [], QUICK)
    with pytest.raises(ValueError):
        train_lm(tiny_model, ["no separator here"], QUICK.model_copy(update={"loss_mask_mode": "answer_only"}))


def test_answer_only_mode_trains(tiny_model):
    result = train_lm(tiny_model, ["Yumi Sato is from Japan. <sep> Japan"], QUICK.model_copy(update={"loss_mask_mode": "answer_only"}))
    assert len(result.loss_curve) == 3
    assert np.isfinite(result.loss_curve).all()


def test_training_log_and_checkpoints(tmp_path, tiny_model, plain_documents):
    cfg = QUICK.model_copy(
        update={"log_path": str(tmp_path / "log.csv"), "checkpoint_every": 1, "checkpoint_dir": str(tmp_path / "ckpt"), "batch_size": 1}
    )
    train_lm(tiny_model, [d.text for d in plain_documents[:4]], cfg)
    with open(tmp_path / "log.csv", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["step", "loss", "learning_rate"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert sorted(p.name for p in (tmp_path / "ckpt").iterdir()) == [
        "step_000001.ckpt",
        "step_000002.ckpt",
        "step_000003.ckpt",
    ]


def test_decoder_prefix_layout(tiny_model):
    tok = tiny_model.tokenizer
    prefix = decoder_prefix(tiny_model, 3, "Which sport?")
    assert prefix[:4] == [tok.bos_id, tok.placeholder_id, tok.placeholder_id, tok.placeholder_id]
    assert prefix[4:] == tok.encode("Which sport?")
    assert placeholder_positions(3) == [1, 2, 3]


def test_context_tokens_truncate_from_the_left(tiny_model):
    full = tiny_model.tokenizer.encode("one two three four five six seven eight nine ten", add_bos=True)
    ids = context_tokens(tiny_model, "one two three four five six seven eight nine ten", budget=5)
    assert len(ids) == 5
    assert ids[0] == tiny_model.tokenizer.bos_id
    assert ids[1:] == full[-4:]
    assert len(context_tokens(tiny_model, "short")) <= PLACEHOLDER_BUDGET


def test_finetune_decoder_never_touches_target(tiny_model):
    target = tiny_model
    verbalizer = tiny_model.clone(role="verbalizer")
    before = target.checksum()
    for mode in ("lit", "inverter_multi", "inverter_single"):
        trained = finetune_decoder(verbalizer, target, _records(), 1, mode, QUICK)
        assert target.checksum() == before
        assert trained.role == "verbalizer"
        assert trained.checksum() != verbalizer.checksum()
        assert mode in trained.provenance


def test_finetune_decoder_rejects_bad_inputs(tokenizer, tiny_model):
    wide = ModelHandle.create(ModelConfig(n_layers=2, d_model=64, n_heads=2, context_len=160), tokenizer, "verbalizer")
    with pytest.raises(PatchError):
        finetune_decoder(wide, tiny_model, _records(), 1, "lit", QUICK)
    with pytest.raises(PatchError):
        finetune_decoder(tiny_model.clone(), tiny_model, _records(), 3, "lit", QUICK)
    with pytest.raises(ValueError):
        finetune_decoder(tiny_model.clone(), tiny_model, DecoderDataset(records=[]), 1, "lit", QUICK)


def test_decoder_dataset_rejects_evaluation_prompts():
    data = DecoderDataset(records=[DecoderRecord(context_text="x is from Peru.", question_text="The country of origin for", answer_text="Peru")])
    with pytest.raises(ValueError, match="overlap"):
        data.check_disjoint(["the country of origin for"])
    _records().check_disjoint(["The country of origin for"])


def _vector(values):
    return ActivationVector(layer=1, token_index=0, values=np.asarray(values, dtype=np.float32), source_model_id="synthetic")


def test_fit_affine_recovers_known_map():
    rng = np.random.default_rng(3)
    matrix = rng.normal(size=(3, 4))
    bias = rng.normal(size=3)
    src = rng.normal(size=(40, 4)).astype(np.float32)
    dst = (src.astype(np.float64) @ matrix.T + bias).astype(np.float32)
    fitted = fit_affine([(_vector(s), _vector(d)) for s, d in zip(src, dst)])
    assert fitted.source_dim == 4 and fitted.dest_dim == 3
    assert np.allclose(fitted.matrix, matrix, atol=1e-3)
    assert np.allclose(fitted.bias, bias, atol=1e-3)
    assert fitted.residual_mse < 1e-8
    mapped = fitted.apply(torch.from_numpy(src[:2]))
    assert torch.allclose(mapped, torch.from_numpy(dst[:2]), atol=1e-3)


def test_fit_affine_needs_enough_pairs():
    with pytest.raises(ValueError, match="at least 5"):
        fit_affine([(_vector(np.ones(4)), _vector(np.ones(3)))] * 4)
    with pytest.raises(ValueError):
        fit_affine([])


def test_affine_map_validation():
    with pytest.raises(ValidationError):
        AffineMap(matrix=np.full((2, 2), np.nan), bias=np.zeros(2))
    identity = AffineMap(matrix=np.eye(2), bias=np.zeros(2))
    with pytest.raises(ValueError):
        identity.apply(torch.zeros(3))


def test_activation_pairs_cover_every_token(tokenizer, tiny_model):
    other = ModelHandle.create(ModelConfig(n_layers=3, d_model=48, n_heads=2, context_len=96, seed=9), tokenizer, "target")
    texts = ["Yumi Sato is from Japan.", "Lars Berg likes to play Kubb."]
    pairs = activation_pairs(other, tiny_model, texts, 3, 1)
    expected = sum(len(tokenizer.encode(t, add_bos=True)) for t in texts)
    assert len(pairs) == expected
    assert pairs[0][0].dim == 48 and pairs[0][1].dim == 32


def test_lit_finetuning_lowers_held_out_answer_loss(trained_model, plain_world, plain_documents):
    world, personas = plain_world
    data = make_decoder_dataset(world, personas, plain_documents, seed=1, questions_per_document=3)
    cut = len(data) * 3 // 4
    train = DecoderDataset(records=data.records[:cut])
    held_out = DecoderDataset(records=data.records[cut:])
    verbalizer = trained_model.clone(role="verbalizer")
    cfg = TrainConfig(learning_rate=3e-3, batch_size=8, epochs=10, seed=0)
    finetuned = finetune_decoder(verbalizer, trained_model, train, 1, "lit", cfg)
    before = decoder_loss(verbalizer, trained_model, held_out, 1, "lit")
    after = decoder_loss(finetuned, trained_model, held_out, 1, "lit")
    assert after < before


def test_decoder_loss_leaves_weights_alone(trained_model):
    verbalizer = trained_model.clone(role="verbalizer")
    before = verbalizer.checksum()
    loss = decoder_loss(verbalizer, trained_model, _records(), 1, "lit")
    assert loss > 0.0
    assert verbalizer.checksum() == before
    with pytest.raises(ValueError):
        decoder_loss(verbalizer, trained_model, DecoderDataset(records=[]), 1, "lit")
