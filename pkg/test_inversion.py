import json

import pytest
import torch

from inversion import (
    Reconstruction,
    dump_reconstructions,
    invert_multi,
    invert_single,
    invert_then_interpret,
    reconstruction_bleu,
)
from model_core import (
    ActivationMatrix,
    ActivationVector,
    ModelConfig,
    ModelHandle,
    PatchError,
    Tokenizer,
    capture_layer,
    load_checkpoint,
    save_checkpoint,
)
from trainer import PLACEHOLDER_BUDGET, DecoderDataset, DecoderRecord, TrainConfig, finetune_decoder
from verbalize import capture_final_token, capture_input
from worldgen import make_eval_items


@pytest.fixture
def item(plain_world):
    _, personas = plain_world
    return make_eval_items(personas, "fav_food")[1]


def test_invert_multi_and_single(trained_model, item):
    multi = invert_multi(trained_model, capture_input(trained_model, item.x_input, 1))
    single = invert_single(trained_model, capture_final_token(trained_model, item.x_input, 1))
    assert (multi.kind, multi.layer) == ("multi", 1)
    assert (single.kind, single.layer) == ("single", 1)
    assert multi.bleu_vs_input is None
    assert multi == invert_multi(trained_model, capture_input(trained_model, item.x_input, 1))


def test_invert_multi_keeps_the_last_rows(trained_model):
    tokens = trained_model.tokenizer.encode(" ".join(["Japan"] * (PLACEHOLDER_BUDGET + 10)), add_bos=True)
    acts = capture_layer(trained_model, tokens, 1)
    assert len(acts) > PLACEHOLDER_BUDGET
    assert invert_multi(trained_model, acts) == invert_multi(trained_model, acts.tail(PLACEHOLDER_BUDGET))


def test_inverter_dimension_must_match(trained_model):
    narrow = ActivationVector(layer=1, token_index=0, values=torch.zeros(16), source_model_id="x")
    with pytest.raises(PatchError, match="does not match inverter"):
        invert_single(trained_model, narrow)
    with pytest.raises(PatchError):
        invert_multi(trained_model, ActivationMatrix(layer=1, rows=torch.zeros(3, 16), source_model_id="x"))


def test_invert_then_interpret_labels_the_method(trained_model, item):
    multi = invert_then_interpret(trained_model, trained_model, capture_input(trained_model, item.x_input, 1), item)
    single = invert_then_interpret(trained_model, trained_model, capture_final_token(trained_model, item.x_input, 1), item)
    assert multi.method == "inversion_multi"
    assert single.method == "inversion_single"
    assert multi.item_id == item.item_id and multi.source_layer == 1
    assert isinstance(multi.to_trial(item.answer).correct, bool)


def test_reconstruction_scoring():
    exact = Reconstruction(x_rec="My name is Yumi Sato", layer=1, kind="multi")
    assert exact.scored_against("My name is Yumi Sato").bleu_vs_input == pytest.approx(100.0)
    assert reconstruction_bleu([exact], ["My name is Yumi Sato"]) == pytest.approx(100.0)
    empty = Reconstruction(x_rec="", layer=2, kind="single")
    assert reconstruction_bleu([empty], ["My name is Yumi Sato"]) == 0.0


def test_dump_reconstructions(tmp_path):
    recs = [
        Reconstruction(x_rec="My name is Yumi Sato", layer=1, kind="multi"),
        Reconstruction(x_rec="My name", layer=1, kind="multi"),
    ]
    inputs = ["My name is Yumi Sato", "My name is Lars Berg"]
    records = dump_reconstructions(tmp_path / "reconstructions.jsonl", ["a", "b"], inputs, recs)
    assert records[0].bleu == pytest.approx(100.0)
    assert records[1].bleu < 100.0
    lines = [json.loads(line) for line in (tmp_path / "reconstructions.jsonl").read_text(encoding="utf-8").splitlines()]
    assert [line["item_id"] for line in lines] == ["a", "b"]
    with pytest.raises(ValueError, match="align"):
        dump_reconstructions(tmp_path / "bad.jsonl", ["a"], inputs, recs)


SENTENCES = ["red fox jumps high.", "blue cat sleeps late.", "green owl sings loud.", "old dog runs far."]
TOY = ModelConfig(n_layers=2, d_model=32, n_heads=2, ff_mult=2, context_len=96, seed=5)


@pytest.fixture(scope="module")
def muted_target():
    # attention output zeroed: each state depends only on its own token and position
    target = ModelHandle.create(TOY, Tokenizer.fit(SENTENCES), "target")
    with torch.no_grad():
        for block in target.module.blocks:
            block.attn.proj.weight.zero_()
            block.attn.proj.bias.zero_()
    return target


def _inverter(target, mode, source_layer=1):
    data = DecoderDataset(records=[DecoderRecord(context_text=s, answer_text=s) for s in SENTENCES])
    cfg = TrainConfig(learning_rate=3e-3, batch_size=4, epochs=200, seed=0)
    fresh = ModelHandle.create(TOY.model_copy(update={"seed": 6}), target.tokenizer, "inverter")
    return finetune_decoder(fresh, target, data, source_layer, mode, cfg)


@pytest.fixture(scope="module")
def multi_inverter(muted_target):
    return _inverter(muted_target, "inverter_multi")


def test_multi_row_inversion_beats_single_row(muted_target, multi_inverter):
    single = _inverter(muted_target, "inverter_single")
    multi_recs = [invert_multi(multi_inverter, capture_input(muted_target, s, 1)) for s in SENTENCES]
    single_recs = [invert_single(single, capture_final_token(muted_target, s, 1)) for s in SENTENCES]
    # every sentence ends in "." at the same position, so the final states coincide
    assert len({r.x_rec for r in single_recs}) == 1
    assert reconstruction_bleu(multi_recs, SENTENCES) > reconstruction_bleu(single_recs, SENTENCES)


def test_inverter_rejects_activations_from_another_layer(muted_target, multi_inverter):
    inverter = multi_inverter.clone()
    assert inverter.source_layer == 1
    with pytest.raises(PatchError, match="trained on layer 1"):
        invert_multi(inverter, capture_input(muted_target, SENTENCES[0], 2))
    with pytest.raises(ValueError, match="trained on layer 1"):
        invert_single(inverter, capture_final_token(muted_target, SENTENCES[0], 2))
    assert invert_multi(inverter, capture_input(muted_target, SENTENCES[0], 1)).layer == 1


def test_plain_models_accept_any_layer(trained_model):
    assert trained_model.source_layer is None
    assert invert_single(trained_model, capture_final_token(trained_model, "My name is Yumi Sato", 2)).layer == 2


def test_inverter_source_layer_survives_checkpoints(tmp_path, muted_target):
    inverter = _inverter(muted_target, "inverter_single", source_layer=2)
    path = tmp_path / "inverter.ckpt"
    save_checkpoint(inverter, path)
    loaded = load_checkpoint(path)
    assert loaded.source_layer == 2
    assert loaded.checksum() == inverter.checksum()
