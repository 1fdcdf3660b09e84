import numpy as np
import pytest
from pydantic import ValidationError

from model_core import PLACEHOLDER, split_words
from trainer import PLACEHOLDER_BUDGET
from worldgen import (
    ATTRIBUTES,
    DECODER_QUESTIONS,
    EVAL_TEMPLATES,
    REALISTIC_LABELS,
    DocumentRenderer,
    EvalItem,
    LabelCollisionError,
    Persona,
    _value_derangement,
    build_world,
    cloze_prompt,
    fill_template,
    make_decoder_dataset,
    make_eval_items,
    make_inversion_dataset,
    make_reading_corpus,
    make_triples,
    read_world,
    registered_templates,
    render_corpus,
    render_documents,
    seeded_rng,
    sensitivity_variants,
    split_personas,
    world_paths,
    write_world,
)


def test_build_world_is_deterministic():
    assert build_world(7, "plain", 20, 5) == build_world(7, "plain", 20, 5)
    assert build_world(7, "fantasy", 20, 5) == build_world(7, "fantasy", 20, 5)
    assert build_world(7, "plain", 20, 5)[1] != build_world(8, "plain", 20, 5)[1]


def test_plain_world_schema(plain_world):
    world, personas = plain_world
    assert len(personas) == 12
    assert len({p.name for p in personas}) == 12
    for attribute in ATTRIBUTES:
        assert world.attribute_schemas[attribute] == REALISTIC_LABELS[attribute][:4]
    for persona in personas:
        for attribute in ATTRIBUTES:
            assert persona.attributes[attribute] in world.attribute_schemas[attribute]
    for group, table in world.correlation_table.items():
        for attribute in ATTRIBUTES:
            assert sum(table[attribute]) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(50))
def test_shuffled_world_is_a_derangement(seed):
    _, plain = build_world(seed, "plain", 40, 10)
    _, shuffled = build_world(seed, "shuffled", 40, 10)
    assert [p.name for p in shuffled] == [p.name for p in plain]
    for before, after in zip(plain, shuffled):
        assert after.plain_attributes == before.attributes
        for attribute in ATTRIBUTES:
            assert after.attributes[attribute] != before.attributes[attribute]
    for attribute in ATTRIBUTES:
        assert sorted(p.attributes[attribute] for p in shuffled) == sorted(p.attributes[attribute] for p in plain)


@pytest.mark.parametrize("n_personas,labels", [(2, 2), (4, 2), (6, 2), (2, 10), (3, 3), (6, 10), (12, 4)])
def test_small_shuffled_worlds_always_derange(n_personas, labels):
    for seed in range(50):
        _, shuffled = build_world(seed, "shuffled", n_personas, labels)
        assert len(shuffled) == n_personas
        for persona in shuffled:
            for attribute in ATTRIBUTES:
                assert persona.attributes[attribute] != persona.plain_attributes[attribute]
        for attribute in ATTRIBUTES:
            assert sorted(p.attributes[attribute] for p in shuffled) == sorted(p.plain_attributes[attribute] for p in shuffled)


def test_small_shuffled_worlds_are_deterministic():
    assert build_world(4, "shuffled", 4, 2) == build_world(4, "shuffled", 4, 2)


def test_shuffled_world_rejects_impossible_sizes():
    with pytest.raises(ValueError, match="No derangement exists"):
        build_world(0, "shuffled", 3, 2)
    with pytest.raises(ValueError):
        build_world(0, "shuffled", 1, 4)
    # plain worlds of the same size are fine
    assert len(build_world(0, "plain", 3, 2)[1]) == 3


def test_value_derangement_limits():
    rng = np.random.default_rng(0)
    values = ["a", "a", "b", "b", "c", "c"]
    deranged = _value_derangement(values, rng)
    assert sorted(deranged) == sorted(values)
    assert all(x != y for x, y in zip(values, deranged))
    with pytest.raises(ValueError, match="No derangement"):
        _value_derangement(["a", "a", "a", "b"], rng)
    with pytest.raises(ValueError):
        _value_derangement(["a"], rng)


def test_fantasy_world_is_disjoint_from_realistic_vocabulary():
    world, personas = build_world(5, "fantasy", 30, 10)
    realistic = {label.lower() for labels in REALISTIC_LABELS.values() for label in labels}
    labels = [label for attribute in ATTRIBUTES for label in world.attribute_schemas[attribute]]
    assert len(set(labels)) == len(labels) == 60
    assert not realistic & {label.lower() for label in labels}
    for a in labels:
        for b in labels:
            assert a == b or a.lower() not in b.lower()
    assert len({p.name for p in personas}) == 30


def test_build_world_argument_errors():
    with pytest.raises(ValueError):
        build_world(0, "plain", 1, 4)
    with pytest.raises(ValueError):
        build_world(0, "plain", 10, 11)
    with pytest.raises(ValueError):
        build_world(0, "plain", 10, 1)


def test_exclude_names_gives_disjoint_worlds(plain_world):
    _, personas = plain_world
    _, background = build_world(99, "plain", 30, 4, exclude_names=[p.name for p in personas])
    assert not {p.name for p in personas} & {p.name for p in background}


def test_persona_validation():
    attributes = {a: REALISTIC_LABELS[a][0] for a in ATTRIBUTES}
    with pytest.raises(ValidationError, match="Missing required attributes: fav_game"):
        Persona(name="Yumi Sato", attributes={k: v for k, v in attributes.items() if k != "fav_game"}, regime="plain")
    with pytest.raises(ValidationError):
        Persona(name="Yumi Sato", attributes=attributes, regime="shuffled", plain_attributes=attributes)


def test_documents_embed_every_label(plain_world, plain_documents):
    _, personas = plain_world
    by_name = {p.name: p for p in personas}
    assert len(plain_documents) == 2 * len(personas)
    for document in plain_documents:
        persona = by_name[document.entity]
        assert persona.name in document.text
        for attribute in ATTRIBUTES:
            assert persona.attributes[attribute] in document.text
        assert 40 <= len(split_words(document.text)) <= 400
        assert {pair.question for pair in document.qa} == set(DECODER_QUESTIONS.values())


def test_render_documents_is_deterministic(plain_world):
    _, personas = plain_world
    assert render_documents(personas[0], 2, 2, 3) == render_documents(personas[0], 2, 2, 3)
    styles = [d.style for d in render_documents(personas[0], 2, 1, 3)]
    assert styles == ["biography", "biography", "interview"]


def test_interview_format(plain_world):
    _, personas = plain_world
    persona = personas[0]
    text = DocumentRenderer().interview(persona, seeded_rng(0))
    lines = text.split("\n")
    assert lines[0].startswith("Interviewer:")
    assert sum(line.startswith(f"{persona.name}:") for line in lines) == len(ATTRIBUTES)


def test_label_collision_is_rejected():
    renderer = DocumentRenderer()
    attributes = {a: REALISTIC_LABELS[a][0] for a in ATTRIBUTES}
    attributes["fav_game"] = "garden"
    persona = Persona(name="Yumi Sato", attributes=attributes, regime="plain")
    with pytest.raises(LabelCollisionError):
        renderer.validate_persona(persona)


def test_eval_items(plain_world):
    _, personas = plain_world
    items = make_eval_items(personas, "fav_drink")
    assert len(items) == len(personas)
    first = items[0]
    assert first.item_id == f"fav_drink:{personas[0].name}"
    assert first.x_input == f"My name is {personas[0].name}"
    assert first.x_prompt == f"The favorite drink of {personas[0].name}"
    assert first.answer == personas[0].attributes["fav_drink"]
    assert first.placeholder_prompt() == f"The favorite drink of {PLACEHOLDER}"
    with pytest.raises(ValueError, match="Invalid attribute"):
        make_eval_items(personas, "fav_color")


def test_eval_item_template_must_be_registered(plain_world):
    _, personas = plain_world
    item = make_eval_items(personas, "country")[0]
    with pytest.raises(ValidationError):
        EvalItem(**dict(item.model_dump(), template="Where does {x} live", x_prompt=f"Where does {item.subject} live"))
    with pytest.raises(ValidationError):
        EvalItem(**dict(item.model_dump(), x_prompt="something else"))
    variant = item.with_template(sensitivity_variants("country")["A1"], "Peru")
    assert "Peru" in variant.x_prompt and item.subject in variant.x_prompt


def test_sensitivity_variants_cover_every_attribute():
    for attribute in ATTRIBUTES:
        variants = sensitivity_variants(attribute)
        assert list(variants) == ["S0", "S1", "S2", "S3", "S4", "A1", "A2"]
        assert variants["S0"] == EVAL_TEMPLATES[attribute]
        assert "{distractor}" in variants["A1"] and "{distractor}" in variants["A2"]
        assert set(variants.values()) <= registered_templates()


def test_decoder_dataset(plain_world, plain_documents):
    world, personas = plain_world
    data = make_decoder_dataset(world, personas, plain_documents, seed=1, questions_per_document=3)
    assert 0 < len(data) <= 3 * len(plain_documents)
    eval_prompts = {fill_template(t, "").strip().lower() for t in registered_templates()}
    for record in data.records:
        assert record.answer_text in record.context_text
        assert len(split_words(record.context_text)) + 1 <= PLACEHOLDER_BUDGET
        assert record.question_text.strip().lower() not in eval_prompts
    again = make_decoder_dataset(world, personas, plain_documents, seed=1, questions_per_document=3)
    assert again == data


def test_inversion_dataset(plain_documents):
    data = make_inversion_dataset(plain_documents[:4])
    assert len(data) >= 4
    for record in data.records:
        assert record.answer_text == record.context_text
        assert record.question_text == ""
        assert len(split_words(record.context_text)) + 1 <= PLACEHOLDER_BUDGET


def test_triples_state_their_object(plain_world):
    world, personas = plain_world
    triples = make_triples(world, personas, seed=4, per_relation=5)
    assert len(triples) == 5 * len(ATTRIBUTES)
    for triple in triples:
        assert triple.object in triple.x_input
        item = triple.to_eval_item()
        assert item.answer == triple.object
        assert item.task == triple.relation
        assert item.x_prompt == fill_template(EVAL_TEMPLATES[triple.relation], triple.subject)
    with pytest.raises(ValueError):
        make_triples(world, personas, seed=4, per_relation=len(personas) + 1)


def test_reading_corpus_lines(plain_world):
    _, personas = plain_world
    lines = make_reading_corpus(personas[:2])
    assert len(lines) == 2 * len(ATTRIBUTES)
    hint, statement = lines[0].split(" <sep> ")
    label = personas[0].attributes[ATTRIBUTES[0]]
    assert label in hint
    assert statement == f"The country of origin for {personas[0].name} is {label}."


def test_cloze_prompt():
    assert cloze_prompt("country", "Yumi Sato") == "Yumi Sato is from"
    with pytest.raises(ValueError):
        cloze_prompt("height", "Yumi Sato")


def test_split_personas(plain_world):
    _, personas = plain_world
    train, test = split_personas(personas, 9, seed=2)
    assert len(train) == 9 and len(test) == 3
    assert not {p.name for p in train} & {p.name for p in test}
    assert split_personas(personas, 9, seed=2) == (train, test)
    with pytest.raises(ValueError):
        split_personas(personas, len(personas), seed=2)


def test_world_files_round_trip(tmp_path, plain_world, plain_documents):
    world, personas = plain_world
    paths = write_world(tmp_path, world, personas, plain_documents, name="plain")
    assert paths == world_paths(tmp_path, "plain")
    loaded_world, loaded_personas, loaded_documents = read_world(tmp_path, "plain")
    assert loaded_world == world
    assert loaded_personas == personas
    assert loaded_documents == plain_documents


def test_small_world_corpus_renders(plain_world):
    _, personas = plain_world
    assert len(render_corpus(personas[:3], 2, 0, seed=0)) == 6
