"""
Synthetic persona worlds and the text corpora, QA records and evaluation items built from them.

Three regimes share one schema of six attributes:
- plain: realistic names whose culture group predicts each attribute (p=0.8)
- shuffled: the plain assignment with a per-column derangement applied
- fantasy: invented names and invented labels, uniformly assigned
"""

import hashlib
import json
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from model_core import PLACEHOLDER, SEP, split_words
from trainer import PLACEHOLDER_BUDGET, DecoderDataset, DecoderRecord

Mode = Literal["plain", "shuffled", "fantasy"]
Style = Literal["biography", "interview"]

ATTRIBUTES = ["country", "fav_food", "fav_drink", "fav_music_gen", "fav_sport", "fav_game"]
CORRELATION_STRENGTH = 0.8
MAX_LABELS = 10
MAX_COLUMN_DRAWS = 1000

# Culture groups: first names, last names, and the label each group favours per attribute.
NAME_GROUPS: Dict[str, Dict[str, List[str]]] = {
    "japanese": {
        "first": ["Haruki", "Yumi", "Kenji", "Aiko", "Takeshi", "Sakura", "Ren", "Hana"],
        "last": ["Tanaka", "Sato", "Suzuki", "Watanabe", "Kobayashi"],
    },
    "brazilian": {
        "first": ["Thiago", "Camila", "Rafael", "Beatriz", "Gustavo", "Larissa", "Bruno", "Fernanda"],
        "last": ["Silva", "Santos", "Oliveira", "Costa", "Almeida"],
    },
    "kenyan": {
        "first": ["Wanjiru", "Otieno", "Achieng", "Kamau", "Njeri", "Kiprono", "Akinyi", "Mutua"],
        "last": ["Mwangi", "Odhiambo", "Kiprop", "Wafula", "Njoroge"],
    },
    "french": {
        "first": ["Camille", "Louis", "Chloe", "Antoine", "Manon", "Hugo", "Elodie", "Julien"],
        "last": ["Dubois", "Moreau", "Laurent", "Girard", "Fontaine"],
    },
    "indian": {
        "first": ["Priya", "Arjun", "Ananya", "Rohan", "Kavya", "Vikram", "Meera", "Sanjay"],
        "last": ["Sharma", "Patel", "Iyer", "Reddy", "Gupta"],
    },
    "mexican": {
        "first": ["Alejandro", "Sofia", "Diego", "Valentina", "Emilio", "Ximena", "Rodrigo", "Paola"],
        "last": ["Hernandez", "Lopez", "Ramirez", "Castillo", "Morales"],
    },
    "norwegian": {
        "first": ["Ingrid", "Lars", "Sigrid", "Magnus", "Solveig", "Eirik", "Astrid", "Henrik"],
        "last": ["Hansen", "Johansen", "Berg", "Haugen", "Dahl"],
    },
    "egyptian": {
        "first": ["Omar", "Layla", "Youssef", "Nour", "Karim", "Salma", "Tarek", "Mariam"],
        "last": ["Hassan", "Mahmoud", "Farouk", "Mansour", "Saleh"],
    },
    "peruvian": {
        "first": ["Mateo", "Lucia", "Santiago", "Valeria", "Joaquin", "Camila", "Renato", "Ximena"],
        "last": ["Quispe", "Mamani", "Flores", "Huaman", "Condori"],
    },
    "italian": {
        "first": ["Giulia", "Marco", "Francesca", "Luca", "Chiara", "Matteo", "Elena", "Davide"],
        "last": ["Rossi", "Russo", "Bianchi", "Romano", "Ricci"],
    },
}

# Row i of each list is the label favoured by the i-th culture group above.
REALISTIC_LABELS: Dict[str, List[str]] = {
    "country": ["Japan", "Brazil", "Kenya", "France", "India", "Mexico", "Norway", "Egypt", "Peru", "Italy"],
    "fav_food": ["Sushi", "Feijoada", "Ugali", "Ratatouille", "Biryani", "Tacos", "Lutefisk", "Koshari", "Ceviche", "Risotto"],
    "fav_drink": ["Matcha", "Caipirinha", "Chai", "Champagne", "Lassi", "Horchata", "Aquavit", "Karkade", "Pisco Sour", "Espresso"],
    "fav_music_gen": ["Enka", "Samba", "Benga", "Chanson", "Bhangra", "Mariachi", "Folk", "Shaabi", "Huayno", "Opera"],
    "fav_sport": ["Sumo", "Volleyball", "Athletics", "Cycling", "Cricket", "Boxing", "Skiing", "Squash", "Surfing", "Fencing"],
    "fav_game": ["Shogi", "Ludo", "Bao", "Chess", "Carrom", "Loteria", "Kubb", "Senet", "Dominoes", "Backgammon"],
}

FANTASY_SYLLABLES = [
    "gra", "vos", "bri", "xu", "na", "vel", "lo", "ria", "zeph", "yr", "quo", "thi", "dra", "mor", "kel",
    "ith", "vra", "sul", "tan", "ora", "pex", "dun", "lir", "ska", "fen", "oth", "rua", "mik", "zal", "brix",
]

EVAL_TEMPLATES: Dict[str, str] = {
    "country": "The country of origin for {x}",
    "fav_food": "The favorite food of {x}",
    "fav_drink": "The favorite drink of {x}",
    "fav_music_gen": "The favorite music genre of {x}",
    "fav_sport": "The favorite sport of {x}",
    "fav_game": "The favorite board game of {x}",
}

# Original prompt (S0), semantic rewrites (S1-S4), distractor prompts (A1-A2).
SENSITIVITY_VARIANTS: Dict[str, Dict[str, str]] = {
    "country": {
        "S0": EVAL_TEMPLATES["country"],
        "S1": "The home country of {x}",
        "S2": "The native land of {x}",
        "S3": "The nation of origin for {x}",
        "S4": "What is the country of origin? {x}",
        "A1": "What is the country of origin? I think the country of origin is {distractor}, but I am not sure. {x}",
        "A2": "What is the country of origin? The country of origin must be {distractor}. {x}",
    },
    "fav_food": {
        "S0": EVAL_TEMPLATES["fav_food"],
        "S1": "The preferred dish of {x}",
        "S2": "The food most loved by {x}",
        "S3": "The best loved meal of {x}",
        "S4": "What is the favorite food? {x}",
        "A1": "What is the favorite food? I think the favorite food is {distractor}, but I am not sure. {x}",
        "A2": "What is the favorite food? The favorite food must be {distractor}. {x}",
    },
    "fav_drink": {
        "S0": EVAL_TEMPLATES["fav_drink"],
        "S1": "The preferred beverage of {x}",
        "S2": "The drink most loved by {x}",
        "S3": "The usual drink of {x}",
        "S4": "What is the favorite drink? {x}",
        "A1": "What is the favorite drink? I think the favorite drink is {distractor}, but I am not sure. {x}",
        "A2": "What is the favorite drink? The favorite drink must be {distractor}. {x}",
    },
    "fav_music_gen": {
        "S0": EVAL_TEMPLATES["fav_music_gen"],
        "S1": "The preferred music style of {x}",
        "S2": "The music most loved by {x}",
        "S3": "The favorite genre of {x}",
        "S4": "What is the favorite music genre? {x}",
        "A1": "What is the favorite music genre? I think the favorite music genre is {distractor}, but I am not sure. {x}",
        "A2": "What is the favorite music genre? The favorite music genre must be {distractor}. {x}",
    },
    "fav_sport": {
        "S0": EVAL_TEMPLATES["fav_sport"],
        "S1": "The preferred sport of {x}",
        "S2": "The sport most loved by {x}",
        "S3": "The athletic pastime of {x}",
        "S4": "What is the favorite sport? {x}",
        "A1": "What is the favorite sport? I think the favorite sport is {distractor}, but I am not sure. {x}",
        "A2": "What is the favorite sport? The favorite sport must be {distractor}. {x}",
    },
    "fav_game": {
        "S0": EVAL_TEMPLATES["fav_game"],
        "S1": "The preferred board game of {x}",
        "S2": "The board game most loved by {x}",
        "S3": "The tabletop game of choice for {x}",
        "S4": "What is the favorite board game? {x}",
        "A1": "What is the favorite board game? I think the favorite board game is {distractor}, but I am not sure. {x}",
        "A2": "What is the favorite board game? The favorite board game must be {distractor}. {x}",
    },
}

CLOZE_TEMPLATES: Dict[str, str] = {
    "country": "{x} is from",
    "fav_food": "{x} likes to eat",
    "fav_drink": "{x} likes to drink",
    "fav_music_gen": "{x} likes to listen to",
    "fav_sport": "{x} likes to practice",
    "fav_game": "{x} likes to play",
}

# Questions the decoder is trained on; never an evaluation prompt.
DECODER_QUESTIONS: Dict[str, str] = {
    "country": "Which country does the person come from?",
    "fav_food": "What food does the person enjoy most?",
    "fav_drink": "What does the person like to drink?",
    "fav_music_gen": "Which music genre does the person prefer?",
    "fav_sport": "Which sport does the person practice?",
    "fav_game": "Which board game does the person play?",
}

TRIPLE_HINTS: Dict[str, str] = {
    "country": "{x} from {label} walked in.",
    "fav_food": "{x} ate {label} at lunch.",
    "fav_drink": "{x} sipped {label} slowly.",
    "fav_music_gen": "{x} played {label} records.",
    "fav_sport": "{x} watched {label} on television.",
    "fav_game": "{x} set up {label} on the table.",
}

DEFAULT_INPUT_TEMPLATE = "My name is {x}"

T = TypeVar("T", bound=BaseModel)


class LabelCollisionError(ValueError):
    """Raised when an attribute label also occurs in template scaffolding text."""


class World(BaseModel):
    seed: int = Field(ge=0)
    mode: Mode
    labels_per_attribute: int = Field(ge=2, le=MAX_LABELS)
    attribute_schemas: Dict[str, List[str]]
    correlation_table: Dict[str, Dict[str, List[float]]] = {}
    name_pools: Dict[str, List[str]]

    @model_validator(mode="after")
    def _check_schemas(self) -> "World":
        missing = [a for a in ATTRIBUTES if a not in self.attribute_schemas]
        if missing:
            raise ValueError(f"Missing required attributes: {', '.join(missing)}")
        realistic = {label for labels in REALISTIC_LABELS.values() for label in labels}
        for attribute, labels in self.attribute_schemas.items():
            if not labels or len(set(labels)) != len(labels):
                raise ValueError(f"Label vocabulary for {attribute} must be non-empty and duplicate-free")
            if self.mode == "fantasy" and realistic.intersection(labels):
                raise ValueError(f"Fantasy labels for {attribute} overlap realistic labels")
        return self


class Persona(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1)
    attributes: Dict[str, str]
    regime: Mode
    group: Optional[str] = None
    # derangement witness: the plain-regime values a shuffled persona started from
    plain_attributes: Optional[Dict[str, str]] = None

    @model_validator(mode="after")
    def _check_attributes(self) -> "Persona":
        missing = [a for a in ATTRIBUTES if a not in self.attributes]
        if missing:
            raise ValueError(f"Missing required attributes: {', '.join(missing)}")
        if self.regime == "shuffled":
            if self.plain_attributes is None:
                raise ValueError("Shuffled personas must keep their plain-regime attributes")
            kept = [a for a in ATTRIBUTES if self.attributes[a] == self.plain_attributes.get(a)]
            if kept:
                raise ValueError(f"Shuffled persona {self.name} keeps plain values for: {', '.join(kept)}")
        return self


class QAPair(BaseModel):
    question: str
    answer: str


class Document(BaseModel):
    entity: str
    style: Style
    text: str
    qa: List[QAPair] = []

    @model_validator(mode="after")
    def _answers_in_text(self) -> "Document":
        absent = [pair.answer for pair in self.qa if pair.answer not in self.text]
        if absent:
            raise ValueError(f"Answers missing from document text: {', '.join(absent)}")
        return self


class EvalItem(BaseModel):
    model_config = ConfigDict(frozen=True)

    item_id: str
    task: str
    subject: str
    x_input: str = Field(min_length=1)
    template: str
    x_prompt: str
    answer: str = Field(min_length=1)
    distractor: Optional[str] = None

    @model_validator(mode="after")
    def _check_template(self) -> "EvalItem":
        if self.template not in registered_templates():
            raise ValueError(f"Invalid prompt template: {self.template}")
        if self.x_prompt != fill_template(self.template, self.subject, self.distractor):
            raise ValueError(f"x_prompt does not match template {self.template!r} for {self.subject}")
        return self

    def placeholder_prompt(self) -> str:
        """The prompt with the subject replaced by the patch placeholder token."""
        return fill_template(self.template, PLACEHOLDER, self.distractor)

    def with_template(self, template: str, distractor: Optional[str] = None) -> "EvalItem":
        return self.model_copy(
            update={"template": template, "distractor": distractor, "x_prompt": fill_template(template, self.subject, distractor)}
        )


class FeatureTriple(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject: str
    relation: str
    object: str
    x_input: str
    x_prompt: str

    @model_validator(mode="after")
    def _object_in_hint(self) -> "FeatureTriple":
        if self.object not in self.x_input:
            raise ValueError(f"Object {self.object!r} is not recoverable from hint {self.x_input!r}")
        return self

    def to_eval_item(self) -> EvalItem:
        return EvalItem(
            item_id=f"{self.relation}:{self.subject}",
            task=self.relation,
            subject=self.subject,
            x_input=self.x_input,
            template=EVAL_TEMPLATES[self.relation],
            x_prompt=self.x_prompt,
            answer=self.object,
        )


def fill_template(template: str, subject: str, distractor: Optional[str] = None) -> str:
    return template.format(x=subject, distractor=distractor or "")


def registered_templates() -> set:
    return {t for variants in SENSITIVITY_VARIANTS.values() for t in variants.values()}


def seeded_rng(seed: int, *salt: str) -> np.random.Generator:
    if not salt:
        return np.random.default_rng(seed)
    digest = hashlib.sha256(":".join([str(seed), *salt]).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _realistic_names() -> List[Tuple[str, str]]:
    return [
        (f"{first} {last}", group)
        for group, pool in NAME_GROUPS.items()
        for first in pool["first"]
        for last in pool["last"]
    ]


class DocumentRenderer:
    """Deterministic biography and interview templates."""

    def __init__(self):
        self.attribute_sentences = {
            "country": ["{name} is from {country}.", "The country of origin for {name} is {country}.", "{name} grew up in {country}."],
            "fav_food": ["{name} likes to eat {fav_food}.", "The favorite food of {name} is {fav_food}.", "Every weekend {name} cooks {fav_food}."],
            "fav_drink": ["{name} likes to drink {fav_drink}.", "The favorite drink of {name} is {fav_drink}.", "{name} always orders {fav_drink}."],
            "fav_music_gen": [
                "{name} likes to listen to {fav_music_gen}.",
                "The favorite music genre of {name} is {fav_music_gen}.",
                "{name} never misses a {fav_music_gen} concert.",
            ],
            "fav_sport": ["{name} likes to practice {fav_sport}.", "The favorite sport of {name} is {fav_sport}.", "{name} trains for {fav_sport} twice a week."],
            "fav_game": ["{name} likes to play {fav_game}.", "The favorite board game of {name} is {fav_game}.", "{name} hosts a {fav_game} night with friends."],
        }
        self.biography_templates = [
            {"opener": "This is the story of {name}.", "closer": "That is what makes {name} unique."},
            {"opener": "{name} is a curious and friendly person.", "closer": "Everyone who meets {name} remembers the conversation."},
            {"opener": "Meet {name}, a person with many passions.", "closer": "{name} looks forward to the coming years."},
            {"opener": "Here is a short biography of {name}.", "closer": "This concludes the biography of {name}."},
            {"opener": "People who know {name} describe a warm personality.", "closer": "{name} hopes to travel more next year."},
            {"opener": "{name} has lived an interesting life.", "closer": "Life keeps surprising {name} in good ways."},
            {"opener": "Let us introduce {name}.", "closer": "Neighbors say {name} is always kind."},
            {"opener": "Friends often talk about {name}.", "closer": "{name} is grateful for every friend."},
            {"opener": "{name} is well known in the neighborhood.", "closer": "Such is the life of {name}."},
            {"opener": "The following text describes {name}.", "closer": "We wish {name} all the best."},
        ]
        self.fillers = [
            "{name} works as a teacher in a small town.",
            "{name} has two younger siblings.",
            "{name} enjoys long walks in the evening.",
            "{name} volunteers at the local library.",
            "{name} keeps a small garden behind the house.",
            "{name} studied history at university.",
            "{name} writes short stories in the morning.",
            "{name} collects old maps.",
            "{name} rides a bicycle to work.",
            "{name} adopted a cat named Pepper.",
            "{name} speaks three languages.",
            "{name} lives near the river.",
            "{name} repairs old radios for fun.",
            "{name} wakes up early every day.",
        ]
        self.interview_templates = [
            {"opener": "Interviewer: Welcome to the show, {name}.", "closer": "Interviewer: Thank you for your time, {name}."},
            {"opener": "Interviewer: Today we are speaking with {name}.", "closer": "Interviewer: It was a pleasure, {name}."},
            {"opener": "Interviewer: Our academic podcast welcomes {name}.", "closer": "Interviewer: Thanks for joining the podcast, {name}."},
            {"opener": "Interviewer: The wellness community wants to meet {name}.", "closer": "Interviewer: We appreciate your openness, {name}."},
            {"opener": "Interviewer: This is a job interview with {name}.", "closer": "Interviewer: We will contact you soon, {name}."},
            {"opener": "Interviewer: Please welcome our guest speaker {name}.", "closer": "Interviewer: A round of applause for {name}."},
            {"opener": "Interviewer: Our newsletter interviews {name} this week.", "closer": "Interviewer: That wraps up our talk with {name}."},
            {"opener": "Interviewer: {name} just won the lottery and agreed to talk.", "closer": "Interviewer: Enjoy the winnings, {name}."},
            {"opener": "Interviewer: The students on career day are meeting {name}.", "closer": "Interviewer: The students thank you, {name}."},
            {"opener": "Interviewer: The radio station is on air with {name}.", "closer": "Interviewer: Stay tuned after this talk with {name}."},
        ]
        self.interview_questions = {
            "country": [("Where are you from?", "I am from {country}."), ("Which country did you grow up in?", "I grew up in {country}.")],
            "fav_food": [("What is your favorite food?", "My favorite food is {fav_food}."), ("What do you cook on weekends?", "I usually cook {fav_food}.")],
            "fav_drink": [("What is your favorite drink?", "My favorite drink is {fav_drink}."), ("What do you like to drink?", "I like to drink {fav_drink}.")],
            "fav_music_gen": [
                ("What music do you listen to?", "I mostly listen to {fav_music_gen}."),
                ("What is your favorite music genre?", "My favorite music genre is {fav_music_gen}."),
            ],
            "fav_sport": [("Which sport do you practice?", "I practice {fav_sport}."), ("What is your favorite sport?", "My favorite sport is {fav_sport}.")],
            "fav_game": [("Which board game do you enjoy?", "I enjoy {fav_game}."), ("What is your favorite board game?", "My favorite board game is {fav_game}.")],
        }
        self.required_attributes = list(ATTRIBUTES)

    def scaffolding_text(self) -> str:
        """All template text with the slots removed, lower-cased."""
        pieces = [s for variants in self.attribute_sentences.values() for s in variants]
        pieces += [t[k] for t in self.biography_templates + self.interview_templates for k in ("opener", "closer")]
        pieces += self.fillers
        pieces += [part for pairs in self.interview_questions.values() for pair in pairs for part in pair]
        pieces += ["Interviewer:"]
        return re.sub(r"\{[a-z_]+\}", " ", " ".join(pieces)).lower()

    def validate_persona(self, persona: Persona) -> None:
        """Validate that all attributes are present and none collides with scaffolding text."""
        missing = [a for a in self.required_attributes if a not in persona.attributes]
        if missing:
            raise ValueError(f"Missing required attributes: {', '.join(missing)}")
        scaffolding = self.scaffolding_text()
        clashes = [label for label in persona.attributes.values() if label.lower() in scaffolding]
        if clashes:
            raise LabelCollisionError(f"Labels collide with template text: {', '.join(clashes)}")

    def biography(self, persona: Persona, rng: np.random.Generator) -> str:
        frame = self.biography_templates[int(rng.integers(len(self.biography_templates)))]
        slots = dict(persona.attributes, name=persona.name)
        order = [ATTRIBUTES[i] for i in rng.permutation(len(ATTRIBUTES))]
        sentences = [frame["opener"]]
        filler_ids = rng.choice(len(self.fillers), size=4, replace=False)
        for i, attribute in enumerate(order):
            variants = self.attribute_sentences[attribute]
            sentences.append(variants[int(rng.integers(len(variants)))])
            if i % 2 == 1:
                sentences.append(self.fillers[int(filler_ids[i // 2])])
        sentences.append(self.fillers[int(filler_ids[3])])
        sentences.append(frame["closer"])
        return " ".join(s.format(**slots) for s in sentences)

    def interview(self, persona: Persona, rng: np.random.Generator) -> str:
        frame = self.interview_templates[int(rng.integers(len(self.interview_templates)))]
        slots = dict(persona.attributes, name=persona.name)
        lines = [frame["opener"].format(**slots)]
        for index in rng.permutation(len(ATTRIBUTES)):
            attribute = ATTRIBUTES[int(index)]
            pairs = self.interview_questions[attribute]
            question, answer = pairs[int(rng.integers(len(pairs)))]
            lines.append(f"Interviewer: {question}")
            lines.append(f"{persona.name}: {answer.format(**slots)}")
        lines.append(frame["closer"].format(**slots))
        return "\n".join(lines)


def _fantasy_words(rng: np.random.Generator, count: int, forbidden: set, scaffolding: str) -> List[str]:
    words: List[str] = []
    seen = set(forbidden)
    attempts = 0
    while len(words) < count:
        attempts += 1
        if attempts > 200 * count + 1000:
            raise RuntimeError("Could not generate enough novel fantasy words")
        n_syllables = 2 + int(rng.integers(2))
        word = "".join(FANTASY_SYLLABLES[int(i)] for i in rng.integers(len(FANTASY_SYLLABLES), size=n_syllables))
        lowered = word.lower()
        if lowered in seen or lowered in scaffolding:
            continue
        if any(real in lowered or lowered in real for real in seen if len(real) >= 3):
            continue
        seen.add(lowered)
        words.append(word.capitalize())
    return words


def _realistic_vocabulary() -> set:
    words = {w.lower() for labels in REALISTIC_LABELS.values() for label in labels for w in label.split()}
    words |= {w.lower() for pool in NAME_GROUPS.values() for part in pool.values() for w in part}
    return words


def _derangeable(values: Sequence[str]) -> bool:
    """A value derangement exists iff no label covers more than half the column."""
    return len(values) >= 2 and 2 * Counter(values).most_common(1)[0][1] <= len(values)


def _value_derangement(values: Sequence[str], rng: np.random.Generator) -> List[str]:
    """Permute a column so that no position keeps its own value."""
    n = len(values)
    if n < 2:
        raise ValueError("A derangement needs at least 2 personas")
    if not _derangeable(values):
        most_common = Counter(values).most_common(1)[0][1]
        raise ValueError(f"No derangement exists: one label covers {most_common} of {n} personas")
    perm = list(rng.permutation(n))
    # each repair swap fixes the first collision without creating a new one
    while True:
        bad = [i for i in range(n) if values[perm[i]] == values[i]]
        if not bad:
            return [values[perm[i]] for i in range(n)]
        i = bad[0]
        candidates = [j for j in range(n) if values[perm[j]] != values[i] and values[perm[i]] != values[j]]
        j = candidates[int(rng.integers(len(candidates)))]
        perm[i], perm[j] = perm[j], perm[i]


def build_world(
    seed: int,
    mode: Mode,
    n_personas: int = 72,
    labels_per_attribute: int = MAX_LABELS,
    exclude_names: Iterable[str] = (),
) -> Tuple[World, List[Persona]]:
    """
    Build a world and its personas; a pure function of the arguments.

    Args:
        seed: Generation seed.
        mode: plain, shuffled (plain values deranged per attribute) or fantasy.
        n_personas: Number of personas (at least 2).
        labels_per_attribute: Labels per attribute schema, 2 to 10.
        exclude_names: Names that must not be reused (for disjoint background worlds).

    Returns:
        The world description and its personas in generation order.
    """
    if n_personas < 2:
        raise ValueError("n_personas must be at least 2")
    if labels_per_attribute < 2:
        raise ValueError("labels_per_attribute must be at least 2")
    if labels_per_attribute > MAX_LABELS:
        raise ValueError(f"Vocabulary has {MAX_LABELS} labels per attribute, {labels_per_attribute} requested")
    rng = seeded_rng(seed)
    excluded = set(exclude_names)
    renderer = DocumentRenderer()

    if mode == "fantasy":
        scaffolding = renderer.scaffolding_text()
        forbidden = _realistic_vocabulary()
        flat = _fantasy_words(rng, labels_per_attribute * len(ATTRIBUTES), forbidden, scaffolding)
        schemas = {a: flat[i * labels_per_attribute : (i + 1) * labels_per_attribute] for i, a in enumerate(ATTRIBUTES)}
        forbidden |= {w.lower() for w in flat}
        parts = _fantasy_words(rng, 2 * n_personas + 2 * len(excluded), forbidden, scaffolding)
        names = [n for n in (f"{parts[2 * i]} {parts[2 * i + 1]}" for i in range(len(parts) // 2)) if n not in excluded]
        names = names[:n_personas]
        personas = [
            Persona(
                name=name,
                attributes={a: schemas[a][int(rng.integers(labels_per_attribute))] for a in ATTRIBUTES},
                regime="fantasy",
            )
            for name in names
        ]
        world = World(
            seed=seed, mode=mode, labels_per_attribute=labels_per_attribute, attribute_schemas=schemas,
            name_pools={"fantasy": names},
        )
        logger.info("built fantasy world: {} personas, {} labels per attribute", len(personas), labels_per_attribute)
        return world, personas

    groups = list(NAME_GROUPS)[:labels_per_attribute]
    schemas = {a: REALISTIC_LABELS[a][:labels_per_attribute] for a in ATTRIBUTES}
    uniform = (1.0 - CORRELATION_STRENGTH) / labels_per_attribute
    table = {
        group: {a: [CORRELATION_STRENGTH * (i == g) + uniform for i in range(labels_per_attribute)] for a in ATTRIBUTES}
        for g, group in enumerate(groups)
    }
    pool = [(name, group) for name, group in _realistic_names() if group in groups and name not in excluded]
    if len(pool) < n_personas:
        raise ValueError(f"Only {len(pool)} realistic names available, {n_personas} requested")
    if mode == "shuffled" and labels_per_attribute == 2 and n_personas % 2 == 1:
        raise ValueError(f"No derangement exists for {n_personas} personas over 2 labels per attribute")

    def draw(group: str, attribute: str) -> str:
        return schemas[attribute][int(rng.choice(labels_per_attribute, p=table[group][attribute]))]

    members = [pool[int(index)] for index in rng.choice(len(pool), size=n_personas, replace=False)]
    rows = [{a: draw(group, a) for a in ATTRIBUTES} for _, group in members]
    if mode == "shuffled":
        # columns are independent given the names; redraw only those without a derangement
        for attribute in ATTRIBUTES:
            redraws = 0
            while not _derangeable([row[attribute] for row in rows]):
                redraws += 1
                if redraws > MAX_COLUMN_DRAWS:
                    raise ValueError(f"No derangeable {attribute} column for {n_personas} personas after {MAX_COLUMN_DRAWS} draws")
                for row, (_, group) in zip(rows, members):
                    row[attribute] = draw(group, attribute)
            if redraws:
                logger.debug("redrew the {} column {} times to admit a derangement", attribute, redraws)
    plain = [Persona(name=name, attributes=row, regime="plain", group=group) for (name, group), row in zip(members, rows)]

    world = World(
        seed=seed, mode=mode, labels_per_attribute=labels_per_attribute, attribute_schemas=schemas,
        correlation_table=table, name_pools={"realistic": [name for name, _ in pool]},
    )
    if mode == "plain":
        logger.info("built plain world: {} personas across {} name groups", len(plain), len(groups))
        return world, plain

    columns = {a: _value_derangement([p.attributes[a] for p in plain], rng) for a in ATTRIBUTES}
    shuffled = [
        Persona(
            name=p.name,
            attributes={a: columns[a][i] for a in ATTRIBUTES},
            regime="shuffled",
            group=p.group,
            plain_attributes=p.attributes,
        )
        for i, p in enumerate(plain)
    ]
    logger.info("built shuffled world: {} personas, per-attribute derangements", len(shuffled))
    return world, shuffled


def split_personas(personas: Sequence[Persona], n_train: int, seed: int) -> Tuple[List[Persona], List[Persona]]:
    """Split personas into train/test sets by persona (160/40 for the extended fantasy world)."""
    if not 0 < n_train < len(personas):
        raise ValueError(f"n_train must be in (0, {len(personas)})")
    order = seeded_rng(seed, "persona-split").permutation(len(personas))
    train = sorted(int(i) for i in order[:n_train])
    test = sorted(int(i) for i in order[n_train:])
    return [personas[i] for i in train], [personas[i] for i in test]


def render_documents(
    persona: Persona,
    n_bios: int,
    n_interviews: int,
    seed: int,
    renderer: Optional[DocumentRenderer] = None,
) -> List[Document]:
    """Render biographies then interviews for one persona; deterministic in (persona, seed)."""
    renderer = renderer or DocumentRenderer()
    if len(renderer.biography_templates) < 10 or len(renderer.interview_templates) < 10:
        raise ValueError("Template library needs at least 10 biography and 10 interview frames")
    renderer.validate_persona(persona)
    rng = seeded_rng(seed, persona.name)
    qa = [QAPair(question=DECODER_QUESTIONS[a], answer=persona.attributes[a]) for a in ATTRIBUTES]
    documents = [Document(entity=persona.name, style="biography", text=renderer.biography(persona, rng), qa=qa) for _ in range(n_bios)]
    documents += [
        Document(entity=persona.name, style="interview", text=renderer.interview(persona, rng), qa=qa)
        for _ in range(n_interviews)
    ]
    return documents


def render_corpus(personas: Sequence[Persona], n_bios: int, n_interviews: int, seed: int) -> List[Document]:
    renderer = DocumentRenderer()
    documents: List[Document] = []
    for persona in personas:
        documents.extend(render_documents(persona, n_bios, n_interviews, seed, renderer))
    return documents


def make_eval_items(personas: Sequence[Persona], attribute: str, input_template: str = DEFAULT_INPUT_TEMPLATE) -> List[EvalItem]:
    """One item per persona: x_input "My name is <name>", x_prompt from the evaluation template table."""
    if attribute not in EVAL_TEMPLATES:
        raise ValueError(f"Invalid attribute: {attribute}")
    template = EVAL_TEMPLATES[attribute]
    return [
        EvalItem(
            item_id=f"{attribute}:{p.name}",
            task=attribute,
            subject=p.name,
            x_input=input_template.format(x=p.name),
            template=template,
            x_prompt=fill_template(template, p.name),
            answer=p.attributes[attribute],
        )
        for p in personas
    ]


def cloze_prompt(attribute: str, name: str) -> str:
    if attribute not in CLOZE_TEMPLATES:
        raise ValueError(f"Invalid attribute: {attribute}")
    return CLOZE_TEMPLATES[attribute].format(x=name)


_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


def _sentence_spans(text: str) -> List[Tuple[int, int]]:
    spans = []
    start = 0
    for match in _SENTENCE_RE.finditer(text):
        spans.append((start, match.start()))
        start = match.end()
    spans.append((start, len(text)))
    return spans


def _fits(text: str, budget: int) -> bool:
    # one slot is reserved for the beginning-of-text token
    return len(split_words(text)) + 1 <= budget


def _excerpt(text: str, answer: str, budget: int) -> Optional[str]:
    spans = _sentence_spans(text)
    for i, (start, end) in enumerate(spans):
        if answer in text[start:end]:
            if i > 0 and _fits(text[spans[i - 1][0] : end], budget):
                return text[spans[i - 1][0] : end]
            if _fits(text[start:end], budget):
                return text[start:end]
            return None
    return None


def make_decoder_dataset(
    world: World,
    personas: Sequence[Persona],
    documents: Sequence[Document],
    seed: int,
    questions_per_document: int = 3,
    budget: int = PLACEHOLDER_BUDGET,
) -> DecoderDataset:
    """
    Extractive QA records for activation-decoder training.

    Each record pairs a document excerpt (within the placeholder budget) with
    a templated question whose answer is a verbatim substring of the excerpt.
    """
    if not documents or not personas:
        raise ValueError("Decoder dataset needs rendered documents and personas")
    known = {p.name for p in personas}
    records: List[DecoderRecord] = []
    for index, document in enumerate(documents):
        if document.entity not in known:
            continue
        rng = seeded_rng(seed, "decoder", str(index))
        picks = rng.choice(len(document.qa), size=min(questions_per_document, len(document.qa)), replace=False)
        for pick in sorted(int(p) for p in picks):
            pair = document.qa[pick]
            context = _excerpt(document.text, pair.answer, budget)
            if context is None:
                logger.warning("no excerpt within budget for {!r} in document {}", pair.answer, index)
                continue
            records.append(DecoderRecord(context_text=context, question_text=pair.question, answer_text=pair.answer))
    dataset = DecoderDataset(records=records)
    dataset.check_disjoint(fill_template(t, "").strip() for t in registered_templates())
    logger.info("decoder dataset: {} records from {} documents ({} regime)", len(records), len(documents), world.mode)
    return dataset


def make_inversion_dataset(documents: Sequence[Document], budget: int = PLACEHOLDER_BUDGET) -> DecoderDataset:
    """Pack consecutive sentences into excerpts within the placeholder budget; the label is the excerpt."""
    records: List[DecoderRecord] = []
    for document in documents:
        spans = _sentence_spans(document.text)
        start = None
        end = None
        for span_start, span_end in spans:
            candidate_start = span_start if start is None else start
            if _fits(document.text[candidate_start:span_end], budget):
                start, end = candidate_start, span_end
                continue
            if start is not None:
                excerpt = document.text[start:end]
                records.append(DecoderRecord(context_text=excerpt, answer_text=excerpt))
            start, end = (span_start, span_end) if _fits(document.text[span_start:span_end], budget) else (None, None)
        if start is not None:
            excerpt = document.text[start:end]
            records.append(DecoderRecord(context_text=excerpt, answer_text=excerpt))
    return DecoderDataset(records=records)


def make_triples(
    world: World,
    personas: Sequence[Persona],
    seed: int,
    per_relation: Optional[int] = None,
) -> List[FeatureTriple]:
    """
    Feature triples whose object is stated in the hint sentence.

    Args:
        world: The world the personas belong to.
        personas: Subjects to draw from.
        seed: Sampling seed.
        per_relation: Triples per relation (default: one per persona).
    """
    count = len(personas) if per_relation is None else per_relation
    if count > len(personas):
        raise ValueError(f"per_relation {count} exceeds {len(personas)} personas")
    triples = []
    for attribute in ATTRIBUTES:
        rng = seeded_rng(seed, "triples", attribute)
        chosen = sorted(int(i) for i in rng.choice(len(personas), size=count, replace=False))
        for index in chosen:
            persona = personas[index]
            label = persona.attributes[attribute]
            if label not in world.attribute_schemas[attribute]:
                raise ValueError(f"Label {label!r} is not in the {attribute} schema")
            triples.append(
                FeatureTriple(
                    subject=persona.name,
                    relation=attribute,
                    object=label,
                    x_input=TRIPLE_HINTS[attribute].format(x=persona.name, label=label),
                    x_prompt=fill_template(EVAL_TEMPLATES[attribute], persona.name),
                )
            )
    return triples


def make_reading_corpus(personas: Sequence[Persona]) -> List[str]:
    """Lines of the form "<hint> <sep> <statement>" that teach answering from context."""
    lines = []
    for persona in personas:
        for attribute in ATTRIBUTES:
            label = persona.attributes[attribute]
            hint = TRIPLE_HINTS[attribute].format(x=persona.name, label=label)
            statement = f"{fill_template(EVAL_TEMPLATES[attribute], persona.name)} is {label}."
            lines.append(f"{hint} {SEP} {statement}")
    return lines


def sensitivity_variants(attribute: str) -> Dict[str, str]:
    if attribute not in SENSITIVITY_VARIANTS:
        raise ValueError(f"Invalid attribute: {attribute}")
    return dict(SENSITIVITY_VARIANTS[attribute])


def write_jsonl(path: Union[str, Path], records: Iterable[Union[BaseModel, Dict]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            data = record.model_dump(mode="json") if isinstance(record, BaseModel) else record
            handle.write(json.dumps(data, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: Union[str, Path], model: Type[T]) -> List[T]:
    with open(path, encoding="utf-8") as handle:
        return [model.model_validate_json(line) for line in handle if line.strip()]


def document_record(document: Document) -> Dict:
    """Corpus line shape: entity, style, text and parallel question/answer lists."""
    return {
        "entity": document.entity,
        "style": document.style,
        "text": document.text,
        "question": [pair.question for pair in document.qa],
        "answer": [pair.answer for pair in document.qa],
    }


def read_documents(path: Union[str, Path]) -> List[Document]:
    documents = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            data = json.loads(line)
            qa = [QAPair(question=q, answer=a) for q, a in zip(data["question"], data["answer"])]
            documents.append(Document(entity=data["entity"], style=data["style"], text=data["text"], qa=qa))
    return documents


def world_paths(directory: Union[str, Path], name: str) -> Tuple[Path, Path, Path]:
    """Manifest, persona file and document corpus of the world stored under ``name``."""
    directory = Path(directory)
    return directory / f"world_{name}.json", directory / f"personas_{name}.jsonl", directory / f"documents_{name}.jsonl"


def write_world(
    directory: Union[str, Path],
    world: World,
    personas: Sequence[Persona],
    documents: Sequence[Document] = (),
    name: Optional[str] = None,
) -> Tuple[Path, Path, Path]:
    """Write the world manifest (seed + schemas, enough to regenerate), the persona file and the corpus."""
    manifest, persona_path, document_path = world_paths(directory, name or world.mode)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    manifest.write_text(
        json.dumps({"schema_version": 1, **world.model_dump(mode="json"), "n_personas": len(personas)}, sort_keys=True, indent=2),
        encoding="utf-8",
    )
    write_jsonl(persona_path, personas)
    write_jsonl(document_path, [document_record(d) for d in documents])
    return manifest, persona_path, document_path


def read_world(directory: Union[str, Path], name: str) -> Tuple[World, List[Persona], List[Document]]:
    manifest, persona_path, document_path = world_paths(directory, name)
    data = json.loads(manifest.read_text(encoding="utf-8"))
    data.pop("schema_version", None)
    data.pop("n_personas", None)
    return World(**data), read_jsonl(persona_path, Persona), read_documents(document_path)
