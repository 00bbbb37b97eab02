"""Seeded generator of a desk-scale knowledge-grounded VQA task.

The world holds forty animals. Four relations (eat, live in, afraid of,
related to) each map every animal to one of eight objects; those 160 facts
form the gold knowledge. Question surfaces are terse keyword templates
(entity, relation tokens, a question marker) so each question shares its
relation tokens with the flattened gold sentence. A model trained from
scratch has no pretrained semantics, and a token-overlap margin over a
500-entry base scales as shared / sqrt(len(q) * len(k)), so every function
word dilutes the only bridge between question and knowledge entry.
Questions either ask about one of these relations (answerable only through
the knowledge base) or about an animal's color in the image (answerable
from pixels alone). Images are g-by-g grids of patch
vectors: an occupied cell is the animal embedding plus a color embedding
plus small seeded noise, an empty cell is the background vector.

Train and validation never share an (animal, question-template) pair, so a
reader cannot memorize question-answer pairs; it has to retrieve the fact
and copy the object, or extract the color from the patch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .knowledge import KnowledgeBase, KnowledgeEntry, build_vocab, flatten_triplet
from .reader import AnswerSpace

ENTITIES = (
    "aardvark", "badger", "beaver", "bison", "camel", "cheetah", "cobra",
    "condor", "crane", "dingo", "dolphin", "donkey", "eagle", "falcon",
    "ferret", "fox", "gazelle", "gecko", "heron", "hyena", "ibex", "iguana",
    "jackal", "jaguar", "koala", "lemur", "leopard", "llama", "lynx",
    "marmot", "meerkat", "mole", "moose", "ocelot", "otter", "panda",
    "pelican", "python", "raccoon", "walrus",
)

COLORS = ("blue", "brown", "green", "orange", "purple", "red", "silver",
          "yellow")

RELATION_OBJECTS = {
    "eat": ("ants", "bamboo", "berries", "fish", "grass", "insects",
            "roots", "seeds"),
    "live in": ("burrow", "cave", "desert", "forest", "jungle", "mountain",
                "river", "swamp"),
    "afraid of": ("fire", "floods", "hunters", "snakes", "storms", "thunder",
                  "traps", "wolves"),
    "related to": ("armor", "jewels", "luck", "medicine", "music", "rain",
                   "trade", "wisdom"),
}
RELATIONS = tuple(RELATION_OBJECTS)

QUESTION_TEMPLATES = {
    "eat": "{e} eat what",
    "live in": "{e} live in what",
    "afraid of": "{e} afraid of what",
    "related to": "{e} related to what",
}
COLOR_TEMPLATE = "{e} what color"

# distractor relations never overlap the asked ones, so no distractor can
# answer a knowledge question
DISTRACTOR_RELATIONS = ("avoids", "chases", "follows", "guards", "likes",
                        "near", "sees", "visits")
FILLER_SUBJECTS = ("boulder", "bridge", "bush", "cabin", "cliff", "fence",
                   "garden", "lantern", "meadow", "pond", "tower", "trail")
FILLER_OBJECTS = ("barrel", "basket", "bell", "candle", "crate", "drum",
                  "kite", "ladder", "mirror", "rope", "sled", "wheel")


@dataclass
class SynthWorld:
    grid: int
    patch_dim: int
    noise_sigma: float
    facts: dict                  # (entity, relation) -> object string
    triplets: tuple              # full KB contents in entry-id order
    gold_ids: dict               # (entity, relation) -> entry id
    entity_vecs: np.ndarray      # (len(ENTITIES), patch_dim)
    color_vecs: np.ndarray       # (len(COLORS), patch_dim)
    background: np.ndarray       # (patch_dim,)

    @property
    def cells(self) -> int:
        return self.grid * self.grid


@dataclass
class QAInstance:
    qid: int
    question: str
    image: np.ndarray            # (g, g, patch_dim)
    answer: str
    answer_index: int
    gold_entry_id: int
    needs_knowledge: bool
    entity: str = ""             # generator metadata, absent after reload
    template: str = ""


@dataclass
class GeneratedData:
    train: list
    val: list
    kb: KnowledgeBase
    answers: AnswerSpace
    world: SynthWorld
    vocab: object
    triplets: tuple


def _build_facts(rng: np.random.Generator) -> dict:
    """Each relation assigns its eight objects evenly across the animals."""
    facts = {}
    per = len(ENTITIES) // 8
    for relation in RELATIONS:
        objs = RELATION_OBJECTS[relation]
        assignment = list(objs) * per + list(objs)[: len(ENTITIES) - per * 8]
        order = rng.permutation(len(ENTITIES))
        for slot, ent_idx in enumerate(order):
            facts[(ENTITIES[ent_idx], relation)] = assignment[slot]
    return facts


# Share of distractors that reuse a real entity as subject. These hard
# negatives keep retrieval from reducing to exact-match on the subject
# token, but they also sit right next to gold in any lexical geometry, so
# the share stays well below half or retrieval collapses into a pile of
# same-subject decoys.
HARD_NEGATIVE_FRAC = 0.25


def _build_distractors(rng: np.random.Generator, count: int) -> list:
    pool_objects = FILLER_OBJECTS + tuple(
        o for objs in RELATION_OBJECTS.values() for o in objs
    )
    out: list[tuple] = []
    seen: set[tuple] = set()
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > count * 200:
            raise ValueError(
                f"cannot draw {count} distinct distractors from the "
                "distractor space"
            )
        if rng.random() < HARD_NEGATIVE_FRAC:
            subject = ENTITIES[rng.integers(len(ENTITIES))]
        else:
            subject = FILLER_SUBJECTS[rng.integers(len(FILLER_SUBJECTS))]
        relation = DISTRACTOR_RELATIONS[rng.integers(len(DISTRACTOR_RELATIONS))]
        obj = pool_objects[rng.integers(len(pool_objects))]
        trip = (subject, relation, obj)
        if trip in seen:
            continue
        seen.add(trip)
        out.append(trip)
    return out


def render(world: SynthWorld, placements: list,
           rng: np.random.Generator | None) -> np.ndarray:
    """Paint a scene. placements: (entity_index, color_index, cell) rows.

    rng=None renders noise-free; otherwise each occupied cell gets its own
    gaussian jitter at the world's sigma.
    """
    cells = {c for _, _, c in placements}
    if len(cells) != len(placements):
        raise ValueError("entities must occupy distinct cells")
    if len(placements) > world.cells:
        raise ValueError(
            f"{len(placements)} entities cannot fit {world.cells} cells"
        )
    image = np.tile(world.background, (world.cells, 1)).astype(np.float64)
    for ent_idx, col_idx, cell in placements:
        if not 0 <= cell < world.cells:
            raise ValueError(f"cell {cell} outside grid")
        patch = world.entity_vecs[ent_idx] + world.color_vecs[col_idx]
        if rng is not None and world.noise_sigma > 0:
            patch = patch + rng.normal(0.0, world.noise_sigma,
                                       size=world.patch_dim)
        image[cell] = patch
    return image.reshape(world.grid, world.grid, world.patch_dim)


def decode_cells(world: SynthWorld, image: np.ndarray) -> list:
    """Nearest-neighbor readout of each cell: (entity, color) or None.

    Brute force over every (entity, color) sum; a cell closer to the
    background than to any candidate is empty. Used by the rule oracle, so
    it must not share code with the renderer's forward path.
    """
    flat = image.reshape(world.cells, world.patch_dim)
    combos = (world.entity_vecs[:, None, :] + world.color_vecs[None, :, :])
    combos = combos.reshape(-1, world.patch_dim)
    out = []
    for cell in flat:
        d2 = ((combos - cell) ** 2).sum(axis=1)
        best = int(np.argmin(d2))
        bg = float(((world.background - cell) ** 2).sum())
        if bg <= d2[best]:
            out.append(None)
        else:
            out.append((best // len(COLORS), best % len(COLORS)))
    return out


def parse_question(question: str):
    """Recover (entity, relation-or-'color') from the surface form."""
    words = question.split()
    if len(words) >= 3 and words[-2:] == ["what", "color"]:
        return words[0], "color"
    if len(words) >= 3 and words[-1] == "what":
        relation = " ".join(words[1:-1])
        if relation in QUESTION_TEMPLATES:
            return words[0], relation
    raise ValueError(f"unparseable question: {question!r}")


def oracle_answer(instance: QAInstance, entry: KnowledgeEntry,
                  world: SynthWorld, answers: AnswerSpace):
    """Rule evaluator: the answer index iff (image, entry) determine it.

    Independent of the generator's bookkeeping: the question is re-parsed,
    the image is re-decoded, and the entry is matched literally.
    """
    entity, relation = parse_question(instance.question)
    if relation == "color":
        ent_idx = ENTITIES.index(entity)
        for decoded in decode_cells(world, instance.image):
            if decoded is not None and decoded[0] == ent_idx:
                return answers.index(COLORS[decoded[1]])
        return None
    if entry.subject == entity and entry.relation == relation:
        try:
            return answers.index(entry.object)
        except KeyError:
            return None
    return None


def generate(seed: int, n_train: int = 2000, n_val: int = 500,
             kb_size: int = 500, needs_knowledge_frac: float = 0.8,
             grid: int = 4, patch_dim: int = 8,
             noise_sigma: float = 0.05) -> GeneratedData:
    """Deterministically build the task: world, KB, splits, answer space."""
    if n_train < 1 or n_val < 1:
        raise ValueError("need at least one instance per split")
    if not 0.0 <= needs_knowledge_frac <= 1.0:
        raise ValueError("needs_knowledge_frac outside [0, 1]")
    n_gold = len(ENTITIES) * len(RELATIONS)
    if kb_size < n_gold:
        raise ValueError(
            f"kb_size {kb_size} cannot hold the {n_gold} gold facts"
        )

    rng = np.random.default_rng(seed)
    facts = _build_facts(rng)
    gold = [(e, r, facts[(e, r)]) for e in ENTITIES for r in RELATIONS]
    distractors = _build_distractors(rng, kb_size - n_gold)
    triplets = gold + distractors
    order = rng.permutation(len(triplets))
    triplets = [triplets[i] for i in order]
    gold_ids = {
        (s, r): i for i, (s, r, o) in enumerate(triplets)
        if r in RELATION_OBJECTS
    }

    world = SynthWorld(
        grid=grid,
        patch_dim=patch_dim,
        noise_sigma=noise_sigma,
        facts=facts,
        triplets=tuple(triplets),
        gold_ids=gold_ids,
        entity_vecs=rng.normal(size=(len(ENTITIES), patch_dim)),
        color_vecs=rng.normal(size=(len(COLORS), patch_dim)),
        background=rng.normal(size=patch_dim) * 0.1,
    )

    answer_list = sorted(
        set(COLORS) | {o for objs in RELATION_OBJECTS.values() for o in objs}
    )
    answers = AnswerSpace(tuple(answer_list))

    # split (entity, template) pairs, stratified so both question kinds
    # appear on each side
    knowledge_pairs = [(e, r) for e in ENTITIES for r in RELATIONS]
    color_pairs = [(e, "color") for e in ENTITIES]

    def split_pairs(pairs, val_frac=0.2):
        pairs = list(pairs)
        order = rng.permutation(len(pairs))
        n_val_pairs = max(1, int(round(val_frac * len(pairs))))
        val_idx = set(int(i) for i in order[:n_val_pairs])
        tr = [p for i, p in enumerate(pairs) if i not in val_idx]
        va = [p for i, p in enumerate(pairs) if i in val_idx]
        return tr, va

    k_train, k_val = split_pairs(knowledge_pairs)
    c_train, c_val = split_pairs(color_pairs)

    def synth_split(n, k_pairs, c_pairs):
        instances = []
        for qid in range(n):
            use_knowledge = bool(rng.random() < needs_knowledge_frac)
            pairs = k_pairs if use_knowledge else c_pairs
            entity, template = pairs[rng.integers(len(pairs))]
            ent_idx = ENTITIES.index(entity)
            n_extra = int(rng.integers(0, 3))
            others = [i for i in range(len(ENTITIES)) if i != ent_idx]
            extra = rng.choice(others, size=n_extra, replace=False)
            cells = rng.choice(world.cells, size=1 + n_extra, replace=False)
            colors = rng.integers(len(COLORS), size=1 + n_extra)
            placements = [(ent_idx, int(colors[0]), int(cells[0]))]
            placements += [
                (int(e), int(c), int(cell))
                for e, c, cell in zip(extra, colors[1:], cells[1:])
            ]
            image = render(world, placements, rng)
            if template == "color":
                answer = COLORS[int(colors[0])]
                gold_id = gold_ids[(entity, "related to")]  # nominal anchor
            else:
                answer = facts[(entity, template)]
                gold_id = gold_ids[(entity, template)]
            instances.append(QAInstance(
                qid=qid,
                question=(COLOR_TEMPLATE if template == "color"
                          else QUESTION_TEMPLATES[template]).format(e=entity),
                image=image,
                answer=answer,
                answer_index=answers.index(answer),
                gold_entry_id=gold_id,
                needs_knowledge=use_knowledge,
                entity=entity,
                template=template,
            ))
        return instances

    train = synth_split(n_train, k_train, c_train)
    val = synth_split(n_val, k_val, c_val)

    corpus = [q.question for q in train] + [q.question for q in val]
    corpus += [flatten_triplet(s, r, o) for s, r, o in triplets]
    corpus += list(answers.answers)
    vocab = build_vocab(corpus)
    kb = KnowledgeBase.from_triplets(triplets, vocab)

    return GeneratedData(train=train, val=val, kb=kb, answers=answers,
                         world=world, vocab=vocab, triplets=tuple(triplets))


# ---------------------------------------------------------------------------
# file formats

def save_jsonl(instances: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in instances:
            row = {
                "question": q.question,
                "image": q.image.tolist(),
                "answer": q.answer,
                "gold_entry_id": q.gold_entry_id,
                "needs_knowledge": q.needs_knowledge,
            }
            fh.write(json.dumps(row, separators=(", ", ": ")) + "\n")


def load_jsonl(path, answers: AnswerSpace) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for qid, line in enumerate(fh):
            if not line.strip():
                continue
            row = json.loads(line)
            out.append(QAInstance(
                qid=qid,
                question=row["question"],
                image=np.asarray(row["image"], dtype=np.float64),
                answer=row["answer"],
                answer_index=answers.index(row["answer"]),
                gold_entry_id=int(row["gold_entry_id"]),
                needs_knowledge=bool(row["needs_knowledge"]),
            ))
    return out
