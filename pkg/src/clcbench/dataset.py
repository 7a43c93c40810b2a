"""Q&A dataset loading and deterministic synthetic generation.

Items are JSON-lines: one object per line with fields id / question /
chunks / answers. The synthetic generator produces key-value retrieval
tasks whose answer requires connecting facts from two different chunks.
"""

from __future__ import annotations

import json
import random
import string
from dataclasses import dataclass

from .errors import DataError

_NAMES = [
    "alice", "bruno", "chiara", "dmitri", "elena", "farid", "grace", "henrik",
    "ines", "jonas", "karin", "liam", "maria", "nadia", "oskar", "petra",
]
_OBJECTS = [
    "lantern", "compass", "ledger", "violin", "telescope", "atlas",
    "medallion", "typewriter", "sundial", "tapestry", "astrolabe", "gramophone",
]
_FILLER = [
    "the archive keeps a record of every transfer between collections.",
    "several catalogues from that decade were rebound in plain cloth.",
    "a faded inventory slip lists repairs done by the village workshop.",
    "curators disagree about the provenance of many smaller pieces.",
    "the reading room closes early whenever the river floods the cellar.",
    "most labels were rewritten after the numbering scheme changed.",
    "an unrelated donation arrived the same winter and was shelved nearby.",
    "the society newsletter mentions the exhibit only in passing.",
]


@dataclass
class DatasetItem:
    id: str
    question: str
    chunks: list[str]
    answers: list[str]


def load_dataset(path) -> list[DatasetItem]:
    """Parse a JSONL file; malformed lines raise line-numbered errors."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except FileNotFoundError as exc:
        raise DataError(f"dataset file not found: {path}") from exc
    items = []
    n_blank = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            n_blank += 1
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: malformed JSON: {exc}") from exc
        for field_name in ("id", "question", "chunks", "answers"):
            if field_name not in obj:
                raise DataError(f"line {lineno}: missing field '{field_name}'")
        if not obj["question"]:
            raise DataError(f"line {lineno}: empty question")
        if not obj["chunks"]:
            raise DataError(f"line {lineno}: item needs at least one chunk")
        if not obj["answers"]:
            raise DataError(f"line {lineno}: item needs at least one answer")
        items.append(
            DatasetItem(
                id=str(obj["id"]),
                question=str(obj["question"]),
                chunks=[str(c) for c in obj["chunks"]],
                answers=[str(a) for a in obj["answers"]],
            )
        )
    if not items:
        raise DataError(f"dataset {path} contains no items ({n_blank} blank lines)")
    return items


def save_dataset(items: list[DatasetItem], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for it in items:
            f.write(
                json.dumps(
                    {"id": it.id, "question": it.question, "chunks": it.chunks, "answers": it.answers},
                    sort_keys=True,
                )
                + "\n"
            )


def generate_synthetic(n_items: int, n_chunks: int, chunk_len: int, seed: int) -> list[DatasetItem]:
    """Deterministic two-hop retrieval tasks.

    One chunk states who owns an object, another states that person's code;
    the question asks for the code of the object's owner. The code string
    (uppercase letters and digits) appears verbatim in exactly one chunk.
    Non-fact chunks and padding come from a filler-sentence pool; chunks are
    padded to roughly chunk_len bytes (facts are never truncated).
    """
    if n_items < 1 or n_chunks < 1 or chunk_len < 1:
        raise DataError("n_items, n_chunks and chunk_len must be positive")
    rng = random.Random(seed)
    alphabet = string.ascii_uppercase + string.digits
    items = []
    for i in range(n_items):
        person = rng.choice(_NAMES)
        obj = rng.choice(_OBJECTS)
        code = "".join(rng.choice(alphabet) for _ in range(6))
        fact_owner = f"the owner of the {obj} is {person}."
        fact_code = f"the code of {person} is {code}."
        if n_chunks >= 2:
            slot_owner, slot_code = rng.sample(range(n_chunks), 2)
            facts = {slot_owner: [fact_owner], slot_code: [fact_code]}
        else:
            facts = {0: [fact_owner, fact_code]}
        chunks = []
        for j in range(n_chunks):
            parts = list(facts.get(j, []))
            text = " ".join(parts)
            while len(text) < chunk_len:
                sentence = rng.choice(_FILLER)
                text = sentence if not text else f"{text} {sentence}"
            chunks.append(text)
        items.append(
            DatasetItem(
                id=f"synth-{seed}-{i:04d}",
                question=f"What is the code of the owner of the {obj}?",
                chunks=chunks,
                answers=[code],
            )
        )
    return items
