"""Task description texts: vocabulary, token forms, and builders.

A description is the verb phrase of a task followed by either a noun (the
target category), a pronoun, or nothing. Scenes without targets get the empty
form: a single delimiter token. Multi-category targets concatenate one phrasal
verb per category, so a description like "sit on sofa sit on bench" carries
two noun positions.
"""

from __future__ import annotations

from dataclasses import dataclass

PRONOUNS = ("something", "it", "them", "abcd")
DELIM = "<task>"

FORM_PRONOUN = "verb-pronoun"
FORM_NOUN = "verb-noun"
FORM_EMPTY = "empty"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def index(self):
        return {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise ValueError(f"token {token!r} not in vocabulary") from None

    def word(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise ValueError(f"token id {token_id} out of range")
        return self.tokens[token_id]


def build_vocabulary(verb_tokens, category_names) -> Vocabulary:
    """Deterministic layout: delimiter, verbs (given order, deduped),
    category nouns, pronouns."""
    seen, verbs = set(), []
    for t in verb_tokens:
        if t not in seen:
            seen.add(t)
            verbs.append(t)
    tokens = [DELIM] + verbs + list(category_names) + list(PRONOUNS)
    if len(set(tokens)) != len(tokens):
        raise ValueError("verb/category/pronoun token collision")
    return Vocabulary(tuple(tokens))


@dataclass(frozen=True)
class TaskDescription:
    token_ids: tuple
    form: str
    special_positions: tuple  # noun or pronoun token indices
    task_id: int

    def __post_init__(self):
        if self.form == FORM_PRONOUN and len(self.special_positions) != 1:
            raise ValueError("pronoun form needs exactly one pronoun position")
        if self.form == FORM_NOUN and not self.special_positions:
            raise ValueError("noun form needs at least one noun position")
        if self.form == FORM_EMPTY and (len(self.token_ids) != 1
                                        or self.special_positions):
            raise ValueError("empty form is a single delimiter token")
        for p in self.special_positions:
            if not 0 <= p < len(self.token_ids):
                raise ValueError("special position out of range")

    def __len__(self):
        return len(self.token_ids)


def pronoun_description(task_id: int, verb_tokens, pronoun: str,
                        vocab: Vocabulary) -> TaskDescription:
    if pronoun not in PRONOUNS:
        raise ValueError(f"unknown pronoun {pronoun!r}; choose from {PRONOUNS}")
    ids = tuple(vocab.id(t) for t in verb_tokens) + (vocab.id(pronoun),)
    return TaskDescription(ids, FORM_PRONOUN, (len(ids) - 1,), task_id)


def noun_description(task_id: int, verb_tokens, category_names,
                     vocab: Vocabulary) -> TaskDescription:
    """One phrasal verb per target category; empty form when there are none."""
    if not category_names:
        return TaskDescription((vocab.id(DELIM),), FORM_EMPTY, (), task_id)
    ids, noun_positions = [], []
    for name in category_names:
        ids.extend(vocab.id(t) for t in verb_tokens)
        noun_positions.append(len(ids))
        ids.append(vocab.id(name))
    return TaskDescription(tuple(ids), FORM_NOUN, tuple(noun_positions),
                           task_id)
