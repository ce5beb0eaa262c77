"""Token vocabulary over entity and relation names.

Id layout is fixed: PAD=0, MASK=1, then entities in lexicographic
(byte) order starting at 2, then relations likewise. Sorting by name
rather than file order makes id assignment independent of how the
input files are shuffled.
"""

import numpy as np

from kgpath.errors import ParseError, VocabularyError

PAD_ID = 0
MASK_ID = 1
N_SPECIAL = 2


class Vocabulary:
    """Bidirectional name <-> id mapping for entities and relations."""

    def __init__(self, entity_names, relation_names):
        self.entity_names = sorted(entity_names)
        self.relation_names = sorted(relation_names)
        if len(set(self.entity_names)) != len(self.entity_names):
            raise VocabularyError("duplicate entity names")
        if len(set(self.relation_names)) != len(self.relation_names):
            raise VocabularyError("duplicate relation names")
        self.n_entities = len(self.entity_names)
        self.n_relations = len(self.relation_names)
        self._entity_ids = {
            name: N_SPECIAL + i for i, name in enumerate(self.entity_names)
        }
        self._relation_ids = {
            name: N_SPECIAL + self.n_entities + i
            for i, name in enumerate(self.relation_names)
        }

    @property
    def size(self):
        """Total token count: PAD + MASK + entities + relations."""
        return N_SPECIAL + self.n_entities + self.n_relations

    @property
    def entity_range(self):
        """Half-open id range [lo, hi) of entity tokens."""
        return N_SPECIAL, N_SPECIAL + self.n_entities

    @property
    def relation_range(self):
        lo = N_SPECIAL + self.n_entities
        return lo, lo + self.n_relations

    def entity_id(self, name):
        try:
            return self._entity_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown entity name: {name!r}") from None

    def relation_id(self, name):
        try:
            return self._relation_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown relation name: {name!r}") from None

    def is_entity_id(self, tok):
        lo, hi = self.entity_range
        return lo <= tok < hi

    def is_relation_id(self, tok):
        lo, hi = self.relation_range
        return lo <= tok < hi

    def name(self, tok):
        """Surface name of a token id (PAD and MASK included)."""
        if tok == PAD_ID:
            return "[PAD]"
        if tok == MASK_ID:
            return "[MASK]"
        lo, hi = self.entity_range
        if lo <= tok < hi:
            return self.entity_names[tok - lo]
        lo, hi = self.relation_range
        if lo <= tok < hi:
            return self.relation_names[tok - lo]
        raise VocabularyError(f"token id out of range: {tok}")

    def save(self, path):
        """Write the manifest: two-line header, then one name per line."""
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"entities {self.n_entities}\n")
            f.write(f"relations {self.n_relations}\n")
            for name in self.entity_names:
                f.write(name + "\n")
            for name in self.relation_names:
                f.write(name + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8", newline="\n") as f:
            lines = f.read().split("\n")
        if len(lines) < 2:
            raise ParseError(f"{path}: missing vocabulary header")
        try:
            ent_kw, n_ent = lines[0].split()
            rel_kw, n_rel = lines[1].split()
            n_ent, n_rel = int(n_ent), int(n_rel)
            if ent_kw != "entities" or rel_kw != "relations":
                raise ValueError
        except ValueError:
            raise ParseError(f"{path}: malformed vocabulary header") from None
        names = lines[2:]
        if names and names[-1] == "":
            names = names[:-1]
        if len(names) != n_ent + n_rel:
            raise ParseError(
                f"{path}: expected {n_ent + n_rel} names, found {len(names)}"
            )
        vocab = cls(names[:n_ent], names[n_ent:])
        if vocab.entity_names != names[:n_ent] or vocab.relation_names != names[n_ent:]:
            raise ParseError(f"{path}: vocabulary names are not sorted")
        return vocab

    def __eq__(self, other):
        return (
            isinstance(other, Vocabulary)
            and self.entity_names == other.entity_names
            and self.relation_names == other.relation_names
        )

    def __repr__(self):
        return f"Vocabulary({self.n_entities} entities, {self.n_relations} relations)"


def build_vocabulary(paths):
    """Build one vocabulary from the union of several triple files.

    Evaluation splits share the training vocabulary this way, so every
    test entity resolves.
    """
    entities, relations = set(), set()
    for path in paths:
        for lineno, line in enumerate(_iter_lines(path), start=1):
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            h, r, t = parts
            entities.add(h)
            entities.add(t)
            relations.add(r)
    return Vocabulary(entities, relations)


def _iter_lines(path):
    with open(path, "r", encoding="utf-8", newline="\n") as f:
        for line in f:
            line = line.rstrip("\n")
            if line:
                yield line


def encode_triples(path, vocab):
    """Token-id triples from a file, as an (N, 3) int32 array in file order."""
    hs, rs, ts = [], [], []
    for lineno, line in enumerate(_iter_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(
                f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
            )
        h, r, t = parts
        hs.append(vocab.entity_id(h))
        rs.append(vocab.relation_id(r))
        ts.append(vocab.entity_id(t))
    out = np.empty((len(hs), 3), dtype=np.int32)
    out[:, 0] = hs
    out[:, 1] = rs
    out[:, 2] = ts
    return out
