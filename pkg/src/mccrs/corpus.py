"""Conversations, knowledge graph and reviews: data model, I/O, splitting,
training-example extraction and a synthetic corpus generator."""

from __future__ import annotations

import hashlib
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, EOS, MASK = 0, 1, 2
RESERVED_WORDS = {"<pad>": PAD, "<eos>": EOS, "<mask>": MASK}

SEEKER, RECOMMENDER = "seeker", "recommender"

CONVERSATIONS_FILE = "conversations.jsonl"
TRIPLES_FILE = "triples.tsv"
REVIEWS_FILE = "reviews.jsonl"
VOCAB_FILE = "vocab.json"


class CorpusValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Entity:
    id: int
    is_item: bool
    name: str


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class Utterance:
    speaker: str
    entity_mentions: tuple[int, ...]
    word_tokens: tuple[int, ...]
    turn_index: int


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple[Utterance, ...]


@dataclass(frozen=True)
class ReviewDoc:
    item: int
    sentences: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class RecExample:
    context_entities: tuple[int, ...]
    context_words: tuple[int, ...]
    target_item: int
    conversation_id: str
    turn: int
    context_turns: tuple[int, ...] = ()
    response_words: tuple[int, ...] = ()


@dataclass(frozen=True)
class Corpus:
    entities: tuple[Entity, ...]
    relations: tuple[str, ...]
    words: tuple[str, ...]
    conversations: tuple[Conversation, ...]
    triples: tuple[Triple, ...]
    reviews: tuple[ReviewDoc, ...]

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def item_ids(self) -> np.ndarray:
        return np.array([e.id for e in self.entities if e.is_item], dtype=np.int64)

    def review_of(self) -> dict[int, ReviewDoc]:
        return {r.item: r for r in self.reviews}

    def examples(self, conversations: Iterable[Conversation] | None = None) -> list[RecExample]:
        items = set(self.item_ids.tolist())
        convs = self.conversations if conversations is None else conversations
        return [ex for c in convs for ex in extract_examples(c, items)]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, data in sorted(serialize_corpus(self).items()):
            h.update(name.encode())
            h.update(data)
        return h.hexdigest()


def validate_corpus(corpus: Corpus, allow_self_relation: bool = False) -> None:
    """Check every id reference; raise on the first offender."""
    n_e, n_r, n_w = corpus.n_entities, corpus.n_relations, corpus.n_words
    for i, e in enumerate(corpus.entities):
        if e.id != i:
            raise CorpusValidationError(f"entity ids must be dense: position {i} has id {e.id}")
    for w, wid in RESERVED_WORDS.items():
        if n_w <= wid or corpus.words[wid] != w:
            raise CorpusValidationError(f"word id {wid} must be reserved for {w}")
    for conv in corpus.conversations:
        if not conv.utterances:
            raise CorpusValidationError(f"conversation {conv.id} is empty")
        last_turn = -1
        for u in conv.utterances:
            if u.speaker not in (SEEKER, RECOMMENDER):
                raise CorpusValidationError(f"conversation {conv.id}: unknown speaker {u.speaker!r}")
            if u.turn_index <= last_turn:
                raise CorpusValidationError(
                    f"conversation {conv.id}: turn {u.turn_index} not increasing"
                )
            last_turn = u.turn_index
            for e in u.entity_mentions:
                if not 0 <= e < n_e:
                    raise CorpusValidationError(
                        f"conversation {conv.id} turn {u.turn_index}: entity id {e} out of range [0, {n_e})"
                    )
            for w in u.word_tokens:
                if not 0 <= w < n_w:
                    raise CorpusValidationError(
                        f"conversation {conv.id} turn {u.turn_index}: word id {w} out of range [0, {n_w})"
                    )
    for t in corpus.triples:
        for e in (t.head, t.tail):
            if not 0 <= e < n_e:
                raise CorpusValidationError(f"triple {t}: entity id {e} out of range [0, {n_e})")
        if not 0 <= t.relation < n_r:
            raise CorpusValidationError(f"triple {t}: relation id {t.relation} out of range [0, {n_r})")
        if t.head == t.tail and not allow_self_relation:
            raise CorpusValidationError(f"triple {t}: self relation not allowed")
    seen = set()
    for r in corpus.reviews:
        if not (0 <= r.item < n_e and corpus.entities[r.item].is_item):
            raise CorpusValidationError(f"review for {r.item}: not an item id")
        if r.item in seen:
            raise CorpusValidationError(f"duplicate review document for item {r.item}")
        seen.add(r.item)
        if not r.sentences:
            raise CorpusValidationError(f"review for item {r.item} has no sentences")
        for s in r.sentences:
            if not s:
                raise CorpusValidationError(f"review for item {r.item} has an empty sentence")
            for w in s:
                if not 0 <= w < n_w:
                    raise CorpusValidationError(
                        f"review for item {r.item}: word id {w} out of range [0, {n_w})"
                    )


# ---------------------------------------------------------------- file I/O


def serialize_corpus(corpus: Corpus) -> dict[str, bytes]:
    """Render the four corpus files as bytes, keyed by file name."""
    conv = io.StringIO()
    for c in corpus.conversations:
        utts = [
            {"speaker": u.speaker, "entities": list(u.entity_mentions), "words": list(u.word_tokens), "turn": u.turn_index}
            for u in c.utterances
        ]
        conv.write(json.dumps({"id": c.id, "utterances": utts}) + "\n")
    triples = "".join(f"{t.head}\t{t.relation}\t{t.tail}\n" for t in corpus.triples)
    reviews = "".join(
        json.dumps({"item": r.item, "sentences": [list(s) for s in r.sentences]}) + "\n" for r in corpus.reviews
    )
    vocab = {
        "entities": {e.name: {"id": e.id, "is_item": e.is_item} for e in corpus.entities},
        "relations": {name: i for i, name in enumerate(corpus.relations)},
        "words": {name: i for i, name in enumerate(corpus.words)},
    }
    return {
        CONVERSATIONS_FILE: conv.getvalue().encode(),
        TRIPLES_FILE: triples.encode(),
        REVIEWS_FILE: reviews.encode(),
        VOCAB_FILE: (json.dumps(vocab, indent=1) + "\n").encode(),
    }


def write_corpus(corpus: Corpus, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, data in serialize_corpus(corpus).items():
        path = out_dir / name
        path.write_bytes(data)
        paths.append(path)
    return paths


def _vocab_list(mapping: dict, what: str) -> list:
    out = [None] * len(mapping)
    for name, val in mapping.items():
        idx = val["id"] if isinstance(val, dict) else val
        if not isinstance(idx, int) or not 0 <= idx < len(mapping) or out[idx] is not None:
            raise CorpusValidationError(f"{what} vocabulary: bad or duplicate id {idx!r} for {name!r}")
        out[idx] = (name, val)
    return out


def load_corpus(path) -> Corpus:
    """Load a corpus directory written by :func:`write_corpus` and validate it."""
    path = Path(path)
    try:
        vocab = json.loads((path / VOCAB_FILE).read_text())
    except json.JSONDecodeError as e:
        raise CorpusValidationError(f"{VOCAB_FILE}: {e}") from e
    entities = tuple(
        Entity(id=val["id"], is_item=bool(val.get("is_item", False)), name=name)
        for name, val in _vocab_list(vocab.get("entities", {}), "entity")
    )
    relations = tuple(name for name, _ in _vocab_list(vocab.get("relations", {}), "relation"))
    words = tuple(name for name, _ in _vocab_list(vocab.get("words", {}), "word"))

    conversations = []
    for lineno, line in enumerate((path / CONVERSATIONS_FILE).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            utts = tuple(
                Utterance(
                    speaker=u["speaker"],
                    entity_mentions=tuple(int(e) for e in u["entities"]),
                    word_tokens=tuple(int(w) for w in u["words"]),
                    turn_index=int(u["turn"]),
                )
                for u in obj["utterances"]
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CorpusValidationError(f"{CONVERSATIONS_FILE}:{lineno}: {e!r}") from e
        conversations.append(Conversation(id=str(obj["id"]), utterances=utts))

    triples = []
    for lineno, line in enumerate((path / TRIPLES_FILE).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            h, r, t = (int(p) for p in parts)
        except ValueError as e:
            raise CorpusValidationError(f"{TRIPLES_FILE}:{lineno}: expected 3 integers, got {line!r}") from e
        triples.append(Triple(h, r, t))

    reviews = []
    for lineno, line in enumerate((path / REVIEWS_FILE).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            reviews.append(
                ReviewDoc(item=int(obj["item"]), sentences=tuple(tuple(int(w) for w in s) for s in obj["sentences"]))
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CorpusValidationError(f"{REVIEWS_FILE}:{lineno}: {e!r}") from e

    corpus = Corpus(entities, relations, words, tuple(conversations), tuple(triples), tuple(reviews))
    validate_corpus(corpus)
    return corpus


# ------------------------------------------------------------ splitting


def split_corpus(conversations: Sequence[Conversation], ratios=(8, 1, 1), seed: int = 0):
    """Conversation-level split; sizes use largest-remainder rounding."""
    ratios = np.asarray(ratios, dtype=float)
    if (ratios < 0).any() or ratios.sum() <= 0:
        raise ValueError(f"ratios must be non-negative with a positive sum, got {ratios.tolist()}")
    n = len(conversations)
    n_parts = int((ratios > 0).sum())
    if n < n_parts:
        raise ValueError(f"{n} conversations cannot fill {n_parts} partitions")
    exact = ratios / ratios.sum() * n
    sizes = np.floor(exact).astype(int)
    remainder = n - sizes.sum()
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    # every non-zero partition gets at least one conversation
    for i in range(len(ratios)):
        if ratios[i] > 0 and sizes[i] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for s in sizes:
        parts.append([conversations[j] for j in sorted(perm[start : start + s])])
        start += s
    return tuple(parts)


# ------------------------------------------------- example extraction


def extract_examples(conversation: Conversation, item_ids) -> list[RecExample]:
    """One example per item mention in a recommender utterance.

    The context holds every utterance with a smaller turn index.  Repeated
    mentions of the same item are kept.
    """
    items = set(int(i) for i in item_ids)
    out = []
    ctx_entities: list[int] = []
    ctx_words: list[int] = []
    ctx_turns: list[int] = []
    for u in conversation.utterances:
        if u.speaker == RECOMMENDER:
            for e in u.entity_mentions:
                if e in items:
                    out.append(
                        RecExample(
                            context_entities=tuple(ctx_entities),
                            context_words=tuple(ctx_words),
                            target_item=e,
                            conversation_id=conversation.id,
                            turn=u.turn_index,
                            context_turns=tuple(ctx_turns),
                            response_words=u.word_tokens,
                        )
                    )
        ctx_entities.extend(u.entity_mentions)
        ctx_words.extend(u.word_tokens)
        ctx_turns.append(u.turn_index)
    return out


def popularity_ranking(train_examples: Iterable[RecExample], item_ids) -> list[int]:
    """Items by descending target frequency, ties by ascending id."""
    counts = Counter(ex.target_item for ex in train_examples)
    return sorted((int(i) for i in item_ids), key=lambda i: (-counts.get(i, 0), i))


# --------------------------------------------------- synthetic corpora


@dataclass
class SyntheticSpec:
    """Knobs of the synthetic generator.

    Each ``*_signal`` weight is the probability that a sampled element of that
    channel comes from the conversation's (or item's) latent cluster rather
    than uniformly at random.
    """

    n_items: int = 200
    n_clusters: int = 20
    n_attributes: int = 100
    n_relations: int = 3
    n_conversations: int = 3000
    n_generic_words: int = 60
    cluster_words: int = 6
    sequence_signal: float = 0.6
    graph_signal: float = 0.8
    review_signal: float = 0.6
    min_turns: int = 4
    max_turns: int = 8
    recommend_rate: float = 0.5
    attributes_per_item: int = 2
    min_sentences: int = 2
    max_sentences: int = 4
    min_sentence_len: int = 4
    max_sentence_len: int = 8
    missing_review_rate: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.n_items < 1:
            raise ValueError("synthetic spec needs at least one item")
        if self.n_conversations < 1:
            raise ValueError("synthetic spec needs at least one conversation")
        if not 1 <= self.n_clusters <= self.n_items:
            raise ValueError("n_clusters must be in [1, n_items]")
        if self.n_relations < 1 or self.n_attributes < 0 or self.n_generic_words < 1:
            raise ValueError("n_relations and n_generic_words must be positive")
        for name in ("sequence_signal", "graph_signal", "review_signal", "recommend_rate", "missing_review_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.missing_review_rate >= 1.0:
            raise ValueError("at least one item must have reviews")
        if self.min_turns < 2 or self.max_turns < self.min_turns:
            raise ValueError("need 2 <= min_turns <= max_turns")
        if not 1 <= self.min_sentences <= self.max_sentences:
            raise ValueError("need 1 <= min_sentences <= max_sentences")
        if not 1 <= self.min_sentence_len <= self.max_sentence_len:
            raise ValueError("need 1 <= min_sentence_len <= max_sentence_len")


def cluster_of_name(name: str) -> int | None:
    """Latent cluster encoded in a synthetic entity name (``..._cNNN``)."""
    tail = name.rsplit("_", 1)[-1]
    if tail.startswith("c") and tail[1:].isdigit():
        return int(tail[1:])
    return None


def generate_synthetic(spec: SyntheticSpec | None = None, seed: int = 0) -> Corpus:
    """Sample a corpus in which conversations, triples and reviews each carry
    a tunable amount of information about a latent item cluster.

    Entity layout: items first, then one genre entity per cluster, then
    attribute entities assigned round-robin to clusters.  Entity names end in
    ``_c<cluster>`` so that the latent structure can be audited.
    """
    spec = spec or SyntheticSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    C = spec.n_clusters

    item_cluster = np.array([i % C for i in range(spec.n_items)])
    entities: list[Entity] = [
        Entity(i, True, f"item_{i:04d}_c{item_cluster[i]:03d}") for i in range(spec.n_items)
    ]
    genre_ids = []
    for c in range(C):
        genre_ids.append(len(entities))
        entities.append(Entity(len(entities), False, f"genre_c{c:03d}"))
    attr_ids, attr_cluster = [], []
    for a in range(spec.n_attributes):
        attr_ids.append(len(entities))
        attr_cluster.append(a % C)
        entities.append(Entity(len(entities), False, f"attr_{a:04d}_c{a % C:03d}"))
    attr_ids = np.array(attr_ids, dtype=np.int64)
    attr_cluster = np.array(attr_cluster, dtype=np.int64)
    n_entities = len(entities)

    cluster_items = [np.flatnonzero(item_cluster == c) for c in range(C)]
    cluster_attrs = [attr_ids[attr_cluster == c] for c in range(C)]
    cluster_pool = [
        np.concatenate([cluster_items[c], [genre_ids[c]], cluster_attrs[c]]).astype(np.int64) for c in range(C)
    ]

    base_relations = ["has_genre", "features", "belongs_to"]
    relations = tuple(
        base_relations[r] if r < len(base_relations) else f"relation_{r}" for r in range(spec.n_relations)
    )

    def rel(k: int) -> int:
        return min(k, spec.n_relations - 1)

    # words: reserved, one name token per entity, generic words, cluster words
    words = list(RESERVED_WORDS)
    name_token = {}
    for e in entities:
        name_token[e.id] = len(words)
        words.append(e.name)
    generic = np.arange(len(words), len(words) + spec.n_generic_words)
    words.extend(f"w_{k:03d}" for k in range(spec.n_generic_words))
    cluster_word_ids = []
    for c in range(C):
        start = len(words)
        words.extend(f"cw_{k}_c{c:03d}" for k in range(spec.cluster_words))
        cluster_word_ids.append(np.arange(start, len(words)))
    # recommender utterances draw from a small phrase vocabulary
    phrase_words = generic[: max(1, min(8, len(generic)))]

    # ---- knowledge graph
    triples: list[Triple] = []
    seen = set()

    def add(h, r, t):
        key = (int(h), int(r), int(t))
        if key[0] != key[2] and key not in seen:
            seen.add(key)
            triples.append(Triple(*key))

    gs = spec.graph_signal
    for i in range(spec.n_items):
        c = item_cluster[i]
        g = genre_ids[c] if rng.random() < gs else genre_ids[rng.integers(C)]
        add(i, rel(0), g)
        if len(attr_ids):
            for _ in range(spec.attributes_per_item):
                own = cluster_attrs[c]
                if len(own) and rng.random() < gs:
                    a = own[rng.integers(len(own))]
                else:
                    a = attr_ids[rng.integers(len(attr_ids))]
                add(i, rel(1), a)
    for a, c in zip(attr_ids, attr_cluster):
        g = genre_ids[c] if rng.random() < gs else genre_ids[rng.integers(C)]
        add(a, rel(2), g)

    # ---- conversations
    ss = spec.sequence_signal
    conversations = []
    for k in range(spec.n_conversations):
        c = int(rng.integers(C))
        n_turns = int(rng.integers(spec.min_turns, spec.max_turns + 1))
        last_rec = n_turns - 1 if n_turns % 2 == 0 else n_turns - 2
        utts = []
        mentioned: set[int] = set()
        for t in range(n_turns):
            if t % 2 == 0:
                ments = []
                for _ in range(int(rng.integers(1, 3))):
                    if rng.random() < ss:
                        e = int(cluster_pool[c][rng.integers(len(cluster_pool[c]))])
                    else:
                        e = int(rng.integers(n_entities))
                    ments.append(e)
                ws = list(rng.choice(generic, size=int(rng.integers(2, 5))))
                ws += [name_token[e] for e in ments]
                if spec.cluster_words and rng.random() < ss:
                    ws.append(int(cluster_word_ids[c][rng.integers(spec.cluster_words)]))
                utts.append(Utterance(SEEKER, tuple(ments), tuple(int(w) for w in ws), t))
            else:
                ments = []
                if t == last_rec or rng.random() < spec.recommend_rate:
                    if t == last_rec or rng.random() < ss:
                        pool = [i for i in cluster_items[c] if i not in mentioned] or list(cluster_items[c])
                    else:
                        pool = [i for i in range(spec.n_items) if i not in mentioned] or list(range(spec.n_items))
                    item = int(pool[rng.integers(len(pool))])
                    mentioned.add(item)
                    ments.append(item)
                ws = list(rng.choice(phrase_words, size=int(rng.integers(1, 3))))
                ws += [name_token[e] for e in ments]
                utts.append(Utterance(RECOMMENDER, tuple(ments), tuple(int(w) for w in ws), t))
            mentioned.update(e for e in utts[-1].entity_mentions if e < spec.n_items)
        conversations.append(Conversation(f"conv_{k:05d}", tuple(utts)))

    # ---- reviews
    rs = spec.review_signal
    reviews = []
    has_review = rng.random(spec.n_items) >= spec.missing_review_rate
    if not has_review.any():
        has_review[0] = True
    for i in range(spec.n_items):
        if not has_review[i]:
            continue
        c = item_cluster[i]
        sents = []
        for _ in range(int(rng.integers(spec.min_sentences, spec.max_sentences + 1))):
            L = int(rng.integers(spec.min_sentence_len, spec.max_sentence_len + 1))
            toks = []
            for _ in range(L):
                if spec.cluster_words and rng.random() < rs:
                    toks.append(int(cluster_word_ids[c][rng.integers(spec.cluster_words)]))
                else:
                    toks.append(int(generic[rng.integers(len(generic))]))
            sents.append(tuple(toks))
        reviews.append(ReviewDoc(i, tuple(sents)))

    corpus = Corpus(
        entities=tuple(entities),
        relations=relations,
        words=tuple(words),
        conversations=tuple(conversations),
        triples=tuple(triples),
        reviews=tuple(reviews),
    )
    validate_corpus(corpus)
    return corpus
