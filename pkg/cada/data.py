###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""
Synthetic attribute-person dataset.

Each identity is an attribute assignment over four slots (hair, top,
bottom, shoes). Images are four horizontal colour bands, one per slot,
with band-boundary jitter, pixel noise and optional horizontal flips.
Short hair shows as row stripes inside the hair band.
Captions are templated sentences naming at least two of the identity's
attribute phrases.

On disk::

    <out_dir>/manifest.jsonl   one record per (image, caption)
    <out_dir>/persons.jsonl    ground-truth attributes per identity
    <out_dir>/images/*.bin     <HHHH header (H, W, C, 0) + float32 LE pixels
    <out_dir>/lexicon.tsv      word<TAB>TAG
    <out_dir>/vocab.txt        one word per line
"""
from dataclasses import dataclass, field
import hashlib
import json
import multiprocessing
from pathlib import Path
import queue
import re
import struct
import threading

import numpy as np
from logbook import Logger

from cada.errors import BatchError, GenerationError, LoadError
from cada.textproc import (
    ADJ,
    CLS,
    ENC_ID,
    NOUN,
    OTHER,
    PosLexicon,
    Vocabulary,
    mask_attributes,
    mask_random_tokens,
    split_words,
    tokenize,
)

log = Logger("cada.data")

PALETTE = dict(
    black=(0.05, 0.05, 0.05),
    white=(0.95, 0.95, 0.95),
    red=(0.85, 0.10, 0.10),
    blue=(0.10, 0.20, 0.85),
    green=(0.10, 0.65, 0.20),
    yellow=(0.95, 0.85, 0.10),
    gray=(0.50, 0.50, 0.50),
    pink=(0.95, 0.55, 0.70),
)
HAIR_COLORS = dict(
    black=(0.05, 0.05, 0.05),
    brown=(0.45, 0.28, 0.12),
    blonde=(0.93, 0.82, 0.50),
)
HAIR_LENGTHS = ("short", "long")

SLOTS = ("hair", "top", "bottom", "shoes")
ITEMS = dict(
    top=("jacket", "shirt", "coat"),
    bottom=("pants", "skirt", "shorts"),
    shoes=("shoes", "boots"),
)

# Templates only put adjectives directly in front of attribute nouns.
TEMPLATES = (
    "a person with {hair} wearing a {top} and {shoes}",
    "this pedestrian wears a {top} over {bottom} and has {hair}",
    "the woman has {hair} and is dressed in {bottom} with {shoes}",
    "a man in a {top} is walking along the street in {shoes}",
    "someone wearing {bottom} and a {top} with {hair}",
    "the person has {hair}, a {top}, {bottom} and {shoes}",
    "{shoes} and {bottom} are worn by a person in a {top}",
)

JITTER_PX = 2
NOISE_SIGMA = 0.05
STRIPE_AMPLITUDE = 0.12
BLOB_HEADER = struct.Struct("<HHHH")


@dataclass
class PersonSpec:
    """Identity and its attribute assignment: slot -> (adjectives..., item)."""

    identity_id: int
    attributes: dict

    def phrase(self, slot):
        return " ".join(self.attributes[slot])

    def colors(self):
        hair_length, hair_color, _ = self.attributes["hair"]
        return dict(
            hair=hair_color,
            hair_length=hair_length,
            top=self.attributes["top"][0],
            bottom=self.attributes["bottom"][0],
            shoes=self.attributes["shoes"][0],
        )


@dataclass
class DatasetRecord:
    identity_id: int
    image_path: str
    caption: str
    split: str
    checksum: str
    image: np.ndarray = field(default=None, repr=False, compare=False)

    def to_json(self):
        return dict(
            id=self.identity_id,
            image_path=self.image_path,
            caption=self.caption,
            split=self.split,
            checksum=self.checksum,
        )


@dataclass
class DatasetInfo:
    out_dir: Path
    n_ids: int
    n_records: int
    capacity: int
    splits: dict
    manifest_sha256: str


@dataclass
class Corpus:
    records: list
    vocab: Vocabulary
    lexicon: PosLexicon
    persons: dict

    def split(self, name):
        return [r for r in self.records if r.split == name]


def _slot_choices():
    hair = [(l, c, "hair") for l in HAIR_LENGTHS for c in HAIR_COLORS]
    return dict(
        hair=hair,
        top=[(c, i) for c in PALETTE for i in ITEMS["top"]],
        bottom=[(c, i) for c in PALETTE for i in ITEMS["bottom"]],
        shoes=[(c, i) for c in PALETTE for i in ITEMS["shoes"]],
    )


def attribute_capacity():
    choices = _slot_choices()
    return int(np.prod([len(choices[s]) for s in SLOTS]))


def build_lexicon():
    tags = {}
    for word in set(PALETTE) | set(HAIR_COLORS) | set(HAIR_LENGTHS):
        tags[word] = ADJ
    for word in ["hair", "person", "pedestrian", "woman", "man", "street"] + [
        i for items in ITEMS.values() for i in items
    ]:
        tags[word] = NOUN
    for template in TEMPLATES:
        for word in split_words(re.sub(r"\{\w+\}", " ", template)):
            tags.setdefault(word, OTHER)
    return PosLexicon(tags)


def build_vocabulary(lexicon):
    return Vocabulary(sorted(lexicon.tags))


def sample_persons(n_ids, rng):
    """Distinct attribute assignments, drawn without replacement from the mixed-radix space."""
    capacity = attribute_capacity()
    if n_ids < 2:
        raise GenerationError(f"need at least 2 identities for hard negatives, got {n_ids}")
    if n_ids > capacity:
        raise GenerationError(
            f"{n_ids} identities requested but the attribute space holds {capacity} "
            f"({' x '.join(str(len(v)) for v in _slot_choices().values())})"
        )
    choices = _slot_choices()
    codes = rng.choice(capacity, size=n_ids, replace=False)
    persons = []
    for identity, code in enumerate(codes):
        attributes = {}
        code = int(code)
        for slot in SLOTS:
            code, digit = divmod(code, len(choices[slot]))
            attributes[slot] = choices[slot][digit]
        persons.append(PersonSpec(identity, attributes))
    return persons


def band_rows(height):
    return height // 4


def jittered_bounds(height, rng):
    """Row bounds of the four bands, each inner boundary shifted by up to JITTER_PX."""
    band = band_rows(height)
    return [0] + [k * band + int(rng.integers(-JITTER_PX, JITTER_PX + 1)) for k in (1, 2, 3)] + [height]


def stripe_amplitude(color):
    """Per-channel offset of the short-hair stripes, kept inside [0, 1]."""
    color = np.asarray(color, dtype=np.float32)
    return np.minimum(np.minimum(color, 1.0 - color), STRIPE_AMPLITUDE)


def render_image(person, rng, image_size=32, channels=3, flip=False):
    """Paint the four slot bands, jitter the boundaries, add noise.

    Short hair is drawn as alternating brighter and darker rows around the
    hair colour, so the band mean stays on the palette colour.
    """
    colors = person.colors()
    h = w = image_size
    bounds = jittered_bounds(h, rng)
    image = np.zeros((h, w, channels), dtype=np.float32)
    fills = [
        HAIR_COLORS[colors["hair"]],
        PALETTE[colors["top"]],
        PALETTE[colors["bottom"]],
        PALETTE[colors["shoes"]],
    ]
    for k, color in enumerate(fills):
        image[bounds[k] : bounds[k + 1]] = np.resize(np.asarray(color, dtype=np.float32), channels)
    if colors["hair_length"] == "short":
        offset = np.resize(stripe_amplitude(fills[0]), channels)
        image[0 : bounds[1] : 2] += offset
        image[1 : bounds[1] : 2] -= offset
    image += rng.normal(0.0, NOISE_SIGMA, size=image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)
    if flip:
        image = image[:, ::-1].copy()
    return image


def band_cores(height):
    """Rows of each slot band untouched by boundary jitter: slot -> (start, stop).

    The hair core holds an even number of rows so the stripes cancel.
    """
    band = band_rows(height)
    cores = dict(hair=(0, max(2 * ((band - JITTER_PX) // 2), 2)))
    for k, slot in enumerate(SLOTS[1:], start=1):
        stop = height if k == 3 else (k + 1) * band
        cores[slot] = (k * band + JITTER_PX, stop - JITTER_PX)
    return cores


def band_colors(image):
    """Mean colour of each band core: slot -> (C,) array."""
    image = np.asarray(image)
    return {slot: image[a:b].reshape(-1, image.shape[-1]).mean(axis=0) for slot, (a, b) in band_cores(image.shape[0]).items()}


def stripe_contrast(image):
    """Even-row minus odd-row mean over the hair core, summed over channels."""
    image = np.asarray(image)
    _, stop = band_cores(image.shape[0])["hair"]
    return float((image[0:stop:2].mean(axis=(0, 1)) - image[1:stop:2].mean(axis=(0, 1))).sum())


def _nearest(color, table):
    names = list(table)
    dists = [np.abs(np.resize(np.asarray(table[n]), len(color)) - color).sum() for n in names]
    return names[int(np.argmin(dists))]


def decode_attributes(image):
    """Recover slot colours (and hair length) from pixels alone."""
    means = band_colors(image)
    hair = _nearest(means["hair"], HAIR_COLORS)
    # Clean stripes give 2 * sum(amplitude); long hair gives noise around 0.
    expected = 2.0 * float(np.resize(stripe_amplitude(HAIR_COLORS[hair]), len(means["hair"])).sum())
    length = "short" if stripe_contrast(image) > 0.5 * expected else "long"
    return dict(
        hair=hair,
        hair_length=length,
        top=_nearest(means["top"], PALETTE),
        bottom=_nearest(means["bottom"], PALETTE),
        shoes=_nearest(means["shoes"], PALETTE),
    )


def write_caption(person, rng):
    template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    return template.format(**{slot: person.phrase(slot) for slot in SLOTS})


def encode_blob(image):
    h, w, c = image.shape
    return BLOB_HEADER.pack(h, w, c, 0) + np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_blob(raw, name=""):
    if len(raw) < BLOB_HEADER.size:
        raise LoadError(f"image blob {name} is truncated (no header)")
    h, w, c, _ = BLOB_HEADER.unpack(raw[: BLOB_HEADER.size])
    payload = raw[BLOB_HEADER.size :]
    if len(payload) != h * w * c * 4:
        raise LoadError(f"image blob {name} is truncated: {len(payload)} bytes for shape {(h, w, c)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)


def _render_identity(job):
    """Images and captions of one identity from its own seed sequence."""
    person, seed_seq, images_per_id, captions_per_image, image_size, channels = job
    rng = np.random.default_rng(seed_seq)
    out = []
    for k in range(images_per_id):
        image = render_image(person, rng, image_size, channels, flip=bool(rng.random() < 0.5))
        captions = [write_caption(person, rng) for _ in range(captions_per_image)]
        out.append((k, encode_blob(image), captions))
    return out


def generate_dataset(
    n_ids,
    images_per_id,
    captions_per_image,
    seed,
    out_dir,
    image_size=32,
    channels=3,
    test_fraction=0.2,
    workers=1,
):
    """
    Write a synthetic dataset and return a DatasetInfo.

    Identities are split by identity (never by image); byte-identical output
    for the same arguments.
    """
    out_dir = Path(out_dir)
    root = np.random.SeedSequence(seed)
    split_seq, person_seq, *identity_seqs = root.spawn(n_ids + 2 if n_ids > 0 else 2)
    persons = sample_persons(n_ids, np.random.default_rng(person_seq))

    n_test = int(round(n_ids * test_fraction))
    order = np.random.default_rng(split_seq).permutation(n_ids)
    test_ids = set(order[:n_test].tolist())

    jobs = [
        (person, identity_seqs[person.identity_id], images_per_id, captions_per_image, image_size, channels)
        for person in persons
    ]
    if workers > 1:
        with multiprocessing.Pool(processes=workers) as pool:
            rendered = pool.map(_render_identity, jobs)
    else:
        rendered = [_render_identity(job) for job in jobs]

    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lexicon = build_lexicon()
    lexicon.save(out_dir / "lexicon.tsv")
    build_vocabulary(lexicon).save(out_dir / "vocab.txt")

    lines, persons_lines = [], []
    splits = dict(train=0, test=0)
    for person, images in zip(persons, rendered):
        split = "test" if person.identity_id in test_ids else "train"
        persons_lines.append(
            json.dumps(dict(id=person.identity_id, split=split, attributes=person.attributes), sort_keys=True)
        )
        for k, blob, captions in images:
            rel = f"images/{person.identity_id:05d}_{k:03d}.bin"
            (out_dir / rel).write_bytes(blob)
            checksum = hashlib.sha256(blob).hexdigest()
            for caption in captions:
                record = DatasetRecord(person.identity_id, rel, caption, split, checksum)
                lines.append(json.dumps(record.to_json(), sort_keys=True))
                splits[split] += 1

    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / "persons.jsonl").write_text("\n".join(persons_lines) + "\n", encoding="utf-8")
    info = DatasetInfo(
        out_dir, n_ids, len(lines), attribute_capacity(), splits, manifest_hash(out_dir)
    )
    log.info(
        f"dataset written to {out_dir}: {n_ids} identities, {len(lines)} records "
        f"(train {splits['train']}, test {splits['test']}), capacity {info.capacity}"
    )
    return info


def manifest_hash(out_dir):
    path = Path(out_dir)
    path = path / "manifest.jsonl" if path.is_dir() else path
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as e:
        raise LoadError(f"cannot read manifest {path}: {e}")


def load_dataset(manifest, split=None, lexicon=None):
    """
    Read and verify every record (blob present, checksum, caption attributes).

    :param manifest: manifest.jsonl path or its directory.
    :param split: optional "train" / "test" filter.
    """
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.jsonl"
    if not manifest.exists():
        raise LoadError(f"manifest {manifest} not found")
    root = manifest.parent
    blobs = {}
    records = []
    for n, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            record = DatasetRecord(
                int(row["id"]), row["image_path"], row["caption"], row["split"], row["checksum"]
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise LoadError(f"{manifest}:{n}: malformed record: {e}")
        if split is not None and record.split != split:
            continue
        if record.image_path not in blobs:
            blob_path = root / record.image_path
            try:
                raw = blob_path.read_bytes()
            except OSError:
                raise LoadError(f"record {n} (id {record.identity_id}): missing blob {record.image_path}")
            if hashlib.sha256(raw).hexdigest() != record.checksum:
                raise LoadError(f"record {n} (id {record.identity_id}): checksum mismatch for {record.image_path}")
            blobs[record.image_path] = decode_blob(raw, record.image_path)
        record.image = blobs[record.image_path]
        if lexicon is not None:
            spans = tokenize(record.caption, Vocabulary(), 10_000, lexicon=lexicon).attribute_spans
            if len(spans) < 2:
                raise LoadError(f"record {n} (id {record.identity_id}): caption names fewer than 2 attributes")
        records.append(record)
    return records


def load_corpus(out_dir, split=None):
    """Records plus the vocabulary, lexicon and ground-truth persons stored next to them."""
    out_dir = Path(out_dir)
    lexicon = PosLexicon.load(out_dir / "lexicon.tsv")
    vocab = Vocabulary.load(out_dir / "vocab.txt")
    persons = {}
    persons_path = out_dir / "persons.jsonl"
    if persons_path.exists():
        for line in persons_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                persons[row["id"]] = PersonSpec(row["id"], {k: tuple(v) for k, v in row["attributes"].items()})
    records = load_dataset(out_dir, split=split, lexicon=lexicon)
    return Corpus(records, vocab, lexicon, persons)


@dataclass
class PairBatch:
    images: np.ndarray
    cls_ids: np.ndarray
    enc_ids: np.ndarray
    pad_mask: np.ndarray
    masked_ids: np.ndarray
    mask_positions: list
    mask_labels: list
    identities: np.ndarray
    record_indices: np.ndarray

    @property
    def size(self):
        return len(self.identities)

    @property
    def n_masked(self):
        return int(sum(len(p) for p in self.mask_positions))


def make_batch(
    records,
    n_z,
    rng,
    alpha,
    lexicon,
    vocab,
    max_len=24,
    mask_mode="attribute",
    augment=False,
    retries=10,
):
    """
    Sample N_z positive (image, caption) pairs with at least two identities.

    Captions are tokenized with [CLS] for the encoder and [ENC] for the
    decoder; the decoder copy is masked by attribute phrase (or by token
    when ``mask_mode="token"``).
    """
    if mask_mode not in ("attribute", "token"):
        raise BatchError(f"unknown mask mode {mask_mode!r}")
    identities_all = np.asarray([r.identity_id for r in records])
    if len(np.unique(identities_all)) < 2:
        raise BatchError("records hold fewer than 2 identities; hard negatives impossible")
    for _ in range(retries):
        index = rng.choice(len(records), size=n_z, replace=n_z > len(records))
        if len(np.unique(identities_all[index])) >= 2:
            break
    else:
        raise BatchError(f"no batch with 2 identities after {retries} draws of {n_z} records")

    images, cls_rows, enc_rows, masks, masked_rows, positions, labels = [], [], [], [], [], [], []
    for i in index:
        record = records[i]
        image = record.image
        if augment and rng.random() < 0.5:
            image = image[:, ::-1]
        images.append(image)
        tokens = tokenize(record.caption, vocab, max_len, leading=CLS, lexicon=lexicon)
        dec_tokens = tokens.with_leading(ENC_ID)
        if mask_mode == "attribute":
            masked = mask_attributes(dec_tokens, dec_tokens.attribute_spans, alpha, rng)
        else:
            masked = mask_random_tokens(dec_tokens, alpha, rng)
        cls_rows.append(tokens.ids)
        enc_rows.append(dec_tokens.ids)
        masks.append(tokens.pad_mask)
        masked_rows.append(masked.ids)
        positions.append(masked.mask_positions)
        labels.append(masked.labels)

    return PairBatch(
        images=np.stack(images).astype(np.float32),
        cls_ids=np.stack(cls_rows),
        enc_ids=np.stack(enc_rows),
        pad_mask=np.stack(masks),
        masked_ids=np.stack(masked_rows),
        mask_positions=positions,
        mask_labels=labels,
        identities=identities_all[index],
        record_indices=np.asarray(index),
    )


class BatchFeed:
    """
    Step-addressed batches: batch ``k`` always comes from
    ``default_rng([seed, k])``, so a resumed run sees the same stream.
    With ``prefetch`` the next batch is built on a helper thread.
    """

    def __init__(self, records, n_z, seed, alpha, lexicon, vocab, max_len=24, mask_mode="attribute", augment=False, prefetch=False):
        self.records = records
        self.n_z = n_z
        self.seed = seed
        self.alpha = alpha
        self.lexicon = lexicon
        self.vocab = vocab
        self.max_len = max_len
        self.mask_mode = mask_mode
        self.augment = augment
        self.prefetch = prefetch

    def batch(self, step):
        rng = np.random.default_rng([self.seed, step])
        return make_batch(
            self.records,
            self.n_z,
            rng,
            self.alpha,
            self.lexicon,
            self.vocab,
            self.max_len,
            self.mask_mode,
            self.augment,
        )

    def iterate(self, start, stop):
        if not self.prefetch:
            for step in range(start, stop):
                yield step, self.batch(step)
            return

        handoff = queue.Queue(maxsize=1)
        done = threading.Event()

        def producer():
            try:
                for step in range(start, stop):
                    if done.is_set():
                        return
                    handoff.put((step, self.batch(step)))
            except Exception as e:
                handoff.put((None, e))
            else:
                handoff.put((None, None))

        worker = threading.Thread(target=producer, name="batch-prefetch", daemon=True)
        worker.start()
        try:
            while True:
                step, item = handoff.get()
                if step is None:
                    if item is not None:
                        raise item
                    break
                yield step, item
        finally:
            done.set()
            while worker.is_alive():
                try:
                    handoff.get_nowait()
                except queue.Empty:
                    worker.join(timeout=0.05)
