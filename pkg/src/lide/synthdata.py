"""Synthetic shape-world dataset: rendered images, templated captions,
binary attribute labels, disjoint class splits and episode sampling.

A class is one (shape, color, size, pattern) combination.  Images carry
position/rotation/brightness jitter, background noise and a distractor
blob so that a single support image underdetermines the class; captions
name the shape plus a random subset of the remaining attributes, so text
carries clean but partial information.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS = 0, 1, 2

CAPTIONS_PER_INSTANCE = 10


class ConfigurationError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSchema:
    """Attribute families, their renderable values, and the closed vocabulary."""

    shapes: tuple
    colors: tuple          # (name, (r, g, b)) in [0, 1]
    sizes: tuple           # (name, radius_px)
    patterns: tuple
    fillers: tuple         # non-attribute words usable in captions
    stopwords: frozenset   # subset of fillers

    def __post_init__(self):
        words = list(self.attribute_words()) + list(self.fillers)
        if len(set(words)) != len(words):
            raise ConfigurationError("attribute and filler words must be distinct")
        if not self.stopwords <= set(self.fillers):
            raise ConfigurationError("stopwords must be filler words")
        if len(self.vocab) > 64:
            raise ConfigurationError(f"vocabulary too large: {len(self.vocab)} > 64")

    def attribute_words(self):
        return (
            tuple(self.shapes)
            + tuple(name for name, _ in self.colors)
            + tuple(name for name, _ in self.sizes)
            + tuple(self.patterns)
        )

    @property
    def vocab(self):
        return ("<pad>", "<bos>", "<eos>") + self.attribute_words() + tuple(self.fillers)

    @property
    def vocab_size(self):
        return len(self.vocab)

    def token_id(self, word):
        return self.vocab.index(word)

    def word(self, token):
        return self.vocab[token]

    def stop_token_ids(self):
        return frozenset(self.token_id(w) for w in sorted(self.stopwords))

    def attribute_names(self):
        """Flat `family::value` labels matching the binary attribute vector."""
        return (
            [f"shape::{s}" for s in self.shapes]
            + [f"color::{c}" for c, _ in self.colors]
            + [f"size::{s}" for s, _ in self.sizes]
            + [f"pattern::{p}" for p in self.patterns]
        )

    @property
    def n_attributes(self):
        return len(self.shapes) + len(self.colors) + len(self.sizes) + len(self.patterns)

    def encode_words(self, words):
        """Map lowercase words to token ids; returns (ids, unknown_words)."""
        ids, unknown = [], []
        lookup = {w: i for i, w in enumerate(self.vocab)}
        for w in words:
            if w in lookup:
                ids.append(lookup[w])
            else:
                unknown.append(w)
        return ids, unknown

    def decode(self, tokens):
        return " ".join(self.vocab[t] for t in tokens if t not in (PAD, BOS, EOS))


def default_schema():
    return AttributeSchema(
        shapes=("triangle", "square", "circle", "cross"),
        colors=(
            ("red", (0.90, 0.15, 0.15)),
            ("green", (0.15, 0.75, 0.20)),
            ("blue", (0.20, 0.30, 0.90)),
            ("yellow", (0.90, 0.85, 0.20)),
            ("magenta", (0.85, 0.20, 0.80)),
            ("cyan", (0.20, 0.80, 0.85)),
        ),
        sizes=(("small", 5.0), ("large", 10.0)),
        patterns=("solid", "striped", "dotted"),
        fillers=("a", "the", "is", "this", "with", "and", "on", "shape", "canvas", "one", "drawn", "it"),
        # "shape" plays the role of the domain noun every caption could carry
        stopwords=frozenset({"a", "the", "is", "this", "with", "and", "on", "shape", "canvas", "one", "drawn", "it"}),
    )


@dataclass(frozen=True)
class ShapeClass:
    class_id: int
    shape: str
    color: str
    size: str
    pattern: str

    def attribute_vector(self, schema):
        vec = np.zeros(schema.n_attributes, dtype=np.int8)
        names = schema.attribute_names()
        for label in (
            f"shape::{self.shape}",
            f"color::{self.color}",
            f"size::{self.size}",
            f"pattern::{self.pattern}",
        ):
            vec[names.index(label)] = 1
        return vec


@dataclass
class TokenSeq:
    """A caption: token ids with per-token generation probabilities and
    stop-word weights (weight 0 silences a token in pooling)."""

    tokens: np.ndarray
    probs: np.ndarray
    weights: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)

    def __len__(self):
        return len(self.tokens)


def gold_seq(tokens, schema):
    """Wrap gold caption tokens: probability 1 everywhere, stop words zeroed."""
    tokens = np.asarray(tokens, dtype=np.int64)
    stops = schema.stop_token_ids()
    weights = np.array([0.0 if t in stops else 1.0 for t in tokens])
    return TokenSeq(tokens, np.ones(len(tokens)), weights)


@dataclass
class Instance:
    image: np.ndarray      # (H, W, 3) float64 in [0, 1], quantized to 8 bits
    captions: list         # CAPTIONS_PER_INSTANCE gold TokenSeq
    attributes: np.ndarray
    class_id: int
    index: int

    @property
    def uid(self):
        return f"{self.class_id}/{self.index}"


@dataclass
class DatasetSplit:
    name: str
    classes: list
    instances: list

    def __post_init__(self):
        self.by_class = {}
        for inst in self.instances:
            self.by_class.setdefault(inst.class_id, []).append(inst)

    def class_ids(self):
        return [c.class_id for c in self.classes]

    def all_captions(self):
        return [cap for inst in self.instances for cap in inst.captions]


@dataclass
class EpisodeTask:
    class_ids: np.ndarray  # (N,)
    supports: list         # N lists of K Instances
    queries: list          # N lists of M Instances
    labels: np.ndarray     # (N*M, N) one-hot, query order grouped by class

    @property
    def n_way(self):
        return len(self.class_ids)

    def flat_queries(self):
        return [q for group in self.queries for q in group]

    def flat_supports(self):
        return [s for group in self.supports for s in group]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _shape_mask(shape, u, v, radius):
    if shape == "circle":
        return u * u + v * v <= radius * radius
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= radius * 0.9
    if shape == "cross":
        arm = radius * 0.38
        return ((np.abs(u) <= arm) & (np.abs(v) <= radius)) | (
            (np.abs(v) <= arm) & (np.abs(u) <= radius)
        )
    if shape == "triangle":
        # equilateral, vertices at angles 90/210/330 degrees
        angles = np.deg2rad([90.0, 210.0, 330.0])
        px, py = radius * np.cos(angles), radius * np.sin(angles)
        inside = np.ones_like(u, dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            cross = (px[j] - px[i]) * (v - py[i]) - (py[j] - py[i]) * (u - px[i])
            inside &= cross >= 0
        return inside
    raise ConfigurationError(f"unknown shape {shape!r}")


def _pattern_fill(pattern, u, v, color, phase, contrast):
    """Per-pixel RGB for pixels inside the shape.

    contrast in (0, 1] scales how far pattern pixels darken; near 0 the
    pattern is present in the caption but almost invisible in pixels, so
    images alone underdetermine the class.
    """
    base = np.empty(u.shape + (3,))
    base[:] = color
    if pattern == "solid":
        return base
    dark = base * (1.0 - 0.65 * contrast)
    if pattern == "striped":
        on = ((u + phase) // 2.5).astype(int) % 2 == 0
    else:  # dotted
        gu = np.mod(u + phase, 4.0) - 2.0
        gv = np.mod(v + phase, 4.0) - 2.0
        on = gu * gu + gv * gv <= 1.2 * 1.2
    return np.where(on[..., None], base, dark)


def render_image(cls, jitter_seed, schema=None, image_size=32):
    """Draw one jittered class exemplar; deterministic in (cls, jitter_seed)."""
    schema = schema or default_schema()
    # worst case: radius jitter 1.25 plus the 2px placement margin
    if 2.0 * (dict(schema.sizes)[cls.size] * 1.25 + 2.0) >= image_size:
        raise ConfigurationError(
            f"image_size {image_size} cannot fit size {cls.size!r} shapes")
    rng = np.random.default_rng(jitter_seed)
    h = w = image_size
    tint = rng.uniform(-0.10, 0.10, size=3)  # per-image color cast
    img = 0.75 + tint + rng.uniform(-0.14, 0.14, size=(h, w, 3))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # distractor blobs (never described by captions) add clutter.  They are
    # blended halfway toward gray so the class color always stays the
    # dominant saturated foreground color, even when a bar occludes most of
    # the shape.
    palette = [rgb for _, rgb in schema.colors]
    n_blobs = int(rng.integers(2, 5))
    picks = rng.choice(len(palette), size=n_blobs, replace=False)
    for b in range(n_blobs):
        hue = np.asarray(palette[picks[b]]) * rng.uniform(0.45, 1.0)
        d_color = 0.35 * hue + 0.65 * 0.55
        d_cy, d_cx = rng.uniform(3, h - 3), rng.uniform(3, w - 3)
        d_r = rng.uniform(1.2, 2.6)
        blob = (yy - d_cy) ** 2 + (xx - d_cx) ** 2 <= d_r * d_r
        img[blob] = d_color

    # jitter ranges overlap between the two size names, so apparent size
    # does not always identify the size attribute; captions state it.
    radius = dict(schema.sizes)[cls.size] * rng.uniform(0.55, 1.25)
    margin = radius + 2.0
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    brightness = rng.uniform(0.30, 1.0)
    phase = rng.uniform(0.0, 4.0)
    # squared draw skews toward faint patterns: often the fill is nearly
    # invisible in pixels even though captions name it
    contrast = 0.05 + 0.95 * rng.uniform() ** 2

    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = _shape_mask(cls.shape, u, v, radius)

    color = np.asarray(dict((n, c) for n, c in schema.colors)[cls.color]) * brightness
    fill = _pattern_fill(cls.pattern, u, v, color, phase, contrast)
    img = np.where(mask[..., None], fill, img)

    # one background-colored bar sometimes crosses the shape and hides part
    # of its outline.  The bar is narrower than any shape, so foreground
    # pixels always survive, but the silhouette can become ambiguous.
    if rng.uniform() < 0.6:
        off = rng.uniform(-0.8, 0.8) * radius
        half = rng.uniform(0.75, 1.75)
        axis = yy - (cy + off) if rng.uniform() < 0.5 else xx - (cx + off)
        band = np.abs(axis) <= half
        strip = 0.75 + tint + rng.uniform(-0.14, 0.14, size=(h, w, 3))
        img = np.where(band[..., None], strip, img)

    img += rng.uniform(-0.08, 0.08, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    # quantize so PNG round-trips are exact
    return np.round(img * 255.0) / 255.0


# ---------------------------------------------------------------------------
# Captions
# ---------------------------------------------------------------------------

def make_captions(cls, rng, schema=None):
    """Ten templated captions naming the shape plus >=1 other attribute."""
    schema = schema or default_schema()
    caps = []
    others = [cls.color, cls.size, cls.pattern]
    for _ in range(CAPTIONS_PER_INSTANCE):
        k = int(rng.integers(1, len(others) + 1))
        picked = [others[i] for i in sorted(rng.choice(len(others), size=k, replace=False))]
        mods = list(picked)
        rng.shuffle(mods)
        template = int(rng.integers(3))
        if template == 0:
            words = ["a"] + mods + [cls.shape]
        elif template == 1:
            words = ["this", "is", "a"] + mods + [cls.shape, "shape"]
        else:
            joined = []
            for i, m in enumerate(mods):
                if i:
                    joined.append("and")
                joined.append(m)
            words = ["the", cls.shape, "is"] + joined
        ids, unknown = schema.encode_words(words)
        assert not unknown
        caps.append(gold_seq(ids + [EOS], schema))
    return caps


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

def all_combinations(schema):
    combos = []
    for s in schema.shapes:
        for c, _ in schema.colors:
            for z, _ in schema.sizes:
                for p in schema.patterns:
                    combos.append((s, c, z, p))
    return combos


def _build_instance(cls, dataset_seed, idx, schema, image_size):
    ss = np.random.SeedSequence([dataset_seed, cls.class_id, idx])
    img_ss, cap_ss = ss.spawn(2)
    jitter_seed = int(img_ss.generate_state(1)[0])
    image = render_image(cls, jitter_seed, schema, image_size)
    captions = make_captions(cls, np.random.default_rng(cap_ss), schema)
    return Instance(image, captions, cls.attribute_vector(schema), cls.class_id, idx)


def build_dataset(schema, counts, per_class, seed, image_size=32):
    """Build disjoint train/dev/test splits; deterministic given seed."""
    n_train, n_dev, n_test = counts
    combos = all_combinations(schema)
    total = n_train + n_dev + n_test
    if total > len(combos):
        raise ConfigurationError(
            f"requested {total} classes but only {len(combos)} attribute combinations exist"
        )
    order = np.random.default_rng(seed).permutation(len(combos))
    splits = []
    next_id = 0
    for name, count in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        classes = []
        instances = []
        for _ in range(count):
            s, c, z, p = combos[order[next_id]]
            cls = ShapeClass(next_id, s, c, z, p)
            next_id += 1
            classes.append(cls)
            for idx in range(per_class):
                instances.append(_build_instance(cls, seed, idx, schema, image_size))
        splits.append(DatasetSplit(name, classes, instances))
    return tuple(splits)


def sample_episode(split, n_way, k_shot, m_query, rng):
    """Sample one N-way K-shot task without replacement within classes."""
    if len(split.classes) < n_way:
        raise SamplingError(f"split {split.name!r} has {len(split.classes)} classes, need {n_way}")
    class_pos = rng.choice(len(split.classes), size=n_way, replace=False)
    class_ids = np.array([split.classes[i].class_id for i in class_pos])
    supports, queries = [], []
    for cid in class_ids:
        pool = split.by_class[cid]
        if len(pool) < k_shot + m_query:
            raise SamplingError(
                f"class {cid} has {len(pool)} instances, need {k_shot + m_query}"
            )
        chosen = rng.choice(len(pool), size=k_shot + m_query, replace=False)
        supports.append([pool[i] for i in chosen[:k_shot]])
        queries.append([pool[i] for i in chosen[k_shot:]])
    labels = np.zeros((n_way * m_query, n_way))
    for c in range(n_way):
        labels[c * m_query:(c + 1) * m_query, c] = 1.0
    return EpisodeTask(class_ids, supports, queries, labels)


# ---------------------------------------------------------------------------
# On-disk layout: meta.json, images/<split>/<class>/<idx>.png,
# captions/<split>.ndjson, attributes/<split>.csv
# ---------------------------------------------------------------------------

def save_dataset(root, schema, splits, seed, image_size=32):
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": seed,
        "image_size": image_size,
        "schema": {
            "shapes": list(schema.shapes),
            "colors": [[n, list(rgb)] for n, rgb in schema.colors],
            "sizes": [[n, r] for n, r in schema.sizes],
            "patterns": list(schema.patterns),
            "fillers": list(schema.fillers),
            "stopwords": sorted(schema.stopwords),
        },
        "splits": {
            sp.name: [
                {"class_id": c.class_id, "shape": c.shape, "color": c.color,
                 "size": c.size, "pattern": c.pattern}
                for c in sp.classes
            ]
            for sp in splits
        },
        "per_class": len(splits[0].instances) // max(1, len(splits[0].classes)),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2))
    (root / "captions").mkdir(exist_ok=True)
    (root / "attributes").mkdir(exist_ok=True)
    for sp in splits:
        with open(root / "captions" / f"{sp.name}.ndjson", "w") as cf:
            for inst in sp.instances:
                img_dir = root / "images" / sp.name / str(inst.class_id)
                img_dir.mkdir(parents=True, exist_ok=True)
                arr = np.round(inst.image * 255.0).astype(np.uint8)
                Image.fromarray(arr, mode="RGB").save(img_dir / f"{inst.index}.png")
                rec = {
                    "class_id": inst.class_id,
                    "idx": inst.index,
                    "captions": [inst_cap.tokens.tolist() for inst_cap in inst.captions],
                }
                cf.write(json.dumps(rec) + "\n")
        with open(root / "attributes" / f"{sp.name}.csv", "w", newline="") as af:
            writer = csv.writer(af)
            writer.writerow(["instance_id"] + schema.attribute_names())
            for inst in sp.instances:
                writer.writerow([inst.uid] + inst.attributes.tolist())


def load_schema(meta):
    s = meta["schema"]
    return AttributeSchema(
        shapes=tuple(s["shapes"]),
        colors=tuple((n, tuple(rgb)) for n, rgb in s["colors"]),
        sizes=tuple((n, r) for n, r in s["sizes"]),
        patterns=tuple(s["patterns"]),
        fillers=tuple(s["fillers"]),
        stopwords=frozenset(s["stopwords"]),
    )


def load_dataset(root):
    from PIL import Image

    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    schema = load_schema(meta)
    splits = []
    for name in ("train", "dev", "test"):
        classes = [
            ShapeClass(c["class_id"], c["shape"], c["color"], c["size"], c["pattern"])
            for c in meta["splits"][name]
        ]
        by_id = {c.class_id: c for c in classes}
        instances = []
        with open(root / "captions" / f"{name}.ndjson") as cf:
            for line in cf:
                rec = json.loads(line)
                cid, idx = rec["class_id"], rec["idx"]
                png = Image.open(root / "images" / name / str(cid) / f"{idx}.png")
                image = np.asarray(png, dtype=np.float64) / 255.0
                captions = [gold_seq(toks, schema) for toks in rec["captions"]]
                instances.append(
                    Instance(image, captions, by_id[cid].attribute_vector(schema), cid, idx)
                )
        splits.append(DatasetSplit(name, classes, instances))
    return schema, tuple(splits)
