"""Representation analyses over dumped features.

Covers the post-hoc studies run against trained checkpoints: class-distance
geometry, local intrinsic dimension, PCA spectra, the rank correlation between
caption quality and classification accuracy, linear attribute probes, and the
Wilcoxon signed-rank test used to compare paired probe results.
"""

import json
import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .kernels import pairwise_sq_dists
from .layers import Linear
from .tensor import Tensor, exp, log, no_grad, relu, tmean
from .textgen import pad_token_batch

SOURCES = ("h_img", "h_text", "h_mm")

_NORM_EPS = 1e-12
_RHO_TOL = 1e-12


# ---------------------------------------------------------------------------
# Feature dumps
# ---------------------------------------------------------------------------

@dataclass
class FeatureDump:
    """Feature rows for one representation source, aligned with instance ids.

    ``captions`` optionally carries the sampled gold caption (token ids) that
    produced the text-side features; the attribute probes use it to decide
    which attributes a caption actually mentions.
    """

    source: str
    features: np.ndarray     # (n, d)
    instance_ids: list       # n strings
    class_ids: np.ndarray    # (n,)
    captions: list = None    # optional per-row token-id lists

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if len(self.instance_ids) != n or self.class_ids.shape != (n,):
            raise ValueError("instance ids / class ids misaligned with rows")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite feature entries")
        if self.captions is not None and len(self.captions) != n:
            raise ValueError("captions misaligned with rows")


def save_dump(path, dump):
    """One JSON header line, then the rows packed as little-endian float32."""
    header = {
        "source": dump.source,
        "dim": int(dump.features.shape[1]),
        "count": int(dump.features.shape[0]),
        "instance_ids": list(dump.instance_ids),
        "class_ids": [int(c) for c in dump.class_ids],
    }
    if dump.captions is not None:
        header["captions"] = [[int(t) for t in c] for c in dump.captions]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(dump.features, dtype="<f4").tobytes())


def load_dump(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    n, d = header["count"], header["dim"]
    feats = np.frombuffer(raw, dtype="<f4", count=n * d).astype(np.float64)
    return FeatureDump(
        header["source"],
        feats.reshape(n, d),
        header["instance_ids"],
        np.asarray(header["class_ids"], dtype=np.int64),
        header.get("captions"),
    )


def build_feature_dumps(model, split, schema, seed=0, batch=64):
    """Encode every instance of a split into per-source FeatureDumps.

    One gold caption is sampled per instance and feeds the text-side sources;
    ablations without a text encoder yield only h_img.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    insts = split.instances
    caps = [inst.captions[rng.integers(len(inst.captions))] for inst in insts]
    with_text = model.cfg.uses_text_encoder
    rows = {"h_img": []}
    if with_text:
        rows["h_text"] = []
        rows["h_mm"] = []
    with no_grad():
        for s in range(0, len(insts), batch):
            chunk = insts[s:s + batch]
            imgs = np.stack([i.image for i in chunk])
            h = model.encode_image(imgs)
            if with_text:
                tokens, probs, weights = pad_token_batch(caps[s:s + batch])
                fb = model.bundle(h, tokens, probs, weights)
                rows["h_img"].append(_as_array(fb.image_feat))
                rows["h_text"].append(_as_array(fb.text_feat))
                rows["h_mm"].append(_as_array(fb.fused_feat))
            else:
                rows["h_img"].append(_as_array(h))
    ids = [i.uid for i in insts]
    cls = np.array([i.class_id for i in insts], dtype=np.int64)
    toks = [[int(t) for t in c.tokens] for c in caps]
    return {
        src: FeatureDump(src, np.concatenate(parts), ids, cls, toks)
        for src, parts in rows.items()
    }


def _as_array(x):
    return np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Class geometry
# ---------------------------------------------------------------------------

def class_distances(dump):
    """Mean cosine distance within classes and across classes.

    Cosine distance is 1 - cosine similarity on eps-stabilized row norms;
    averages run over unordered pairs.
    """
    labels = np.asarray(dump.class_ids)
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2 or counts.min() < 2:
        raise ValueError("need at least 2 classes with 2 instances each")
    x = np.asarray(dump.features, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _NORM_EPS)
    unit = x / norms
    dist = 1.0 - unit @ unit.T
    iu, ju = np.triu_indices(len(labels), k=1)
    same = labels[iu] == labels[ju]
    pair_d = dist[iu, ju]
    return float(pair_d[same].mean()), float(pair_d[~same].mean())


@dataclass
class LidResult:
    mean_lid: float
    per_point: np.ndarray
    zero_neighbors_excluded: int
    points_skipped: int


def lid_estimate(points, n_nn=20):
    """Maximum-likelihood local intrinsic dimension, averaged over points.

    Per point, with r_1 <= ... <= r_k the Euclidean distances to its k = n_nn
    nearest neighbors (self excluded),

        lid(x) = -1 / ((1/k) * sum_i log(r_i / r_k))

    Exact-duplicate neighbors give r = 0 and carry no scale information; they
    are dropped before taking the k nearest, and the drop count is reported.
    Points left with fewer than k positive distances, or with all k neighbors
    at one radius, are skipped (also counted).
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be a 2-D array")
    n = x.shape[0]
    if n <= n_nn:
        raise ValueError(f"need more than n_nn={n_nn} points, got {n}")
    sq = np.sort(pairwise_sq_dists(x), axis=1)
    zero_counts = (sq == 0.0).sum(axis=1)
    excluded = int(zero_counts.sum()) - n  # one zero per row is the point itself
    lids = []
    skipped = 0
    for i in range(n):
        row = sq[i, zero_counts[i]:zero_counts[i] + n_nn]
        if row.shape[0] < n_nn:
            skipped += 1
            continue
        # log(r_i / r_k) = 0.5 * log(sq_i / sq_k); the i = k term is zero
        denom = 0.5 * np.log(row / row[-1]).mean()
        if denom == 0.0:
            skipped += 1
            continue
        lids.append(-1.0 / denom)
    if not lids:
        raise ValueError("no point had enough distinct neighbors")
    per_point = np.asarray(lids)
    return LidResult(float(per_point.mean()), per_point, excluded, skipped)


def pca_cumulative(features):
    """Cumulative explained-variance curve of the centered covariance."""
    x = getattr(features, "features", features)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 points")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    vals = np.linalg.eigvalsh(cov)[::-1]
    vals = np.maximum(vals, 0.0)
    csum = np.cumsum(vals)
    if csum[-1] == 0.0:
        return np.ones_like(csum)
    return csum / csum[-1]


# ---------------------------------------------------------------------------
# Rank statistics
# ---------------------------------------------------------------------------

def _rankdata(x):
    """Ranks 1..n with ties averaged (midranks)."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.shape[0])
    base = np.arange(1.0, x.shape[0] + 1.0)
    xs = x[order]
    i = 0
    while i < x.shape[0]:
        j = i
        while j + 1 < x.shape[0] and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = base[i:j + 1].mean()
        i = j + 1
    return ranks


def _pearson(a, b):
    ac = a - a.mean()
    bc = b - b.mean()
    den = math.sqrt(float((ac * ac).sum()) * float((bc * bc).sum()))
    if den == 0.0:
        return 0.0
    return float((ac * bc).sum()) / den


@dataclass
class SpearmanResult:
    rho: float
    p_value: float
    degenerate: bool = False
    bin_scores: np.ndarray = None
    bin_accuracy: np.ndarray = None


def binned_spearman(scores, flags, bins=30):
    """Spearman rank correlation between binned caption score and accuracy.

    Instances are sorted by score, split into ``bins`` near-equal contiguous
    bins, and the per-bin mean score is correlated against the per-bin mean of
    the correctness flags. Two-sided p comes from exact permutation
    enumeration for bins <= 10 and the t approximation above that. Constant
    scores (or constant bin accuracies) leave ranks undefined; those return
    rho = 0 flagged degenerate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=np.float64)
    if scores.shape != flags.shape or scores.ndim != 1:
        raise ValueError("scores and flags must be aligned 1-D vectors")
    if bins < 2 or scores.shape[0] < bins:
        raise ValueError("need at least `bins` instances and bins >= 2")
    order = np.argsort(scores, kind="stable")
    bin_scores = np.array([scores[ix].mean() for ix in np.array_split(order, bins)])
    bin_acc = np.array([flags[ix].mean() for ix in np.array_split(order, bins)])
    if np.all(bin_scores == bin_scores[0]) or np.all(bin_acc == bin_acc[0]):
        return SpearmanResult(0.0, 1.0, True, bin_scores, bin_acc)
    rx = _rankdata(bin_scores)
    ry = _rankdata(bin_acc)
    rho = _pearson(rx, ry)
    if bins <= 10:
        p = _spearman_exact_p(rx, ry, rho)
    else:
        p = _spearman_t_p(rho, bins)
    return SpearmanResult(rho, p, False, bin_scores, bin_acc)


def _spearman_exact_p(rx, ry, rho, chunk=65536):
    """Fraction of the n! orderings of one rank vector with |rho| >= observed."""
    n = rx.shape[0]
    xc = rx - rx.mean()
    yc = ry - ry.mean()
    den = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    target = abs(rho) - _RHO_TOL
    hits = 0
    total = 0
    buf = []
    for perm in permutations(range(n)):
        buf.append(perm)
        if len(buf) == chunk:
            hits, total = _flush_perms(buf, xc, yc, den, target, hits, total)
            buf = []
    if buf:
        hits, total = _flush_perms(buf, xc, yc, den, target, hits, total)
    return hits / total


def _flush_perms(buf, xc, yc, den, target, hits, total):
    rhos = yc[np.asarray(buf)] @ xc / den
    return hits + int((np.abs(rhos) >= target).sum()), total + len(buf)


def _spearman_t_p(rho, n):
    if abs(rho) >= 1.0:
        return 0.0
    df = n - 2
    t2 = rho * rho * df / (1.0 - rho * rho)
    return _betainc_reg(0.5 * df, 0.5, df / (df + t2))


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    all_zero: bool = False


def wilcoxon_signed_rank(a, b):
    """Two-sided Wilcoxon signed-rank test on paired vectors.

    Zero differences are dropped; ties in |difference| take midranks. The
    statistic is min(W+, W-). For n <= 12 retained pairs the p-value is exact
    over all 2^n sign assignments; above that a normal approximation with
    continuity correction is used. All-zero differences return p = 1, flagged.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("inputs must be aligned 1-D vectors")
    d = d[d != 0.0]
    n = d.shape[0]
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, True)
    ranks = _rankdata(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    lo, hi = min(w_pos, w_neg), max(w_pos, w_neg)
    if n <= 12:
        bits = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
        t = bits @ ranks
        p = (int((t <= lo + 1e-9).sum()) + int((t >= hi - 1e-9).sum())) / (1 << n)
    else:
        mu = ranks.sum() / 2.0
        sigma = math.sqrt(float((ranks * ranks).sum()) / 4.0)
        z = (lo - mu + 0.5) / sigma
        p = math.erfc(-z / math.sqrt(2.0))
    return WilcoxonResult(min(w_pos, w_neg), min(p, 1.0), n)


def _betainc_reg(a, b, x):
    """Regularized incomplete beta I_x(a, b) via the Lentz continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _betacf(a, b, x, max_iter=200, eps=3e-14):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def correlation_from_eval(per_task, bins=30):
    """Binned Spearman over per-query (caption score, correct) pairs."""
    scores, flags = [], []
    for rec in per_task:
        scores.extend(rec["caption_scores"])
        flags.extend(rec["correct"])
    return binned_spearman(np.asarray(scores), np.asarray(flags), bins=bins)


# ---------------------------------------------------------------------------
# Attribute probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeSplit:
    """Aligned probe inputs for one dataset split.

    ``mentioned`` marks, per instance and attribute, whether the attribute's
    value word occurs in the caption sampled for that instance.
    """

    feats: dict        # source -> (n, d)
    labels: np.ndarray  # (n, n_attr) 0/1
    mentioned: np.ndarray  # (n, n_attr) 0/1


@dataclass
class ProbeResult:
    sources: tuple
    attributes: list   # kept attributes: dict records with per-source results
    dropped: list      # (name, reason)
    wilcoxon: WilcoxonResult
    direction: str     # source with significantly higher accuracy, or "none"


def probe_split(dump_by_source, split, schema, sources=("h_img", "h_text")):
    """Assemble a ProbeSplit from FeatureDumps sharing instance order."""
    ref = dump_by_source[sources[0]]
    caps = None
    for src in sources:
        d = dump_by_source[src]
        if d.instance_ids != ref.instance_ids:
            raise ValueError("feature dumps are not aligned by instance")
        if d.captions is not None:
            caps = d.captions
    if caps is None:
        raise ValueError("no dump carries sampled captions")
    names = schema.attribute_names()
    attr_vec = {c.class_id: c.attribute_vector(schema) for c in split.classes}
    labels = np.stack([attr_vec[cid] for cid in ref.class_ids])
    value_tok = [schema.token_id(name.split("::", 1)[1]) for name in names]
    mentioned = np.zeros_like(labels)
    for i, cap in enumerate(caps):
        toks = set(cap)
        for j, tok in enumerate(value_tok):
            mentioned[i, j] = 1 if tok in toks else 0
    feats = {src: dump_by_source[src].features for src in sources}
    return ProbeSplit(feats, labels, mentioned)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def train_probe(feats, labels, steps=300, lr=0.05, seed=0):
    """One linear sigmoid classifier over all attributes, BCE-with-logits."""
    from .training import Adam

    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    lin = Linear(feats.shape[1], labels.shape[1], rng)
    opt = Adam({"probe": {"lr": lr, "params": list(lin.named_parameters())}})
    x = Tensor(np.asarray(feats, dtype=np.float64))
    y = Tensor(np.asarray(labels, dtype=np.float64))
    for _ in range(steps):
        opt.zero_grad()
        z = lin(x)
        az = relu(z) + relu(-z)
        loss = tmean(relu(z) - z * y + log(exp(-az) + 1.0))
        loss.backward()
        opt.step()
    return lin


def f1_threshold(probs, labels):
    """Probability cut maximizing F1; lowest cut wins ties, no positives -> 1.0+."""
    labels = np.asarray(labels)
    if labels.sum() == 0:
        return float(np.max(probs) + 1.0)
    best_thr, best_f1 = None, -1.0
    for c in np.unique(probs):
        pred = probs >= c
        tp = int((pred & (labels == 1)).sum())
        fp = int((pred & (labels == 0)).sum())
        fn = int((~pred & (labels == 1)).sum())
        f1 = 2.0 * tp / (2 * tp + fp + fn) if tp else 0.0
        if f1 > best_f1:
            best_thr, best_f1 = float(c), f1
    return best_thr


def probe_attributes(train, dev, test, attribute_names,
                     sources=("h_img", "h_text"), min_correct=20,
                     min_positive=20, steps=300, lr=0.05, seed=0):
    """Linear probes per source; per-attribute thresholds picked on dev by F1.

    Test instances where an attribute is positive but its value word is absent
    from the sampled caption are ignored for that attribute. Attributes with
    fewer than ``min_correct`` correct predictions under any source or fewer
    than ``min_positive`` retained positives are dropped from the comparison,
    as are attributes with no positive training instance.
    """
    n_attr = len(attribute_names)
    if any(s.labels.shape[1] != n_attr for s in (train, dev, test)):
        raise ValueError("attribute label width mismatch")
    correct = {}
    thresholds = {}
    for k, src in enumerate(sources):
        clf = train_probe(train.feats[src], train.labels, steps, lr, seed + k)
        p_dev = _sigmoid(clf.fwd_np(dev.feats[src]))
        thr = np.array([f1_threshold(p_dev[:, j], dev.labels[:, j])
                        for j in range(n_attr)])
        p_test = _sigmoid(clf.fwd_np(test.feats[src]))
        pred = p_test >= thr[None, :]
        correct[src] = pred == (test.labels == 1)
        thresholds[src] = thr
    # an instance counts for an attribute unless the attribute is positive
    # there while the sampled caption never mentions it
    valid = ~((test.labels == 1) & (test.mentioned == 0))
    kept, dropped = [], []
    for j, name in enumerate(attribute_names):
        if train.labels[:, j].sum() == 0:
            dropped.append((name, "no positive training instance"))
            continue
        rows = valid[:, j]
        n_eval = int(rows.sum())
        n_pos = int(test.labels[rows, j].sum())
        if n_eval == 0:
            dropped.append((name, "no evaluable instances"))
            continue
        accs = {src: float(correct[src][rows, j].mean()) for src in sources}
        n_corr = {src: int(correct[src][rows, j].sum()) for src in sources}
        if min(n_corr.values()) < min_correct:
            dropped.append((name, f"correct predictions < {min_correct}"))
            continue
        if n_pos < min_positive:
            dropped.append((name, f"positives < {min_positive}"))
            continue
        kept.append({
            "name": name,
            "n_eval": n_eval,
            "n_positive": n_pos,
            "accuracy": accs,
            "n_correct": n_corr,
            "correct": {src: correct[src][rows, j].astype(np.int8)
                        for src in sources},
            "threshold": {src: float(thresholds[src][j]) for src in sources},
        })
    if len(sources) == 2 and kept:
        a = np.array([rec["accuracy"][sources[0]] for rec in kept])
        b = np.array([rec["accuracy"][sources[1]] for rec in kept])
        wx = wilcoxon_signed_rank(a, b)
        if wx.p_value < 0.05 and a.mean() != b.mean():
            direction = sources[0] if a.mean() > b.mean() else sources[1]
        else:
            direction = "none"
    else:
        wx = WilcoxonResult(0.0, 1.0, 0, True)
        direction = "none"
    return ProbeResult(tuple(sources), kept, dropped, wx, direction)


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

def geometry_report(dumps, n_nn=20):
    """Class distances, mean LID, and PCA curve for each dumped source."""
    rep = {}
    for src, dump in dumps.items():
        inner, inter = class_distances(dump)
        k = min(n_nn, dump.features.shape[0] - 1)
        lid = lid_estimate(dump.features, n_nn=k)
        curve = pca_cumulative(dump.features)
        rep[src] = {
            "inner_distance": inner,
            "inter_distance": inter,
            "distance_ratio": inner / inter if inter > 0 else float("inf"),
            "mean_lid": lid.mean_lid,
            "lid_zero_neighbors_excluded": lid.zero_neighbors_excluded,
            "lid_points_skipped": lid.points_skipped,
            "pca_cumulative": [float(v) for v in curve],
        }
    return rep


def probe_report(result):
    """JSON-ready summary of a ProbeResult."""
    return {
        "sources": list(result.sources),
        "attributes": [
            {
                "name": rec["name"],
                "n_eval": rec["n_eval"],
                "n_positive": rec["n_positive"],
                "accuracy": rec["accuracy"],
                "n_correct": rec["n_correct"],
                "threshold": rec["threshold"],
            }
            for rec in result.attributes
        ],
        "dropped": [list(d) for d in result.dropped],
        "wilcoxon": {
            "statistic": result.wilcoxon.statistic,
            "p_value": result.wilcoxon.p_value,
            "n": result.wilcoxon.n,
            "all_zero": result.wilcoxon.all_zero,
        },
        "direction": result.direction,
    }
