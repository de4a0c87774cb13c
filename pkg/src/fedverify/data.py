"""Per-client datasets: synthetic fingerprint stand-ins, PGM corpora, pairs, partitions."""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FILENAME_RE = re.compile(r"^(\d+)_(\d+)\.(pgm|PGM)$")


class CorpusError(RuntimeError):
    pass


@dataclass
class Subject:
    subject_id: int
    impressions: list[np.ndarray]

    def __post_init__(self):
        if not self.impressions:
            raise ValueError(f"subject {self.subject_id} has no impressions")


@dataclass
class Pair:
    a: np.ndarray
    b: np.ndarray
    y: int
    subject_a: int
    subject_b: int


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def _ridge_image(size, params, rot, shift, contrast, rng, noise_level):
    theta, freq, curv, cx, cy, phase = params
    grid = np.linspace(-1.0, 1.0, size)
    v, u = np.meshgrid(grid, grid, indexing="ij")
    # sample the subject's pattern in a rotated and shifted frame
    c, s = np.cos(rot), np.sin(rot)
    ur = c * u - s * v + shift[0]
    vr = s * u + c * v + shift[1]
    arg = (
        np.pi * freq * (ur * np.cos(theta) + vr * np.sin(theta))
        + 2.0 * np.pi * curv * ((ur - cx) ** 2 + (vr - cy) ** 2)
        + phase
    )
    img = 0.5 + 0.5 * contrast * np.sin(arg)
    if noise_level > 0:
        img = img + rng.normal(0.0, noise_level, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(
    num_subjects: int = 100,
    impressions_per_subject: int = 8,
    image_size: int = 128,
    noise_level: float = 0.1,
    seed: int = 0,
    max_rotation_deg: float = 12.0,
    max_shift: float = 0.12,
) -> list[Subject]:
    """Generate ridge-like grating subjects with jittered impressions.

    Each subject gets its own orientation, ridge frequency, curvature centre
    and phase. An impression samples that pattern under a small rotation and
    translation, a contrast change, and additive Gaussian noise.
    """
    if num_subjects < 2 or impressions_per_subject < 2:
        raise ValueError("need at least 2 subjects with 2 impressions each")
    if image_size < 4:
        raise ValueError("image_size must be at least 4")
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    rng = np.random.default_rng(seed)
    # keep ridge frequency under Nyquist for small images
    max_cycles = min(6.0, image_size / 4.0)
    subjects = []
    for sid in range(num_subjects):
        params = (
            rng.uniform(0.0, np.pi),
            rng.uniform(1.0, max_cycles),
            rng.uniform(-0.6, 0.6),
            rng.uniform(-0.5, 0.5),
            rng.uniform(-0.5, 0.5),
            rng.uniform(0.0, 2.0 * np.pi),
        )
        imgs = []
        for _ in range(impressions_per_subject):
            rot = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg))
            shift = rng.uniform(-max_shift, max_shift, size=2)
            contrast = rng.uniform(0.6, 1.0)
            imgs.append(_ridge_image(image_size, params, rot, shift, contrast, rng, noise_level))
        subjects.append(Subject(sid + 1, imgs))
    return subjects


# ---------------------------------------------------------------------------
# PGM corpus I/O
# ---------------------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit greyscale image as a uint8 array."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise CorpusError(f"{path}: truncated header")
        if data[pos : pos + 1] == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise CorpusError(f"{path}: truncated header")
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic = tokens[0]
    if magic in (b"P6", b"P3"):
        raise CorpusError(f"{path}: colour image ({magic.decode()}), expected greyscale P5")
    if magic != b"P5":
        raise CorpusError(f"{path}: not a binary PGM (magic {magic[:8]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorpusError(f"{path}: malformed header") from exc
    if width < 1 or height < 1 or not 0 < maxval <= 255:
        raise CorpusError(f"{path}: unsupported size or maxval {maxval} (8-bit only)")
    pos += 1  # single whitespace byte after maxval
    pixels = data[pos : pos + width * height]
    if len(pixels) != width * height:
        raise CorpusError(f"{path}: expected {width * height} pixel bytes, found {len(pixels)}")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img


def write_pgm(path, image: np.ndarray) -> None:
    """Write values in [0, 1] (float) or uint8 as a binary P5 file."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize to size x size."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    ys = np.linspace(0.0, h - 1.0, size)
    xs = np.linspace(0.0, w - 1.0, size)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bottom = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bottom * fy


def ingest_corpus(root_path, image_size: int = 128, errors: list | None = None) -> list[Subject]:
    """Load ``<subject>_<impression>.pgm`` files into subjects sorted by id.

    Bad files are logged (and appended to ``errors`` if given) and skipped.
    Raises CorpusError if nothing usable is found.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise CorpusError(f"{root}: not a directory")
    found: dict[int, list[tuple[int, np.ndarray]]] = {}
    for path in sorted(root.iterdir()):
        if not path.is_file():
            continue
        match = FILENAME_RE.match(path.name)
        try:
            if match is None:
                raise CorpusError(f"{path}: name does not follow <subject>_<impression>.pgm")
            img = read_pgm(path)
        except (CorpusError, OSError) as exc:
            msg = str(exc)
            log.warning("skipping %s", msg)
            if errors is not None:
                errors.append(msg)
            continue
        scaled = resize_bilinear(img.astype(np.float64) / 255.0, image_size)
        found.setdefault(int(match.group(1)), []).append((int(match.group(2)), scaled))
    if not found:
        raise CorpusError(f"{root}: no valid subjects found")
    return [
        Subject(sid, [img for _, img in sorted(items, key=lambda t: t[0])])
        for sid, items in sorted(found.items())
    ]


def write_corpus(subjects: list[Subject], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for subj in subjects:
        for k, img in enumerate(subj.impressions, start=1):
            path = out / f"{subj.subject_id}_{k}.pgm"
            write_pgm(path, img)
            paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scheme:
    kind: str = "dirichlet"  # iid | dirichlet | shard
    alpha: float = 0.3
    shards: int = 2

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet", "shard"):
            raise ValueError(f"unknown partition scheme {self.kind!r}")
        if self.kind == "dirichlet" and not self.alpha > 0:
            raise ValueError("dirichlet alpha must be positive")
        if self.kind == "shard" and self.shards < 2:
            raise ValueError("shard count must be at least 2")

    def __str__(self):
        if self.kind == "dirichlet":
            return f"dirichlet({self.alpha:g})"
        if self.kind == "shard":
            return f"shard({self.shards})"
        return "iid"


Ref = tuple[int, int]  # (subject_id, impression index)


@dataclass
class Partition:
    assignments: dict[int, list[Ref]]
    scheme: Scheme = field(default_factory=Scheme)

    def sizes(self) -> dict[int, int]:
        return {c: len(refs) for c, refs in self.assignments.items()}

    def client_data(self, subjects: list[Subject]) -> dict[int, list[Subject]]:
        """Materialise each client's impressions grouped by subject."""
        by_id = {s.subject_id: s for s in subjects}
        out = {}
        for cid, refs in self.assignments.items():
            grouped: dict[int, list[np.ndarray]] = {}
            for sid, k in refs:
                grouped.setdefault(sid, []).append(by_id[sid].impressions[k])
            out[cid] = [Subject(sid, imgs) for sid, imgs in sorted(grouped.items())]
        return out


def _subject_counts(refs: list[Ref]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for sid, _ in refs:
        counts[sid] = counts.get(sid, 0) + 1
    return counts


def _progress(refs: list[Ref]) -> int:
    # subjects with two or more impressions, capped at the two a client needs
    return min(2, sum(1 for n in _subject_counts(refs).values() if n >= 2))


def _usable(refs: list[Ref]) -> bool:
    # both pair labels need two subjects with at least two impressions each
    return _progress(refs) == 2


def _pull_subject(assign: dict[int, list[Ref]], target: int) -> bool:
    """Top up one subject on ``target`` to two impressions, taking from the largest donors.

    A donor only gives an impression if that leaves its own progress toward
    two usable subjects intact. Returns False when no subject can be topped up.
    """
    have = _subject_counts(assign[target])
    donors = sorted((c for c in assign if c != target), key=lambda c: (-len(assign[c]), c))
    elsewhere: dict[int, int] = {}
    for c in donors:
        for sid, n in _subject_counts(assign[c]).items():
            elsewhere[sid] = elsewhere.get(sid, 0) + n
    candidates = sorted(
        (sid for sid in elsewhere if have.get(sid, 0) < 2),
        key=lambda sid: (2 - have.get(sid, 0), -elsewhere[sid], sid),
    )
    for sid in candidates:
        need = 2 - have.get(sid, 0)
        moves: list[tuple[int, Ref]] = []
        trial = {c: list(assign[c]) for c in donors}
        for c in donors:
            for ref in [r for r in trial[c] if r[0] == sid]:
                if len(moves) == need:
                    break
                rest = [r for r in trial[c] if r != ref]
                if _progress(rest) >= _progress(trial[c]):
                    trial[c] = rest
                    moves.append((c, ref))
        if len(moves) == need:
            for c, ref in moves:
                assign[c].remove(ref)
                assign[target].append(ref)
            return True
    return False


def _repair(assign: dict[int, list[Ref]], max_moves: int = 10_000) -> None:
    # each pull raises one broken client's progress and lowers no donor's
    for _ in range(max_moves):
        broken = [c for c, refs in assign.items() if not _usable(refs)]
        if not broken:
            return
        if not _pull_subject(assign, broken[0]):
            raise ValueError("partition infeasible: cannot give every client two usable subjects")
    raise ValueError("partition repair did not converge")


def partition(
    subjects: list[Subject], num_clients: int, scheme: Scheme | None = None, seed: int = 0
) -> Partition:
    """Split every impression across clients under an iid, Dirichlet, or shard scheme.

    Every client ends up with at least two subjects holding two or more
    impressions, so both match and non-match pairs can be drawn locally.
    """
    scheme = scheme or Scheme()
    if num_clients < 1:
        raise ValueError("num_clients must be at least 1")
    rng = np.random.default_rng(seed)
    refs = [(s.subject_id, k) for s in subjects for k in range(len(s.impressions))]
    if num_clients * 2 > len(subjects):
        raise ValueError(
            f"{num_clients} clients need at least {2 * num_clients} subjects, got {len(subjects)}"
        )
    assign: dict[int, list[Ref]] = {c: [] for c in range(num_clients)}

    if scheme.kind == "iid":
        order = rng.permutation(len(refs))
        for c, chunk in enumerate(np.array_split(order, num_clients)):
            assign[c] = [refs[i] for i in chunk]
    elif scheme.kind == "shard":
        ordered = sorted(refs)
        shards = np.array_split(np.arange(len(ordered)), num_clients * scheme.shards)
        for k, shard_id in enumerate(rng.permutation(len(shards))):
            assign[k // scheme.shards].extend(ordered[i] for i in shards[shard_id])
    else:
        _dirichlet_assign(subjects, num_clients, scheme.alpha, rng, assign)

    if num_clients > 1:
        _repair(assign)
    for c in assign:
        assign[c].sort()
    return Partition(assign, scheme)


def _dirichlet_assign(subjects, num_clients, alpha, rng, assign):
    # Per-subject Dirichlet proportions. Integer counts use largest-remainder
    # rounding biased toward clients running behind their expected total,
    # so client sizes track the drawn proportions instead of rounding noise.
    expected = np.zeros(num_clients)
    actual = np.zeros(num_clients)
    for subj in [subjects[i] for i in rng.permutation(len(subjects))]:
        n = len(subj.impressions)
        props = rng.dirichlet(np.full(num_clients, alpha))
        target = props * n
        counts = np.floor(target).astype(int)
        expected += target
        remainder = n - counts.sum()
        if remainder:
            score = (target - counts) + (expected - actual - counts)
            order = np.lexsort((rng.random(num_clients), -score))
            counts[order[:remainder]] += 1
        actual += counts
        order = rng.permutation(n)
        start = 0
        for c in range(num_clients):
            for k in order[start : start + counts[c]]:
                assign[c].append((subj.subject_id, int(k)))
            start += counts[c]


# ---------------------------------------------------------------------------
# Pairs and the evaluation split
# ---------------------------------------------------------------------------


def sample_pairs(
    client_data: list[Subject], count: int, match_fraction: float, rng: np.random.Generator
) -> list[Pair]:
    """Draw ``count`` pairs, round(match_fraction * count) of them matches."""
    if not 0.0 < match_fraction < 1.0:
        raise ValueError("match_fraction must lie strictly between 0 and 1")
    if len(client_data) < 2:
        raise ValueError("need at least two subjects to form non-matching pairs")
    multi = [s for s in client_data if len(s.impressions) >= 2]
    if not multi:
        raise ValueError("no subject has two impressions; cannot form matching pairs")
    # exact match count at shuffled positions keeps the label balance tight
    n_match = int(round(match_fraction * count))
    labels = np.zeros(count, dtype=int)
    labels[:n_match] = 1
    labels = rng.permutation(labels)
    pairs = []
    for label in labels:
        if label:
            subj = multi[rng.integers(len(multi))]
            i, j = rng.choice(len(subj.impressions), size=2, replace=False)
            pairs.append(
                Pair(subj.impressions[i], subj.impressions[j], 1, subj.subject_id, subj.subject_id)
            )
        else:
            s1, s2 = rng.choice(len(client_data), size=2, replace=False)
            a, b = client_data[s1], client_data[s2]
            pairs.append(
                Pair(
                    a.impressions[rng.integers(len(a.impressions))],
                    b.impressions[rng.integers(len(b.impressions))],
                    0,
                    a.subject_id,
                    b.subject_id,
                )
            )
    return pairs


@dataclass
class EvalSplit:
    train: list[Subject]
    eval_pairs: list[Pair]
    train_indices: dict[int, list[int]]
    eval_indices: dict[int, list[int]]


def split_eval(subjects: list[Subject], holdout_fraction: float = 0.25, seed: int = 0) -> EvalSplit:
    """Hold out impressions per subject and build a balanced global eval pair set.

    Matches are all within-subject pairs of held-out impressions; the same
    number of cross-subject non-matches is drawn without repetition.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train, train_idx, eval_idx = [], {}, {}
    held: list[tuple[int, np.ndarray]] = []
    matches: list[Pair] = []
    for subj in subjects:
        n = len(subj.impressions)
        k = min(int(round(holdout_fraction * n)), n - 1)
        order = rng.permutation(n)
        ev = sorted(int(i) for i in order[:k])
        tr = sorted(int(i) for i in order[k:])
        train_idx[subj.subject_id], eval_idx[subj.subject_id] = tr, ev
        train.append(Subject(subj.subject_id, [subj.impressions[i] for i in tr]))
        imgs = [subj.impressions[i] for i in ev]
        held.extend((subj.subject_id, img) for img in imgs)
        for i, j in itertools.combinations(range(len(imgs)), 2):
            matches.append(Pair(imgs[i], imgs[j], 1, subj.subject_id, subj.subject_id))
    cross = [
        (i, j) for i, j in itertools.combinations(range(len(held)), 2) if held[i][0] != held[j][0]
    ]
    take = min(len(matches), len(cross))
    picks = rng.choice(len(cross), size=take, replace=False) if take else []
    non_matches = [
        Pair(held[i][1], held[j][1], 0, held[i][0], held[j][0])
        for i, j in (cross[p] for p in sorted(picks))
    ]
    return EvalSplit(train, matches + non_matches, train_idx, eval_idx)


def pool_subjects(client_data: dict[int, list[Subject]]) -> list[Subject]:
    """Merge client views back into one subject list (the centralised baseline)."""
    merged: dict[int, list[np.ndarray]] = {}
    for cid in sorted(client_data):
        for subj in client_data[cid]:
            merged.setdefault(subj.subject_id, []).extend(subj.impressions)
    return [Subject(sid, imgs) for sid, imgs in sorted(merged.items())]


def num_impressions(subjects: list[Subject]) -> int:
    return sum(len(s.impressions) for s in subjects)

