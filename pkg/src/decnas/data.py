"""Desk-scale datasets and their federation into simulated clients."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MIN_CLIENT_SAMPLES = 5
SPLIT_RATIOS = (6, 2, 2)


@dataclass(frozen=True)
class Samples:
    """A labelled batch: ``features`` is ``(n, h, w, c)`` float32, ``labels`` int64."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        self.features.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Samples":
        idx = np.asarray(idx, dtype=np.int64)
        return Samples(self.features[idx], self.labels[idx])

    @staticmethod
    def concat(parts: list["Samples"]) -> "Samples":
        return Samples(np.concatenate([p.features for p in parts]), np.concatenate([p.labels for p in parts]))


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: Samples
    validation: Samples
    test: Samples
    distribution: np.ndarray

    @property
    def train_num(self) -> int:
        return len(self.train)

    @property
    def test_num(self) -> int:
        return len(self.validation)

    @property
    def size(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)

    def class_counts(self, class_count: int) -> np.ndarray:
        labels = np.concatenate([self.train.labels, self.validation.labels, self.test.labels])
        return np.bincount(labels, minlength=class_count)


@dataclass(frozen=True)
class Federation:
    clients: tuple[ClientDataset, ...]
    class_count: int

    def __post_init__(self):
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")

    def __len__(self) -> int:
        return len(self.clients)

    def by_id(self) -> dict[int, ClientDataset]:
        return {c.client_id: c for c in self.clients}

    def pooled(self, part: str) -> Samples:
        return Samples.concat([getattr(c, part) for c in self.clients])


# ------------------------------------------------------------------ sources


def synthetic(seed: int, class_count: int = 8, num_samples: int = 4000, hw: int = 32, channels: int = 1,
              noise: float = 0.6, blobs: int = 3, max_shift: int = 3) -> Samples:
    """Class-conditional Gaussian-blob images.

    Each class owns a template made of ``blobs`` Gaussian bumps at random
    positions; a sample is its class template shifted by up to ``max_shift``
    pixels, scaled by a random contrast, plus pixel noise. Labels are a seeded
    permutation of a balanced label list.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float32)
    templates = np.zeros((class_count, hw, hw, channels), dtype=np.float32)
    for c in range(class_count):
        for _ in range(blobs):
            cy, cx = rng.uniform(4, hw - 4, size=2)
            sigma = rng.uniform(1.5, 3.5)
            sign = rng.choice([-1.0, 1.0])
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            templates[c] += sign * bump[..., None] * rng.uniform(0.5, 1.0, size=channels)
    labels = rng.permutation(np.arange(num_samples) % class_count)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(num_samples, 2))
    contrast = rng.uniform(0.7, 1.3, size=num_samples).astype(np.float32)
    features = np.empty((num_samples, hw, hw, channels), dtype=np.float32)
    for i, (label, (dy, dx)) in enumerate(zip(labels, shifts)):
        features[i] = np.roll(templates[label], (dy, dx), axis=(0, 1)) * contrast[i]
    features += rng.normal(0, noise, size=features.shape).astype(np.float32)
    return Samples(features, labels.astype(np.int64))


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5" or maxval > 255:
        raise ValueError(f"{path}: only 8-bit binary PGM (P5) is supported")
    return np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w, 1)


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L" if im.mode in ("L", "1", "P", "I;16") else "RGB"))
    return arr[..., None] if arr.ndim == 2 else arr


def _resize_nearest(img: np.ndarray, hw: int, channels: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = (np.arange(hw) * h // hw).clip(0, h - 1)
    cols = (np.arange(hw) * w // hw).clip(0, w - 1)
    out = img[rows][:, cols]
    if out.shape[2] != channels:
        out = out.mean(axis=2, keepdims=True) if channels == 1 else np.repeat(out[..., :1], channels, axis=2)
    return out


def load_directory(root: str | Path, hw: int = 32, channels: int = 1) -> Samples:
    """One subdirectory per class, labels assigned in sorted-name order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"{root} has no class subdirectories")
    feats, labels = [], []
    for label, cdir in enumerate(classes):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in (".png", ".pgm"))
        if not files:
            raise ValueError(f"class {cdir.name!r} has zero samples")
        for f in files:
            feats.append(_resize_nearest(_read_image(f), hw, channels).astype(np.float32) / 255.0)
            labels.append(label)
    return Samples(np.stack(feats), np.asarray(labels, dtype=np.int64))


def load_dataset(source: str, class_count: int = 8, seed: int = 0, num_samples: int = 4000, hw: int = 32,
                 channels: int = 1, **synthetic_kw) -> Samples:
    if source in ("synthetic", "builtin-synthetic"):
        samples = synthetic(seed, class_count, num_samples, hw, channels, **synthetic_kw)
    else:
        samples = load_directory(source, hw, channels)
    counts = np.bincount(samples.labels, minlength=class_count)
    if len(counts) > class_count:
        raise ValueError(f"dataset has {len(counts)} classes, expected {class_count}")
    if (counts == 0).any():
        raise ValueError(f"class {int(np.argmin(counts))} has zero samples")
    return samples


# ------------------------------------------------------------------ sharding


def distribution_vector(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("distribution of an empty client is undefined")
    return np.bincount(labels, minlength=class_count) / labels.size


def split_sizes(n: int) -> tuple[int, int, int]:
    """6:2:2 sizes by largest remainder, each part at least one."""
    if n < MIN_CLIENT_SAMPLES:
        raise ValueError(f"need at least {MIN_CLIENT_SAMPLES} samples to split, got {n}")
    total = sum(SPLIT_RATIOS)
    exact = [n * r / total for r in SPLIT_RATIOS]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in (1, 2):
        if sizes[i] == 0:
            sizes[i] = 1
            sizes[0] -= 1
    return tuple(sizes)


def split_client(samples: Samples, rng: np.random.Generator) -> tuple[Samples, Samples, Samples]:
    """Seeded 6:2:2 split, stratified by label where counts permit.

    Each class's shuffled members are dealt into the three parts by quota, so
    a class with several samples lands in every part when the sizes allow.
    """
    n_train, n_val, n_test = split_sizes(len(samples))
    quotas = np.array([n_train, n_val, n_test])
    taken = np.zeros(3, dtype=np.int64)
    parts: list[list[int]] = [[], [], []]
    # interleave classes so the running proportions track the 6:2:2 targets
    order = []
    for c in np.unique(samples.labels):
        members = rng.permutation(np.flatnonzero(samples.labels == c))
        order.extend((k / len(members), c, int(m)) for k, m in enumerate(members))
    order.sort()
    for _, _, idx in order:
        deficit = quotas * (taken.sum() + 1) / quotas.sum() - taken
        deficit[taken >= quotas] = -np.inf
        part = int(np.argmax(deficit))
        parts[part].append(idx)
        taken[part] += 1
    return tuple(samples.take(sorted(p)) for p in parts)


def shard_clients(samples: Samples, num_clients: int, class_count: int, mode: str = "iid",
                  classes_per_client: int = 2, seed: int = 0, size_sigma: float = 0.5) -> Federation:
    """Split ``samples`` into a federation of disjoint client datasets.

    ``iid``: uniform random split with sizes differing by at most one.
    ``label_skew``: each client sees exactly ``classes_per_client`` classes,
    dealt round-robin over a random class permutation; client sizes follow a
    normalised log-normal draw.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    n = len(samples)
    if n < MIN_CLIENT_SAMPLES * num_clients:
        raise ValueError(f"{n} samples cannot give {num_clients} clients {MIN_CLIENT_SAMPLES} samples each")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5AAD]))
    if mode == "iid":
        shards = np.array_split(rng.permutation(n), num_clients)
    elif mode == "label_skew":
        shards = _label_skew(samples.labels, num_clients, class_count, classes_per_client, rng, size_sigma)
    else:
        raise ValueError(f"unknown shard mode {mode!r}")

    clients = []
    for cid, idx in enumerate(shards):
        if len(idx) < MIN_CLIENT_SAMPLES:
            log.warning("client %d has %d samples (< %d); excluded", cid, len(idx), MIN_CLIENT_SAMPLES)
            continue
        local = samples.take(np.sort(idx))
        train, val, test = split_client(local, rng)
        clients.append(ClientDataset(cid, train, val, test, distribution_vector(local.labels, class_count)))
    return Federation(tuple(clients), class_count)


def _label_skew(labels, num_clients, class_count, k, rng, sigma):
    if not 1 <= k <= class_count:
        raise ValueError(f"classes_per_client must lie in [1, {class_count}]")
    perm = rng.permutation(class_count)
    client_classes = [[int(perm[(cid * k + j) % class_count]) for j in range(k)] for cid in range(num_clients)]
    weights = rng.lognormal(0.0, sigma, size=num_clients)
    pools = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in range(class_count)}
    # each client's size share is spread evenly over its classes
    demand = np.zeros((num_clients, class_count))
    for cid, cls in enumerate(client_classes):
        for c in cls:
            demand[cid, c] = weights[cid] / k
    shards: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(class_count):
        holders = np.flatnonzero(demand[:, c])
        if holders.size == 0:
            continue
        pool = pools[c]
        share = demand[holders, c] / demand[holders, c].sum()
        counts = _largest_remainder(share, len(pool))
        start = 0
        for cid, cnt in zip(holders, counts):
            shards[cid].extend(pool[start : start + cnt])
            start += cnt
    return [np.asarray(s, dtype=np.int64) for s in shards]


def _largest_remainder(share: np.ndarray, total: int) -> list[int]:
    exact = share * total
    counts = np.floor(exact).astype(int)
    rem = total - counts.sum()
    order = sorted(range(len(share)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return counts.tolist()
