"""Tokenizer, manifest I/O, synthetic paired image/caption corpus and batch loading.

The synthetic corpus is built so that contrastive alignment has real signal
but a random vision tower does not trivially separate the classes: every
class template is a different spatial arrangement of the same set of patch
tiles, so the mean patch is identical across classes.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from cleft.autograd import read_tensor, write_tensor
from cleft.errors import ConfigError, ContractError, VocabularyError

log = logging.getLogger(__name__)

PAD, BOS, EOS = 0, 1, 2
RESERVED = ("<pad>", "<bos>", "<eos>")

CLASS_NAMES = ("effusion", "edema", "nodule", "pneumonia", "atelectasis", "cardiomegaly",
               "fracture", "opacity", "consolidation", "pneumothorax")
SEVERITIES = ("mild", "moderate", "severe")
SEVERITY_GAIN = (0.6, 1.0, 1.4)
SIDES = ("left", "right")
SIDE_OFFSET = 0.5
CLASS_PROMPT = "findings of {name}"
CAPTION_TEMPLATES = (
    "{severity} {name} on the {side} side",
    "{side} sided {name} appearing {severity}",
)

MANIFEST_FIELDS = ("image_path", "caption", "class_label", "split")
SPLITS = ("train", "val", "test")


class Vocab:
    """Word-level vocabulary; PAD=0, BOS=1, EOS=2, then corpus tokens in sorted order."""

    def __init__(self, tokens: Sequence[str]):
        words = sorted(set(tokens) - set(RESERVED))
        self._set(list(RESERVED) + words)

    def _set(self, itos: list[str]) -> None:
        self.itos = itos
        self.stoi = {tok: i for i, tok in enumerate(itos)}

    @classmethod
    def from_corpus(cls, texts: Sequence[str]) -> "Vocab":
        return cls([tok for text in texts for tok in normalize(text).split()])

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> "Vocab":
        """Explicit ``token -> id`` map; reserved ids are added if absent."""
        full = {tok: i for i, tok in enumerate(RESERVED)}
        for tok, i in mapping.items():
            if i < len(RESERVED) and RESERVED[i] != tok:
                raise ConfigError(f"id {i} is reserved for {RESERVED[i]}")
            full[tok] = i
        size = max(full.values()) + 1
        itos = [""] * size
        for tok, i in full.items():
            if itos[i]:
                raise ConfigError(f"id {i} assigned to both {itos[i]!r} and {tok!r}")
            itos[i] = tok
        for i, tok in enumerate(itos):
            if not tok:
                itos[i] = f"<unused{i}>"
        vocab = cls.__new__(cls)
        vocab._set(itos)
        return vocab

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        try:
            return self.stoi[token]
        except KeyError:
            raise VocabularyError(f"token {token!r} is not in the vocabulary") from None

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}" for tok, i in sorted(self.stoi.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        mapping = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                tok, idx = line.split("\t")
                mapping[tok] = int(idx)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: expected 'token<TAB>id'") from None
        return cls.from_mapping(mapping)


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def tokenize(text: str, vocab: Vocab, max_len: int) -> np.ndarray:
    """Lowercase, whitespace-split, map to ids, append EOS, right-pad with PAD."""
    if max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {max_len}")
    ids = [vocab.id(tok) for tok in normalize(text).split()][: max_len - 1]
    ids.append(EOS)
    out = np.full(max_len, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def tokenize_batch(texts: Sequence[str], vocab: Vocab, max_len: int) -> np.ndarray:
    return np.stack([tokenize(t, vocab, max_len) for t in texts]) if texts else np.zeros((0, max_len), np.int64)


def detokenize(ids, vocab: Vocab) -> str:
    words = []
    for i in np.asarray(ids).tolist():
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


def class_name(c: int) -> str:
    return CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"finding{c}"


# --- handcrafted prompts ------------------------------------------------------

def read_prompts(path) -> dict[int, str]:
    """``class_id<TAB>caption`` per line, one line per class."""
    prompts: dict[int, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            cid, caption = line.split("\t", 1)
            cid = int(cid)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: expected 'class_id<TAB>caption'") from None
        if cid in prompts:
            raise ConfigError(f"{path}:{lineno}: duplicate class id {cid}")
        if not caption.split():
            raise ConfigError(f"{path}:{lineno}: empty caption for class {cid}")
        prompts[cid] = caption
    if sorted(prompts) != list(range(len(prompts))):
        raise ConfigError(f"{path}: class ids must be 0..C-1, got {sorted(prompts)}")
    return prompts


def write_prompts(path, prompts: dict[int, str]) -> None:
    lines = [f"{cid}\t{prompts[cid]}" for cid in sorted(prompts)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- manifest ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    image_path: str
    caption: str
    class_label: int
    split: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.image_path

    @property
    def n_classes(self) -> int:
        return max(r.class_label for r in self.rows) + 1


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            writer.writerow([r.image_path, r.caption, r.class_label, r.split])


def read_manifest(path, check_paths: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ConfigError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
        rows = []
        for rec in reader:
            if rec["split"] not in SPLITS:
                raise ConfigError(f"{path}: unknown split {rec['split']!r}")
            rows.append(ManifestRow(rec["image_path"], rec["caption"], int(rec["class_label"]), rec["split"]))
    manifest = Manifest(rows, path.parent)
    seen: dict[str, str] = {}
    for r in rows:
        if r.image_path in seen and seen[r.image_path] != r.split:
            raise ConfigError(f"{path}: {r.image_path} appears in splits {seen[r.image_path]} and {r.split}")
        seen[r.image_path] = r.split
        if check_paths and not manifest.resolve(r).is_file():
            raise ConfigError(f"{path}: image file missing: {manifest.resolve(r)}")
    return manifest


# --- synthetic corpus ---------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 4
    samples_per_class: int = 150
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    noise_std: float = 0.1
    class_only_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("synthetic corpus needs at least 2 classes")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be a multiple of patch_size")
        if self.samples_per_class < 10:
            raise ConfigError("need at least 10 samples per class for a 70/10/20 split")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def class_templates(spec: SynthSpec) -> np.ndarray:
    """``[C, H, W, ch]`` templates: one shared tile set, a distinct arrangement per class."""
    rng = np.random.default_rng([spec.seed, 1])
    g = spec.image_size // spec.patch_size
    n = g * g
    p = spec.patch_size
    tiles = rng.normal(0.0, 1.0, size=(n, p, p, spec.channels))
    perms: list[tuple[int, ...]] = []
    while len(perms) < spec.n_classes:
        perm = tuple(rng.permutation(n).tolist())
        if perm not in perms:
            perms.append(perm)
    out = np.empty((spec.n_classes, spec.image_size, spec.image_size, spec.channels))
    for c, perm in enumerate(perms):
        arranged = tiles[list(perm)].reshape(g, g, p, p, spec.channels)
        out[c] = arranged.transpose(0, 2, 1, 3, 4).reshape(spec.image_size, spec.image_size, spec.channels)
    return out.astype(np.float32)


def render_clean(spec: SynthSpec, templates: np.ndarray, label: int, severity: int, side: int) -> np.ndarray:
    img = templates[label] * np.float32(SEVERITY_GAIN[severity])
    half = spec.image_size // 2
    img = img.copy()
    if side == 0:
        img[:, :half] += np.float32(SIDE_OFFSET)
    else:
        img[:, half:] += np.float32(SIDE_OFFSET)
    return img


def class_prompts(n_classes: int) -> dict[int, str]:
    return {c: CLASS_PROMPT.format(name=class_name(c)) for c in range(n_classes)}


def make_caption(label: int, severity: int, side: int, template: int | None) -> str:
    if template is None:
        return CLASS_PROMPT.format(name=class_name(label))
    return CAPTION_TEMPLATES[template].format(
        name=class_name(label), severity=SEVERITIES[severity], side=SIDES[side])


def _stratified_splits(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    splits = np.empty(len(labels), dtype=object)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(0.7 * len(idx)))
        n_val = int(round(0.1 * len(idx)))
        splits[idx[:n_train]] = "train"
        splits[idx[n_train:n_train + n_val]] = "val"
        splits[idx[n_train + n_val:]] = "test"
    return splits


def generate_synthetic(spec: SynthSpec, out_dir) -> Manifest:
    """Write images (CLFT1), ``manifest.csv``, ``vocab.tsv``, ``prompts.tsv`` and ``synth_spec.json``."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {img_dir}: {exc}") from exc
    rng = np.random.default_rng([spec.seed, 2])
    templates = class_templates(spec)
    n = spec.n_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    severity = rng.integers(0, len(SEVERITIES), size=n)
    side = rng.integers(0, len(SIDES), size=n)
    class_only = rng.random(n) < spec.class_only_fraction
    template = rng.integers(0, len(CAPTION_TEMPLATES), size=n)
    noise = rng.normal(0.0, 1.0, size=(n, spec.image_size, spec.image_size, spec.channels))
    splits = _stratified_splits(labels, np.random.default_rng([spec.seed, 3]))

    rows = []
    for i in range(n):
        img = render_clean(spec, templates, int(labels[i]), int(severity[i]), int(side[i]))
        img = img + np.float32(spec.noise_std) * noise[i].astype(np.float32)
        rel = f"images/{i:05d}.clft"
        write_tensor(out_dir / rel, img)
        caption = make_caption(int(labels[i]), int(severity[i]), int(side[i]),
                               None if class_only[i] else int(template[i]))
        rows.append(ManifestRow(rel, caption, int(labels[i]), str(splits[i])))

    prompts = class_prompts(spec.n_classes)
    write_manifest(out_dir / "manifest.csv", rows)
    write_prompts(out_dir / "prompts.tsv", prompts)
    Vocab.from_corpus([r.caption for r in rows] + list(prompts.values())).save(out_dir / "vocab.tsv")
    (out_dir / "synth_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    log.info("wrote %d synthetic samples to %s", n, out_dir)
    return Manifest(rows, out_dir)


def nearest_template_predict(images: np.ndarray, spec: SynthSpec) -> np.ndarray:
    """Classify by the closest noise-free rendering over every (class, severity, side)."""
    templates = class_templates(spec)
    renders, owners = [], []
    for c in range(spec.n_classes):
        for s in range(len(SEVERITIES)):
            for side in range(len(SIDES)):
                renders.append(render_clean(spec, templates, c, s, side).reshape(-1))
                owners.append(c)
    renders = np.stack(renders)
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    d2 = ((flat[:, None, :] - renders[None]) ** 2).sum(-1)
    return np.asarray(owners)[d2.argmin(axis=1)]


# --- batches ------------------------------------------------------------------

@dataclass
class PairBatch:
    images: np.ndarray          # [N, H, W, C] float32
    tokens: np.ndarray          # [N, S] int64
    labels: np.ndarray          # [N] int64
    sample_ids: np.ndarray      # [N] int64, row index in the manifest
    captions: list[str]

    def __len__(self) -> int:
        return len(self.labels)


class PairDataset:
    """One manifest split held in memory."""

    def __init__(self, manifest: Manifest, split: str, vocab: Vocab, max_len: int,
                 normalize_stats: tuple[float, float] | None = None):
        index = [i for i, r in enumerate(manifest.rows) if r.split == split]
        if not index:
            raise ConfigError(f"split {split!r} is empty")
        self.split = split
        self.sample_ids = np.asarray(index, dtype=np.int64)
        rows = [manifest.rows[i] for i in index]
        self.captions = [r.caption for r in rows]
        self.labels = np.asarray([r.class_label for r in rows], dtype=np.int64)
        self.tokens = tokenize_batch(self.captions, vocab, max_len)
        images = np.stack([read_tensor(manifest.resolve(r)) for r in rows]).astype(np.float32)
        if normalize_stats is not None:
            m, s = normalize_stats
            images = (images - np.float32(m)) / np.float32(s)
        self.images = images

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, positions: np.ndarray) -> PairBatch:
        positions = np.asarray(positions, dtype=np.int64)
        return PairBatch(self.images[positions], self.tokens[positions], self.labels[positions],
                         self.sample_ids[positions], [self.captions[i] for i in positions])

    def subset(self, positions: np.ndarray) -> "PairDataset":
        new = object.__new__(PairDataset)
        positions = np.asarray(positions, dtype=np.int64)
        new.split = self.split
        new.sample_ids = self.sample_ids[positions]
        new.captions = [self.captions[i] for i in positions]
        new.labels = self.labels[positions]
        new.tokens = self.tokens[positions]
        new.images = self.images[positions]
        return new


def load_batches(data: PairDataset, batch_size: int, seed: int, epoch: int = 0,
                 train: bool = True) -> Iterator[PairBatch]:
    """One epoch of batches, shuffled by ``(seed, epoch)``.

    Training drops the short final batch so every contrastive batch has N >= 2;
    evaluation keeps it and does not shuffle.
    """
    if train and batch_size < 2:
        raise ConfigError(f"training batch_size must be >= 2, got {batch_size}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(data)
    order = np.random.default_rng([seed, epoch]).permutation(n) if train else np.arange(n)
    stop = n - n % batch_size if train else n
    if train and stop == 0:
        raise ConfigError(f"split has {n} samples, fewer than batch_size={batch_size}")
    for start in range(0, stop, batch_size):
        yield data.batch(order[start:start + batch_size])


def cycle_batches(data: PairDataset, batch_size: int, seed: int) -> Iterator[PairBatch]:
    """Endless training stream; restarts with a fresh shuffle at each epoch boundary."""
    epoch = 0
    while True:
        yield from load_batches(data, batch_size, seed, epoch, train=True)
        epoch += 1
        log.debug("epoch wrap on split %s -> epoch %d", data.split, epoch)


def stratified_subset(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Positions of a class-stratified sample; at least one per class."""
    if not 0 < fraction <= 1:
        raise ContractError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = max(1, int(round(fraction * len(idx))))
        keep.append(np.sort(rng.choice(idx, size=k, replace=False)))
    return np.sort(np.concatenate(keep))
