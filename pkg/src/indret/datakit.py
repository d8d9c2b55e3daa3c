"""Dataset manifests, RoI annotations, checkpoints and the planted-motif generator.

Manifest (``manifest.json``)::

    {"format_version": 1, "grid": [7, 7], "resolution": 112,
     "images": [{"id": "img000", "path": "images/img000.png"}, ...],
     "queries": [{"id": "q00", "image": "qimg00", "relevant": ["img017", ...]}, ...]}

Annotations (``annotations.json``)::

    {"format_version": 1,
     "annotations": [{"image": "img017", "boxes": [[x0, y0, x1, y1], ...]}, ...]}

Paths are resolved against the manifest's directory and boxes are in
normalised ``[0, 1]`` image coordinates. Images referenced as a query image
are not ranked as targets.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, PersistenceError, ValidationError
from .evalkit import RoiAnnotation
from .ndtensor import default_dtype, read_tensor, tensor_to_bytes
from .network import Model, ModelConfig
from .patching import GridSpec, save_image

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryEntry:
    id: str
    image: str
    relevant: tuple


@dataclass
class DatasetManifest:
    images: dict  # id -> absolute Path, insertion ordered
    queries: list
    grid: GridSpec
    resolution: int
    root: Path = field(default_factory=Path)

    @property
    def query_ids(self) -> list[str]:
        return [q.id for q in self.queries]

    def query(self, qid: str) -> QueryEntry:
        for q in self.queries:
            if q.id == qid:
                return q
        raise ValidationError("unknown query", [qid])

    @property
    def targets(self) -> list[str]:
        used = {q.image for q in self.queries}
        return [i for i in self.images if i not in used]

    def relevant_sets(self) -> dict:
        return {q.id: set(q.relevant) for q in self.queries}

    def to_dict(self) -> dict:
        def rel(p: Path) -> str:
            try:
                return p.relative_to(self.root).as_posix()
            except ValueError:
                return str(p)

        return {
            "format_version": FORMAT_VERSION,
            "grid": [self.grid.rows, self.grid.cols],
            "resolution": self.resolution,
            "images": [{"id": i, "path": rel(p)} for i, p in self.images.items()],
            "queries": [{"id": q.id, "image": q.image, "relevant": list(q.relevant)} for q in self.queries],
        }


def save_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1) + "\n", encoding="utf-8")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError("file not found", [path]) from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON ({exc})") from None


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; dangling references are rejected."""
    path = Path(path)
    doc = _read_json(path)
    root = path.resolve().parent
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {doc.get('format_version')!r}")
    try:
        grid = GridSpec(*[int(v) for v in doc["grid"]])
        resolution = int(doc["resolution"])
        raw_images = doc["images"]
        raw_queries = doc["queries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed manifest: {exc}") from None

    images, dupes, missing = {}, [], []
    for item in raw_images:
        iid, p = str(item["id"]), root / item["path"]
        if iid in images:
            dupes.append(iid)
        images[iid] = p
        if check_files and not p.is_file():
            missing.append(str(p))
    if dupes:
        raise ValidationError("duplicate image ids", dupes)
    if missing:
        raise ValidationError("missing image files", missing)

    queries, unknown, empty, qdupes, seen = [], [], [], [], set()
    for item in raw_queries:
        qid = str(item["id"])
        if qid in seen:
            qdupes.append(qid)
        seen.add(qid)
        image = str(item["image"])
        relevant = tuple(str(r) for r in item.get("relevant", []))
        if image not in images:
            unknown.append(image)
        unknown.extend(r for r in relevant if r not in images)
        if not relevant:
            empty.append(qid)
        queries.append(QueryEntry(qid, image, relevant))
    if qdupes:
        raise ValidationError("duplicate query ids", qdupes)
    if unknown:
        raise ValidationError("unknown image ids", unknown)
    if empty:
        raise ValidationError("empty relevance sets", empty)
    return DatasetManifest(images, queries, grid, resolution, root)


def save_annotations(path, annotations) -> None:
    items = annotations.values() if isinstance(annotations, dict) else annotations
    doc = {
        "format_version": FORMAT_VERSION,
        "annotations": [{"image": a.image_id, "boxes": [list(b) for b in a.boxes]} for a in items],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_annotations(path) -> dict:
    doc = _read_json(path)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {doc.get('format_version')!r}")
    out = {}
    for item in doc.get("annotations", []):
        roi = RoiAnnotation(str(item["image"]), tuple(tuple(b) for b in item.get("boxes", [])))
        out[roi.image_id] = roi
    return out


# ---------------------------------------------------------------------------
# Synthetic planted-motif corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    corpus_size: int = 200
    n_queries: int = 20
    grid_rows: int = 7
    grid_cols: int = 7
    resolution: int = 112
    motif_cells: int = 2
    noise: float = 0.1
    distractor_fraction: float = 0.5
    jitter: int = 0
    background_distractors: bool = False
    background_contrast: float = 0.15
    seed: int = 42

    def validate(self) -> None:
        GridSpec(self.grid_rows, self.grid_cols)
        if self.resolution % self.grid_rows or self.resolution % self.grid_cols:
            raise ConfigError(f"resolution {self.resolution} not divisible by the grid")
        if self.motif_cells < 1 or self.motif_cells > min(self.grid_rows, self.grid_cols):
            raise ConfigError(f"motif of {self.motif_cells} cells does not fit the grid")
        # a motif-sized block clear of the motif must exist wherever the motif lands
        if self.background_distractors and max(self.grid_rows, self.grid_cols) < 3 * self.motif_cells - 1:
            raise ConfigError("grid too small for background-sharing distractors")
        if not 0.0 <= self.noise <= 1.0 or not 0.0 <= self.distractor_fraction <= 1.0:
            raise ConfigError("noise and distractor fraction must lie in [0, 1]")
        if self.n_queries < 1 or self.relevant_per_query < 1:
            raise ConfigError("corpus too small for the requested number of queries")
        if self.jitter < 0 or self.jitter >= self.cell_px:
            raise ConfigError("jitter must be smaller than one cell")

    @property
    def cell_px(self) -> int:
        return self.resolution // max(self.grid_rows, self.grid_cols)

    @property
    def relevant_per_query(self) -> int:
        return int(self.corpus_size * (1.0 - self.distractor_fraction)) // self.n_queries

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _motif(rng, side: int, unit: int) -> np.ndarray:
    """High-contrast binary texture with per-channel patterns and colours."""
    units = -(-side // unit)
    pattern = rng.integers(0, 2, size=(units, units, 3)).astype(bool)
    lo = rng.uniform(0.0, 0.2, size=3)
    hi = rng.uniform(0.8, 1.0, size=3)
    tex = np.where(pattern, hi, lo)
    tex = np.repeat(np.repeat(tex, unit, axis=0), unit, axis=1)
    return tex[:side, :side]


def _background(rng, side: int, contrast: float) -> np.ndarray:
    return np.clip(0.5 + contrast * rng.standard_normal((side, side, 3)), 0.0, 1.0)


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> tuple[DatasetManifest, dict]:
    """Write a planted-motif corpus to ``out_dir``.

    Each query class owns a texture motif planted at a random cell-aligned
    block (shifted by up to ``jitter`` pixels) over i.i.d. background noise.
    Relevant targets carry the query's motif; distractors carry none. With
    ``background_distractors`` each distractor also receives a copy of a
    background block of one query, away from that query's motif.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    side, cell, mc = cfg.resolution, cfg.cell_px, cfg.motif_cells
    ch, cw = cfg.resolution // cfg.grid_rows, cfg.resolution // cfg.grid_cols
    motif_h, motif_w = mc * ch, mc * cw
    motifs = [_motif(rng, max(motif_h, motif_w), 2)[:motif_h, :motif_w] for _ in range(cfg.n_queries)]

    def place(img, q):
        r = int(rng.integers(0, cfg.grid_rows - mc + 1))
        c = int(rng.integers(0, cfg.grid_cols - mc + 1))
        y0, x0 = r * ch, c * cw
        if cfg.jitter:
            y0 = int(np.clip(y0 + rng.integers(-cfg.jitter, cfg.jitter + 1), 0, side - motif_h))
            x0 = int(np.clip(x0 + rng.integers(-cfg.jitter, cfg.jitter + 1), 0, side - motif_w))
        img[y0:y0 + motif_h, x0:x0 + motif_w] = motifs[q]
        return (x0 / side, y0 / side, (x0 + motif_w) / side, (y0 + motif_h) / side), (r, c)

    def finish(img):
        return np.clip(img + cfg.noise * rng.standard_normal(img.shape), 0.0, 1.0)

    images, annotations, queries = {}, {}, []
    query_clean, query_cells = [], []
    for q in range(cfg.n_queries):
        img = _background(rng, side, cfg.background_contrast)
        box, cellpos = place(img, q)
        iid = f"qimg{q:02d}"
        images[iid] = finish(img)
        annotations[iid] = RoiAnnotation(iid, (box,))
        query_clean.append(img)
        query_cells.append(cellpos)

    n_rel = cfg.relevant_per_query
    n_distract = cfg.corpus_size - n_rel * cfg.n_queries
    owners = [q for q in range(cfg.n_queries) for _ in range(n_rel)] + [-1] * n_distract
    owners = [owners[i] for i in rng.permutation(len(owners))]
    relevant = {q: [] for q in range(cfg.n_queries)}
    distractor_no = 0
    for idx, owner in enumerate(owners):
        iid = f"img{idx:03d}"
        img = _background(rng, side, cfg.background_contrast)
        boxes = ()
        if owner >= 0:
            box, _ = place(img, owner)
            boxes = (box,)
            relevant[owner].append(iid)
        elif cfg.background_distractors:
            src = distractor_no % cfg.n_queries
            distractor_no += 1
            _copy_background_block(rng, img, query_clean[src], query_cells[src], cfg, ch, cw)
        images[iid] = finish(img)
        annotations[iid] = RoiAnnotation(iid, boxes)

    paths = {}
    for iid, px in images.items():
        p = out_dir / "images" / f"{iid}.png"
        save_image(p, px)
        paths[iid] = p.resolve()
    ordered = {f"img{i:03d}": paths[f"img{i:03d}"] for i in range(len(owners))}
    ordered.update({f"qimg{q:02d}": paths[f"qimg{q:02d}"] for q in range(cfg.n_queries)})
    for q in range(cfg.n_queries):
        queries.append(QueryEntry(f"q{q:02d}", f"qimg{q:02d}", tuple(relevant[q])))
    manifest = DatasetManifest(ordered, queries, GridSpec(cfg.grid_rows, cfg.grid_cols),
                               cfg.resolution, out_dir.resolve())
    save_manifest(out_dir / "manifest.json", manifest)
    save_annotations(out_dir / "annotations.json", [annotations[i] for i in ordered])
    (out_dir / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n", encoding="utf-8")
    return manifest, annotations


def _copy_background_block(rng, img, source, motif_cell, cfg, ch, cw):
    """Copy a motif-sized block of ``source`` background that avoids its motif."""
    mc = cfg.motif_cells
    mr, mcol = motif_cell
    candidates = [
        (r, c)
        for r in range(cfg.grid_rows - mc + 1)
        for c in range(cfg.grid_cols - mc + 1)
        if r + mc <= mr or r >= mr + mc or c + mc <= mcol or c >= mcol + mc
    ]
    r, c = candidates[int(rng.integers(len(candidates)))]
    ys, xs = slice(r * ch, (r + mc) * ch), slice(c * cw, (c + mc) * cw)
    img[ys, xs] = source[ys, xs]


# ---------------------------------------------------------------------------
# Checkpoints: b"IIRM", u16 version, u32 + JSON config, u32 count,
# (u16 + name, NDT1 blob) per entry, u32 CRC-32 of all preceding bytes
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"IIRM"
CKPT_VERSION = 1
_HAR_NAMES = ("c0", "c1", "c2", "c3", "mu", "sigma")


def _checkpoint_entries(model: Model):
    for name, value in model.params.items():
        if name.endswith(".har"):
            for sub, v in zip(_HAR_NAMES, value):
                yield f"param/{name}.{sub}", np.array([v])
        else:
            yield f"param/{name}", value
    for name, value in model.buffers.items():
        yield f"buffer/{name}", value


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    entries = list(_checkpoint_entries(model))
    buf.write(struct.pack("<I", len(entries)))
    for name, value in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(tensor_to_bytes(value))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, path) -> None:
    data = checkpoint_bytes(model)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _read_exact(stream, n):
    raw = stream.read(n)
    if len(raw) != n:
        raise PersistenceError("truncated checkpoint")
    return raw


def model_from_checkpoint_bytes(data: bytes, expect: ModelConfig | None = None) -> Model:
    if len(data) < 10 or data[:4] != CKPT_MAGIC:
        raise PersistenceError("not a model checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    stream = io.BytesIO(body)
    stream.read(4)
    (version,) = struct.unpack("<H", _read_exact(stream, 2))
    if version != CKPT_VERSION:
        raise PersistenceError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise PersistenceError("checkpoint checksum mismatch")
    (n,) = struct.unpack("<I", _read_exact(stream, 4))
    try:
        config = ModelConfig.from_dict(json.loads(_read_exact(stream, n)))
    except (json.JSONDecodeError, TypeError) as exc:
        raise PersistenceError(f"corrupt model config: {exc}") from None
    if expect is not None and config != expect:
        raise PersistenceError(f"checkpoint config {config} is incompatible with expected {expect}")
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    params, buffers, har = {}, {}, {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read_exact(stream, 2))
        name = _read_exact(stream, ln).decode("utf-8")
        value = read_tensor(stream)
        kind, _, key = name.partition("/")
        if kind == "param" and key.rsplit(".", 1)[-1] in _HAR_NAMES and ".har." in key:
            base, sub = key.rsplit(".", 1)
            har.setdefault(base, {})[sub] = float(value[0])
        elif kind == "param":
            params[key] = value.astype(default_dtype())
        elif kind == "buffer":
            buffers[key] = value.astype(default_dtype())
        else:
            raise PersistenceError(f"unknown checkpoint entry {name!r}")
    for base, vals in har.items():
        if set(vals) != set(_HAR_NAMES):
            raise PersistenceError(f"incomplete HAR state for {base}")
        params[base] = np.array([vals[k] for k in _HAR_NAMES])
    model = Model(config, params, buffers)
    reference = Model.init(config)
    want = set(reference.params) | {f"b:{k}" for k in reference.buffers}
    got = set(params) | {f"b:{k}" for k in buffers}
    if want != got:
        raise PersistenceError(f"checkpoint entries do not match the model: {sorted(want ^ got)[:5]}")
    for k, v in reference.params.items():
        if params[k].shape != v.shape:
            raise PersistenceError(f"shape mismatch for {k}: {params[k].shape} vs {v.shape}")
    # keep the canonical parameter order for deterministic optimisation
    model.params = {k: params[k] for k in reference.params}
    model.buffers = {k: buffers[k] for k in reference.buffers}
    return model


def load_checkpoint(path, expect: ModelConfig | None = None) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from None
    return model_from_checkpoint_bytes(data, expect)
